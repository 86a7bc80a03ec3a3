use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BodyError;
use crate::format::{write_atomic, ContainerReader, ContainerWriter};
use crate::rig::{Pose, Skeleton};

pub const POSE_MAGIC: &[u8; 8] = b"DRAPEPOS";
const POSE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    frames: usize,
    #[serde(rename = "K")]
    k: usize,
    has_translation: bool,
}

/// Frames are stored as f32; a translation block follows the rotations when
/// every frame carries one.
pub fn poses_to_bytes(poses: &[Pose]) -> Result<Vec<u8>, BodyError> {
    let k = poses.first().map_or(0, |p| p.len());
    let has_translation = poses.first().is_some_and(|p| p.translation.is_some());
    for (i, p) in poses.iter().enumerate() {
        if p.len() != k || p.translation.is_some() != has_translation {
            return Err(BodyError::Pose(format!(
                "frame {i} differs in joint count or translation presence from frame 0"
            )));
        }
    }
    let mut w = ContainerWriter::new(
        POSE_MAGIC,
        &Header {
            version: POSE_VERSION,
            frames: poses.len(),
            k,
            has_translation,
        },
    );
    w.f32s(poses.iter().flat_map(|p| p.flat_theta()));
    if has_translation {
        w.f32s(poses.iter().flat_map(|p| p.translation.unwrap()));
    }
    Ok(w.finish())
}

pub fn poses_from_bytes(bytes: &[u8]) -> Result<Vec<Pose>, BodyError> {
    let (h, mut r): (Header, _) = ContainerReader::open(bytes, POSE_MAGIC)?;
    if h.version != POSE_VERSION {
        return Err(BodyError::Pose(format!(
            "unsupported pose file version {}",
            h.version
        )));
    }
    let theta = r.f32s(h.frames * 3 * h.k, "rotation block")?;
    let trans = if h.has_translation {
        Some(r.f32s(h.frames * 3, "translation block")?)
    } else {
        None
    };
    r.finish()?;
    (0..h.frames)
        .map(|f| {
            let th = theta[f * 3 * h.k..(f + 1) * 3 * h.k]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            let t = trans
                .as_ref()
                .map(|t| [t[3 * f], t[3 * f + 1], t[3 * f + 2]]);
            Ok(Pose::new(th, t)?)
        })
        .collect()
}

/// CSV with one frame per row: `3K` rotation columns, optionally followed
/// by 3 translation columns. A leading non-numeric header row is skipped.
pub fn parse_pose_csv(text: &str, k: usize) -> Result<Vec<Pose>, BodyError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| BodyError::Pose(format!("CSV row {}: {e}", i + 1)))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = rec.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(BodyError::Pose(format!("CSV row {}: {e}", i + 1))),
        };
        let has_t = match values.len() {
            n if n == 3 * k => false,
            n if n == 3 * k + 3 => true,
            n => {
                return Err(BodyError::Pose(format!(
                    "CSV row {} has {n} columns, expected {} or {} for K = {k}",
                    i + 1,
                    3 * k,
                    3 * k + 3
                )))
            }
        };
        out.push(
            Pose::from_flat(&values, k, has_t)
                .map_err(|e| BodyError::Pose(format!("CSV row {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Reads a binary pose file, or CSV when the magic is absent (which needs
/// the joint count).
pub fn load_poses(path: &Path, k: Option<usize>) -> Result<Vec<Pose>, BodyError> {
    let bytes = std::fs::read(path)?;
    let poses = if bytes.starts_with(POSE_MAGIC) {
        poses_from_bytes(&bytes)?
    } else {
        let k = k.ok_or_else(|| {
            BodyError::Pose("CSV pose files need the skeleton's joint count".into())
        })?;
        let text = String::from_utf8(bytes)
            .map_err(|e| BodyError::Pose(format!("pose file is neither binary nor UTF-8: {e}")))?;
        parse_pose_csv(&text, k)?
    };
    if let Some(k) = k {
        if let Some((i, p)) = poses.iter().enumerate().find(|(_, p)| p.len() != k) {
            return Err(BodyError::Pose(format!(
                "frame {i} has {} joints, expected {k}",
                p.len()
            )));
        }
    }
    Ok(poses)
}

pub fn save_poses(path: &Path, poses: &[Pose]) -> Result<(), BodyError> {
    write_atomic(path, &poses_to_bytes(poses)?)?;
    Ok(())
}

/// Per-joint, per-axis sampling intervals for axis-angle components.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRanges {
    pub ranges: Vec<[[f64; 2]; 3]>,
}

impl PoseRanges {
    /// Joint limits for the procedural humanoid: legs swing mostly forward
    /// and back, knees and elbows bend one way, the spine and head stay
    /// moderate. Axes: x (forward swing), y (sideways), z (twist).
    pub fn humanoid(skeleton: &Skeleton) -> Self {
        let ranges = skeleton
            .names()
            .iter()
            .map(|name| match name.as_str() {
                "root" => [[-0.25, 0.25], [-0.2, 0.2], [-0.5, 0.5]],
                "spine" | "chest" => [[-0.25, 0.3], [-0.2, 0.2], [-0.3, 0.3]],
                "head" => [[-0.4, 0.4], [-0.3, 0.3], [-0.6, 0.6]],
                "l_hip" => [[-0.5, 0.9], [-0.3, 0.08], [-0.25, 0.25]],
                "r_hip" => [[-0.5, 0.9], [-0.08, 0.3], [-0.25, 0.25]],
                "l_knee" | "r_knee" => [[-1.3, 0.0], [0.0, 0.0], [-0.1, 0.1]],
                "l_shoulder" => [[-0.5, 0.5], [-0.6, 1.0], [-0.6, 0.6]],
                "r_shoulder" => [[-0.5, 0.5], [-1.0, 0.6], [-0.6, 0.6]],
                "l_elbow" => [[-0.3, 0.3], [0.0, 0.0], [0.0, 1.4]],
                "r_elbow" => [[-0.3, 0.3], [0.0, 0.0], [-1.4, 0.0]],
                _ => [[-0.3, 0.3]; 3],
            })
            .collect();
        Self { ranges }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            ranges: self
                .ranges
                .iter()
                .map(|r| r.map(|[lo, hi]| [lo * s, hi * s]))
                .collect(),
        }
    }
}

/// Independent uniform draws inside `ranges`.
pub fn synth_pose_pool(ranges: &PoseRanges, count: usize, seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Pose {
            theta: ranges
                .ranges
                .iter()
                .map(|axes| {
                    axes.map(|[lo, hi]| {
                        if hi > lo {
                            rng.random_range(lo..hi)
                        } else {
                            lo
                        }
                    })
                })
                .collect(),
            translation: None,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Clone, Debug)]
pub struct PoseDatabase {
    pub poses: Vec<Pose>,
    pub split: Vec<Split>,
    /// Set when the pool ran out before the requested count was reached.
    pub warning: Option<String>,
}

impl PoseDatabase {
    pub fn train(&self) -> Vec<&Pose> {
        self.of(Split::Train)
    }

    pub fn validation(&self) -> Vec<&Pose> {
        self.of(Split::Validation)
    }

    fn of(&self, s: Split) -> Vec<&Pose> {
        self.poses
            .iter()
            .zip(&self.split)
            .filter(|(_, &t)| t == s)
            .map(|(p, _)| p)
            .collect()
    }
}

/// Greedy rejection sampling: visit the pool in seeded random order and
/// accept a pose when its non-root max-abs distance to every accepted pose
/// is at least `d_min`. The first `round(train_fraction · accepted)` poses
/// in acceptance order form the training split.
pub fn sample_pose_database(
    raw: &[Pose],
    n: usize,
    d_min: f64,
    train_fraction: f64,
    seed: u64,
) -> PoseDatabase {
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut accepted: Vec<&Pose> = Vec::with_capacity(n);
    for &i in &order {
        if accepted.len() == n {
            break;
        }
        let p = &raw[i];
        if accepted.iter().all(|q| p.distance_without_root(q) >= d_min) {
            accepted.push(p);
        }
    }
    let warning = (accepted.len() < n).then(|| {
        let msg = format!(
            "pose pool exhausted: accepted {} of {n} requested poses (d_min = {d_min})",
            accepted.len()
        );
        warn!("{msg}");
        msg
    });
    let n_train = (train_fraction.clamp(0.0, 1.0) * accepted.len() as f64).round() as usize;
    let split = (0..accepted.len())
        .map(|i| {
            if i < n_train {
                Split::Train
            } else {
                Split::Validation
            }
        })
        .collect();
    PoseDatabase {
        poses: accepted.into_iter().cloned().collect(),
        split,
        warning,
    }
}
