//! Rigged body models: container, validation, shape blend shapes, the
//! self-collision check, a procedural humanoid and pose databases.

mod file;
mod humanoid;
mod poses;

pub use file::{body_from_bytes, body_to_bytes, load_body, save_body, BODY_MAGIC};
pub use humanoid::{synth_humanoid, HumanoidSpec, HUMANOID_JOINTS};
pub use poses::{
    load_poses, parse_pose_csv, poses_from_bytes, poses_to_bytes, sample_pose_database, save_poses,
    synth_pose_pool, PoseDatabase, PoseRanges, Split, POSE_MAGIC,
};

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::format::FormatError;
use crate::mesh::{dot3, sub3, vertex_normals, MeshError, NnIndex, TriMesh};
use crate::rig::{BlendWeights, RigError, Skeleton};

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("invalid body model:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
    #[error("shape vector has {got} coefficients, body has {expected} blend shapes")]
    ShapeCount { expected: usize, got: usize },
    #[error("dimension {name} = {value} must be positive and finite")]
    Dimension { name: &'static str, value: f64 },
    #[error("pose data: {0}")]
    Pose(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A rigged body in rest pose.
#[derive(Clone, Debug)]
pub struct BodyModel {
    pub name: String,
    pub mesh: TriMesh,
    pub skeleton: Skeleton,
    pub weights: BlendWeights,
    /// `S` blend shapes, each an offset per vertex for a unit coefficient.
    pub blendshapes: Vec<Vec<[f64; 3]>>,
    /// Optional `K × N` joint regressor, row-major.
    pub regressor: Option<Vec<f64>>,
}

impl BodyModel {
    /// Validates every invariant and reports all violations together.
    pub fn new(
        name: String,
        mesh: TriMesh,
        skeleton: Skeleton,
        weights: BlendWeights,
        blendshapes: Vec<Vec<[f64; 3]>>,
        regressor: Option<Vec<f64>>,
    ) -> Result<Self, BodyError> {
        let mut problems = Vec::new();
        let n = mesh.vertex_count();
        let k = skeleton.len();
        if weights.rows() != n || weights.cols() != k {
            problems.push(format!(
                "weights are {}x{}, expected {n}x{k}",
                weights.rows(),
                weights.cols()
            ));
        }
        let degenerate = mesh.degenerate_faces(crate::mesh::MIN_REST_AREA);
        if !degenerate.is_empty() {
            problems.push(format!("degenerate faces: {degenerate:?}"));
        }
        for (s, b) in blendshapes.iter().enumerate() {
            if b.len() != n {
                problems.push(format!(
                    "blend shape {s} has {} offsets, expected {n}",
                    b.len()
                ));
            }
        }
        if let Some(r) = &regressor {
            if r.len() != k * n {
                problems.push(format!(
                    "joint regressor has {} values, expected {}",
                    r.len(),
                    k * n
                ));
            }
        }
        if problems.is_empty() {
            let hits = SelfCollision::new(&mesh).check(mesh.positions());
            if !hits.is_empty() {
                problems.push(format!(
                    "rest mesh self-collides at {} vertices (first: {:?})",
                    hits.len(),
                    &hits[..hits.len().min(8)]
                ));
            }
        }
        if !problems.is_empty() {
            return Err(BodyError::Invalid(problems));
        }
        Ok(Self {
            name,
            mesh,
            skeleton,
            weights,
            blendshapes,
            regressor,
        })
    }

    pub fn shape_count(&self) -> usize {
        self.blendshapes.len()
    }

    /// `rest + Σ_s β_s · blendshape_s`.
    pub fn apply_shape(&self, beta: &[f64]) -> Result<Vec<[f64; 3]>, BodyError> {
        if beta.len() != self.blendshapes.len() {
            return Err(BodyError::ShapeCount {
                expected: self.blendshapes.len(),
                got: beta.len(),
            });
        }
        let mut out = self.mesh.positions().to_vec();
        for (b, shape) in beta.iter().zip(&self.blendshapes) {
            if *b == 0.0 {
                continue;
            }
            for (p, d) in out.iter_mut().zip(shape) {
                for c in 0..3 {
                    p[c] += b * d[c];
                }
            }
        }
        Ok(out)
    }

    /// Skeleton for a shaped body: joints regressed from the shaped
    /// vertices when a regressor is present, otherwise unchanged.
    pub fn shaped_skeleton(&self, vertices: &[[f64; 3]]) -> Result<Skeleton, BodyError> {
        let Some(reg) = &self.regressor else {
            return Ok(self.skeleton.clone());
        };
        let n = vertices.len();
        let joints = (0..self.skeleton.len())
            .map(|j| {
                let row = &reg[j * n..(j + 1) * n];
                let mut acc = [0.0; 3];
                for (w, v) in row.iter().zip(vertices) {
                    for c in 0..3 {
                        acc[c] += w * v[c];
                    }
                }
                acc
            })
            .collect();
        Ok(self.skeleton.with_joints(joints)?)
    }

    pub fn mean_edge_length(&self) -> f64 {
        self.mesh.mean_edge_length()
    }

    /// Grid cell size used for nearest-neighbour queries against this body.
    pub fn nn_cell_size(&self) -> f64 {
        2.0 * self.mean_edge_length()
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

/// Body-versus-itself collision test.
///
/// A vertex collides when its nearest vertex outside its geodesic
/// neighbourhood (rest edge-graph distance up to `radius`) lies within
/// `radius / 3` and the vertex is behind that vertex's normal plane.
///
/// Edge-graph paths overestimate surface distance by up to √2 on ring
/// triangulations and twisting shortens chords, so the reach sits well
/// inside the neighbourhood to keep same-surface pairs out.
#[derive(Clone, Debug)]
pub struct SelfCollision {
    mesh: TriMesh,
    radius: f64,
    neighborhoods: Vec<Vec<usize>>,
}

impl SelfCollision {
    /// Geodesic radius of eight mean rest edge lengths.
    pub fn new(mesh: &TriMesh) -> Self {
        Self::with_radius(mesh, 8.0 * mesh.mean_edge_length())
    }

    pub fn with_radius(mesh: &TriMesh, radius: f64) -> Self {
        let p = mesh.positions();
        let nb = mesh.vertex_neighbors();
        let n = p.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut neighborhoods = Vec::with_capacity(n);
        for s in 0..n {
            let mut seen = Vec::new();
            let mut heap = BinaryHeap::new();
            dist[s] = 0.0;
            heap.push(Entry(0.0, s));
            while let Some(Entry(d, v)) = heap.pop() {
                if d > dist[v] {
                    continue;
                }
                seen.push(v);
                for &w in &nb[v] {
                    let nd = d + crate::mesh::norm3(sub3(p[v], p[w]));
                    if nd <= radius && nd < dist[w] {
                        dist[w] = nd;
                        heap.push(Entry(nd, w));
                    }
                }
            }
            seen.sort_unstable();
            seen.dedup();
            for &v in &seen {
                dist[v] = f64::INFINITY;
            }
            neighborhoods.push(seen);
        }
        Self {
            mesh: mesh.clone(),
            radius,
            neighborhoods,
        }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Indices of colliding vertices for the given (posed) positions.
    pub fn check(&self, positions: &[[f64; 3]]) -> Vec<usize> {
        self.pairs(positions).into_iter().map(|(i, _)| i).collect()
    }

    /// Each colliding vertex with the vertex whose normal plane it crosses.
    pub fn pairs(&self, positions: &[[f64; 3]]) -> Vec<(usize, usize)> {
        let normals = vertex_normals(&self.mesh, positions).normals;
        let cell = (2.0 * self.mesh.mean_edge_length()).max(1e-6);
        let Ok(index) = NnIndex::build(positions, cell) else {
            return Vec::new();
        };
        let reach = self.radius / 3.0;
        (0..positions.len())
            .filter_map(|i| {
                let own = &self.neighborhoods[i];
                index
                    .nearest_filtered(positions[i], reach, |j| own.binary_search(&j).is_err())
                    .filter(|&(j, _)| dot3(sub3(positions[i], positions[j]), normals[j]) < 0.0)
                    .map(|(j, _)| (i, j))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
