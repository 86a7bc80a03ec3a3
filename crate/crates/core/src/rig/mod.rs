//! Skeleton kinematics, linear blend skinning and weight transfer.
//!
//! Transforms are rest-relative: `G_k` maps rest-pose points to posed points,
//! so the all-zero pose gives identities. Each transform is stored as 12
//! values, a row-major 3×3 rotation followed by a translation, the same
//! layout the tape's `kinematic_chain` op produces.

use std::sync::Arc;

use thiserror::Error;

use crate::mesh::{MeshError, NnIndex};
use crate::tensor::{rodrigues, JointChain, Tensor, TensorError};

/// Tolerance on blend-weight row sums.
pub const WEIGHT_SUM_TOL: f64 = 1e-6;
/// Rows produced by [`transfer_weights`] keep at most this many joints.
pub const MAX_INFLUENCES: usize = 4;

#[derive(Debug, Error)]
pub enum RigError {
    #[error(transparent)]
    Chain(#[from] TensorError),
    #[error("{0} joint names for {1} joints")]
    Names(usize, usize),
    #[error("blend weights: expected {expected} values for {rows}x{cols}, got {got}")]
    WeightShape {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("blend weight row {row} sums to {sum} (must be 1 within {WEIGHT_SUM_TOL:e})")]
    RowSum { row: usize, sum: f64 },
    #[error("blend weight [{row}, {col}] = {value} is negative or non-finite")]
    BadWeight { row: usize, col: usize, value: f64 },
    #[error("pose has {got} joints, skeleton has {expected}")]
    PoseSize { expected: usize, got: usize },
    #[error("pose value for joint {joint} is not finite")]
    NonFinitePose { joint: usize },
    #[error("{what}: {got} rows, expected {expected}")]
    Rows {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Single-rooted joint tree with rest joint positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    chain: Arc<JointChain>,
    children: Vec<Vec<usize>>,
}

impl Skeleton {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        joints: Vec<[f64; 3]>,
    ) -> Result<Self, RigError> {
        if names.len() != parents.len() {
            return Err(RigError::Names(names.len(), parents.len()));
        }
        let chain = JointChain::new(parents, joints)?;
        let mut children = vec![Vec::new(); chain.len()];
        for (j, p) in chain.parents().iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(j);
            }
        }
        Ok(Self {
            names,
            chain: Arc::new(chain),
            children,
        })
    }

    pub fn len(&self) -> usize {
        self.chain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chain.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parents(&self) -> &[Option<usize>] {
        self.chain.parents()
    }

    pub fn joints(&self) -> &[[f64; 3]] {
        self.chain.joints()
    }

    pub fn chain(&self) -> &Arc<JointChain> {
        &self.chain
    }

    pub fn children(&self, j: usize) -> &[usize] {
        &self.children[j]
    }

    /// Joint itself, its parent and its children, sorted.
    pub fn neighborhood(&self, j: usize) -> Vec<usize> {
        let mut out = vec![j];
        out.extend(self.parents()[j]);
        out.extend_from_slice(&self.children[j]);
        out.sort_unstable();
        out
    }

    pub fn with_joints(&self, joints: Vec<[f64; 3]>) -> Result<Self, RigError> {
        Self::new(self.names.clone(), self.parents().to_vec(), joints)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Axis-angle rotation per joint plus an optional root translation.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub theta: Vec<[f64; 3]>,
    pub translation: Option<[f64; 3]>,
}

impl Pose {
    pub fn zeros(k: usize) -> Self {
        Self {
            theta: vec![[0.0; 3]; k],
            translation: None,
        }
    }

    pub fn new(theta: Vec<[f64; 3]>, translation: Option<[f64; 3]>) -> Result<Self, RigError> {
        for (j, t) in theta.iter().enumerate() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(RigError::NonFinitePose { joint: j });
            }
        }
        if let Some(t) = translation {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(RigError::NonFinitePose { joint: 0 });
            }
        }
        Ok(Self { theta, translation })
    }

    /// `3K` rotation values then, if present, 3 translation values.
    pub fn from_flat(values: &[f64], k: usize, has_translation: bool) -> Result<Self, RigError> {
        let need = 3 * k + if has_translation { 3 } else { 0 };
        if values.len() != need {
            return Err(RigError::PoseSize {
                expected: k,
                got: values.len() / 3,
            });
        }
        let theta = values[..3 * k]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let translation = has_translation.then(|| {
            let t = &values[3 * k..];
            [t[0], t[1], t[2]]
        });
        Self::new(theta, translation)
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// The `3K` rotation values, the MLP input.
    pub fn flat_theta(&self) -> Vec<f64> {
        self.theta.iter().flatten().copied().collect()
    }

    pub fn check(&self, skeleton: &Skeleton) -> Result<(), RigError> {
        if self.theta.len() != skeleton.len() {
            return Err(RigError::PoseSize {
                expected: skeleton.len(),
                got: self.theta.len(),
            });
        }
        Ok(())
    }

    /// Max-abs distance over all non-root rotation values.
    pub fn distance_without_root(&self, other: &Pose) -> f64 {
        self.theta
            .iter()
            .zip(&other.theta)
            .skip(1)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max)
    }
}

/// Dense `N × K` convex skinning weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendWeights {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl BlendWeights {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, RigError> {
        if data.len() != rows * cols {
            return Err(RigError::WeightShape {
                rows,
                cols,
                expected: rows * cols,
                got: data.len(),
            });
        }
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            for (c, &v) in row.iter().enumerate() {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(RigError::BadWeight {
                        row: r,
                        col: c,
                        value: v,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(RigError::RowSum { row: r, sum });
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Every violated row, for load-time reports.
    pub fn violations(rows: usize, cols: usize, data: &[f64]) -> Vec<String> {
        let mut out = Vec::new();
        for r in 0..rows.min(data.len() / cols.max(1)) {
            let row = &data[r * cols..(r + 1) * cols];
            if let Some(c) = row.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                out.push(format!("weight [{r}, {c}] = {} is invalid", row[c]));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                out.push(format!("weight row {r} sums to {sum}"));
            }
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.cols, self.data.clone()).expect("shape checked")
    }

    pub fn max_influences(&self) -> usize {
        (0..self.rows)
            .map(|i| self.row(i).iter().filter(|&&w| w > 0.0).count())
            .max()
            .unwrap_or(0)
    }

    /// Rows gathered by index.
    pub fn select(&self, index: &[usize]) -> Self {
        let mut data = Vec::with_capacity(index.len() * self.cols);
        for &i in index {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: index.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Keeps the `m` largest entries (ties to the lower joint) and renormalizes.
/// Rows that already fit are returned unchanged.
pub fn truncate_row(row: &[f64], m: usize) -> Vec<f64> {
    if row.iter().filter(|&&w| w > 0.0).count() <= m {
        return row.to_vec();
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; row.len()];
    let kept: f64 = order[..m].iter().map(|&j| row[j]).sum();
    for &j in &order[..m] {
        out[j] = row[j] / kept;
    }
    out
}

fn mat3_vec(m: &[f64], v: &[f64; 3]) -> [f64; 3] {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

fn mat3_mul(a: &[f64], b: &[f64]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j];
        }
    }
    out
}

/// `G_k = G_parent · [R_k | J_k − R_k J_k]` for every joint.
pub fn global_transforms(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<[f64; 12]>, RigError> {
    pose.check(skeleton)?;
    let rots: Vec<[f64; 9]> = pose.theta.iter().map(|&r| rodrigues(r)).collect();
    Ok(chain_transforms(skeleton.chain(), &rots))
}

pub(crate) fn chain_transforms(chain: &JointChain, rots: &[[f64; 9]]) -> Vec<[f64; 12]> {
    let mut out = vec![[0.0; 12]; chain.len()];
    for &j in chain.order() {
        let rj = &rots[j];
        let jp = chain.joints()[j];
        let rjp = mat3_vec(rj, &jp);
        let u = [jp[0] - rjp[0], jp[1] - rjp[1], jp[2] - rjp[2]];
        let mut g = [0.0; 12];
        match chain.parents()[j] {
            Some(p) => {
                let gp = out[p];
                let ru = mat3_vec(&gp[..9], &u);
                g[..9].copy_from_slice(&mat3_mul(&gp[..9], rj));
                for c in 0..3 {
                    g[9 + c] = ru[c] + gp[9 + c];
                }
            }
            None => {
                g[..9].copy_from_slice(rj);
                g[9..].copy_from_slice(&u);
            }
        }
        out[j] = g;
    }
    out
}

/// `v'_i = p_i + Σ_k w_ik ((R_k − I) p_i + t_k)`, the convex-weight form of
/// `Σ_k w_ik G_k p_i` that is exact at rest.
pub fn skin_with_transforms(
    positions: &[[f64; 3]],
    transforms: &[[f64; 12]],
    weights: &BlendWeights,
) -> Result<Vec<[f64; 3]>, RigError> {
    if weights.rows() != positions.len() {
        return Err(RigError::Rows {
            what: "blend weights",
            expected: positions.len(),
            got: weights.rows(),
        });
    }
    if weights.cols() != transforms.len() {
        return Err(RigError::PoseSize {
            expected: weights.cols(),
            got: transforms.len(),
        });
    }
    Ok(positions
        .iter()
        .enumerate()
        .map(|(i, p)| skin_point(p, weights.row(i), transforms))
        .collect())
}

/// One vertex of [`skin_with_transforms`]; `w` is its weight row.
#[inline]
pub fn skin_point(p: &[f64; 3], w: &[f64], transforms: &[[f64; 12]]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for (g, &wij) in transforms.iter().zip(w) {
        if wij == 0.0 {
            continue;
        }
        let rp = mat3_vec(&g[..9], p);
        for c in 0..3 {
            acc[c] += wij * (rp[c] - p[c] + g[9 + c]);
        }
    }
    [p[0] + acc[0], p[1] + acc[1], p[2] + acc[2]]
}

/// Skins `positions` and applies the root translation, if any.
pub fn skin(
    positions: &[[f64; 3]],
    pose: &Pose,
    weights: &BlendWeights,
    skeleton: &Skeleton,
) -> Result<Vec<[f64; 3]>, RigError> {
    let g = global_transforms(skeleton, pose)?;
    let mut out = skin_with_transforms(positions, &g, weights)?;
    if let Some(t) = pose.translation {
        for p in &mut out {
            for c in 0..3 {
                p[c] += t[c];
            }
        }
    }
    Ok(out)
}

/// Copies, per garment vertex, the weight row of the nearest body vertex,
/// truncated to [`MAX_INFLUENCES`] joints.
pub fn transfer_weights(
    garment: &[[f64; 3]],
    body: &[[f64; 3]],
    body_weights: &BlendWeights,
    cell_size: f64,
) -> Result<BlendWeights, RigError> {
    if body_weights.rows() != body.len() {
        return Err(RigError::Rows {
            what: "body weights",
            expected: body.len(),
            got: body_weights.rows(),
        });
    }
    let index = NnIndex::build(body, cell_size)?;
    let k = body_weights.cols();
    let mut data = Vec::with_capacity(garment.len() * k);
    for &p in garment {
        data.extend(truncate_row(
            body_weights.row(index.nearest(p)),
            MAX_INFLUENCES,
        ));
    }
    Ok(BlendWeights {
        rows: garment.len(),
        cols: k,
        data,
    })
}
