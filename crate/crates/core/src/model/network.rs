use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::tensor::{rodrigues, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// `X = MLP(θ)`.
    Mlp,
    /// `X = θ`.
    IdentityTheta,
    /// `X` = the flattened per-joint rotation matrices.
    IdentityRotmat,
}

impl std::str::FromStr for EmbeddingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "identity_theta" => Ok(Self::IdentityTheta),
            "identity_rotmat" => Ok(Self::IdentityRotmat),
            _ => Err(format!(
                "unknown embedding mode {s:?} (expected mlp, identity_theta or identity_rotmat)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub embedding: EmbeddingMode,
    pub input_dim: usize,
    /// Output width of every MLP layer.
    pub width: usize,
    pub depth: usize,
    pub final_relu: bool,
    pub vertices: usize,
}

impl NetworkConfig {
    pub fn pose(embedding: EmbeddingMode, joints: usize, vertices: usize) -> Self {
        Self {
            embedding,
            input_dim: 3 * joints,
            width: 32,
            depth: 4,
            final_relu: true,
            vertices,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.vertices == 0 {
            return Err(ModelError::Config("input and vertex counts must be positive".into()));
        }
        if self.embedding == EmbeddingMode::Mlp && (self.width == 0 || self.depth == 0) {
            return Err(ModelError::Config("MLP width and depth must be positive".into()));
        }
        if self.embedding == EmbeddingMode::IdentityRotmat && !self.input_dim.is_multiple_of(3) {
            return Err(ModelError::Config(
                "identity_rotmat needs axis-angle input (a multiple of 3)".into(),
            ));
        }
        Ok(())
    }

    /// `|X|`, the first extent of `D`.
    pub fn embedding_width(&self) -> usize {
        match self.embedding {
            EmbeddingMode::Mlp => self.width,
            EmbeddingMode::IdentityTheta => self.input_dim,
            EmbeddingMode::IdentityRotmat => 3 * self.input_dim,
        }
    }

    pub fn mlp_layers(&self) -> usize {
        match self.embedding {
            EmbeddingMode::Mlp => self.depth,
            _ => 0,
        }
    }

    /// Position of `D` in the parameter list.
    pub fn psd_index(&self) -> usize {
        2 * self.mlp_layers()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn push(&mut self, name: &str, value: Tensor) {
        self.params.push(Param {
            name: name.to_string(),
            value: Arc::new(value),
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn value(&self, i: usize) -> &Arc<Tensor> {
        &self.params[i].value
    }

    /// Mutable data of parameter `i`, copied first if a snapshot still
    /// shares it.
    pub fn data_mut(&mut self, i: usize) -> &mut [f64] {
        Arc::make_mut(&mut self.params[i].value).data_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Var>, ModelError> {
        self.params
            .iter()
            .map(|p| Ok(tape.shared_leaf(p.value.clone(), requires_grad)?))
            .collect()
    }

    /// Copies values from `other`, which must have the same names and shapes.
    pub fn replace_all(&mut self, other: &ParamSet) -> Result<(), ModelError> {
        let layout = |s: &ParamSet| -> Vec<(String, Vec<usize>)> {
            s.params
                .iter()
                .map(|p| (p.name.clone(), p.value.shape().to_vec()))
                .collect()
        };
        if layout(self) != layout(other) {
            return Err(ModelError::Layout(format!(
                "parameters {:?} do not match expected {:?}",
                layout(other),
                layout(self)
            )));
        }
        self.params = other.params.clone();
        Ok(())
    }

    /// Hex SHA-256 of names, shapes and exact parameter bits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &s in p.value.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// MLP layers use `U(−b, b)` weights with `b = √(6 / fan_in)` and zero
/// biases; `D` starts at zero.
pub fn init_params(config: &NetworkConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::default();
    let mut fan_in = config.input_dim;
    for l in 0..config.mlp_layers() {
        let out = config.width;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        set.push(
            &format!("mlp.{l}.weight"),
            Tensor::matrix(fan_in, out, w).expect("sized"),
        );
        set.push(&format!("mlp.{l}.bias"), Tensor::zeros(&[1, out]));
        fan_in = out;
    }
    set.push(
        "psd",
        Tensor::zeros(&[config.embedding_width(), 3 * config.vertices]),
    );
    set
}

pub fn embed_var(
    config: &NetworkConfig,
    tape: &mut Tape,
    vars: &[Var],
    input: Var,
) -> Result<Var, ModelError> {
    let d = config.input_dim;
    if tape.value(input).numel() != d {
        return Err(ModelError::Config(format!(
            "embedding input has {} values, expected {d}",
            tape.value(input).numel()
        )));
    }
    Ok(match config.embedding {
        EmbeddingMode::Mlp => {
            let mut h = tape.reshape(input, vec![1, d])?;
            for l in 0..config.depth {
                h = tape.matmul(h, vars[2 * l])?;
                h = tape.add(h, vars[2 * l + 1])?;
                if l + 1 < config.depth || config.final_relu {
                    h = tape.relu(h)?;
                }
            }
            h
        }
        EmbeddingMode::IdentityTheta => tape.reshape(input, vec![1, d])?,
        EmbeddingMode::IdentityRotmat => {
            let theta = tape.reshape(input, vec![d / 3, 3])?;
            let r = tape.batched_rodrigues(theta)?;
            tape.reshape(r, vec![1, 3 * d])?
        }
    })
}

pub fn deform_var(
    config: &NetworkConfig,
    tape: &mut Tape,
    vars: &[Var],
    x: Var,
) -> Result<Var, ModelError> {
    let y = tape.matmul(x, vars[config.psd_index()])?;
    Ok(tape.reshape(y, vec![config.vertices, 3])?)
}

/// Plain forward of the embedding with the tape's accumulation order.
pub fn embed(config: &NetworkConfig, params: &ParamSet, input: &[f64]) -> Vec<f64> {
    match config.embedding {
        EmbeddingMode::Mlp => {
            let mut h = input.to_vec();
            for l in 0..config.depth {
                let w = params.value(2 * l);
                let b = params.value(2 * l + 1).data();
                let n = w.cols();
                let mut out = vec![0.0; n];
                for (p, &s) in h.iter().enumerate() {
                    if s == 0.0 {
                        continue;
                    }
                    for (d, &v) in out.iter_mut().zip(&w.data()[p * n..(p + 1) * n]) {
                        *d += s * v;
                    }
                }
                let relu = l + 1 < config.depth || config.final_relu;
                for (o, &bj) in out.iter_mut().zip(b) {
                    *o += bj;
                    if relu && *o <= 0.0 {
                        *o = 0.0;
                    }
                }
                h = out;
            }
            h
        }
        EmbeddingMode::IdentityTheta => input.to_vec(),
        EmbeddingMode::IdentityRotmat => input
            .chunks_exact(3)
            .flat_map(|r| rodrigues([r[0], r[1], r[2]]))
            .collect(),
    }
}

/// Columns of `D` per block; a whole number of vertices.
const COLUMN_BLOCK: usize = 510;

/// Embeddings that share each load of `D`.
pub const GROUP: usize = 4;

/// Adds `x · D[:, c0..c1]` into the first `c1 - c0` values of each row.
/// Rows of `D` are the outer loop so each block row is read once per group
/// and reused from cache; every output still sums over `i` in ascending
/// order, skipping zero scales, exactly as a group of one would.
fn accumulate(xs: &[Vec<f64>], rows: &mut [Vec<f64>], data: &[f64], cols: usize, c0: usize, c1: usize) {
    for p in 0..xs[0].len() {
        let src = &data[p * cols + c0..p * cols + c1];
        for (x, r) in xs.iter().zip(rows.iter_mut()) {
            let s = x[p];
            if s == 0.0 {
                continue;
            }
            for (t, &v) in r[..c1 - c0].iter_mut().zip(src) {
                *t += s * v;
            }
        }
    }
}

/// `X · D` streamed one column block at a time. `emit(v0, rows)` gets the
/// offsets of vertices `v0..` for every embedding, in `xs` order; each
/// value is accumulated over `i` in ascending order whatever the batch.
pub fn deform_blocks(
    config: &NetworkConfig,
    params: &ParamSet,
    xs: &[Vec<f64>],
    mut emit: impl FnMut(usize, &[&[f64]]),
) -> Result<(), ModelError> {
    let d = params.value(config.psd_index());
    let (w, cols) = (d.rows(), d.cols());
    if let Some(x) = xs.iter().find(|x| x.len() != w) {
        return Err(ModelError::Config(format!(
            "embedding has {} values, D expects {w}",
            x.len()
        )));
    }
    let data = d.data();
    let mut scratch = vec![vec![0.0; COLUMN_BLOCK.min(cols)]; xs.len()];
    let mut c0 = 0;
    while c0 < cols {
        let c1 = (c0 + COLUMN_BLOCK).min(cols);
        for r in &mut scratch {
            r.fill(0.0);
        }
        for (xg, rg) in xs.chunks(GROUP).zip(scratch.chunks_mut(GROUP)) {
            accumulate(xg, rg, data, cols, c0, c1);
        }
        let rows: Vec<&[f64]> = scratch.iter().map(|r| &r[..c1 - c0]).collect();
        emit(c0 / 3, &rows);
        c0 = c1;
    }
    Ok(())
}

/// `X · D` for a batch of embeddings, as `N × 3` offsets each.
pub fn deform_batch(
    config: &NetworkConfig,
    params: &ParamSet,
    xs: &[Vec<f64>],
) -> Result<Vec<Vec<[f64; 3]>>, ModelError> {
    let mut out = vec![Vec::with_capacity(config.vertices); xs.len()];
    deform_blocks(config, params, xs, |_, rows| {
        for (o, r) in out.iter_mut().zip(rows) {
            o.extend(r.chunks_exact(3).map(|c| [c[0], c[1], c[2]]));
        }
    })?;
    Ok(out)
}

pub fn describe(config: &NetworkConfig, params: &ParamSet) -> serde_json::Value {
    let mlp: usize = (0..2 * config.mlp_layers())
        .map(|i| params.value(i).numel())
        .sum();
    let psd = params.value(config.psd_index()).numel();
    json!({
        "embedding": config.embedding,
        "input_dim": config.input_dim,
        "embedding_width": config.embedding_width(),
        "mlp_layers": config.mlp_layers(),
        "final_relu": config.final_relu,
        "mlp_params": mlp,
        "psd_params": psd,
        "total_params": params.numel(),
        "tensors": params.iter().map(|p| json!({
            "name": p.name,
            "shape": p.value.shape(),
            "count": p.value.numel(),
        })).collect::<Vec<_>>(),
    })
}
