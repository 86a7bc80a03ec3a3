//! The pose-conditioned network: an MLP pose embedding, the PSD matrix `D`,
//! the skinned forward pass, checkpoints and a fast inference path.

mod checkpoint;
mod garment;
pub mod network;

pub use checkpoint::{Checkpoint, CheckpointMode, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use garment::{load_garment, save_garment, Fabric, GarmentSidecar, GarmentTemplate};
pub use network::{EmbeddingMode, NetworkConfig, Param, ParamSet};

use std::sync::Arc;

use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::body::{body_to_bytes, BodyError, BodyModel};
use crate::format::FormatError;
use crate::mesh::MeshError;
use crate::rig::{global_transforms, skin_point, BlendWeights, Pose, RigError, Skeleton};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::trainer::AdamState;

/// Floor applied to zero entries inside the trainable weight support before
/// taking logarithms.
pub const WEIGHT_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid garment:\n  - {}", .0.join("\n  - "))]
    InvalidGarment(Vec<String>),
    #[error("garment sidecar {0}")]
    Sidecar(String),
    #[error("model configuration: {0}")]
    Config(String),
    #[error("checkpoint version {found} is not supported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{what} hash mismatch: checkpoint has {checkpoint}, current {what} is {current} (use --force to override)")]
    HashMismatch {
        what: &'static str,
        checkpoint: String,
        current: String,
    },
    #[error("checkpoint mode is {found}, expected {expected}")]
    Mode {
        expected: CheckpointMode,
        found: CheckpointMode,
    },
    #[error("checkpoint layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn body_hash(body: &BodyModel) -> String {
    hex::encode(Sha256::digest(body_to_bytes(body)))
}

/// Posed outfit and the PSD offsets that produced it, on a tape.
#[derive(Clone, Copy, Debug)]
pub struct OutfitVars {
    pub posed: Var,
    pub offsets: Var,
}

#[derive(Clone, Debug)]
enum SkinWeights {
    Fixed(Arc<Tensor>),
    Trainable { mask: Arc<[bool]> },
}

/// `V_θ = skin(T + f_X(θ)·D, θ, W)` for one garment on one body.
#[derive(Clone, Debug)]
pub struct PbnsModel {
    config: NetworkConfig,
    params: ParamSet,
    garment: Arc<GarmentTemplate>,
    template: Arc<Tensor>,
    skeleton: Skeleton,
    transferred: BlendWeights,
    weights: SkinWeights,
    garment_hash: String,
    body_hash: String,
}

impl PbnsModel {
    /// Fresh model: `D = 0`, fan-in scaled MLP weights, zero biases.
    pub fn new(
        garment: Arc<GarmentTemplate>,
        body: &BodyModel,
        embedding: EmbeddingMode,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let config = NetworkConfig::pose(embedding, body.skeleton.len(), garment.vertex_count());
        Self::with_config(garment, body, config, seed)
    }

    pub fn with_config(
        garment: Arc<GarmentTemplate>,
        body: &BodyModel,
        config: NetworkConfig,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if config.input_dim != 3 * body.skeleton.len() || config.vertices != garment.vertex_count()
        {
            return Err(ModelError::Config(format!(
                "network expects input {} and {} vertices; body gives {} and garment {}",
                config.input_dim,
                config.vertices,
                3 * body.skeleton.len(),
                garment.vertex_count()
            )));
        }
        let transferred = crate::rig::transfer_weights(
            garment.positions(),
            body.mesh.positions(),
            &body.weights,
            body.nn_cell_size(),
        )?;
        let mut params = network::init_params(&config, seed);
        let weights = if garment.trainable_weights() {
            let (mask, logits) = weight_logits(&transferred, &body.skeleton);
            params.push("weight_logits", logits);
            SkinWeights::Trainable { mask }
        } else {
            SkinWeights::Fixed(Arc::new(transferred.to_tensor()))
        };
        Ok(Self {
            config,
            params,
            template: Arc::new(Tensor::from_vec3s(garment.positions())),
            garment_hash: garment.content_hash(),
            body_hash: body_hash(body),
            garment,
            skeleton: body.skeleton.clone(),
            transferred,
            weights,
        })
    }

    /// Replaces the transferred skinning weights of a fixed-weight model.
    /// Checkpoints do not record the replacement.
    pub fn with_weights(mut self, weights: BlendWeights) -> Result<Self, ModelError> {
        let (n, k) = (self.garment.vertex_count(), self.skeleton.len());
        if weights.rows() != n || weights.cols() != k {
            return Err(ModelError::Config(format!(
                "weights are {}x{}, expected {n}x{k}",
                weights.rows(),
                weights.cols()
            )));
        }
        if self.has_trainable_weights() {
            return Err(ModelError::Config(
                "cannot replace weights of a model with trainable weights".into(),
            ));
        }
        self.weights = SkinWeights::Fixed(Arc::new(weights.to_tensor()));
        self.transferred = weights;
        Ok(self)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn garment(&self) -> &Arc<GarmentTemplate> {
        &self.garment
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn garment_hash(&self) -> &str {
        &self.garment_hash
    }

    pub fn body_hash(&self) -> &str {
        &self.body_hash
    }

    pub fn has_trainable_weights(&self) -> bool {
        matches!(self.weights, SkinWeights::Trainable { .. })
    }

    /// Index of the weight logits in [`Self::params`], if trainable.
    pub fn weight_logits_index(&self) -> Option<usize> {
        self.params.index_of("weight_logits")
    }

    /// Weights transferred from the body at construction.
    pub fn transferred_weights(&self) -> &BlendWeights {
        &self.transferred
    }

    /// Current skinning weights (softmax of the logits when trainable).
    pub fn skin_weights(&self) -> Result<BlendWeights, ModelError> {
        let (n, k) = (self.garment.vertex_count(), self.skeleton.len());
        match &self.weights {
            SkinWeights::Fixed(_) => Ok(self.transferred.clone()),
            SkinWeights::Trainable { mask } => {
                let i = self.weight_logits_index().expect("trainable model has logits");
                let mut tape = Tape::new();
                let l = tape.shared_leaf(self.params.value(i).clone(), false)?;
                let w = tape.softmax_rows(l, mask.clone())?;
                Ok(BlendWeights::new(n, k, tape.value(w).data().to_vec())?)
            }
        }
    }

    pub fn input_of(pose: &Pose) -> Vec<f64> {
        pose.flat_theta()
    }

    /// Binds every parameter as a shared leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Var>, ModelError> {
        self.params.bind(tape, requires_grad)
    }

    /// `X = f_X(θ)` on the tape; `theta` is `[K, 3]`.
    pub fn embed_var(&self, tape: &mut Tape, vars: &[Var], theta: Var) -> Result<Var, ModelError> {
        network::embed_var(&self.config, tape, vars, theta)
    }

    /// `dT = Σ_i X_i D_i` on the tape, as `[N, 3]`.
    pub fn deform_var(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, ModelError> {
        network::deform_var(&self.config, tape, vars, x)
    }

    pub fn check_pose(&self, pose: &Pose) -> Result<(), ModelError> {
        Ok(pose.check(&self.skeleton)?)
    }

    /// The posed outfit on the tape, differentiable in every parameter.
    pub fn pose_outfit_var(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        pose: &Pose,
    ) -> Result<OutfitVars, ModelError> {
        self.check_pose(pose)?;
        let theta = tape.constant(Tensor::from_vec3s(&pose.theta))?;
        let x = self.embed_var(tape, vars, theta)?;
        let offsets = self.deform_var(tape, vars, x)?;
        let t = tape.shared_leaf(self.template.clone(), false)?;
        let rest = tape.add(t, offsets)?;
        let g = global_transforms(&self.skeleton, pose)?;
        let g = tape.constant(Tensor::new(
            vec![g.len(), 12],
            g.iter().flatten().copied().collect(),
        )?)?;
        let w = match &self.weights {
            SkinWeights::Fixed(w) => tape.shared_leaf(w.clone(), false)?,
            SkinWeights::Trainable { mask } => {
                let i = self.weight_logits_index().expect("trainable model has logits");
                tape.softmax_rows(vars[i], mask.clone())?
            }
        };
        let mut posed = tape.skin(rest, g, w)?;
        if let Some(tr) = pose.translation {
            posed = tape.translate_rows(posed, tr)?;
        }
        Ok(OutfitVars { posed, offsets })
    }

    /// `X = f_X(θ)` without a tape.
    pub fn embed(&self, pose: &Pose) -> Result<Vec<f64>, ModelError> {
        self.check_pose(pose)?;
        Ok(network::embed(&self.config, &self.params, &pose.flat_theta()))
    }

    /// `dT` without a tape.
    pub fn deform(&self, x: &[f64]) -> Result<Vec<[f64; 3]>, ModelError> {
        Ok(network::deform_batch(&self.config, &self.params, &[x.to_vec()])?
            .pop()
            .expect("one row"))
    }

    pub fn pose_outfit(&self, pose: &Pose) -> Result<Vec<[f64; 3]>, ModelError> {
        Ok(self
            .pose_outfits(std::slice::from_ref(pose))?
            .pop()
            .expect("one pose"))
    }

    /// Batched inference. Each output is bit-identical to evaluating that
    /// pose alone: every sum runs in the same order regardless of batch.
    pub fn pose_outfits(&self, poses: &[Pose]) -> Result<Vec<Vec<[f64; 3]>>, ModelError> {
        let weights = self.skin_weights()?;
        self.pose_outfits_with(poses, &weights)
    }

    /// As [`Self::pose_outfits`] with precomputed skinning weights.
    pub fn pose_outfits_with(
        &self,
        poses: &[Pose],
        weights: &BlendWeights,
    ) -> Result<Vec<Vec<[f64; 3]>>, ModelError> {
        let n = self.garment.vertex_count();
        let mut flat = vec![[0.0; 3]; poses.len() * n];
        self.pose_outfits_into(poses, weights, &mut flat)?;
        Ok(flat.chunks_exact(n).map(<[_]>::to_vec).collect())
    }

    /// Writes the posed outfits for `poses` back to back into `out`, which
    /// holds `poses.len() × N` points. Reusing `out` across calls avoids a
    /// fresh allocation per batch.
    pub fn pose_outfits_into(
        &self,
        poses: &[Pose],
        weights: &BlendWeights,
        out: &mut [[f64; 3]],
    ) -> Result<(), ModelError> {
        for p in poses {
            self.check_pose(p)?;
        }
        let (n, k) = (self.garment.vertex_count(), self.skeleton.len());
        if weights.rows() != n || weights.cols() != k {
            return Err(ModelError::Config(format!(
                "weights are {}x{}, expected {n}x{k}",
                weights.rows(),
                weights.cols()
            )));
        }
        if out.len() != poses.len() * n {
            return Err(ModelError::Config(format!(
                "output holds {} points, expected {} poses x {n}",
                out.len(),
                poses.len()
            )));
        }
        let xs: Vec<Vec<f64>> = poses
            .iter()
            .map(|p| network::embed(&self.config, &self.params, &p.flat_theta()))
            .collect();
        let transforms = poses
            .iter()
            .map(|p| global_transforms(&self.skeleton, p))
            .collect::<Result<Vec<_>, _>>()?;
        let template = self.garment.positions();
        use rayon::prelude::*;
        // Poses in a group share each read of D.
        let g = network::GROUP;
        out.par_chunks_mut(g * n)
            .zip(poses.par_chunks(g))
            .zip(xs.par_chunks(g).zip(transforms.par_chunks(g)))
            .try_for_each(|((dst, ps), (xg, tg))| {
                let mut dsts: Vec<&mut [[f64; 3]]> = dst.chunks_exact_mut(n).collect();
                network::deform_blocks(&self.config, &self.params, xg, |v0, rows| {
                    for (((dst, r), gt), pose) in dsts.iter_mut().zip(rows).zip(tg).zip(ps) {
                        for (i, d) in r.chunks_exact(3).enumerate() {
                            let v = v0 + i;
                            let t = template[v];
                            let p = [d[0] + t[0], d[1] + t[1], d[2] + t[2]];
                            let mut q = skin_point(&p, weights.row(v), gt);
                            if let Some(tr) = pose.translation {
                                for c in 0..3 {
                                    q[c] += tr[c];
                                }
                            }
                            dst[v] = q;
                        }
                    }
                })?;
                Ok(())
            })
    }

    pub fn to_checkpoint(&self, optimizer: Option<AdamState>) -> Checkpoint {
        Checkpoint {
            mode: CheckpointMode::Pose,
            garment_hash: self.garment_hash.clone(),
            body_hash: self.body_hash.clone(),
            network: self.config.clone(),
            params: self.params.clone(),
            optimizer,
            meta: serde_json::Value::Null,
        }
    }

    /// Rebuilds a model from a checkpoint. Hashes of the garment and body
    /// must match the ones recorded at save time unless `force` is set.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        garment: Arc<GarmentTemplate>,
        body: &BodyModel,
        force: bool,
    ) -> Result<Self, ModelError> {
        if ckpt.mode != CheckpointMode::Pose {
            return Err(ModelError::Mode {
                expected: CheckpointMode::Pose,
                found: ckpt.mode,
            });
        }
        ckpt.check_hashes(&garment.content_hash(), &body_hash(body), force)?;
        let trainable = ckpt.params.index_of("weight_logits").is_some();
        let garment = if trainable != garment.trainable_weights() {
            Arc::new((*garment).clone().with_trainable_weights(trainable))
        } else {
            garment
        };
        let mut model = Self::with_config(garment, body, ckpt.network.clone(), 0)?;
        model.params.replace_all(&ckpt.params)?;
        Ok(model)
    }

    /// Parameter summary as JSON.
    pub fn describe(&self) -> serde_json::Value {
        let mut d = network::describe(&self.config, &self.params);
        let g = &self.garment;
        d["mode"] = json!("pose");
        d["trainable_weights"] = json!(self.has_trainable_weights());
        d["weight_logit_params"] = json!(self
            .weight_logits_index()
            .map_or(0, |i| self.params.value(i).numel()));
        d["garment"] = json!({
            "name": g.name,
            "vertices": g.vertex_count(),
            "faces": g.mesh().face_count(),
            "edges": g.mesh().edge_count(),
            "layers": g.layer_count(),
            "pinned": g.pinned_indices().len(),
            "hash": self.garment_hash,
        });
        d["body_hash"] = json!(self.body_hash);
        d["joints"] = json!(self.skeleton.len());
        d
    }
}

/// Support mask and initial logits for trainable skinning weights. The
/// support of a vertex is the union of skeleton neighbourhoods of the
/// joints it is initially bound to.
fn weight_logits(w: &BlendWeights, skeleton: &Skeleton) -> (Arc<[bool]>, Tensor) {
    let (n, k) = (w.rows(), w.cols());
    let mut mask = vec![false; n * k];
    let mut logits = vec![0.0; n * k];
    for i in 0..n {
        let row = w.row(i);
        for (j, &v) in row.iter().enumerate() {
            if v > 0.0 {
                for q in skeleton.neighborhood(j) {
                    mask[i * k + q] = true;
                }
            }
        }
        for j in 0..k {
            if mask[i * k + j] {
                logits[i * k + j] = row[j].max(WEIGHT_FLOOR).ln();
            }
        }
    }
    (
        mask.into(),
        Tensor::matrix(n, k, logits).expect("sized above"),
    )
}

#[cfg(test)]
mod tests;
