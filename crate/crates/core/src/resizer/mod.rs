//! Shape and tightness conditioned resizing: `T + f_X([β ‖ γ])·D_r` in rest
//! space with no skinning. Rest edge lengths come from garment blendshapes
//! transferred from the body.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::body::BodyModel;
use crate::energy::{EnergyReport, EnergyWeights, Scene, Target};
use crate::mesh::{edge_lengths, NnIndex, TriMesh};
use crate::model::{
    body_hash, network, Checkpoint, CheckpointMode, EmbeddingMode, GarmentTemplate, ModelError,
    NetworkConfig, ParamSet,
};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{run, AdamState, RunSink, Task, TrainConfig, TrainError, TrainSummary};

/// Smoothing passes applied to transferred blendshapes.
pub const SMOOTH_ITERATIONS: usize = 100;
/// Step factor of each smoothing pass.
pub const SMOOTH_LAMBDA: f64 = 0.5;
/// Blendshapes kept after transfer, and the length of `γ`.
pub const SHAPES_KEPT: usize = 2;

/// One Laplacian pass over a per-vertex field:
/// `x_i ← x_i + λ Σ_j w_ij (x_j − x_i)` with `w_ij = 1 / max(deg i, deg j)`.
/// The weights are symmetric, so the field's mean is conserved; on
/// vertices whose neighbours share their degree this is the plain
/// neighbour average.
pub fn smooth_once(field: &[[f64; 3]], neighbors: &[Vec<usize>], lambda: f64) -> Vec<[f64; 3]> {
    field
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let di = neighbors[i].len();
            let mut acc = [0.0; 3];
            for &j in &neighbors[i] {
                let w = 1.0 / di.max(neighbors[j].len()) as f64;
                for c in 0..3 {
                    acc[c] += w * (field[j][c] - x[c]);
                }
            }
            [0, 1, 2].map(|c| x[c] + lambda * acc[c])
        })
        .collect()
}

pub fn smooth(
    field: &[[f64; 3]],
    mesh: &TriMesh,
    iterations: usize,
    lambda: f64,
) -> Vec<[f64; 3]> {
    let mut f = field.to_vec();
    for _ in 0..iterations {
        f = smooth_once(&f, mesh.vertex_neighbors(), lambda);
    }
    f
}

/// Nearest-vertex copy of the first two body blendshapes onto the garment,
/// before smoothing.
pub fn copy_blendshapes(
    garment: &GarmentTemplate,
    body: &BodyModel,
) -> Result<Vec<Vec<[f64; 3]>>, ModelError> {
    if body.shape_count() < SHAPES_KEPT {
        return Err(ModelError::Config(format!(
            "resizing needs a body with at least {SHAPES_KEPT} shape blendshapes, found {}",
            body.shape_count()
        )));
    }
    let index = NnIndex::build(body.mesh.positions(), body.nn_cell_size())?;
    let nearest: Vec<usize> = garment.positions().iter().map(|&p| index.nearest(p)).collect();
    Ok(body.blendshapes[..SHAPES_KEPT]
        .iter()
        .map(|shape| nearest.iter().map(|&j| shape[j]).collect())
        .collect())
}

/// Transferred, smoothed garment blendshapes (two of them).
pub fn transfer_blendshapes(
    garment: &GarmentTemplate,
    body: &BodyModel,
) -> Result<Vec<Vec<[f64; 3]>>, ModelError> {
    Ok(copy_blendshapes(garment, body)?
        .iter()
        .map(|s| smooth(s, garment.mesh(), SMOOTH_ITERATIONS, SMOOTH_LAMBDA))
        .collect())
}

/// `β` truncated or zero-padded to the number of kept blendshapes.
fn truncated(beta: &[f64]) -> [f64; SHAPES_KEPT] {
    let mut out = [0.0; SHAPES_KEPT];
    for (o, b) in out.iter_mut().zip(beta) {
        *o = *b;
    }
    out
}

/// `T' = T + Σ_s (β_s + γ_s)·B_s` over the kept blendshapes.
pub fn deformed_rest(
    garment: &GarmentTemplate,
    blendshapes: &[Vec<[f64; 3]>],
    beta: &[f64],
    gamma: [f64; 2],
) -> Vec<[f64; 3]> {
    let b = truncated(beta);
    let mut out = garment.positions().to_vec();
    for (s, shape) in blendshapes.iter().take(SHAPES_KEPT).enumerate() {
        let k = b[s] + gamma[s];
        if k == 0.0 {
            continue;
        }
        for (p, d) in out.iter_mut().zip(shape) {
            for c in 0..3 {
                p[c] += k * d[c];
            }
        }
    }
    out
}

/// Edge lengths of [`deformed_rest`].
pub fn rest_edge_estimate(
    garment: &GarmentTemplate,
    blendshapes: &[Vec<[f64; 3]>],
    beta: &[f64],
    gamma: [f64; 2],
) -> Vec<f64> {
    edge_lengths(garment.mesh(), &deformed_rest(garment, blendshapes, beta, gamma))
}

/// One training or evaluation input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResizeSample {
    pub beta: Vec<f64>,
    pub gamma: [f64; 2],
}

impl ResizeSample {
    pub fn input(&self) -> Vec<f64> {
        self.beta.iter().chain(&self.gamma).copied().collect()
    }
}

/// Uniform sampling bounds for `β` (per component) and `γ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TightnessRange {
    pub beta: Vec<[f64; 2]>,
    pub gamma: [[f64; 2]; 2],
}

impl TightnessRange {
    /// Ranges used with the procedural humanoid's two blendshapes.
    pub fn humanoid() -> Self {
        Self {
            beta: vec![[-2.0, 2.0], [0.0, 1.5]],
            gamma: [[-1.0, 1.0], [-0.5, 0.5]],
        }
    }

    pub fn validate(&self, shapes: usize) -> Result<(), ModelError> {
        if self.beta.len() != shapes {
            return Err(ModelError::Config(format!(
                "tightness range has {} beta bounds, body has {shapes} blendshapes",
                self.beta.len()
            )));
        }
        for (what, [lo, hi]) in self
            .beta
            .iter()
            .map(|r| ("beta", *r))
            .chain(self.gamma.iter().map(|r| ("gamma", *r)))
        {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(ModelError::Config(format!(
                    "{what} bound [{lo}, {hi}] must be finite and ordered"
                )));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> ResizeSample {
        let mut draw = |[lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let beta = self.beta.iter().map(|&r| draw(r)).collect();
        let gamma = [draw(self.gamma[0]), draw(self.gamma[1])];
        ResizeSample { beta, gamma }
    }

    pub fn samples(&self, count: usize, seed: u64) -> Vec<ResizeSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }
}

/// The resizing network for one garment on one body.
#[derive(Clone, Debug)]
pub struct ResizeModel {
    config: NetworkConfig,
    params: ParamSet,
    garment: Arc<GarmentTemplate>,
    template: Arc<Tensor>,
    blendshapes: Vec<Vec<[f64; 3]>>,
    shapes: usize,
    garment_hash: String,
    body_hash: String,
}

impl ResizeModel {
    pub fn new(garment: Arc<GarmentTemplate>, body: &BodyModel, seed: u64) -> Result<Self, ModelError> {
        let config = NetworkConfig {
            embedding: EmbeddingMode::Mlp,
            input_dim: body.shape_count() + SHAPES_KEPT,
            ..NetworkConfig::pose(EmbeddingMode::Mlp, 1, garment.vertex_count())
        };
        Self::with_config(garment, body, config, seed)
    }

    fn with_config(
        garment: Arc<GarmentTemplate>,
        body: &BodyModel,
        config: NetworkConfig,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if config.input_dim != body.shape_count() + SHAPES_KEPT
            || config.vertices != garment.vertex_count()
        {
            return Err(ModelError::Config(format!(
                "network expects input {} and {} vertices; body gives {} and garment {}",
                config.input_dim,
                config.vertices,
                body.shape_count() + SHAPES_KEPT,
                garment.vertex_count()
            )));
        }
        let blendshapes = transfer_blendshapes(&garment, body)?;
        Ok(Self {
            params: network::init_params(&config, seed),
            config,
            template: Arc::new(Tensor::from_vec3s(garment.positions())),
            blendshapes,
            shapes: body.shape_count(),
            garment_hash: garment.content_hash(),
            body_hash: body_hash(body),
            garment,
        })
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

    pub fn blendshapes(&self) -> &[Vec<[f64; 3]>] {
        &self.blendshapes
    }

    pub fn check(&self, s: &ResizeSample) -> Result<(), ModelError> {
        if s.beta.len() != self.shapes {
            return Err(ModelError::Config(format!(
                "beta has {} components, body has {} blendshapes",
                s.beta.len(),
                self.shapes
            )));
        }
        if s.input().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Config("beta and gamma must be finite".into()));
        }
        Ok(())
    }

    pub fn rest_edges(&self, s: &ResizeSample) -> Vec<f64> {
        rest_edge_estimate(&self.garment, &self.blendshapes, &s.beta, s.gamma)
    }

    /// `D_r` offsets for a sample.
    pub fn offsets(&self, s: &ResizeSample) -> Result<Vec<[f64; 3]>, ModelError> {
        self.check(s)?;
        let x = network::embed(&self.config, &self.params, &s.input());
        Ok(network::deform_batch(&self.config, &self.params, &[x])?.remove(0))
    }

    /// The resized outfit in rest space.
    pub fn forward(&self, s: &ResizeSample) -> Result<Vec<[f64; 3]>, ModelError> {
        let d = self.offsets(s)?;
        Ok(self
            .garment
            .positions()
            .iter()
            .zip(&d)
            .map(|(t, o)| [t[0] + o[0], t[1] + o[1], t[2] + o[2]])
            .collect())
    }

    pub fn to_checkpoint(&self, optimizer: Option<AdamState>) -> Checkpoint {
        Checkpoint {
            mode: CheckpointMode::Resize,
            garment_hash: self.garment_hash.clone(),
            body_hash: self.body_hash.clone(),
            network: self.config.clone(),
            params: self.params.clone(),
            optimizer,
            meta: serde_json::Value::Null,
        }
    }

    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        garment: Arc<GarmentTemplate>,
        body: &BodyModel,
        force: bool,
    ) -> Result<Self, ModelError> {
        if ckpt.mode != CheckpointMode::Resize {
            return Err(ModelError::Mode {
                expected: CheckpointMode::Resize,
                found: ckpt.mode,
            });
        }
        ckpt.check_hashes(&garment.content_hash(), &body_hash(body), force)?;
        let mut model = Self::with_config(garment, body, ckpt.network.clone(), 0)?;
        model.params.replace_all(&ckpt.params)?;
        Ok(model)
    }

    pub fn describe(&self) -> serde_json::Value {
        let mut d = network::describe(&self.config, &self.params);
        d["mode"] = json!("resize");
        d["shapes"] = json!(self.shapes);
        d["garment"] = json!({
            "name": self.garment.name,
            "vertices": self.garment.vertex_count(),
            "layers": self.garment.layer_count(),
            "hash": self.garment_hash,
        });
        d["body_hash"] = json!(self.body_hash);
        d
    }
}

/// `resize_forward` with the body reshaped alongside, for export and
/// evaluation.
pub fn resize_forward(
    model: &ResizeModel,
    body: &BodyModel,
    s: &ResizeSample,
) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>), ModelError> {
    let outfit = model.forward(s)?;
    let shaped = body.apply_shape(&s.beta)?;
    Ok((outfit, shaped))
}

/// A resizer trained against the `β`-shaped body at rest.
pub struct ResizeTask<'a> {
    pub model: &'a mut ResizeModel,
    pub body: &'a BodyModel,
    pub scene: Scene,
}

impl<'a> ResizeTask<'a> {
    pub fn new(
        model: &'a mut ResizeModel,
        body: &'a BodyModel,
        weights: EnergyWeights,
    ) -> Result<Self, TrainError> {
        let scene = Scene::new(model.garment().clone(), body, weights)?;
        Ok(Self { model, body, scene })
    }
}

fn evaluate_samples(
    model: &ResizeModel,
    body: &BodyModel,
    scene: &Scene,
    samples: &[ResizeSample],
) -> Result<EnergyReport, TrainError> {
    let reports: Vec<Result<EnergyReport, TrainError>> = samples
        .par_iter()
        .map(|s| {
            let offsets = model.offsets(s)?;
            let outfit = model.forward(s)?;
            let shaped = body.apply_shape(&s.beta).map_err(ModelError::from)?;
            let rest = model.rest_edges(s);
            let target = Target {
                body: &shaped,
                rest_edges: Some(&rest),
            };
            Ok(scene.report(&outfit, &offsets, target)?)
        })
        .collect();
    let reports = reports.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(EnergyReport::mean(&reports))
}

impl Task for ResizeTask<'_> {
    type Sample = ResizeSample;

    fn params(&self) -> &ParamSet {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        self.model.params_mut()
    }

    fn lr_scales(&self, _: &TrainConfig) -> Vec<f64> {
        vec![1.0; self.model.params().len()]
    }

    fn sample_grad(&self, s: &ResizeSample) -> Result<(EnergyReport, Vec<Vec<f64>>), TrainError> {
        self.model.check(s)?;
        let shaped = self.body.apply_shape(&s.beta).map_err(ModelError::from)?;
        let rest = self.model.rest_edges(s);
        let cfg = self.model.config();
        let mut tape = Tape::new();
        let vars = self.model.params().bind(&mut tape, true)?;
        let input = tape.constant(Tensor::vector(s.input()))?;
        let x = network::embed_var(cfg, &mut tape, &vars, input)?;
        let offsets = network::deform_var(cfg, &mut tape, &vars, x)?;
        let t = tape.shared_leaf(self.model.template.clone(), false)?;
        let outfit = tape.add(t, offsets)?;
        let target = Target {
            body: &shaped,
            rest_edges: Some(&rest),
        };
        let terms = self.scene.loss_var(&mut tape, outfit, offsets, target, None)?;
        let report = EnergyReport {
            total: tape.scalar(terms.total),
            edge: tape.scalar(terms.edge),
            bend: tape.scalar(terms.bend),
            collision: tape.scalar(terms.collision),
            gravity: tape.scalar(terms.gravity),
            pin: tape.scalar(terms.pin),
            samples: 1,
            ..Default::default()
        };
        let mut grads = tape.backward(terms.total)?;
        let flat = vars
            .iter()
            .zip(self.model.params().iter())
            .map(|(&v, p)| match grads.take(v) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; p.value.numel()],
            })
            .collect();
        Ok((report, flat))
    }

    fn evaluate(&self, samples: &[ResizeSample]) -> Result<EnergyReport, TrainError> {
        evaluate_samples(self.model, self.body, &self.scene, samples)
    }

    fn checkpoint(&self, optimizer: Option<AdamState>) -> Checkpoint {
        self.model.to_checkpoint(optimizer)
    }
}

/// Trains on `samples_per_epoch` fresh uniform draws per epoch from the
/// seeded stream.
#[allow(clippy::too_many_arguments)]
pub fn train_resizer(
    model: &mut ResizeModel,
    body: &BodyModel,
    range: &TightnessRange,
    samples_per_epoch: usize,
    validation: &[ResizeSample],
    weights: EnergyWeights,
    cfg: &TrainConfig,
    sink: &RunSink,
    resume: Option<AdamState>,
) -> Result<TrainSummary, TrainError> {
    range.validate(body.shape_count())?;
    if samples_per_epoch == 0 {
        return Err(TrainError::Config("samples_per_epoch must be at least 1".into()));
    }
    let mut task = ResizeTask::new(model, body, weights)?;
    let epoch = |_: usize, rng: &mut ChaCha8Rng| {
        (0..samples_per_epoch).map(|_| range.sample(rng)).collect()
    };
    run(&mut task, epoch, validation, cfg, sink, resume)
}

/// Mean metrics over `samples`; parameters are untouched.
pub fn validate_resizer(
    model: &ResizeModel,
    body: &BodyModel,
    samples: &[ResizeSample],
    weights: EnergyWeights,
) -> Result<EnergyReport, TrainError> {
    let scene = Scene::new(model.garment().clone(), body, weights)?;
    evaluate_samples(model, body, &scene, samples)
}

#[cfg(test)]
mod tests;
