use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{run, shuffled, AdamState, RunSink, Task, TrainConfig, TrainError, TrainSummary};
use crate::body::{BodyModel, PoseDatabase};
use crate::energy::{EnergyReport, EnergyWeights, Scene, Target};
use crate::model::{Checkpoint, ParamSet, PbnsModel};
use crate::rig::{skin, Pose};
use crate::tensor::Tape;

/// Poses per fast-path batch during evaluation.
const EVAL_CHUNK: usize = 64;

/// A pose-space model trained against a posed body.
pub struct PoseTask<'a> {
    pub model: &'a mut PbnsModel,
    pub body: &'a BodyModel,
    pub scene: Scene,
}

impl<'a> PoseTask<'a> {
    pub fn new(
        model: &'a mut PbnsModel,
        body: &'a BodyModel,
        weights: EnergyWeights,
    ) -> Result<Self, TrainError> {
        let scene = Scene::new(model.garment().clone(), body, weights)?;
        Ok(Self { model, body, scene })
    }

    pub fn posed_body(&self, pose: &Pose) -> Result<Vec<[f64; 3]>, TrainError> {
        Ok(skin(
            self.body.mesh.positions(),
            pose,
            &self.body.weights,
            &self.body.skeleton,
        )?)
    }
}

impl Task for PoseTask<'_> {
    type Sample = Pose;

    fn params(&self) -> &ParamSet {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        self.model.params_mut()
    }

    fn lr_scales(&self, cfg: &TrainConfig) -> Vec<f64> {
        let logits = self.model.weight_logits_index();
        (0..self.model.params().len())
            .map(|i| {
                if Some(i) == logits {
                    cfg.weights_lr_scale
                } else {
                    1.0
                }
            })
            .collect()
    }

    fn sample_grad(&self, pose: &Pose) -> Result<(EnergyReport, Vec<Vec<f64>>), TrainError> {
        let body = self.posed_body(pose)?;
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, true)?;
        let out = self.model.pose_outfit_var(&mut tape, &vars, pose)?;
        let target = Target {
            body: &body,
            rest_edges: None,
        };
        let terms = self.scene.loss_var(&mut tape, out.posed, out.offsets, target, None)?;
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

    fn evaluate(&self, poses: &[Pose]) -> Result<EnergyReport, TrainError> {
        evaluate_poses(self.model, self.body, &self.scene, poses)
    }

    fn checkpoint(&self, optimizer: Option<AdamState>) -> Checkpoint {
        self.model.to_checkpoint(optimizer)
    }
}

/// Trains `model` on the training split of `db`, validating on the rest.
pub fn train(
    model: &mut PbnsModel,
    body: &BodyModel,
    db: &PoseDatabase,
    weights: EnergyWeights,
    cfg: &TrainConfig,
    sink: &RunSink,
    resume: Option<AdamState>,
) -> Result<TrainSummary, TrainError> {
    let train_poses: Vec<Pose> = db.train().into_iter().cloned().collect();
    let validation: Vec<Pose> = db.validation().into_iter().cloned().collect();
    if train_poses.is_empty() {
        return Err(TrainError::Config("the pose database has no training poses".into()));
    }
    let mut task = PoseTask::new(model, body, weights)?;
    let epoch = |_: usize, rng: &mut ChaCha8Rng| {
        shuffled(train_poses.len(), rng)
            .into_iter()
            .map(|i| train_poses[i].clone())
            .collect()
    };
    run(&mut task, epoch, &validation, cfg, sink, resume)
}

fn evaluate_poses(
    model: &PbnsModel,
    body: &BodyModel,
    scene: &Scene,
    poses: &[Pose],
) -> Result<EnergyReport, TrainError> {
    let weights = model.skin_weights()?;
    let mut reports = Vec::with_capacity(poses.len());
    for chunk in poses.chunks(EVAL_CHUNK) {
        let outfits = model.pose_outfits_with(chunk, &weights)?;
        let part: Vec<Result<EnergyReport, TrainError>> = chunk
            .par_iter()
            .zip(outfits.par_iter())
            .map(|(pose, posed)| {
                let body = skin(body.mesh.positions(), pose, &body.weights, &body.skeleton)?;
                let offsets = model.deform(&model.embed(pose)?)?;
                let target = Target {
                    body: &body,
                    rest_edges: None,
                };
                Ok(scene.report(posed, &offsets, target)?)
            })
            .collect();
        for r in part {
            reports.push(r?);
        }
    }
    Ok(EnergyReport::mean(&reports))
}

/// Mean metrics of a trained model over `poses`; parameters are untouched.
pub fn validate(
    model: &PbnsModel,
    body: &BodyModel,
    poses: &[Pose],
    weights: EnergyWeights,
) -> Result<EnergyReport, TrainError> {
    let scene = Scene::new(model.garment().clone(), body, weights)?;
    evaluate_poses(model, body, &scene, poses)
}
