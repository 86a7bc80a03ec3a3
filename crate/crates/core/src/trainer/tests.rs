use std::sync::{Arc, OnceLock};

use super::*;
use crate::body::{sample_pose_database, synth_humanoid, synth_pose_pool, BodyModel, HumanoidSpec, PoseRanges};
use crate::energy::EnergyWeights;
use crate::fixtures::{outfit, OutfitSpec};
use crate::model::{EmbeddingMode, PbnsModel};
use crate::tensor::Tensor;

fn humanoid() -> &'static BodyModel {
    static BODY: OnceLock<BodyModel> = OnceLock::new();
    BODY.get_or_init(|| synth_humanoid(&HumanoidSpec::default()).unwrap())
}

fn tiny_model(seed: u64) -> PbnsModel {
    let g = Arc::new(outfit(&OutfitSpec::tiny()).unwrap());
    PbnsModel::new(g, humanoid(), EmbeddingMode::Mlp, seed).unwrap()
}

fn tiny_db(n: usize) -> crate::body::PoseDatabase {
    let ranges = PoseRanges::humanoid(&humanoid().skeleton).scaled(0.5);
    let pool = synth_pose_pool(&ranges, 4 * n, 3);
    sample_pose_database(&pool, n, 0.0, 0.75, 5)
}

fn one_param(values: Vec<f64>) -> ParamSet {
    let mut p = ParamSet::default();
    p.push("w", Tensor::vector(values));
    p
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let adam = Adam::default();
    let mut p = one_param(vec![0.5, -2.0]);
    let mut st = AdamState::new(&p);
    st.m[0] = vec![0.2, -0.4];
    st.v[0] = vec![0.01, 0.04];
    st.step = 3;
    let before = p.value(0).data().to_vec();
    adam.step(&mut p, &[vec![0.0, 0.0]], &mut st, &[1e-3]);
    // Moments decay geometrically and the parameter keeps moving along m.
    assert!((st.m[0][0] - 0.18).abs() < 1e-15);
    assert!((st.v[0][1] - 0.04 * 0.999).abs() < 1e-15);
    let mut fresh = one_param(before.clone());
    let mut st0 = AdamState::new(&fresh);
    adam.step(&mut fresh, &[vec![0.0, 0.0]], &mut st0, &[1e-3]);
    assert_eq!(fresh.value(0).data(), &before[..]);
    assert_eq!(st0.m[0], vec![0.0, 0.0]);
    assert_eq!(st0.v[0], vec![0.0, 0.0]);
}

#[test]
fn adam_two_step_oracle() {
    let adam = Adam::default();
    let mut p = one_param(vec![1.0]);
    let mut st = AdamState::new(&p);
    adam.step(&mut p, &[vec![0.5]], &mut st, &[0.1]);
    // First step: m̂ = g, v̂ = g², update = lr·g/(|g| + eps).
    let x1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
    assert!((p.value(0).data()[0] - x1).abs() < 1e-15);
    adam.step(&mut p, &[vec![-0.25]], &mut st, &[0.1]);
    let m = 0.9 * 0.05 + 0.1 * -0.25;
    let v = 0.999 * 0.00025 + 0.001 * 0.0625;
    let mh = m / (1.0 - 0.81);
    let vh = v / (1.0 - 0.999f64 * 0.999);
    let x2 = x1 - 0.1 * mh / (vh.sqrt() + 1e-8);
    assert!((p.value(0).data()[0] - x2).abs() < 1e-14);
    assert_eq!(st.step, 2);
}

#[test]
fn lr_schedule() {
    let cfg = TrainConfig {
        lr: 1e-3,
        warmup_steps: 10,
        epochs: 3,
        lr_final_factor: 0.1,
        ..Default::default()
    };
    assert!((cfg.lr_at(5, 0) - 5e-4).abs() < 1e-18);
    assert!((cfg.lr_at(20, 0) - 1e-3).abs() < 1e-18);
    assert!((cfg.lr_at(20, 1) - 5.5e-4).abs() < 1e-15);
    assert!((cfg.lr_at(20, 2) - 1e-4).abs() < 1e-15);
    let flat = TrainConfig::default();
    assert_eq!(flat.lr_at(1000, 29), flat.lr);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { batch: 0, ..Default::default() },
        TrainConfig { lr: -1.0, ..Default::default() },
        TrainConfig { lr_final_factor: 0.0, ..Default::default() },
        TrainConfig { workers: Some(0), ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }
}

fn quick_cfg(workers: usize) -> TrainConfig {
    TrainConfig {
        batch: 4,
        epochs: 3,
        lr: 1e-3,
        warmup_steps: 2,
        seed: 11,
        workers: Some(workers),
        ..Default::default()
    }
}

#[test]
fn training_is_deterministic_across_worker_counts() {
    let db = tiny_db(16);
    let mut a = tiny_model(1);
    let mut b = tiny_model(1);
    let sa = train(&mut a, humanoid(), &db, EnergyWeights::default(), &quick_cfg(1), &RunSink::default(), None).unwrap();
    let sb = train(&mut b, humanoid(), &db, EnergyWeights::default(), &quick_cfg(3), &RunSink::default(), None).unwrap();
    assert_eq!(a.params().hash(), b.params().hash());
    assert_eq!(sa.log.len(), 3);
    for (x, y) in sa.log.iter().zip(&sb.log) {
        assert_eq!(x.train, y.train);
        assert_eq!(x.validation, y.validation);
    }
    assert_eq!(sa.optimizer.step, 3 * 3);
}

#[test]
fn training_lowers_the_loss_and_writes_artifacts() {
    let db = tiny_db(16);
    let mut m = tiny_model(2);
    let dir = tempfile::tempdir().unwrap();
    let sink = RunSink {
        metrics_log: Some(dir.path().join("metrics.jsonl")),
        checkpoint_dir: Some(dir.path().join("ckpt")),
    };
    let cfg = TrainConfig {
        epochs: 8,
        checkpoint_every: 4,
        lr: 3e-3,
        ..quick_cfg(2)
    };
    let before = validate(&m, humanoid(), &db.poses, EnergyWeights::default()).unwrap();
    let s = train(&mut m, humanoid(), &db, EnergyWeights::default(), &cfg, &sink, None).unwrap();
    let after = validate(&m, humanoid(), &db.poses, EnergyWeights::default()).unwrap();
    assert!(after.total < before.total, "{} !< {}", after.total, before.total);
    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 8);
    assert!(lines[7]["collision_ratio"].is_number());
    assert!(lines[0]["loss"]["edge"].is_number());
    let last = s.last_checkpoint.unwrap();
    assert!(last.ends_with("epoch-0008.ckpt"));
    assert!(dir.path().join("ckpt/epoch-0004.ckpt").exists());
    let ck = Checkpoint::load(&last).unwrap();
    assert_eq!(ck.optimizer.unwrap().step, s.optimizer.step);
}

#[test]
fn validation_does_not_touch_parameters() {
    let db = tiny_db(8);
    let m = tiny_model(4);
    let h = m.params().hash();
    let r = validate(&m, humanoid(), &db.poses, EnergyWeights::default()).unwrap();
    assert_eq!(m.params().hash(), h);
    assert_eq!(r.samples, db.poses.len());
    assert_eq!(r.per_layer_collision.len(), 2);
}

/// A scalar quadratic whose loss turns non-finite or blows up on request.
struct Toy {
    params: ParamSet,
    poison_after: Option<f64>,
    blow_up: bool,
}

impl Task for Toy {
    type Sample = f64;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn lr_scales(&self, _: &TrainConfig) -> Vec<f64> {
        vec![1.0]
    }

    fn sample_grad(&self, s: &f64) -> Result<(EnergyReport, Vec<Vec<f64>>), TrainError> {
        let x = self.params.value(0).data()[0];
        let mut loss = (x - s) * (x - s) + 1.0;
        if self.poison_after.is_some_and(|t| x > t) {
            loss = f64::NAN;
        }
        let mut g = 2.0 * (x - s);
        if self.blow_up {
            loss = 1.0 + x.abs().powi(8);
            g = -1.0;
        }
        Ok((
            EnergyReport {
                total: loss,
                samples: 1,
                ..Default::default()
            },
            vec![vec![g]],
        ))
    }

    fn evaluate(&self, samples: &[f64]) -> Result<EnergyReport, TrainError> {
        let r: Vec<_> = samples.iter().map(|s| self.sample_grad(s).unwrap().0).collect();
        Ok(EnergyReport::mean(&r))
    }

    fn checkpoint(&self, _: Option<AdamState>) -> Checkpoint {
        tiny_model(0).to_checkpoint(None)
    }
}

fn toy_cfg() -> TrainConfig {
    TrainConfig {
        batch: 2,
        epochs: 20,
        lr: 0.1,
        warmup_steps: 0,
        workers: Some(2),
        checkpoint_every: 1,
        ..Default::default()
    }
}

#[test]
fn non_finite_loss_aborts_with_last_checkpoint() {
    let mut toy = Toy {
        params: one_param(vec![0.0]),
        poison_after: Some(0.35),
        blow_up: false,
    };
    let dir = tempfile::tempdir().unwrap();
    let sink = RunSink {
        metrics_log: None,
        checkpoint_dir: Some(dir.path().to_path_buf()),
    };
    let err = run(&mut toy, |_, _| vec![1.0, 1.0], &[], &toy_cfg(), &sink, None).unwrap_err();
    match err {
        TrainError::NonFinite { epoch, last_good, .. } => {
            assert!(epoch >= 3);
            let p = last_good.expect("a checkpoint was written before the failure");
            assert!(p.exists());
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn divergence_aborts() {
    let mut toy = Toy {
        params: one_param(vec![1.0]),
        poison_after: None,
        blow_up: true,
    };
    let cfg = TrainConfig {
        lr: 2.0,
        epochs: 200,
        checkpoint_every: 0,
        ..toy_cfg()
    };
    let err = run(&mut toy, |_, _| vec![0.0, 0.0], &[], &cfg, &RunSink::default(), None).unwrap_err();
    assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
}

#[test]
fn toy_quadratic_converges() {
    let mut toy = Toy {
        params: one_param(vec![0.0]),
        poison_after: None,
        blow_up: false,
    };
    let cfg = TrainConfig {
        epochs: 300,
        lr: 0.05,
        checkpoint_every: 0,
        ..toy_cfg()
    };
    let s = run(&mut toy, |_, _| vec![1.0, 3.0], &[2.0], &cfg, &RunSink::default(), None).unwrap();
    assert!((toy.params.value(0).data()[0] - 2.0).abs() < 0.05);
    assert!((s.validation.unwrap().total - 1.0).abs() < 0.01);
}

#[test]
fn mismatched_resume_state_is_rejected() {
    let mut toy = Toy {
        params: one_param(vec![0.0]),
        poison_after: None,
        blow_up: false,
    };
    let wrong = AdamState::new(&one_param(vec![0.0, 1.0]));
    let err = run(&mut toy, |_, _| vec![1.0], &[], &toy_cfg(), &RunSink::default(), Some(wrong)).unwrap_err();
    assert!(matches!(err, TrainError::Config(_)));
}
