//! Command implementations behind the `drape` binary.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use drape::body::{
    load_body, load_poses, sample_pose_database, save_body, save_poses, synth_humanoid,
    synth_pose_pool, BodyError, BodyModel, HumanoidSpec, PoseRanges, SelfCollision,
};
use drape::energy::{EnergyError, EnergyWeights};
use drape::fixtures::{outfit, OutfitSpec};
use drape::format::{write_atomic, ContainerWriter};
use drape::mesh::obj_to_string;
use drape::model::{
    load_garment, network, save_garment, Checkpoint, CheckpointMode, GarmentTemplate, ModelError,
    PbnsModel,
};
use drape::resizer::{
    resize_forward, train_resizer, validate_resizer, ResizeModel, ResizeSample, TightnessRange,
};
use drape::rig::{skin, Pose, RigError};
use drape::trainer::{self, thread_pool, worker_count, RunSink, TrainError};

use crate::{Format, ModelArgs, Outfit};
pub use config::RunConfig;

/// `println!` that ignores a closed stdout (for example when piped into
/// `head`).
macro_rules! emit {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

/// Magic of the binary frame-sequence output.
pub const FRAMES_MAGIC: &[u8; 8] = b"DRAPEOUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(drape::tensor::TensorError::NonFinite { .. }) => {
                Self::Numeric(e.to_string())
            }
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<BodyError> for CliError {
    fn from(e: BodyError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<RigError> for CliError {
    fn from(e: RigError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<EnergyError> for CliError {
    fn from(e: EnergyError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            return Self::Numeric(format!("training aborted: {e}"));
        }
        match e {
            TrainError::Config(m) => Self::Config(m),
            _ => Self::Data(e.to_string()),
        }
    }
}

fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

/// What a command read and wrote, enough to rerun it.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    invocation: &'a [String],
    config: Value,
    inputs: &'a BTreeMap<String, String>,
    seed: Option<u64>,
    version: &'static str,
    workers: usize,
    wall_time: f64,
    outputs: Vec<String>,
}

struct Run<'a> {
    command: &'static str,
    invocation: &'a [String],
    inputs: BTreeMap<String, String>,
    start: Instant,
}

impl<'a> Run<'a> {
    fn new(command: &'static str, invocation: &'a [String]) -> Self {
        Self {
            command,
            invocation,
            inputs: BTreeMap::new(),
            start: Instant::now(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let h = file_hash(path)?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    fn garment(&mut self, path: &Path, g: &GarmentTemplate) -> Result<(), CliError> {
        self.input(path)?;
        self.inputs
            .insert(format!("{}#content", path.display()), g.content_hash());
        Ok(())
    }

    fn finish(
        &self,
        manifest: &Path,
        config: Value,
        seed: Option<u64>,
        outputs: Vec<PathBuf>,
    ) -> Result<(), CliError> {
        let m = RunManifest {
            command: self.command,
            invocation: self.invocation,
            config,
            inputs: &self.inputs,
            seed,
            version: env!("CARGO_PKG_VERSION"),
            workers: worker_count(),
            wall_time: self.start.elapsed().as_secs_f64(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        write_json(manifest, &to_json(&m))
    }
}

/// Manifest path for a single-file output: `<file>.manifest.json`.
fn manifest_for(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn read_body(path: &Path) -> Result<BodyModel, CliError> {
    load_body(path).map_err(|e| CliError::Data(format!("body {}: {e}", path.display())))
}

fn read_garment(path: &Path) -> Result<GarmentTemplate, CliError> {
    load_garment(path).map_err(|e| CliError::Data(format!("garment {}: {e}", path.display())))
}

fn read_poses(path: &Path, body: &BodyModel) -> Result<Vec<Pose>, CliError> {
    let poses = load_poses(path, Some(body.skeleton.len()))
        .map_err(|e| CliError::Data(format!("poses {}: {e}", path.display())))?;
    if poses.is_empty() {
        return Err(CliError::Data(format!("pose file {} has no frames", path.display())));
    }
    Ok(poses)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

/// Energy weights recorded in a checkpoint, or the defaults.
fn checkpoint_energy(ck: &Checkpoint) -> EnergyWeights {
    ck.meta
        .get("energy")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default()
}

struct Loaded<M> {
    model: M,
    body: BodyModel,
    checkpoint: Checkpoint,
}

fn load_pose_model(m: &ModelArgs, run: &mut Run) -> Result<Loaded<PbnsModel>, CliError> {
    let checkpoint = read_checkpoint(&m.model)?;
    let body = read_body(&m.body)?;
    let garment = read_garment(&m.garment)?;
    run.input(&m.model)?;
    run.input(&m.body)?;
    run.garment(&m.garment, &garment)?;
    let model = PbnsModel::from_checkpoint(&checkpoint, Arc::new(garment), &body, m.force)?;
    Ok(Loaded {
        model,
        body,
        checkpoint,
    })
}

fn load_resize_model(m: &ModelArgs, run: &mut Run) -> Result<Loaded<ResizeModel>, CliError> {
    let checkpoint = read_checkpoint(&m.model)?;
    let body = read_body(&m.body)?;
    let garment = read_garment(&m.garment)?;
    run.input(&m.model)?;
    run.input(&m.body)?;
    run.garment(&m.garment, &garment)?;
    let model = ResizeModel::from_checkpoint(&checkpoint, Arc::new(garment), &body, m.force)?;
    Ok(Loaded {
        model,
        body,
        checkpoint,
    })
}

fn run_meta(cfg: &RunConfig, epochs_run: usize) -> Value {
    json!({
        "train": cfg.train,
        "energy": cfg.energy,
        "model": cfg.model,
        "epochs_run": epochs_run,
    })
}

pub fn train(
    config: &Path,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    invocation: &[String],
) -> Result<(), CliError> {
    let mut run = Run::new("train", invocation);
    let cfg = RunConfig::load(config)?;
    run.input(config)?;
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    let body = read_body(&cfg.inputs.body)?;
    run.input(&cfg.inputs.body)?;
    let mut garment = read_garment(&cfg.inputs.garment)?;
    if let Some(t) = cfg.model.trainable_weights {
        garment = garment.with_trainable_weights(t);
    }
    run.garment(&cfg.inputs.garment, &garment)?;
    let poses_path = cfg
        .inputs
        .poses
        .clone()
        .ok_or_else(|| CliError::Config("[inputs] poses is required for train".into()))?;
    let pool = read_poses(&poses_path, &body)?;
    run.input(&poses_path)?;
    let s = &cfg.sampling;
    let db = sample_pose_database(&pool, s.count, s.d_min, s.train_fraction, cfg.train.seed);
    if db.train().is_empty() {
        return Err(CliError::Data("pose sampling produced no training poses".into()));
    }
    info!(
        "pose database: {} train, {} validation",
        db.train().len(),
        db.validation().len()
    );

    let garment = Arc::new(garment);
    let (mut model, optimizer) = match &resume {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            run.input(p)?;
            (
                PbnsModel::from_checkpoint(&ck, garment, &body, false)?,
                ck.optimizer,
            )
        }
        None => (
            PbnsModel::new(garment, &body, cfg.model.embedding, cfg.train.seed)?,
            None,
        ),
    };

    create_dir(&dir)?;
    let train_poses: Vec<Pose> = db.train().into_iter().cloned().collect();
    let val_poses: Vec<Pose> = db.validation().into_iter().cloned().collect();
    save_poses(&dir.join("train_poses.bin"), &train_poses)?;
    if !val_poses.is_empty() {
        save_poses(&dir.join("validation_poses.bin"), &val_poses)?;
    }
    let sink = RunSink {
        metrics_log: Some(dir.join("metrics.jsonl")),
        checkpoint_dir: (cfg.train.checkpoint_every > 0).then(|| dir.join("checkpoints")),
    };
    let summary = trainer::train(
        &mut model,
        &body,
        &db,
        cfg.energy.clone(),
        &cfg.train,
        &sink,
        optimizer,
    )?;
    let mut ck = model.to_checkpoint(Some(summary.optimizer.clone()));
    ck.meta = run_meta(&cfg, summary.log.len());
    let model_path = dir.join("model.ckpt");
    ck.save(&model_path)?;
    let mut outputs = vec![model_path, dir.join("metrics.jsonl"), dir.join("train_poses.bin")];
    let result = json!({
        "params_hash": model.params().hash(),
        "epochs": summary.log.len(),
        "steps": summary.optimizer.step,
        "validation": summary.validation,
    });
    if summary.validation.is_some() {
        write_json(&dir.join("validation.json"), &result)?;
        outputs.push(dir.join("validation_poses.bin"));
        outputs.push(dir.join("validation.json"));
    }
    run.finish(&dir.join("manifest.json"), to_json(&cfg), Some(cfg.train.seed), outputs)?;
    emit!("{}", serde_json::to_string_pretty(&result).expect("json"));
    Ok(())
}

fn frames_container(frames: &[Vec<[f64; 3]>], vertices: usize) -> Vec<u8> {
    let mut w = ContainerWriter::new(
        FRAMES_MAGIC,
        &json!({"version": 1, "frames": frames.len(), "vertices": vertices}),
    );
    w.f32s(frames.iter().flatten().flatten().copied());
    w.finish()
}

#[allow(clippy::too_many_arguments)]
pub fn infer(
    m: &ModelArgs,
    poses: &Path,
    out: &Path,
    format: Format,
    batch: usize,
    export_body: bool,
    invocation: &[String],
) -> Result<(), CliError> {
    if batch == 0 {
        return Err(CliError::Config("--batch must be at least 1".into()));
    }
    let mut run = Run::new("infer", invocation);
    let Loaded { model, body, .. } = load_pose_model(m, &mut run)?;
    let frames = read_poses(poses, &body)?;
    run.input(poses)?;
    let poses = frames;
    create_dir(out)?;
    let g = model.garment();
    let faces = g.mesh().faces();
    let weights = model.skin_weights()?;
    let pool = thread_pool(worker_count())?;
    let mut outputs = Vec::new();
    let mut frames_meta = Vec::with_capacity(poses.len());
    let mut all = Vec::new();
    let mut bodies = Vec::new();
    for (c, chunk) in poses.chunks(batch).enumerate() {
        let outs = pool.install(|| model.pose_outfits_with(chunk, &weights))?;
        for (k, (pose, outfit)) in chunk.iter().zip(outs).enumerate() {
            let i = c * batch + k;
            let posed_body = if export_body {
                Some(skin(body.mesh.positions(), pose, &body.weights, &body.skeleton)?)
            } else {
                None
            };
            match format {
                Format::Obj => {
                    let file = format!("frame_{i:05}.obj");
                    write_atomic(&out.join(&file), obj_to_string(&outfit, faces).as_bytes())?;
                    outputs.push(out.join(&file));
                    let body_file = match &posed_body {
                        Some(b) => {
                            let f = format!("body_{i:05}.obj");
                            write_atomic(&out.join(&f), obj_to_string(b, body.mesh.faces()).as_bytes())?;
                            outputs.push(out.join(&f));
                            Some(f)
                        }
                        None => None,
                    };
                    frames_meta.push(json!({"frame": i, "pose_index": i, "file": file, "body_file": body_file}));
                }
                Format::Bin => {
                    frames_meta.push(json!({"frame": i, "pose_index": i}));
                    all.push(outfit);
                    if let Some(b) = posed_body {
                        bodies.push(b);
                    }
                }
            }
        }
    }
    let mut mapping = json!({
        "format": match format { Format::Obj => "obj", Format::Bin => "bin" },
        "vertices": g.vertex_count(),
        "faces": faces.len(),
        "frames": frames_meta,
    });
    if let Format::Bin = format {
        let path = out.join("outfit.bin");
        write_atomic(&path, &frames_container(&all, g.vertex_count()))?;
        outputs.push(path);
        mapping["file"] = json!("outfit.bin");
        if export_body {
            let path = out.join("body.bin");
            write_atomic(&path, &frames_container(&bodies, body.mesh.vertex_count()))?;
            outputs.push(path);
            mapping["body_file"] = json!("body.bin");
        }
    }
    write_json(&out.join("frames.json"), &mapping)?;
    outputs.push(out.join("frames.json"));
    info!("wrote {} frames to {}", poses.len(), out.display());
    run.finish(
        &out.join("manifest.json"),
        json!({"batch": batch, "format": mapping["format"], "export_body": export_body, "force": m.force}),
        None,
        outputs,
    )
}

fn metrics_json(r: &drape::energy::EnergyReport) -> Value {
    json!({
        "edge_mm": r.edge_mm,
        "collision_ratio": r.collision_ratio,
        "per_layer_collision": r.per_layer_collision,
        "report": r,
    })
}

pub fn validate(
    m: &ModelArgs,
    poses: &Path,
    out: Option<PathBuf>,
    invocation: &[String],
) -> Result<(), CliError> {
    let mut run = Run::new("validate", invocation);
    let Loaded {
        model,
        body,
        checkpoint,
    } = load_pose_model(m, &mut run)?;
    let poses_v = read_poses(poses, &body)?;
    run.input(poses)?;
    let energy = checkpoint_energy(&checkpoint);
    let report = thread_pool(worker_count())?
        .install(|| trainer::validate(&model, &body, &poses_v, energy.clone()))?;
    let v = metrics_json(&report);
    emit!("{}", serde_json::to_string_pretty(&v).expect("json"));
    if let Some(path) = out {
        write_json(&path, &v)?;
        run.finish(&manifest_for(&path), json!({"energy": energy}), None, vec![path.clone()])?;
    }
    Ok(())
}

pub fn resize_train(config: &Path, out: Option<PathBuf>, invocation: &[String]) -> Result<(), CliError> {
    let mut run = Run::new("resize-train", invocation);
    let cfg = RunConfig::load(config)?;
    run.input(config)?;
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    let body = read_body(&cfg.inputs.body)?;
    run.input(&cfg.inputs.body)?;
    let garment = read_garment(&cfg.inputs.garment)?;
    run.garment(&cfg.inputs.garment, &garment)?;
    let range = cfg
        .resize
        .range
        .clone()
        .unwrap_or_else(TightnessRange::humanoid);
    range
        .validate(body.shape_count())
        .map_err(|e| CliError::Config(format!("[resize] {e}")))?;
    let mut model = ResizeModel::new(Arc::new(garment), &body, cfg.train.seed)?;
    let validation = range.samples(cfg.resize.validation_samples, cfg.train.seed.wrapping_add(1));
    create_dir(&dir)?;
    let sink = RunSink {
        metrics_log: Some(dir.join("metrics.jsonl")),
        checkpoint_dir: (cfg.train.checkpoint_every > 0).then(|| dir.join("checkpoints")),
    };
    let summary = train_resizer(
        &mut model,
        &body,
        &range,
        cfg.resize.samples_per_epoch,
        &validation,
        cfg.energy.clone(),
        &cfg.train,
        &sink,
        None,
    )?;
    let mut ck = model.to_checkpoint(Some(summary.optimizer.clone()));
    ck.meta = run_meta(&cfg, summary.log.len());
    ck.meta["range"] = to_json(&range);
    let model_path = dir.join("model.ckpt");
    ck.save(&model_path)?;
    let result = json!({
        "params_hash": model.params().hash(),
        "epochs": summary.log.len(),
        "steps": summary.optimizer.step,
        "validation": summary.validation,
    });
    write_json(&dir.join("validation.json"), &result)?;
    run.finish(
        &dir.join("manifest.json"),
        to_json(&cfg),
        Some(cfg.train.seed),
        vec![model_path, dir.join("metrics.jsonl"), dir.join("validation.json")],
    )?;
    emit!("{}", serde_json::to_string_pretty(&result).expect("json"));
    Ok(())
}

pub fn resize_infer(
    m: &ModelArgs,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    out: &Path,
    export_body: bool,
    invocation: &[String],
) -> Result<(), CliError> {
    let mut run = Run::new("resize-infer", invocation);
    let Loaded {
        model,
        body,
        checkpoint,
    } = load_resize_model(m, &mut run)?;
    if beta.len() != body.shape_count() {
        return Err(CliError::Config(format!(
            "--beta has {} values, the body has {} blendshapes",
            beta.len(),
            body.shape_count()
        )));
    }
    let gamma: [f64; 2] = gamma
        .try_into()
        .map_err(|g: Vec<f64>| CliError::Config(format!("--gamma needs 2 values, got {}", g.len())))?;
    let sample = ResizeSample { beta, gamma };
    let (outfit, shaped) = resize_forward(&model, &body, &sample)?;
    create_dir(out)?;
    let mut outputs = vec![out.join("outfit.obj")];
    write_atomic(&outputs[0], obj_to_string(&outfit, model.garment().mesh().faces()).as_bytes())?;
    if export_body {
        let p = out.join("body.obj");
        write_atomic(&p, obj_to_string(&shaped, body.mesh.faces()).as_bytes())?;
        outputs.push(p);
    }
    let energy = checkpoint_energy(&checkpoint);
    let report = validate_resizer(&model, &body, std::slice::from_ref(&sample), energy)?;
    let v = metrics_json(&report);
    write_json(&out.join("metrics.json"), &v)?;
    outputs.push(out.join("metrics.json"));
    emit!("{}", serde_json::to_string_pretty(&v).expect("json"));
    run.finish(&out.join("manifest.json"), to_json(&sample), None, outputs)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[allow(clippy::too_many_arguments)]
pub fn bench(
    m: &ModelArgs,
    poses: Option<PathBuf>,
    batches: &[usize],
    repeat: usize,
    frames: usize,
    out: Option<PathBuf>,
    as_json: bool,
    invocation: &[String],
) -> Result<(), CliError> {
    if batches.is_empty() || batches.contains(&0) {
        return Err(CliError::Config("--batch sizes must be at least 1".into()));
    }
    if repeat == 0 || frames == 0 {
        return Err(CliError::Config("--repeat and --frames must be at least 1".into()));
    }
    let mut run = Run::new("bench", invocation);
    let Loaded { model, body, .. } = load_pose_model(m, &mut run)?;
    let source = match &poses {
        Some(p) => {
            run.input(p)?;
            read_poses(p, &body)?
        }
        None => synth_pose_pool(&PoseRanges::humanoid(&body.skeleton), frames, 0),
    };
    let set: Vec<Pose> = source.iter().cycle().take(frames).cloned().collect();
    let weights = model.skin_weights()?;
    let workers = worker_count();
    let pool = thread_pool(workers)?;
    let mut results = Vec::new();
    for &b in batches {
        let n = model.garment().vertex_count();
        let mut buf = vec![[0.0; 3]; b.min(set.len()) * n];
        let mut pass = || -> Result<f64, CliError> {
            let t = Instant::now();
            for chunk in set.chunks(b) {
                let dst = &mut buf[..chunk.len() * n];
                pool.install(|| model.pose_outfits_into(chunk, &weights, dst))?;
                std::hint::black_box(&buf);
            }
            Ok(set.len() as f64 / t.elapsed().as_secs_f64())
        };
        pass()?;
        let runs: Vec<f64> = (0..repeat).map(|_| pass()).collect::<Result<_, _>>()?;
        let mut sorted = runs.clone();
        let med = median(&mut sorted);
        let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
        results.push(json!({
            "batch": b,
            "median": med,
            "min": lo,
            "max": hi,
            "spread": (hi - lo) / med,
            "runs": runs,
        }));
    }
    let g = model.garment();
    let report = json!({
        "unit": "poses/s",
        "vertices": g.vertex_count(),
        "faces": g.mesh().face_count(),
        "frames": frames,
        "repeat": repeat,
        "workers": workers,
        "results": results,
    });
    if as_json {
        emit!("{}", serde_json::to_string_pretty(&report).expect("json"));
    } else {
        emit!(
            "{} vertices, {} faces, {} frames x {} repeats, {} workers",
            g.vertex_count(),
            g.mesh().face_count(),
            frames,
            repeat,
            workers
        );
        emit!("{:>6} {:>14} {:>12} {:>12} {:>8}", "batch", "median pose/s", "min", "max", "spread");
        for r in &results {
            emit!(
                "{:>6} {:>14.1} {:>12.1} {:>12.1} {:>7.1}%",
                r["batch"],
                r["median"].as_f64().unwrap_or(0.0),
                r["min"].as_f64().unwrap_or(0.0),
                r["max"].as_f64().unwrap_or(0.0),
                100.0 * r["spread"].as_f64().unwrap_or(0.0)
            );
        }
    }
    if let Some(path) = out {
        write_json(&path, &report)?;
        run.finish(
            &manifest_for(&path),
            json!({"batch": batches, "repeat": repeat, "frames": frames}),
            None,
            vec![path.clone()],
        )?;
    }
    Ok(())
}

pub fn describe(
    model: &Path,
    body: Option<PathBuf>,
    garment: Option<PathBuf>,
    force: bool,
) -> Result<(), CliError> {
    let ck = read_checkpoint(model)?;
    let v = match (body, garment) {
        (Some(b), Some(g)) => {
            let body = read_body(&b)?;
            let garment = Arc::new(read_garment(&g)?);
            match ck.mode {
                CheckpointMode::Pose => PbnsModel::from_checkpoint(&ck, garment, &body, force)?.describe(),
                CheckpointMode::Resize => ResizeModel::from_checkpoint(&ck, garment, &body, force)?.describe(),
            }
        }
        (None, None) => {
            let mut d = network::describe(&ck.network, &ck.params);
            d["mode"] = json!(ck.mode.to_string());
            d["garment_hash"] = json!(ck.garment_hash);
            d["body_hash"] = json!(ck.body_hash);
            d
        }
        _ => {
            return Err(CliError::Config(
                "--body and --garment must be given together".into(),
            ))
        }
    };
    let mut v = v;
    v["optimizer_step"] = json!(ck.optimizer.as_ref().map(|o| o.step));
    v["params_hash"] = json!(ck.params.hash());
    emit!("{}", serde_json::to_string_pretty(&v).expect("json"));
    Ok(())
}

pub fn validate_poses(
    body: &Path,
    poses: &Path,
    out: Option<PathBuf>,
    invocation: &[String],
) -> Result<(), CliError> {
    let mut run = Run::new("validate-poses", invocation);
    let b = read_body(body)?;
    run.input(body)?;
    let frames = read_poses(poses, &b)?;
    run.input(poses)?;
    let checker = SelfCollision::new(&b.mesh);
    let pool = thread_pool(worker_count())?;
    let hits: Vec<Result<usize, CliError>> = pool.install(|| {
        frames
            .par_iter()
            .map(|p| {
                let posed = skin(b.mesh.positions(), p, &b.weights, &b.skeleton)?;
                Ok(checker.check(&posed).len())
            })
            .collect()
    });
    let mut invalid = Vec::new();
    for (i, h) in hits.into_iter().enumerate() {
        let h = h?;
        if h > 0 {
            invalid.push(json!({"frame": i, "vertices": h}));
        }
    }
    if !invalid.is_empty() {
        warn!("{} of {} poses self-intersect", invalid.len(), frames.len());
    }
    let v = json!({
        "frames": frames.len(),
        "valid": frames.len() - invalid.len(),
        "invalid": invalid,
        "radius": checker.radius(),
    });
    emit!("{}", serde_json::to_string_pretty(&v).expect("json"));
    if let Some(path) = out {
        write_json(&path, &v)?;
        run.finish(&manifest_for(&path), Value::Null, None, vec![path.clone()])?;
    }
    Ok(())
}

const TRAIN_TOML: &str = r#"[inputs]
body = "body.bin"
garment = "garment.json"
poses = "poses.bin"

[sampling]
count = 3000
d_min = 0.5
train_fraction = 0.85

[model]
embedding = "mlp"

[train]
batch = 16
epochs = 30
lr = 0.001
seed = 0

[output]
dir = "run"
"#;

const RESIZE_TOML: &str = r#"[inputs]
body = "body.bin"
garment = "garment.json"

[train]
batch = 16
epochs = 30
lr = 0.001
seed = 0

[resize]
samples_per_epoch = 512
validation_samples = 64

[resize.range]
beta = [[-2.0, 2.0], [0.0, 1.5]]
gamma = [[-1.0, 1.0], [-0.5, 0.5]]

[output]
dir = "resize-run"
"#;

pub fn synth(
    out: &Path,
    which: Outfit,
    pool: usize,
    seed: u64,
    invocation: &[String],
) -> Result<(), CliError> {
    let run = Run::new("synth", invocation);
    create_dir(out)?;
    let body = synth_humanoid(&HumanoidSpec::default())?;
    let spec = match which {
        Outfit::Default => OutfitSpec::default(),
        Outfit::Skirt => OutfitSpec::skirt(),
        Outfit::Bench => OutfitSpec::bench(),
        Outfit::Tiny => OutfitSpec::tiny(),
        Outfit::Interpenetrating => OutfitSpec::interpenetrating(),
    };
    let garment = outfit(&spec)?;
    let poses = synth_pose_pool(&PoseRanges::humanoid(&body.skeleton), pool, seed);
    let paths = [
        out.join("body.bin"),
        out.join("garment.json"),
        out.join("garment.obj"),
        out.join("poses.bin"),
        out.join("train.toml"),
        out.join("resize.toml"),
    ];
    save_body(&paths[0], &body)?;
    save_garment(&paths[1], &garment)?;
    save_poses(&paths[3], &poses)?;
    write_atomic(&paths[4], TRAIN_TOML.as_bytes())?;
    write_atomic(&paths[5], RESIZE_TOML.as_bytes())?;
    emit!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "body_vertices": body.mesh.vertex_count(),
            "garment_vertices": garment.vertex_count(),
            "garment_faces": garment.mesh().face_count(),
            "poses": poses.len(),
            "dir": out.display().to_string(),
        }))
        .expect("json")
    );
    run.finish(
        &out.join("manifest.json"),
        json!({"outfit": spec.name, "pool": pool}),
        Some(seed),
        paths.to_vec(),
    )
}
