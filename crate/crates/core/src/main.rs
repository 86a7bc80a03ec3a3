use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod cli;

#[derive(Parser)]
#[command(name = "drape", version, about = "Train and run pose-conditioned garment models")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Obj,
    Bin,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Outfit {
    Default,
    Skirt,
    Bench,
    Tiny,
    Interpenetrating,
}

/// Model, body and garment files shared by most commands.
#[derive(clap::Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub body: PathBuf,
    #[arg(long)]
    pub garment: PathBuf,
    /// Load even if the checkpoint's garment or body hash differs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a pose model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's [output] dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume parameters and optimizer state from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Pose the outfit for every frame of a pose file.
    Infer {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "obj")]
        format: Format,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Also write the posed body per frame.
        #[arg(long)]
        export_body: bool,
    },
    /// Edge distortion and collision metrics over a pose file.
    Validate {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long)]
        poses: PathBuf,
        /// Metrics JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a shape/tightness resizer from a TOML config.
    ResizeTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Produce a resized outfit for one (beta, gamma).
    ResizeInfer {
        #[command(flatten)]
        m: ModelArgs,
        /// Comma-separated shape coefficients.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        beta: Vec<f64>,
        /// Comma-separated tightness pair.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        gamma: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        export_body: bool,
    },
    /// Inference throughput per batch size.
    Bench {
        #[command(flatten)]
        m: ModelArgs,
        /// Pose file; a seeded synthetic set is used when absent.
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,16")]
        batch: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeat: usize,
        /// Frames timed per repeat.
        #[arg(long, default_value_t = 256)]
        frames: usize,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Parameter summary of a checkpoint as JSON.
    Describe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        body: Option<PathBuf>,
        #[arg(long)]
        garment: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Flag poses that make the body intersect itself.
    ValidatePoses {
        #[arg(long)]
        body: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the procedural body, an outfit, a pose pool and configs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "default")]
        outfit: Outfit,
        /// Poses in the raw pool.
        #[arg(long, default_value_t = 20000)]
        pool: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let invocation: Vec<String> = std::env::args().collect();
    let res = match args.command {
        Command::Train { config, out, resume } => cli::train(&config, out, resume, &invocation),
        Command::Infer {
            m,
            poses,
            out,
            format,
            batch,
            export_body,
        } => cli::infer(&m, &poses, &out, format, batch, export_body, &invocation),
        Command::Validate { m, poses, out } => cli::validate(&m, &poses, out, &invocation),
        Command::ResizeTrain { config, out } => cli::resize_train(&config, out, &invocation),
        Command::ResizeInfer {
            m,
            beta,
            gamma,
            out,
            export_body,
        } => cli::resize_infer(&m, beta, gamma, &out, export_body, &invocation),
        Command::Bench {
            m,
            poses,
            batch,
            repeat,
            frames,
            out,
            json,
        } => cli::bench(&m, poses, &batch, repeat, frames, out, json, &invocation),
        Command::Describe {
            model,
            body,
            garment,
            force,
        } => cli::describe(&model, body, garment, force),
        Command::ValidatePoses { body, poses, out } => {
            cli::validate_poses(&body, &poses, out, &invocation)
        }
        Command::Synth {
            out,
            outfit,
            pool,
            seed,
        } => cli::synth(&out, outfit, pool, seed, &invocation),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
