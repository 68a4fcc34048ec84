//! Command-line driver for the RAML pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 a verification check failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use raml_core::mca::MetaActivation;
use raml_core::pipeline::{run_stage, RunConfig, Stage, StageOptions, StageOutcome};
use raml_core::toynet::ShapeKind;
use raml_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "raml", version, about = "Region-aware metric learning for open-world segmentation")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long, global = true)]
    checkpoints: Option<PathBuf>,
    /// Output directory for maps and metrics.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Maxlogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Activation {
    SoftmaxAll,
    Sigmoid,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    GenData {
        #[arg(long)]
        scenes: Option<usize>,
        /// Comma-separated known shapes.
        #[arg(long, value_delimiter = ',')]
        known: Option<Vec<String>>,
        /// Comma-separated novel shapes.
        #[arg(long, value_delimiter = ',')]
        novel: Option<Vec<String>>,
        #[arg(long)]
        seed: Option<u64>,
        /// Alias of the global --dataset.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the closed-set segmentation network.
    TrainClosed(TrainFlags),
    /// Train the projection head with circle loss and build prototypes.
    EmbedTrain {
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        margin: Option<f64>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Split test frames into candidate regions.
    Separate {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Score pixel anomalies and report AUROC, AUPR and FPR95.
    AnomalyScore {
        /// Also score a baseline for comparison.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Fine-tune meta channels and the naive fine-tune baseline.
    McaFinetune {
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, value_enum)]
        activation: Option<Activation>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Segment test frames with novel-class prototypes.
    Fewshot {
        #[arg(long)]
        theta_novel: Option<f64>,
        #[arg(long = "L")]
        l: Option<usize>,
    },
    /// Compute mIoU of the few-shot predictions or of a directory of label maps.
    Evaluate {
        #[arg(long)]
        pred_dir: Option<PathBuf>,
    },
    /// Verify every analytic gradient against finite differences.
    GradCheck {
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Run every stage in order.
    All {
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
}

fn parse_shapes(names: &[String]) -> Result<Vec<ShapeKind>, Error> {
    names.iter().map(|s| s.trim().parse()).collect()
}

fn apply_train(cfg: &mut raml_core::toynet::TrainConfig, f: &TrainFlags) {
    if let Some(v) = f.iters {
        cfg.iters = v;
    }
    if let Some(v) = f.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
}

/// Builds the run configuration and the stages to execute.
fn plan(cli: &Cli) -> Result<(RunConfig, Vec<Stage>, StageOptions), Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &cli.dataset {
        cfg.paths.dataset = p.clone();
    }
    if let Some(p) = &cli.checkpoints {
        cfg.paths.checkpoints = p.clone();
    }
    if let Some(p) = &cli.output {
        cfg.paths.output = p.clone();
    }
    let mut opts = StageOptions::default();
    let stages = match &cli.command {
        Command::GenData {
            scenes,
            known,
            novel,
            seed,
            out,
        } => {
            if let Some(v) = scenes {
                cfg.dataset.scenes = *v;
            }
            if let Some(v) = known {
                cfg.scene.known = parse_shapes(v)?;
            }
            if let Some(v) = novel {
                cfg.scene.novel = parse_shapes(v)?;
                cfg.fewshot.m = cfg.scene.novel.len();
            }
            if let Some(v) = seed {
                cfg.dataset.seed = *v;
            }
            if let Some(p) = out {
                cfg.paths.dataset = p.clone();
            }
            vec![Stage::GenData]
        }
        Command::TrainClosed(f) => {
            apply_train(&mut cfg.train, f);
            vec![Stage::TrainClosed]
        }
        Command::EmbedTrain { gamma, margin, train } => {
            if let Some(v) = gamma {
                cfg.circle.gamma = *v;
            }
            if let Some(v) = margin {
                cfg.circle.margin = *v;
            }
            if let Some(v) = train.iters {
                cfg.head_train.iters = v;
            }
            if let Some(v) = train.lr {
                cfg.head_train.sgd.lr0 = v;
            }
            if let Some(v) = train.seed {
                cfg.head_train.seed = v;
            }
            vec![Stage::EmbedTrain]
        }
        Command::Separate { alpha, beta } => {
            if let Some(v) = alpha {
                cfg.urs.alpha = *v;
            }
            if let Some(v) = beta {
                cfg.urs.beta = *v;
            }
            vec![Stage::Separate]
        }
        Command::AnomalyScore { baseline } => {
            opts.baseline_maxlogit = baseline.is_some();
            vec![Stage::AnomalyScore]
        }
        Command::McaFinetune {
            k,
            eta,
            activation,
            train,
        } => {
            if let Some(v) = k {
                cfg.mca.k = *v;
            }
            if let Some(v) = eta {
                cfg.mca.eta = *v;
            }
            if let Some(a) = activation {
                cfg.mca.activation = match a {
                    Activation::SoftmaxAll => MetaActivation::SoftmaxAll,
                    Activation::Sigmoid => MetaActivation::SigmoidPerChannel,
                };
            }
            apply_train(&mut cfg.mca_train, train);
            vec![Stage::McaFinetune]
        }
        Command::Fewshot { theta_novel, l } => {
            if let Some(v) = theta_novel {
                cfg.fewshot.theta_novel = *v;
            }
            if let Some(v) = l {
                cfg.fewshot.l = *v;
            }
            vec![Stage::Fewshot]
        }
        Command::Evaluate { pred_dir } => {
            opts.pred_dir = pred_dir.clone();
            vec![Stage::Evaluate]
        }
        Command::GradCheck { seeds } => {
            if let Some(v) = seeds {
                cfg.grad_check.seeds = *v;
            }
            vec![Stage::GradCheck]
        }
        Command::All { baseline } => {
            opts.baseline_maxlogit = baseline.is_some();
            Stage::ALL.to_vec()
        }
    };
    Ok((cfg, stages, opts))
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("RAML_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("RAML_THREADS must be a positive integer, got '{raw}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn report(outcome: &StageOutcome) {
    println!(
        "{}",
        serde_json::json!({"stage": outcome.stage.name(), "result": outcome.summary})
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    let (cfg, stages, opts) = match plan(&cli) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let mut check_failed = false;
    for stage in stages {
        match run_stage(&cfg, stage, &opts) {
            Ok(outcome) => {
                check_failed |= outcome.check_failed;
                report(&outcome);
            }
            Err(e) => {
                eprintln!("error: stage {stage}: {e}");
                return ExitCode::from(exit_code(&e));
            }
        }
    }
    if check_failed {
        log::error!("a verification check exceeded its tolerance");
        return ExitCode::from(EXIT_CHECK);
    }
    ExitCode::SUCCESS
}
