//! Pipeline CLI. Stages run over plain-file artifacts:
//! synth -> pretrain -> train [-> intervene] -> eval / recommend / ablate.
//!
//! Configuration comes from (in override order) the upstream checkpoint's
//! stored snapshot, an optional `--config key=value` file, and `--set`
//! flags. Every stage is deterministic for a fixed seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cadsi_core::config::RunConfig;
use cadsi_core::eval::AblationAxis;
use cadsi_core::pipeline::{
    cmd_ablate, cmd_eval, cmd_intervene, cmd_pretrain, cmd_recommend, cmd_synth, cmd_train,
    load_checkpoint_config, PipelineError,
};

#[derive(Parser)]
#[command(name = "cadsi", version, about = "Intent-disentangling recommender pipeline")]
struct Cli {
    /// Worker threads for intra-stage parallelism (falls back to
    /// CADSI_THREADS; stages are deterministic regardless of the value).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline override, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shortcut for --set seed=N.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic confounded dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 1: meta-path walks + skip-gram pretraining.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 2: disentangled ranking optimization (stage 3 too with --joint).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pretrain: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run the causal-intervention fine-tune in the same invocation.
        #[arg(long)]
        joint: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 3: backdoor-adjustment fine-tuning.
    Intervene {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rank all non-train items per user and write metrics.csv.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated K values, e.g. --k 20,40.
        #[arg(long)]
        k: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Top-N items for one user.
    Recommend {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sweep one hyperparameter: --axis k --values 1,2,4,8,16.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pretrain: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// One of: k, L, iterations_n, K.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        values: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Debug)]
enum CliError {
    Pipeline(PipelineError),
    Usage(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

/// Resolve the effective config: checkpoint snapshot (if any), then the
/// config file, then --set/--seed flags.
fn resolve_config(base_ckpt: Option<&Path>, args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match base_ckpt {
        Some(dir) if dir.join("hyperparams.txt").exists() => load_checkpoint_config(dir)?,
        _ => RunConfig::default(),
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        cfg.apply_file(&text, &path.display().to_string())
            .map_err(PipelineError::Config)?;
    }
    for set in &args.sets {
        let Some((key, value)) = set.split_once('=') else {
            return Err(CliError::Usage(format!("--set expects key=value, got `{set}`")));
        };
        cfg.set(key.trim(), value.trim()).map_err(PipelineError::Config)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_values(text: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad value `{v}` in --values")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    // honored for interface compatibility: every stage is single-process and
    // deterministic, so thread count never changes results
    let _threads = cli
        .threads
        .or_else(|| std::env::var("CADSI_THREADS").ok().and_then(|v| v.parse().ok()));

    match cli.command {
        Command::Synth { out, cfg } => {
            let cfg = resolve_config(None, &cfg)?;
            cmd_synth(&out, &cfg)?;
            println!("synth: wrote dataset to {}", out.display());
        }
        Command::Pretrain { data, out, cfg } => {
            let cfg = resolve_config(None, &cfg)?;
            cmd_pretrain(&data, &out, &cfg)?;
            println!("pretrain: wrote checkpoint to {}", out.display());
        }
        Command::Train {
            data,
            pretrain,
            out,
            joint,
            cfg,
        } => {
            let cfg = resolve_config(Some(&pretrain), &cfg)?;
            cmd_train(&data, &pretrain, &out, &cfg, joint)?;
            println!("train: wrote checkpoint to {}", out.display());
        }
        Command::Intervene {
            data,
            train,
            out,
            cfg,
        } => {
            let cfg = resolve_config(Some(&train), &cfg)?;
            cmd_intervene(&data, &train, &out, &cfg)?;
            println!("intervene: wrote checkpoint to {}", out.display());
        }
        Command::Eval {
            data,
            model,
            out,
            k,
            cfg,
        } => {
            let mut cfg = resolve_config(Some(&model), &cfg)?;
            if let Some(ks) = k {
                cfg.set("eval_ks", &ks).map_err(PipelineError::Config)?;
            }
            let report = cmd_eval(&data, &model, &out, &cfg)?;
            print!("{}", report.to_csv());
        }
        Command::Recommend {
            data,
            model,
            user,
            top,
            cfg,
        } => {
            let cfg = resolve_config(Some(&model), &cfg)?;
            let text = cmd_recommend(&data, &model, &user, top, &cfg)?;
            print!("{text}");
        }
        Command::Ablate {
            data,
            pretrain,
            out,
            axis,
            values,
            cfg,
        } => {
            let cfg = resolve_config(Some(&pretrain), &cfg)?;
            let axis = AblationAxis::parse(&axis)
                .ok_or_else(|| CliError::Usage(format!("unknown axis `{axis}`")))?;
            let values = parse_values(&values)?;
            let csv = cmd_ablate(&data, &pretrain, &out, axis, &values, &cfg)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Pipeline(e)) => {
            eprintln!("ERROR {}: {e}", e.code());
            ExitCode::FAILURE
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("ERROR usage: {msg}");
            ExitCode::FAILURE
        }
    }
}
