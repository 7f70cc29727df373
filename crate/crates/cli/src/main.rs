//! `slr`: train, decompose, compress and inspect sparse-plus-low-rank models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slr_core::checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, CheckpointError};
use slr_core::harness::{
    ablation_grid, deployment_curve, run_training, write_csv, AblationAxes, ConfigError, HarnessError, RunConfig,
};
use slr_core::hpa::{apply_plan, kappa_sweep, make_plan, removable_counts, HpaError};
use slr_core::model::{evaluate, Batch, Model, ModelError, WeightSource};
use slr_core::rpca::{rpca_profile, RpcaConfig, REPORT_GAMMA};
use thiserror::Error;

/// Environment variable that overrides the output directory of `train`.
const OUTPUT_DIR_ENV: &str = "SLR_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "slr", version, about = "Sparse-plus-low-rank training and compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config and the SLR_OUTPUT_DIR variable.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Robust PCA profile of every block's dense weight.
    Decompose {
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
    },
    /// Truncate the surrogate to a parameter budget and save the result.
    Compress {
        #[arg(long)]
        budget: u64,
        #[arg(long, default_value_t = 0.5)]
        kappa: f64,
        input: PathBuf,
        output: PathBuf,
    },
    /// Evaluate every (budget, kappa) pair.
    SweepKappa {
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
        kappas: Vec<f64>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Grid of training runs over controller steps and the rho constant.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        delta_alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        delta_beta: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        rho_constant: Vec<f64>,
        /// Write the grid as CSV here instead of stdout JSON.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Loss against parameter count at budgets given as fractions of C_L+C_S.
    Curve {
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9])]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 0.5)]
        kappa: f64,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate a checkpoint on held-out data.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Weights::Surrogate)]
        weights: Weights,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Print the manifest and per-block structure.
    Inspect { checkpoint: PathBuf },
}

#[derive(Args)]
struct DataArgs {
    /// Run config supplying data seed and eval size; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weights {
    X,
    Surrogate,
    Compressed,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("budget: {0}")]
    Hpa(#[from] HpaError),
    #[error("run: {0}")]
    Harness(#[from] HarnessError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_)
            | CliError::Config(_)
            | CliError::Hpa(HpaError::Budget { .. } | HpaError::Kappa(_))
            | CliError::Checkpoint(CheckpointError::Io { .. }) => 2,
            _ => 1,
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn data_config(args: &DataArgs, model: &Model) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.model = model.config.clone();
    Ok(cfg)
}

fn eval_batches(args: &DataArgs, model: &Model) -> Result<Vec<Batch>, CliError> {
    Ok(data_config(args, model)?.eval_batches()?)
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such file `{}`", path.display())))
    }
}

fn train(config: &Path, output_dir: Option<PathBuf>) -> Result<(), CliError> {
    require_file(config)?;
    let mut cfg = RunConfig::load(config)?;
    if let Some(dir) = output_dir.or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from)) {
        cfg.output_dir = Some(dir);
    }
    let out = run_training(&cfg)?;
    let last = out.metrics.last().expect("at least one cycle");
    print_json(last)?;
    if let Some(dir) = &cfg.output_dir {
        let ckpt = Checkpoint {
            model: out.model,
            adam: Some(out.adam),
            compressed: None,
        };
        save_checkpoint(&ckpt, &dir.join("final.slr"))?;
    }
    Ok(())
}

fn decompose(path: &Path, format: Format, lambda: Option<f64>, max_iters: usize) -> Result<(), CliError> {
    let ckpt = load_checkpoint(path)?;
    let cfg = RpcaConfig {
        lambda,
        max_iters,
        ..RpcaConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let profile = rpca_profile(&ckpt.model, &cfg);
    match format {
        Format::Csv => print!("{}", profile.to_csv()),
        Format::Json => println!("{}", profile.to_json()),
    }
    Ok(())
}

fn compress(budget: u64, kappa: f64, input: &Path, output: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(input)?;
    let plan = make_plan(&ckpt.model, budget, kappa)?;
    let compressed = apply_plan(&ckpt.model, &plan)?;
    let out = Checkpoint {
        compressed: Some(compressed),
        ..ckpt
    };
    save_checkpoint(&out, output)?;
    println!("{}", plan.to_json());
    Ok(())
}

fn eval(path: &Path, weights: Weights, data: &DataArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(path)?;
    let batches = eval_batches(data, &ckpt.model)?;
    let source = match weights {
        Weights::X => WeightSource::DenseX,
        Weights::Surrogate => WeightSource::Surrogate,
        Weights::Compressed => WeightSource::Compressed(
            ckpt.compressed
                .as_ref()
                .ok_or_else(|| CliError::Usage("checkpoint has no compressed weights".into()))?,
        ),
    };
    print_json(&evaluate(&ckpt.model, &batches, source)?)
}

fn inspect(path: &Path) -> Result<(), CliError> {
    let manifest = read_manifest(path)?;
    let ckpt = load_checkpoint(path)?;
    print_json(&manifest)?;
    println!("block\trows\tcols\trank_ratio\tdensity\talpha\tbeta\trho");
    for b in &ckpt.model.blocks {
        let rank = match b.rank_ratio(REPORT_GAMMA) {
            Ok(r) => format!("{r:.4}"),
            Err(_) => "-".into(),
        };
        let (n, m) = b.shape();
        println!(
            "{}\t{n}\t{m}\t{rank}\t{:.4}\t{:.6}\t{:.6}\t{:.6}",
            b.name,
            b.density(),
            b.alpha,
            b.beta,
            b.rho
        );
    }
    if let Ok((c_l, c_s)) = removable_counts(&ckpt.model) {
        println!("removable: C_L={c_l} C_S={c_s}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, output_dir } => train(&config, output_dir),
        Command::Decompose {
            checkpoint,
            format,
            lambda,
            max_iters,
        } => decompose(&checkpoint, format, lambda, max_iters),
        Command::Compress {
            budget,
            kappa,
            input,
            output,
        } => compress(budget, kappa, &input, &output),
        Command::SweepKappa {
            checkpoint,
            budgets,
            kappas,
            data,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            if let Some(k) = kappas.iter().find(|k| !(0.0..=1.0).contains(*k)) {
                return Err(HpaError::Kappa(*k).into());
            }
            let batches = eval_batches(&data, &ckpt.model)?;
            print_json(&kappa_sweep(&ckpt.model, &budgets, &kappas, &batches))
        }
        Command::Ablate {
            config,
            delta_alpha,
            delta_beta,
            rho_constant,
            csv,
        } => {
            require_file(&config)?;
            let base = RunConfig::load(&config)?;
            let axes = AblationAxes {
                delta_alpha,
                delta_beta,
                rho_constant,
            };
            let rows = ablation_grid(&base, &axes)?;
            match csv {
                Some(path) => Ok(write_csv(&path, &rows)?),
                None => print_json(&rows),
            }
        }
        Command::Curve {
            checkpoint,
            fractions,
            kappa,
            data,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
                return Err(CliError::Usage(format!("fraction {f} outside [0, 1]")));
            }
            let (c_l, c_s) = removable_counts(&ckpt.model)?;
            let budgets: Vec<u64> = fractions
                .iter()
                .map(|f| (f * (c_l + c_s) as f64).round() as u64)
                .collect();
            let batches = eval_batches(&data, &ckpt.model)?;
            print_json(&deployment_curve(&ckpt.model, &budgets, kappa, &batches))
        }
        Command::Eval {
            checkpoint,
            weights,
            data,
        } => eval(&checkpoint, weights, &data),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: usage: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}
