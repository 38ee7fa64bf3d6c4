use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use specpl_core::config::RunConfig;
use specpl_core::eval::{
    format_eval, granule_source_accuracy, split_base_novel, InferenceModel,
};
use specpl_core::latent_teacher::{generate_dataset, read_cache, write_cache};
use specpl_core::spectral_diag::{diagnose, format_report};
use specpl_core::trainer::{
    fit_with_validation, format_history, gradient_check, prepare_gradient_check, read_checkpoint,
    write_checkpoint, Checkpoint, TrainState,
};
use specpl_core::Error;

#[derive(Debug, Parser)]
#[command(name = "specpl", version, about = "Spectral prompt learning on synthetic latents")]
struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic latent cache.
    Gen {
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train on the base split of a cache and write a checkpoint.
    Train {
        #[arg(long, value_name = "PATH")]
        cache: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Base-to-novel evaluation of a checkpoint.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        cache: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Base/detail radial-spectrum overlap of a cache.
    Diag {
        #[arg(long, value_name = "PATH")]
        cache: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        bands: Option<usize>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Semantic bank inspection.
    Bank {
        #[command(subcommand)]
        action: BankCommand,
    },
    /// Finite-difference check of the training gradients.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

#[derive(Debug, Subcommand)]
enum BankCommand {
    /// Print the bank stored in a checkpoint.
    Dump {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    for assignment in &cli.set {
        cfg.set_assignment(assignment)?;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn io_failure(path: &Path, source: std::io::Error) -> Failure {
    Failure::Runtime(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn require(path: Option<PathBuf>, command: &str) -> Result<PathBuf, Failure> {
    path.ok_or_else(|| Failure::Usage(format!("`{command}` requires --checkpoint <PATH>")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Gen { out } => {
            let path = out.unwrap_or_else(|| cfg.cache.clone());
            let cache = generate_dataset(&cfg.dataset, cfg.samples_per_class())?;
            write_cache(&cache, &path)?;
            println!("wrote {} records to {}", cache.len(), path.display());
        }
        Command::Train { cache, out } => {
            let cache = read_cache(&cache.unwrap_or_else(|| cfg.cache.clone()))?;
            let split = split_base_novel(&cache, cfg.shots, cfg.val_per_class)?;
            let state = fit_with_validation(&split.train, Some(&split.validation), &cfg.train)?;
            let path = out.unwrap_or_else(|| cfg.checkpoint.clone());
            write_checkpoint(&Checkpoint::from_state(&state), &path)?;
            let history = format!("{}{}", cfg.resolved_header(), format_history(&state.history));
            write_text(&cfg.history, &history)?;
            let last = state.epoch_history.last();
            println!(
                "trained {} steps; final epoch total {}; checkpoint {}; history {}",
                state.step,
                last.map_or("NA".to_string(), |e| format!("{:.6}", e.total)),
                path.display(),
                cfg.history.display()
            );
        }
        Command::Eval {
            checkpoint,
            cache,
            out,
        } => {
            let ckpt_path = require(checkpoint, "eval")?;
            let ckpt = read_checkpoint(&ckpt_path)?;
            let cache = read_cache(&cache.unwrap_or_else(|| cfg.cache.clone()))?;
            let split = split_base_novel(&cache, cfg.shots, cfg.val_per_class)?;
            let model = InferenceModel::from_checkpoint(&ckpt, &split.novel_prototypes)?;
            let result = model.evaluate(&split)?;
            let state = TrainState::from_checkpoint(&ckpt)?;
            let feats = state.cache_features(&split.base_test)?;
            let gsrc = if ckpt.config.use_gf || ckpt.config.use_gcf {
                granule_source_accuracy(&state, &feats, cfg.granule_rounds, cfg.seed)?
            } else {
                None
            };
            let report = format!("{}{}", cfg.resolved_header(), format_eval(&result, gsrc));
            write_text(&out.unwrap_or_else(|| cfg.report.clone()), &report)?;
            print!("{}", format_eval(&result, gsrc));
        }
        Command::Diag {
            cache,
            k,
            bands,
            grid,
            out,
        } => {
            let mut cfg = cfg;
            cfg.diag_kernel = k.unwrap_or(cfg.diag_kernel);
            cfg.diag_bands = bands.unwrap_or(cfg.diag_bands);
            cfg.diag_grid = grid.unwrap_or(cfg.diag_grid);
            let cache = read_cache(&cache.unwrap_or_else(|| cfg.cache.clone()))?;
            let report = diagnose(
                &cache,
                cfg.diag_kernel,
                cfg.diag_bands,
                (cfg.diag_grid, cfg.diag_grid),
            )?;
            let text = format_report(&report);
            write_text(
                &out.unwrap_or_else(|| cfg.report.clone()),
                &format!("{}{}", cfg.resolved_header(), text),
            )?;
            print!("{text}");
        }
        Command::Bank {
            action: BankCommand::Dump { checkpoint },
        } => {
            let ckpt = read_checkpoint(&require(checkpoint, "bank dump")?)?;
            match ckpt.bank {
                Some(bank) => print!("{}", bank.dump()),
                None => {
                    return Err(Failure::Runtime(Error::State(
                        "checkpoint was trained without a bank".into(),
                    )))
                }
            }
        }
        Command::Gradcheck { step } => {
            let n = cfg.train.bank_size.div_ceil(cfg.dataset.num_classes.max(1)).max(1);
            let cache = generate_dataset(&cfg.dataset, n)?;
            let (state, batch) = prepare_gradient_check(&cache, &cfg.train)?;
            let report = gradient_check(&state, &batch, step)?;
            print!("{}", report.format());
            if report.max_rel_error() >= 1e-4 {
                return Err(Failure::Runtime(Error::State(format!(
                    "max relative error {:e} ≥ 1e-4",
                    report.max_rel_error()
                ))));
            }
        }
    }
    Ok(())
}

fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    main_with(std::env::args_os())
}
