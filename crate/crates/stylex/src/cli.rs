//! Command-line entry point: staged subcommands over one config file.
//!
//! Exit codes are a stable contract: 0 success, 1 internal error,
//! 2 usage/config error, 3 staging error (a prerequisite stage has not
//! run).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::cl::{train_cl, FrozenExtractor};
use crate::config::RunConfig;
use crate::cvae::{train_cvae, ConditionSource};
use crate::datasets::store::{
    build_dataset, ingest_mnist, load_split, read_manifest, DatasetBuildConfig, Split,
};
use crate::error::{Result, StylexError};
use crate::eval::{
    run_da_removal, run_interp, run_neighbors, run_probe, run_style_transfer, EvalContext,
    Experiment,
};
use crate::mi_sanity::{estimate_mi, Estimator, GaussianPairSpec};
use crate::rng::derive_rng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_STAGING: i32 = 3;

#[derive(Parser)]
#[command(name = "stylex", version, about = "Style feature extraction pipeline")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset described in the config (synthetic glyphs or
    /// MNIST IDX ingestion)
    GenerateData {
        #[arg(short, long)]
        config: PathBuf,
        /// Overwrite existing data
        #[arg(long)]
        force: bool,
    },
    /// Stage 1: contrastive pretraining of the content extractor
    TrainCl {
        #[arg(short, long)]
        config: PathBuf,
        /// Resume from a run directory holding cl/state.ckpt
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: adversarial CVAE training against the frozen extractor
    TrainCvae {
        #[arg(short, long)]
        config: PathBuf,
        /// Resume from a run directory holding cvae/state.ckpt
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Conditioning source: "cl" or "supervised"
        #[arg(long)]
        condition: Option<String>,
    },
    /// Emit figure grids and probe reports from trained checkpoints
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        /// Subset of experiments: da_removal interp style_transfer
        /// neighbors probe (default: all)
        #[arg(long, num_args = 1..)]
        experiments: Vec<String>,
    },
    /// Standalone Gaussian sanity check of the MI estimators
    MiSanity {
        #[arg(short, long)]
        config: PathBuf,
    },
}

/// Exclusive-run guard: one command per output directory at a time.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(output_dir: &Path) -> Result<LockGuard> {
        fs::create_dir_all(output_dir).map_err(|e| StylexError::io(output_dir, e))?;
        let path = output_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = write!(f, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(StylexError::Config(format!(
                    "output dir is locked by another command ({}); remove it if stale",
                    path.display()
                )))
            }
            Err(e) => Err(StylexError::io(&path, e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn exit_code_for(err: &StylexError) -> i32 {
    match err {
        StylexError::Config(_) | StylexError::Contract(_) | StylexError::Format { .. } => {
            EXIT_USAGE
        }
        StylexError::Staging(_) => EXIT_STAGING,
        _ => EXIT_INTERNAL,
    }
}

fn cmd_generate_data(config_path: &Path, force: bool) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let _lock = LockGuard::acquire(&config.output_dir)?;
    config.write_effective()?;
    let data_dir = config.data_dir();
    if data_dir.join("manifest.json").exists() && !force {
        return Err(StylexError::Config(format!(
            "dataset already exists at {}; pass --force to regenerate",
            data_dir.display()
        )));
    }
    match config.dataset.kind.as_str() {
        "synthetic" => {
            let build = DatasetBuildConfig {
                num_classes: config.dataset.num_classes,
                train_count: config.dataset.train_count,
                test_count: config.dataset.test_count,
                seed: config.seed,
                side: config.model.image_side,
            };
            let manifest = build_dataset(&build, &data_dir)?;
            println!(
                "generated synthetic dataset: {} train / {} test, {} classes",
                manifest.counts["train"], manifest.counts["test"], manifest.num_classes
            );
        }
        "mnist" => {
            let manifest = ingest_mnist(
                &config.dataset.mnist_train_images,
                &config.dataset.mnist_train_labels,
                &config.dataset.mnist_test_images,
                &config.dataset.mnist_test_labels,
                &data_dir,
            )?;
            println!(
                "ingested MNIST: {} train / {} test",
                manifest.counts["train"], manifest.counts["test"]
            );
        }
        other => {
            return Err(StylexError::Config(format!(
                "unknown dataset kind {other:?}"
            )))
        }
    }
    Ok(())
}

fn require_data(config: &RunConfig) -> Result<()> {
    let manifest = config.data_dir().join("manifest.json");
    if !manifest.exists() {
        return Err(StylexError::Staging(format!(
            "dataset missing: {} not found (run `stylex generate-data` first)",
            manifest.display()
        )));
    }
    Ok(())
}

fn cmd_train_cl(config_path: &Path, resume: Option<&Path>) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let _lock = LockGuard::acquire(&config.output_dir)?;
    config.write_effective()?;
    require_data(&config)?;
    let train = load_split(&config.data_dir(), Split::Train)?;
    let artifacts = train_cl(&train, &config, resume)?;
    println!(
        "trained contrastive model for {} epochs; extractor at {}",
        artifacts.epochs_run,
        artifacts.extractor_path.display()
    );
    Ok(())
}

fn condition_source(config: &RunConfig, condition: Option<&str>) -> Result<ConditionSource> {
    let mode = condition.unwrap_or(&config.cvae.condition);
    match mode {
        "cl" => {
            let extractor_path = config.cl_dir().join(crate::cl::EXTRACTOR_FILE);
            if !extractor_path.exists() {
                return Err(StylexError::Staging(format!(
                    "stage-1 checkpoint missing: {} (run `stylex train-cl` first)",
                    extractor_path.display()
                )));
            }
            let extractor = FrozenExtractor::load(
                &extractor_path,
                &config.dims(),
                &config.model.arch,
                config.model.normalize_content,
            )?;
            Ok(ConditionSource::Extractor(extractor))
        }
        "supervised" => {
            let manifest = read_manifest(&config.data_dir())?;
            Ok(ConditionSource::Supervised {
                num_classes: manifest.num_classes,
            })
        }
        other => Err(StylexError::Config(format!(
            "condition must be \"cl\" or \"supervised\", got {other:?}"
        ))),
    }
}

fn cmd_train_cvae(
    config_path: &Path,
    resume: Option<&Path>,
    condition: Option<&str>,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let _lock = LockGuard::acquire(&config.output_dir)?;
    config.write_effective()?;
    require_data(&config)?;
    let source = condition_source(&config, condition)?;
    let train = load_split(&config.data_dir(), Split::Train)?;
    let artifacts = train_cvae(&train, &source, &config, resume)?;
    println!(
        "trained CVAE for {} epochs; checkpoints under {}",
        config.cvae.epochs,
        artifacts.state_path.parent().unwrap().display()
    );
    Ok(())
}

fn cmd_eval(config_path: &Path, experiments: &[String]) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let _lock = LockGuard::acquire(&config.output_dir)?;
    config.write_effective()?;
    require_data(&config)?;

    let selected: Vec<Experiment> = if experiments.is_empty() {
        Experiment::all()
    } else {
        experiments
            .iter()
            .map(|s| Experiment::from_str(s))
            .collect::<Result<_>>()?
    };

    let source = condition_source(&config, None)?;
    let cvae_dir = config.cvae_dir();
    let state = cvae_dir.join(crate::cvae::ENCODER_FILE);
    if !state.exists() {
        return Err(StylexError::Staging(format!(
            "stage-2 checkpoint missing: {} (run `stylex train-cvae` first)",
            state.display()
        )));
    }
    let mut dims = config.stage2_dims(read_manifest(&config.data_dir())?.num_classes);
    dims.d_content = source.d_content();
    let (encoder, decoder, _sn) =
        crate::cvae::load_components(&cvae_dir, &dims, &config.model.arch)?;

    let train = load_split(&config.data_dir(), Split::Train)?;
    let test = load_split(&config.data_dir(), Split::Test)?;
    let ctx = EvalContext {
        condition: &source,
        encoder: &encoder,
        decoder: &decoder,
        config: &config,
    };
    let out = config.eval_dir();
    for exp in &selected {
        match exp {
            Experiment::DaRemoval => {
                let p = run_da_removal(&ctx, &test, &out)?;
                println!("wrote {}", p.display());
            }
            Experiment::Interp => {
                let p = run_interp(&ctx, &test, &out)?;
                println!("wrote {}", p.display());
            }
            Experiment::StyleTransfer => {
                let p = run_style_transfer(&ctx, &test, &out)?;
                println!("wrote {}", p.display());
            }
            Experiment::Neighbors => {
                let p = run_neighbors(&ctx, &test, &out)?;
                println!("wrote {}", p.display());
            }
            Experiment::Probe => {
                let (report, p) = run_probe(&ctx, &train, &test, &out)?;
                println!(
                    "wrote {} (content acc from z_content {:.3}, from z_style {:.3})",
                    p.display(),
                    report.content_from_content_accuracy,
                    report.content_from_style_accuracy
                );
            }
        }
    }
    Ok(())
}

fn cmd_mi_sanity(config_path: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let _lock = LockGuard::acquire(&config.output_dir)?;
    let out = config.output_dir.join("mi_sanity");
    fs::create_dir_all(&out).map_err(|e| StylexError::io(&out, e))?;

    let battery = [
        (GaussianPairSpec::new(1, 0.0)?, Estimator::Jsd, 500usize),
        (GaussianPairSpec::new(4, 0.9)?, Estimator::Jsd, 500),
        (GaussianPairSpec::new(1, 0.9)?, Estimator::Kl, 500),
    ];
    for (spec, estimator, steps) in battery {
        let mut rng = derive_rng(config.seed, &format!("mi-sanity/{estimator:?}/{spec:?}"));
        let trace = estimate_mi(&spec, estimator, steps, &mut rng)?;
        let name = format!(
            "trace_{}_d{}_rho{}.json",
            match estimator {
                Estimator::Jsd => "jsd",
                Estimator::Kl => "kl",
            },
            spec.dimension,
            spec.rho
        );
        let path = out.join(name);
        fs::write(&path, serde_json::to_string_pretty(&trace)?)
            .map_err(|e| StylexError::io(&path, e))?;
        println!(
            "wrote {} (final estimate {:.4}, true MI {:.4})",
            path.display(),
            trace.final_estimate,
            trace.true_mi
        );
    }
    Ok(())
}

/// Parse arguments and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/usage itself; its exit code for usage
            // errors is 2, matching the contract
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::GenerateData { config, force } => cmd_generate_data(config, *force),
        Command::TrainCl { config, resume } => cmd_train_cl(config, resume.as_deref()),
        Command::TrainCvae {
            config,
            resume,
            condition,
        } => cmd_train_cvae(config, resume.as_deref(), condition.as_deref()),
        Command::Eval {
            config,
            experiments,
        } => cmd_eval(config, experiments),
        Command::MiSanity { config } => cmd_mi_sanity(config),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
