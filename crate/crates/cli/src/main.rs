//! `glioma25d` — orchestrates the whole study from JSON configs: cohort
//! generation, preprocessing, two-stage training, multi-view inference,
//! evaluation, paired comparisons, ablation grids, and survival analysis.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use glioma25d::cohort::{Split, Task};
use glioma25d::error::{CoreError, Result};
use glioma25d::net::FusionMode;

use glioma25d_cli::commands::{self, AblationAxis};
use glioma25d_cli::config::{load_json, ExperimentConfig, GenerateConfig, View};

#[derive(Parser)]
#[command(name = "glioma25d", about = "2.5D glioma molecular subtyping study driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort.
    Generate {
        /// Generation config JSON; omit to use built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output cohort directory (overrides config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of cases (overrides config).
        #[arg(long)]
        n: Option<usize>,
        /// Master seed (overrides config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Normalize a cohort's intensities into a new cohort directory.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the planar models of one experiment.
    Train {
        /// Experiment config JSON; omit to use built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Preprocessed cohort directory (overrides config).
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Run directory (overrides config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Task: IDH or 1p19q (overrides config).
        #[arg(long)]
        task: Option<String>,
        /// Fusion scheme: none, age, loc, age+loc (overrides config).
        #[arg(long)]
        fusion: Option<String>,
        /// View: axial, coronal, sagittal, 2.5D (overrides config).
        #[arg(long)]
        view: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Epoch scale for desk-sized runs (overrides config).
        #[arg(long)]
        epoch_scale: Option<f64>,
        /// Random-search budget; 0 disables the search (overrides config).
        #[arg(long)]
        search_budget: Option<usize>,
    },
    /// Run inference for one split of a trained run.
    Predict {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "internal")]
        split: String,
    },
    /// Compute metrics, curves, and a summary for one split.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "internal")]
        split: String,
    },
    /// Paired statistical comparison of two runs (McNemar / GSS / DeLong).
    Compare {
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
        #[arg(long, default_value = "internal")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a fusion-scheme or view ablation grid and tabulate it.
    Ablate {
        /// Base experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Axis to sweep: "fusion" or "view".
        #[arg(long, default_value = "fusion")]
        axis: String,
        /// Reference scheme the others are compared against.
        #[arg(long)]
        proposed: String,
        /// Splits to tabulate (repeatable).
        #[arg(long, default_values_t = vec!["internal".to_string()])]
        split: Vec<String>,
    },
    /// Kaplan-Meier curves and Cox fits across WHO 2016 subtypes.
    Survival {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combined human-readable report over evaluated runs.
    Report {
        /// Run directories (repeatable).
        #[arg(long, required = true)]
        run: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| CoreError::Config(format!("unknown split '{s}'")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, n, seed } => {
            let mut cfg = match config {
                Some(path) => load_json::<GenerateConfig>(&path)?,
                None => {
                    let out = out.clone().ok_or_else(|| {
                        CoreError::Config("--out is required without --config".into())
                    })?;
                    GenerateConfig::default_for(&out, n.unwrap_or(100), seed.unwrap_or(0))
                }
            };
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if let Some(n) = n {
                cfg.n_cases = n;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            commands::cmd_generate(&cfg)?;
            println!("cohort written to {}", cfg.output_dir.display());
        }
        Command::Preprocess { input, out } => {
            commands::cmd_preprocess(&input, &out)?;
            println!("preprocessed cohort written to {}", out.display());
        }
        Command::Train {
            config,
            cohort,
            out,
            task,
            fusion,
            view,
            seed,
            epoch_scale,
            search_budget,
        } => {
            let mut cfg = match config {
                Some(path) => load_json::<ExperimentConfig>(&path)?,
                None => {
                    let cohort = cohort.clone().ok_or_else(|| {
                        CoreError::Config("--cohort is required without --config".into())
                    })?;
                    let out = out.clone().ok_or_else(|| {
                        CoreError::Config("--out is required without --config".into())
                    })?;
                    let task = Task::from_str(task.as_deref().unwrap_or("IDH"))?;
                    ExperimentConfig::default_for(task, &cohort, &out, seed.unwrap_or(0))
                }
            };
            if let Some(cohort) = cohort {
                cfg.cohort_dir = cohort;
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if let Some(task) = task {
                cfg.task = Task::from_str(&task)?;
                cfg.model.input_channels = cfg.task.modalities().len();
            }
            if let Some(fusion) = fusion {
                cfg.fusion = FusionMode::from_str(&fusion)?;
            }
            if let Some(view) = view {
                cfg.view = View::from_str(&view)?;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(scale) = epoch_scale {
                cfg.schedule.epoch_scale = scale;
            }
            if let Some(budget) = search_budget {
                cfg.search_budget = budget;
            }
            commands::cmd_train(&cfg)?;
            println!("run written to {}", cfg.output_dir.display());
        }
        Command::Predict { run, split } => {
            let path = commands::cmd_predict(&run, parse_split(&split)?)?;
            println!("predictions written to {}", path.display());
        }
        Command::Evaluate { run, split } => {
            let eval = commands::cmd_evaluate(&run, parse_split(&split)?)?;
            println!(
                "AUROC {:.3} ({:.3}-{:.3}), AUPRC {:.3}, accuracy {:.3}, n={}",
                eval.report.auroc,
                eval.report.auroc_ci.0,
                eval.report.auroc_ci.1,
                eval.report.auprc,
                eval.report.accuracy,
                eval.report.n
            );
        }
        Command::Compare { run_a, run_b, split, out } => {
            commands::cmd_compare(&run_a, &run_b, parse_split(&split)?, &out)?;
            println!("comparison written to {}", out.display());
        }
        Command::Ablate { config, axis, proposed, split } => {
            let cfg = load_json::<ExperimentConfig>(&config)?;
            let axis = match axis.as_str() {
                "fusion" => AblationAxis::Fusion,
                "view" => AblationAxis::View,
                other => {
                    return Err(CoreError::Config(format!("unknown ablation axis '{other}'")))
                }
            };
            let splits = split.iter().map(|s| parse_split(s)).collect::<Result<Vec<_>>>()?;
            let tables = commands::cmd_ablate(&cfg, axis, &proposed, &splits)?;
            for t in tables {
                println!("ablation table written to {}", t.display());
            }
        }
        Command::Survival { cohort, out } => {
            commands::cmd_survival(&cohort, &out)?;
            println!("survival report written to {}", out.display());
        }
        Command::Report { run, out } => {
            commands::cmd_report(&run, &out)?;
            println!("report written to {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
