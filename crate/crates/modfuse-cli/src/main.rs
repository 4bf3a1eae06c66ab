//! Experiment command line: teacher training, student co-training, the full
//! cross-validated protocol, hyperparameter sweeps, the ablation battery,
//! and gradient verification. Exit code 0 on success, otherwise the error's
//! category (2 usage, 3 numeric, 4 io/format, 5 undefined metric,
//! 6 data generation).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use modfuse::error::{Error, Result};
use modfuse::harness::{
    gradient_check, run_ablation, run_distill_fold, run_experiment, sweep, train_teacher,
    ExperimentConfig, MissingSpec, SweepParam,
};
use modfuse::model::Ablation;
use modfuse::report::MetricsReport;

#[derive(Debug, Parser)]
#[command(
    name = "modfuse",
    version,
    about = "Missing-modality fusion-distillation experiments on synthetic two-modality data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every training command. Each one overrides the
/// corresponding config value; the merged config is re-validated.
#[derive(Debug, Args)]
struct Common {
    /// Experiment config in TOML; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Run only this seed (replaces the config's seed list).
    #[arg(long)]
    seed: Option<u64>,

    /// Directory for reports and checkpoints (nothing is written without it).
    #[arg(long)]
    out_dir: Option<PathBuf>,

    /// Modality withheld from the student: fundus, oct, or none.
    #[arg(long)]
    missing: Option<String>,

    /// Intra-modality noise level in [0, 0.5].
    #[arg(long)]
    alpha: Option<f64>,

    /// Cross-validation fold count.
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a teacher on the complete clean view of one (seed, fold) cell.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Held-out fold index.
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Train a teacher, co-train a student under the configured missingness,
    /// and report the student's held-out metrics for one (seed, fold) cell.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Held-out fold index.
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Run the full cross-validated protocol over all configured seeds.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Run one experiment per value of a hyperparameter, sharing seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Hyperparameter to sweep: alpha, r, or tau.
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. --values 0.1,0.3,0.5.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Check analytic gradients of every loss term against central finite
    /// differences on a small random model.
    Gradcheck {
        /// Probe batch size.
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        fd_eps: f64,
        /// Probe seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest acceptable relative disagreement.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Run every architectural preset under the shared protocol and compare.
    Ablation {
        #[command(flatten)]
        common: Common,
    },
}

fn effective_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(missing) = &c.missing {
        cfg.missing = MissingSpec::parse(missing)?;
    }
    if let Some(alpha) = c.alpha {
        cfg.alpha = alpha;
    }
    if let Some(folds) = c.folds {
        cfg.folds = folds;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(report: &MetricsReport) -> Result<()> {
    println!("label {}", report.label);
    for (i, fold) in report.folds.iter().enumerate() {
        println!(
            "fold {i}: acc {:.4} auc {:.4} f1 {:.4} spec {:.4}",
            fold.acc, fold.auc, fold.f1, fold.spec
        );
    }
    let agg = report.aggregate()?;
    println!(
        "mean: acc {:.4}±{:.4} auc {:.4}±{:.4} f1 {:.4}±{:.4} spec {:.4}±{:.4}",
        agg.mean.acc, agg.std.acc, agg.mean.auc, agg.std.auc, agg.mean.f1, agg.std.f1,
        agg.mean.spec, agg.std.spec
    );
    Ok(())
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0] // validate() guarantees the list is non-empty
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher { common, fold } => {
            let cfg = effective_config(&common)?;
            let seed = first_seed(&cfg);
            let run = train_teacher(&cfg, seed, fold)?;
            println!(
                "teacher seed {seed} fold {fold}: {} train / {} test samples",
                run.train.len(),
                run.test.len()
            );
            for curve in &run.curves {
                if let Some(last) = curve.values.last() {
                    println!("final {} {last:.6}", curve.term);
                }
            }
            if let Some(dir) = &common.out_dir {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("teacher-s{seed}-f{fold}.bin"));
                let digest = run.model.save(&path)?;
                println!("checkpoint {} digest {digest:016x}", path.display());
            }
        }
        Command::Distill { common, fold } => {
            let cfg = effective_config(&common)?;
            let seed = first_seed(&cfg);
            let run = run_distill_fold(&cfg, seed, fold)?;
            println!(
                "student seed {seed} fold {fold}: acc {:.4} auc {:.4} f1 {:.4} spec {:.4}",
                run.metrics.acc, run.metrics.auc, run.metrics.f1, run.metrics.spec
            );
            if let Some(dir) = &common.out_dir {
                std::fs::create_dir_all(dir)?;
                for (name, model) in [("teacher", &run.teacher), ("student", &run.student)] {
                    let path = dir.join(format!("{name}-s{seed}-f{fold}.bin"));
                    let digest = model.save(&path)?;
                    println!("checkpoint {} digest {digest:016x}", path.display());
                }
            }
        }
        Command::Evaluate { common } => {
            let cfg = effective_config(&common)?;
            let report = run_experiment(&cfg, common.out_dir.as_deref())?;
            print_report(&report)?;
            if let Some(dir) = &common.out_dir {
                println!("reports written to {}", dir.display());
            }
        }
        Command::Sweep { common, param, values } => {
            let cfg = effective_config(&common)?;
            let param = SweepParam::parse(&param)?;
            let result = sweep(&cfg, param, &values, common.out_dir.as_deref())?;
            print!("{}", result.emit_table()?);
            let failed = result.cells.iter().filter(|c| c.outcome.is_err()).count();
            if failed > 0 {
                eprintln!("{failed} of {} cells failed; see the table", result.cells.len());
            }
        }
        Command::Gradcheck { batch, fd_eps, seed, tolerance } => {
            if !(tolerance.is_finite() && tolerance > 0.0) {
                return Err(Error::Param(format!("tolerance must be positive, got {tolerance}")));
            }
            let rows = gradient_check(batch, fd_eps, seed)?;
            let mut worst: Option<&str> = None;
            for row in &rows {
                let ok = row.max_rel < tolerance;
                println!(
                    "{} {:<16} max-rel {:.3e}",
                    if ok { "PASS" } else { "FAIL" },
                    row.term,
                    row.max_rel
                );
                if !ok {
                    worst = Some(&row.term);
                }
            }
            if let Some(term) = worst {
                return Err(Error::Numeric(format!(
                    "gradient check failed; worst offender is the {term} term"
                )));
            }
        }
        Command::Ablation { common } => {
            let cfg = effective_config(&common)?;
            let rows = run_ablation(&cfg, &Ablation::all(), common.out_dir.as_deref())?;
            println!("preset,experiment,acc_mean,acc_std,auc_mean,auc_std");
            for (preset, report) in &rows {
                let agg = report.aggregate()?;
                println!(
                    "{},{},{:.4},{:.4},{:.4},{:.4}",
                    preset.name(),
                    preset.roman(),
                    agg.mean.acc,
                    agg.std.acc,
                    agg.mean.auc,
                    agg.std.auc
                );
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.category());
    }
}
