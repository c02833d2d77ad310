use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nsadm::pipeline::{
    cmd_evaluate, cmd_generate, cmd_infer, cmd_sweep, cmd_train, cmd_validate_stats, Condition, EvalSummary,
    ExperimentConfig, Method,
};
use nsadm::{par, Error};

/// Synthetic ISAC environment reconstruction with a sensing-aware
/// diffusion denoiser.
#[derive(Parser, Debug)]
#[command(name = "nsadm", version)]
struct Cli {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Global seed; overrides the config value.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    jobs: usize,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DatasetArg {
    /// Dataset directory [default: <output_dir>/dataset]
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckpointArg {
    /// Checkpoint directory [default: <output_dir>/model]
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenes, ground truth, statistic maps and degraded matrices.
    Generate {
        /// [default: <output_dir>/dataset]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train the denoiser on the training split.
    Train {
        #[command(flatten)]
        dataset: DatasetArg,
        /// [default: <output_dir>/model]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Reconstruct the test split with one method.
    Infer {
        #[arg(long, value_name = "NAME")]
        method: Method,
        #[command(flatten)]
        dataset: DatasetArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        /// Comma-separated transmit powers; default is the configured power.
        #[arg(long, value_name = "LIST", value_delimiter = ',', allow_negative_numbers = true)]
        power_dbm: Vec<f64>,
        /// [default: <output_dir>/predictions]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Evaluate {
        /// [default: <output_dir>/predictions]
        #[arg(long, value_name = "DIR")]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        dataset: DatasetArg,
        /// [default: <output_dir>/eval]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Monte Carlo validation of the range-variance and detection models.
    ValidateStats {
        /// Trials per point; overrides the config value.
        #[arg(long, value_name = "N")]
        trials: Option<usize>,
        /// [default: <output_dir>/stats]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run every method over the power, detection-ratio and variance sweeps.
    Sweep {
        /// Comma-separated methods [default: nsadm,mt,passthrough]
        #[arg(long, value_name = "NAME", value_delimiter = ',')]
        method: Vec<Method>,
        #[command(flatten)]
        dataset: DatasetArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        /// Overrides the configured power axis.
        #[arg(long, value_name = "LIST", value_delimiter = ',', allow_negative_numbers = true)]
        power_dbm: Vec<f64>,
        /// [default: <output_dir>/sweep]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } | Error::Json(_) => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

fn or_default(p: Option<PathBuf>, cfg: &ExperimentConfig, name: &str) -> PathBuf {
    p.unwrap_or_else(|| cfg.output_dir.join(name))
}

fn print_summary(s: &EvalSummary) {
    for a in &s.axes {
        println!("{}: {:?}", a.axis.name(), a.values);
        for c in &a.curves {
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
            println!("  {:<12} rmse_m     {}", c.method.name(), fmt(&c.rmse_m));
            println!("  {:<12} chamfer_m2 {}", "", fmt(&c.chamfer_m2));
        }
        for v in &a.verdicts {
            println!(
                "  {:<12} {:<10} {:?}: {}",
                v.method.name(),
                v.metric,
                v.trend,
                if v.holds { "holds" } else { "violated" }
            );
        }
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Generate { out } => {
            let out = or_default(out, &cfg, "dataset");
            let m = cmd_generate(&cfg, &out)?;
            println!(
                "wrote {} scenes to {} ({} inadmissible draws regenerated)",
                m.scenes.len(),
                out.display(),
                m.rejected
            );
        }
        Command::Train { dataset, out } => {
            let ds = or_default(dataset.dataset, &cfg, "dataset");
            let out = or_default(out, &cfg, "model");
            let s = cmd_train(&cfg, &ds, &out)?;
            println!(
                "trained {} parameters for {} steps on {} examples; loss {:.3e} -> {:.3e}; checkpoint in {}",
                s.n_params,
                s.steps,
                s.examples,
                s.first_loss,
                s.final_loss,
                out.display()
            );
        }
        Command::Infer {
            method,
            dataset,
            checkpoint,
            power_dbm,
            out,
        } => {
            let ds = or_default(dataset.dataset, &cfg, "dataset");
            let ck = or_default(checkpoint.checkpoint, &cfg, "model");
            let out = or_default(out, &cfg, "predictions");
            let powers = if power_dbm.is_empty() {
                vec![nsadm::sensing::watts_to_dbm(nsadm::pipeline::Dataset::open(&ds)?.config().sensing.p_s)]
            } else {
                power_dbm
            };
            let conds: Vec<Condition> = powers.into_iter().map(Condition::power).collect();
            let runs = cmd_infer(&cfg, &ds, Some(&ck), method, &conds, &out)?;
            for r in runs {
                println!("{} at {:+.1} dBm: {} scenes", r.method, r.power_dbm, r.scenes.len());
            }
        }
        Command::Evaluate {
            predictions,
            dataset,
            out,
        } => {
            let preds = or_default(predictions, &cfg, "predictions");
            let ds = or_default(dataset.dataset, &cfg, "dataset");
            let out = or_default(out, &cfg, "eval");
            print_summary(&cmd_evaluate(&preds, &ds, &out)?);
        }
        Command::ValidateStats { trials, out } => {
            if let Some(t) = trials {
                cfg.validation.trials = t;
            }
            let out = or_default(out, &cfg, "stats");
            let s = cmd_validate_stats(&cfg, &out)?;
            for p in &s.crb.points {
                println!("snr {:>8.1}  var/crb {:.3}", p.snr, p.ratio);
            }
            for p in &s.detection.points {
                println!("snr {:>8.3}  detp pred {:.4} emp {:.4}", p.snr, p.detp_pred, p.detp_emp);
            }
            if s.crb.insufficient_samples || s.detection.insufficient_samples {
                println!("insufficient samples");
            }
            println!("{}", if s.pass { "PASS" } else { "FAIL" });
            if !s.pass {
                return Ok(EXIT_VALIDATION);
            }
        }
        Command::Sweep {
            method,
            dataset,
            checkpoint,
            power_dbm,
            out,
        } => {
            if !power_dbm.is_empty() {
                cfg.sweep.power_dbm = power_dbm;
            }
            let methods = if method.is_empty() { Method::ALL.to_vec() } else { method };
            let ds = or_default(dataset.dataset, &cfg, "dataset");
            let ck = or_default(checkpoint.checkpoint, &cfg, "model");
            let out = or_default(out, &cfg, "sweep");
            print_summary(&cmd_sweep(&cfg, &ds, Some(&ck), &methods, &out)?);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let jobs = cli.jobs;
    match par::with_jobs(jobs, move || run(cli)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
