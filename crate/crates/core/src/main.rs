use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lml::config::ExperimentConfig;
use lml::error::{Error, Result};
use lml::io::{read_model, read_trace, write_json, write_model, write_trace};
use lml::pipeline::{
    draw_misalignment, run_align, run_bench, run_calibrate, run_replay, BENCH_SLOPE_LIMIT,
};
use lml::sim::ContactModel;

#[derive(Parser)]
#[command(
    name = "lml",
    version,
    about = "Online contact-force model learning with a quasi-static plug/socket simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a contact model from a simulated calibration run.
    Calibrate {
        /// Experiment configuration file (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the model, trace, and metrics.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the calibration seed (and offsets the sensor seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the number of calibration samples.
        #[arg(long)]
        steps: Option<usize>,
        /// Apply adaptive regularization every this many steps.
        #[arg(long)]
        regularize_interval: Option<usize>,
        /// Overrides the scene contact model (linear, piecewise_clearance).
        #[arg(long)]
        contact_model: Option<String>,
    },
    /// Run a scripted-then-controlled alignment episode with a stored model.
    Align {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model file produced by `calibrate`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Draws a misalignment scenario and reseeds the sensor.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the number of controlled steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Keep the scripted commands through the second phase.
        #[arg(long)]
        no_controller: bool,
        #[arg(long)]
        contact_model: Option<String>,
    },
    /// Time the estimator update across model sizes and audit that it stays
    /// free of factorizations.
    Bench {
        /// Comma-separated feature dimensions to sweep.
        #[arg(long, value_delimiter = ',', default_value = "19,190,1900")]
        sizes: Vec<usize>,
        /// Timing repetitions per size.
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Optional output directory for the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute predictions for a recorded trace with a stored model.
    Replay {
        /// Trace CSV produced by `calibrate` or `align`.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_file(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply_contact_model(cfg: &mut ExperimentConfig, flag: &Option<String>) -> Result<()> {
    if let Some(name) = flag {
        cfg.scene.contact_model = match name.as_str() {
            "linear" => ContactModel::Linear,
            "piecewise_clearance" => ContactModel::PiecewiseClearance,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown contact model {other:?} (expected linear or piecewise_clearance)"
                )))
            }
        };
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Calibrate {
            config,
            out,
            seed,
            steps,
            regularize_interval,
            contact_model,
        } => {
            let mut cfg = load_config(&config)?;
            apply_contact_model(&mut cfg, &contact_model)?;
            if let Some(s) = seed {
                cfg.calibration.seed = s;
                cfg.sensor_seed = s.wrapping_add(1);
            }
            let outcome = run_calibrate(&cfg, steps, regularize_interval)?;
            ensure_dir(&out)?;
            write_model(&out.join("model.txt"), &outcome.model)?;
            write_trace(&out.join("calibrate_trace.csv"), &outcome.trace)?;
            write_json(&out.join("calibrate_metrics.json"), &outcome.metrics)?;

            let m = &outcome.metrics;
            println!(
                "calibrated on {} samples (excitation condition {:.3e})",
                m.samples, m.excitation_condition
            );
            println!(
                "prediction rmse [N, N*m]: fx {:.3e} fy {:.3e} fz {:.3e} tx {:.3e} ty {:.3e} tz {:.3e}",
                m.rmse[0], m.rmse[1], m.rmse[2], m.rmse[3], m.rmse[4], m.rmse[5]
            );
            if let Some(err) = m.model_error_vs_truth {
                println!("model error vs scene truth (relative Frobenius): {err:.3e}");
            }
            if m.regularize_invocations > 0 {
                println!("adaptive regularization applied {} times", m.regularize_invocations);
            }
            Ok(())
        }
        Command::Align {
            config,
            model,
            out,
            seed,
            steps,
            no_controller,
            contact_model,
        } => {
            let mut cfg = load_config(&config)?;
            apply_contact_model(&mut cfg, &contact_model)?;
            if let Some(s) = steps {
                cfg.episode.control_steps = s;
            }
            if let Some(s) = seed {
                cfg.episode.seed = s;
                cfg.sensor_seed = s.wrapping_add(1);
                let (offset, rotation) = draw_misalignment(s);
                cfg.misalignment_offset = offset;
                cfg.misalignment_rotation = rotation;
                cfg.assemble_scene()?;
            }
            let model = read_model(&model)?;
            let outcome = run_align(&cfg, &model, !no_controller)?;
            ensure_dir(&out)?;
            write_trace(&out.join("align_trace.csv"), &outcome.trace)?;
            write_json(&out.join("align_metrics.json"), &outcome.metrics)?;

            let m = &outcome.metrics;
            println!(
                "hold-phase mean lateral force: {:.4} N; controlled tail: {:.4} N",
                m.hold_mean_lateral_force, m.controlled_mean_lateral_force
            );
            match m.reduction_ratio {
                Some(r) => println!("force reduction: {:.1}%", 100.0 * r),
                None => println!(
                    "force reduction: undefined (hold force below the {:.3} N noise floor)",
                    m.noise_floor
                ),
            }
            if m.constraint_clips > 0 {
                println!("constraint clips during the episode: {}", m.constraint_clips);
            }
            Ok(())
        }
        Command::Bench { sizes, reps, out } => {
            let report = run_bench(&sizes, reps)?;
            println!("size    steps/rep    median ns/step    factorizations");
            for (i, &n) in report.sizes.iter().enumerate() {
                println!(
                    "{:<8}{:<13}{:<18.1}{}",
                    n,
                    report.steps_per_repetition[i],
                    report.median_ns_per_step[i],
                    report.factorization_events[i]
                );
            }
            match report.log_log_slope {
                Some(slope) => println!("log-log slope: {slope:.3} (limit {BENCH_SLOPE_LIMIT})"),
                None => println!("log-log slope: n/a (single-point sweep)"),
            }
            if let Some(dir) = out {
                ensure_dir(&dir)?;
                write_json(&dir.join("bench.json"), &report)?;
            }
            if report.factorization_events.iter().any(|&e| e != 0) {
                return Err(Error::InternalInvariant(
                    "factorization events recorded inside the estimator update".into(),
                ));
            }
            if let Some(slope) = report.log_log_slope {
                if slope > BENCH_SLOPE_LIMIT {
                    return Err(Error::InternalInvariant(format!(
                        "benchmark slope {slope:.3} exceeds the {BENCH_SLOPE_LIMIT} limit"
                    )));
                }
            }
            Ok(())
        }
        Command::Replay { trace, model, out } => {
            let rows = read_trace(&trace)?;
            let model = read_model(&model)?;
            let (replayed, metrics) = run_replay(&rows, &model)?;
            ensure_dir(&out)?;
            write_trace(&out.join("replay.csv"), &replayed)?;
            write_json(&out.join("replay_metrics.json"), &metrics)?;
            println!(
                "replayed {} rows; rmse: fx {:.3e} fy {:.3e} fz {:.3e} tx {:.3e} ty {:.3e} tz {:.3e}",
                metrics.rows,
                metrics.rmse[0],
                metrics.rmse[1],
                metrics.rmse[2],
                metrics.rmse[3],
                metrics.rmse[4],
                metrics.rmse[5]
            );
            Ok(())
        }
    }
}
