//! Experiment pipelines behind the CLI subcommands: calibrate a model in
//! the simulator, run alignment episodes against it, replay traces through
//! a stored model, and benchmark the estimator across model sizes.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

use crate::audit::AuditScope;
use crate::config::ExperimentConfig;
use crate::controller::{alignment_episode, innovation_variance};
use crate::error::{Error, Result};
use crate::filter::{init_belief, predict_with_model, whiten, ModelBelief};
use crate::io::{ModelFile, TraceStep};
use crate::sim::{
    calibration_trajectory, excitation_condition_number, features_for, linear_model_matrix,
    plant_step, true_wrench, ContactModel, PlantState, SocketScene,
};
use crate::types::{ControlCommand, FeatureVector, NoiseSpec, Pose, FEATURE_DIM, WRENCH_DIM};

/// Start pose scripted against the nominal socket location: the tip sits at
/// world `(0, 0, -depth)` regardless of where the socket actually is.
pub fn nominal_start(scene: &SocketScene, depth: f64) -> Result<PlantState> {
    let tip_world = Vector3::new(0.0, 0.0, -depth);
    let pose = Pose::new(
        tip_world - nalgebra::Matrix3::identity() * scene.tip_offset,
        nalgebra::Matrix3::identity(),
    )?;
    Ok(PlantState::at_rest(pose))
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrateMetrics {
    pub samples: usize,
    pub excitation_condition: f64,
    /// Per-channel RMSE of the terminal model's predictions against the
    /// measured wrenches over the whole run: `[fx, fy, fz, tx, ty, tz]`.
    pub rmse: [f64; 6],
    /// Relative Frobenius error against the scene's exact model matrix;
    /// only meaningful for the linear contact model.
    pub model_error_vs_truth: Option<f64>,
    pub constraint_clips: u64,
    pub regularize_invocations: u64,
}

#[derive(Debug)]
pub struct CalibrateOutcome {
    pub model: ModelFile,
    pub trace: Vec<TraceStep>,
    pub metrics: CalibrateMetrics,
}

/// Runs the calibration trajectory through the plant, feeds every
/// measurement to the recursive estimator, and returns the terminal model
/// with the full trace.
pub fn run_calibrate(
    cfg: &ExperimentConfig,
    steps_override: Option<usize>,
    regularize_interval: Option<usize>,
) -> Result<CalibrateOutcome> {
    cfg.validate()?;
    let rate = cfg.calibration.rate_hz;
    let duration = match steps_override {
        Some(steps) => steps as f64 / rate,
        None => cfg.calibration.duration_s,
    };
    if duration <= 0.0 {
        return Err(Error::Excitation("calibration run has no samples".into()));
    }
    let commands = calibration_trajectory(
        duration,
        rate,
        cfg.calibration.amplitude_pos,
        cfg.calibration.amplitude_rot,
        cfg.calibration.seed,
    )?;
    let excitation_condition = excitation_condition_number(&commands, rate)?;

    let noise = cfg.noise_spec()?;
    let mut belief = init_belief(&noise)?;
    let mut sensor = cfg.sensor_model()?;
    let mut state = nominal_start(&cfg.scene, cfg.calibration.start_depth)?;
    let center = *state.pose.position();

    let adaptive = DVector::from_element(FEATURE_DIM, cfg.adaptive_weight);
    let mut regularize_invocations = 0u64;
    let mut constraint_clips = 0u64;
    let mut trace = Vec::with_capacity(commands.len());

    for (k, offset_cmd) in commands.iter().enumerate() {
        if let Some(interval) = regularize_interval {
            if interval > 0 && k > 0 && k % interval == 0 && cfg.adaptive_weight > 0.0 {
                belief.adaptive_regularize(&adaptive)?;
                regularize_invocations += 1;
            }
        }

        let cmd = ControlCommand::new(
            center + offset_cmd.desired_position,
            offset_cmd.rotation_correction,
        );
        let outcome = plant_step(&state, &cmd, &cfg.scene)?;
        state = outcome.state;
        if outcome.lateral_clipped || outcome.bottom_clipped {
            constraint_clips += 1;
        }

        let truth = true_wrench(&state, &cmd, &cfg.scene)?;
        let measured = sensor.measure(&truth);
        let features = features_for(&state, &cmd)?;
        let predicted = belief.predict_wrench(&noise, &features)?;
        let whitened = whiten(&noise, &measured)?;
        let diagnostics = belief.step(&noise, &features, &whitened)?;

        trace.push(TraceStep {
            index: k as u64,
            pose: state.pose.clone(),
            command: cmd,
            measured,
            predicted,
            innovation_variance: diagnostics.innovation_variance,
            clipped: outcome.lateral_clipped || outcome.bottom_clipped,
        });
    }

    let raw_model = belief.unwhitened_model(&noise)?;
    let rmse = prediction_rmse(&raw_model, &trace)?;
    let model_error_vs_truth = match cfg.scene.contact_model {
        ContactModel::Linear => {
            let truth = linear_model_matrix(&cfg.scene);
            Some((&raw_model - &truth).norm() / truth.norm())
        }
        ContactModel::PiecewiseClearance => None,
    };

    let model = ModelFile {
        raw_model,
        covariance: belief.covariance().clone(),
        step_count: belief.step_count(),
    };
    Ok(CalibrateOutcome {
        model,
        trace,
        metrics: CalibrateMetrics {
            samples: commands.len(),
            excitation_condition,
            rmse,
            model_error_vs_truth,
            constraint_clips,
            regularize_invocations,
        },
    })
}

/// Per-channel RMSE of a stored model's predictions against the measured
/// wrenches in a trace.
pub fn prediction_rmse(raw_model: &DMatrix<f64>, trace: &[TraceStep]) -> Result<[f64; 6]> {
    if trace.is_empty() {
        return Err(Error::Data("trace is empty".into()));
    }
    let mut acc = [0.0f64; 6];
    for step in trace {
        let features = crate::types::feature_map(&step.pose, &step.command)?;
        let predicted = predict_with_model(raw_model, &features)?;
        let residual = predicted.to_vector() - step.measured.to_vector();
        for i in 0..6 {
            acc[i] += residual[i] * residual[i];
        }
    }
    let n = trace.len() as f64;
    Ok(acc.map(|v| (v / n).sqrt()))
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignMetrics {
    pub hold_steps: usize,
    pub control_steps: usize,
    pub controller_enabled: bool,
    /// Mean lateral force magnitude over the settled half of the scripted
    /// hold phase.
    pub hold_mean_lateral_force: f64,
    /// Mean lateral force magnitude over the final fifth of the controlled
    /// phase.
    pub controlled_mean_lateral_force: f64,
    /// `1 - controlled/hold`; absent when the hold force never rose above
    /// the sensor noise floor.
    pub reduction_ratio: Option<f64>,
    /// Threshold below which the hold force counts as "no initial force".
    pub noise_floor: f64,
    pub constraint_clips: u64,
    pub misalignment_offset: [f64; 3],
    pub misalignment_rotation: [f64; 3],
}

#[derive(Debug)]
pub struct AlignOutcome {
    pub trace: Vec<TraceStep>,
    pub metrics: AlignMetrics,
}

fn mean_lateral_force(steps: &[TraceStep]) -> f64 {
    if steps.is_empty() {
        return 0.0;
    }
    steps
        .iter()
        .map(|s| s.measured.force.xy().norm())
        .sum::<f64>()
        / steps.len() as f64
}

/// Scripted hold phase followed by the controlled phase, both fed by the
/// scripted insertion, with the reduction metrics of the resulting lateral
/// force.
pub fn run_align(
    cfg: &ExperimentConfig,
    model: &ModelFile,
    controller_enabled: bool,
) -> Result<AlignOutcome> {
    cfg.validate()?;
    let noise = cfg.noise_spec()?;
    if model.raw_model.nrows() != WRENCH_DIM || model.raw_model.ncols() != FEATURE_DIM {
        return Err(Error::Data(format!(
            "model file is {}x{}, expected {WRENCH_DIM}x{FEATURE_DIM}",
            model.raw_model.nrows(),
            model.raw_model.ncols()
        )));
    }
    // The belief stores the whitened model; the file stores raw coordinates.
    let whitened = DMatrix::from_iterator(6, 6, noise.whitener().transpose().iter().cloned())
        * &model.raw_model;
    let belief = ModelBelief::from_parts(whitened, model.covariance.clone(), model.step_count)?;

    let mut sensor = cfg.sensor_model()?;
    let start = nominal_start(&cfg.scene, cfg.episode.start_depth)?;

    let feed_limit = Some(cfg.episode.insertion_depth);
    let hold_trace = alignment_episode(
        &cfg.scene,
        &mut sensor,
        start,
        &belief,
        &noise,
        &cfg.controller,
        cfg.episode.hold_steps,
        false,
        feed_limit,
    )?;
    let resume = hold_trace
        .last()
        .map(|s| PlantState {
            pose: s.pose.clone(),
            command: s.command.clone(),
        })
        .ok_or_else(|| Error::InvalidConfig("episode.hold_steps must be > 0".into()))?;
    let control_trace = alignment_episode(
        &cfg.scene,
        &mut sensor,
        resume,
        &belief,
        &noise,
        &cfg.controller,
        cfg.episode.control_steps,
        controller_enabled,
        feed_limit,
    )?;

    let hold_settled = &hold_trace[hold_trace.len() / 2..];
    let hold_mean = mean_lateral_force(hold_settled);
    let tail_start = control_trace.len() - control_trace.len() / 5;
    let controlled_mean = mean_lateral_force(&control_trace[tail_start..]);

    let sim_cov = cfg.simulated_sensor_cov();
    let noise_floor = 3.0 * (sim_cov[(0, 0)] + sim_cov[(1, 1)]).sqrt();
    let reduction_ratio = if hold_mean > noise_floor {
        Some(1.0 - controlled_mean / hold_mean)
    } else {
        None
    };

    let mut trace = hold_trace;
    trace.extend(control_trace);
    for (k, step) in trace.iter_mut().enumerate() {
        step.index = k as u64;
    }
    let clips = trace.iter().filter(|s| s.clipped).count() as u64;

    Ok(AlignOutcome {
        trace,
        metrics: AlignMetrics {
            hold_steps: cfg.episode.hold_steps,
            control_steps: cfg.episode.control_steps,
            controller_enabled,
            hold_mean_lateral_force: hold_mean,
            controlled_mean_lateral_force: controlled_mean,
            reduction_ratio,
            noise_floor,
            constraint_clips: clips,
            misalignment_offset: cfg.misalignment_offset.into(),
            misalignment_rotation: cfg.misalignment_rotation.into(),
        },
    })
}

/// Distance from the socket axis the scripted insertion must keep at every
/// probed depth for a drawn scenario to count as misaligned.
const SCENARIO_MIN_EFFECTIVE_OFFSET: f64 = 2.5e-3;
/// Depths (m) at which the effective offset is probed: the scripted hold
/// window and the final insertion depth of the default episode.
const SCENARIO_PROBE_DEPTHS: [f64; 3] = [0.011, 0.017, 0.03];

/// Draws a misalignment scenario: offset magnitude in [1, 5] mm with a
/// random direction in the lateral plane, rotation angle in [1, 5] degrees
/// about a random axis.
///
/// A socket tilt shifts the socket axis sideways with depth, and for some
/// offset/tilt combinations the scripted descent path crosses the axis —
/// the plug barely touches anything and there is no misalignment force to
/// speak of. Draws are rejected until the descent path stays at least
/// [`SCENARIO_MIN_EFFECTIVE_OFFSET`] off-axis at every probed depth.
pub fn draw_misalignment(seed: u64) -> (Vector3<f64>, Vector3<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = (Vector3::zeros(), Vector3::zeros());
    for _ in 0..64 {
        let magnitude = 1e-3 + 4e-3 * rng.random::<f64>();
        let direction = rng.random::<f64>() * std::f64::consts::TAU;
        let offset =
            Vector3::new(magnitude * direction.cos(), magnitude * direction.sin(), 0.0);
        let angle = (1.0 + 4.0 * rng.random::<f64>()).to_radians();
        let axis = Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        let axis = if axis.norm() < 1e-9 { Vector3::x() } else { axis.normalize() };
        let rotation = axis * angle;
        last = (offset, rotation);

        let socket_rot = nalgebra::Rotation3::from_scaled_axis(rotation);
        let effective = SCENARIO_PROBE_DEPTHS.iter().all(|&depth| {
            let tip = Vector3::new(0.0, 0.0, -depth);
            let in_socket = socket_rot.matrix().transpose() * (tip - offset);
            in_socket.xy().norm() >= SCENARIO_MIN_EFFECTIVE_OFFSET
        });
        if effective {
            return last;
        }
    }
    last
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayMetrics {
    pub rows: usize,
    /// Per-channel RMSE of the model's predictions against the measured
    /// columns.
    pub rmse: [f64; 6],
}

/// Recomputes predictions for every trace row from a stored model.
pub fn run_replay(
    trace: &[TraceStep],
    model: &ModelFile,
) -> Result<(Vec<TraceStep>, ReplayMetrics)> {
    if trace.is_empty() {
        return Err(Error::Data("trace is empty".into()));
    }
    if model.raw_model.nrows() != WRENCH_DIM {
        return Err(Error::Data("model file has the wrong output dimension".into()));
    }
    let belief = ModelBelief::from_parts(
        model.raw_model.clone(),
        model.covariance.clone(),
        model.step_count,
    )?;
    let mut out = Vec::with_capacity(trace.len());
    for step in trace {
        let features = crate::types::feature_map(&step.pose, &step.command)?;
        let predicted = predict_with_model(&model.raw_model, &features)?;
        let mut replayed = step.clone();
        replayed.predicted = predicted;
        replayed.innovation_variance = innovation_variance(&belief, &features);
        out.push(replayed);
    }
    let rmse = prediction_rmse(&model.raw_model, trace)?;
    Ok((
        out,
        ReplayMetrics {
            rows: trace.len(),
            rmse,
        },
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub sizes: Vec<usize>,
    pub repetitions: usize,
    pub steps_per_repetition: Vec<usize>,
    pub median_ns_per_step: Vec<f64>,
    /// Factorization/solve events observed inside the timed estimator loops;
    /// must be zero at every size.
    pub factorization_events: Vec<u64>,
    /// Least-squares slope of log time against log size; absent for a
    /// single-point sweep.
    pub log_log_slope: Option<f64>,
    pub slope_limit: f64,
}

/// Acceptance bound on the benchmark's log-log slope: quadratic work from
/// matrix-vector products and rank-one updates, with headroom for memory
/// effects, but well below any factorization's cubic signature.
pub const BENCH_SLOPE_LIMIT: f64 = 2.5;

/// Times the estimator update across model sizes and audits that no
/// factorization happens inside the loop.
pub fn run_bench(sizes: &[usize], repetitions: usize) -> Result<BenchReport> {
    if sizes.is_empty() || sizes.iter().any(|&n| n == 0) {
        return Err(Error::InvalidInput("bench sizes must be positive".into()));
    }
    if repetitions == 0 {
        return Err(Error::InvalidInput("bench needs at least one repetition".into()));
    }

    let mut median_ns = Vec::with_capacity(sizes.len());
    let mut events = Vec::with_capacity(sizes.len());
    let mut steps_per_rep = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let steps = (4_000_000 / (n * n)).clamp(4, 20_000);
        steps_per_rep.push(steps);

        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let features: Vec<FeatureVector> = (0..steps)
            .map(|_| {
                FeatureVector::new(DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5)).unwrap()
            })
            .collect();
        let targets: Vec<DVector<f64>> = (0..steps)
            .map(|_| DVector::from_fn(WRENCH_DIM, |_, _| rng.random::<f64>() - 0.5))
            .collect();
        let noise = NoiseSpec::new(
            nalgebra::Matrix6::identity(),
            DMatrix::zeros(n, n),
            DVector::from_element(n, 1.0),
            DVector::zeros(n),
        )?;

        let mut samples = Vec::with_capacity(repetitions);
        let scope = AuditScope::begin();
        for _ in 0..repetitions {
            let mut belief = ModelBelief::from_prior(WRENCH_DIM, &DVector::from_element(n, 1.0))?;
            let start = Instant::now();
            for (w, y) in features.iter().zip(&targets) {
                belief.step(&noise, w, y)?;
            }
            let elapsed = start.elapsed().as_nanos() as f64;
            samples.push(elapsed / steps as f64);

            // A sparse adaptive-regularization pass rides along in the audit:
            // it must be factorization-free at every size too.
            let mut rho = DVector::zeros(n);
            for i in 0..3.min(n) {
                rho[i] = 1.0;
            }
            belief.adaptive_regularize(&rho)?;
        }
        events.push(scope.events());
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        median_ns.push(samples[samples.len() / 2]);
    }

    let log_log_slope = if sizes.len() >= 2 {
        let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = median_ns.iter().map(|&t| t.ln()).collect();
        let n = xs.len() as f64;
        let mean_x = xs.iter().sum::<f64>() / n;
        let mean_y = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
        let var: f64 = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
        Some(cov / var)
    } else {
        None
    };

    Ok(BenchReport {
        sizes: sizes.to_vec(),
        repetitions,
        steps_per_repetition: steps_per_rep,
        median_ns_per_step: median_ns,
        factorization_events: events,
        log_log_slope,
        slope_limit: BENCH_SLOPE_LIMIT,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{read_model, read_trace, write_model, write_trace};

    fn zero_noise_linear_config() -> ExperimentConfig {
        ExperimentConfig::from_str(
            "sensor.force_noise_std = 0\nsensor.torque_noise_std = 0\n",
        )
        .unwrap()
    }

    #[test]
    fn calibration_recovers_the_exact_model_without_noise() {
        let cfg = zero_noise_linear_config();
        let outcome = run_calibrate(&cfg, None, None).unwrap();
        let err = outcome.metrics.model_error_vs_truth.unwrap();
        assert!(err <= 1e-6, "model error {err:.3e}");
        for (i, rmse) in outcome.metrics.rmse.iter().enumerate() {
            assert!(*rmse <= 1e-6, "channel {i} rmse {rmse:.3e}");
        }
        assert_eq!(outcome.metrics.samples, 1000);
        assert_eq!(outcome.metrics.constraint_clips, 0);
    }

    #[test]
    fn zero_steps_fail_with_an_excitation_error() {
        let cfg = ExperimentConfig::default();
        assert!(matches!(
            run_calibrate(&cfg, Some(0), None),
            Err(Error::Excitation(_))
        ));
    }

    #[test]
    fn calibration_is_deterministic_down_to_bytes() {
        let cfg = ExperimentConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let mut files = Vec::new();
        for run in 0..2 {
            let outcome = run_calibrate(&cfg, None, None).unwrap();
            let model_path = dir.path().join(format!("model_{run}.txt"));
            let trace_path = dir.path().join(format!("trace_{run}.csv"));
            write_model(&model_path, &outcome.model).unwrap();
            write_trace(&trace_path, &outcome.trace).unwrap();
            files.push((
                std::fs::read(&model_path).unwrap(),
                std::fs::read(&trace_path).unwrap(),
            ));
        }
        assert_eq!(files[0].0, files[1].0, "model files differ between runs");
        assert_eq!(files[0].1, files[1].1, "trace files differ between runs");
    }

    #[test]
    fn align_reduces_misalignment_force_by_eighty_percent() {
        let mut cfg = ExperimentConfig::from_str(
            "scene.contact_model = piecewise_clearance\nscene.misalignment_offset = 0.003 0.001 0\n",
        )
        .unwrap();
        cfg.assemble_scene().unwrap();
        let calibrated = run_calibrate(&cfg, None, None).unwrap();
        let outcome = run_align(&cfg, &calibrated.model, true).unwrap();
        let ratio = outcome.metrics.reduction_ratio.expect("hold force above floor");
        assert!(ratio >= 0.8, "reduction ratio {ratio:.3}");

        let baseline = run_align(&cfg, &calibrated.model, false).unwrap();
        let baseline_ratio = baseline.metrics.reduction_ratio.unwrap();
        assert!(
            baseline_ratio.abs() < 0.3,
            "baseline ratio {baseline_ratio:.3} should be near zero"
        );
    }

    #[test]
    fn aligned_scene_reports_no_reduction_ratio() {
        let cfg = ExperimentConfig::default();
        let calibrated = run_calibrate(&cfg, None, None).unwrap();
        let outcome = run_align(&cfg, &calibrated.model, true).unwrap();
        assert!(outcome.metrics.reduction_ratio.is_none());
    }

    #[test]
    fn replay_reproduces_calibration_predictions() {
        let cfg = zero_noise_linear_config();
        let outcome = run_calibrate(&cfg, None, None).unwrap();
        let (rows, metrics) = run_replay(&outcome.trace, &outcome.model).unwrap();
        assert_eq!(rows.len(), outcome.trace.len());
        for rmse in metrics.rmse {
            assert!(rmse <= 1e-6, "rmse {rmse:.3e}");
        }

        // Prediction is memoryless: shuffling rows leaves the RMSE unchanged.
        let mut shuffled = outcome.trace.clone();
        shuffled.reverse();
        let (_, reversed_metrics) = run_replay(&shuffled, &outcome.model).unwrap();
        for (a, b) in metrics.rmse.iter().zip(reversed_metrics.rmse.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn replay_round_trips_through_files() {
        let cfg = ExperimentConfig::default();
        let outcome = run_calibrate(&cfg, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let trace_path = dir.path().join("trace.csv");
        let model_path = dir.path().join("model.txt");
        write_trace(&trace_path, &outcome.trace).unwrap();
        write_model(&model_path, &outcome.model).unwrap();
        let trace = read_trace(&trace_path).unwrap();
        let model = read_model(&model_path).unwrap();
        let (_, metrics) = run_replay(&trace, &model).unwrap();
        let (_, direct) = run_replay(&outcome.trace, &outcome.model).unwrap();
        for (a, b) in metrics.rmse.iter().zip(direct.rmse.iter()) {
            assert_eq!(a, b, "file round-trip changed the replay RMSE");
        }
    }

    #[test]
    fn bench_reports_quadratic_scaling_without_factorizations() {
        let report = run_bench(&[8, 32, 128], 3).unwrap();
        assert_eq!(report.median_ns_per_step.len(), 3);
        assert!(report.factorization_events.iter().all(|&e| e == 0));
        let slope = report.log_log_slope.unwrap();
        assert!(slope <= BENCH_SLOPE_LIMIT, "slope {slope:.2}");
        assert!(
            report.median_ns_per_step.windows(2).all(|w| w[0] <= w[1]),
            "timings should not decrease with size"
        );
    }

    #[test]
    fn single_point_bench_has_no_slope() {
        let report = run_bench(&[16], 2).unwrap();
        assert!(report.log_log_slope.is_none());
    }

    #[test]
    fn drawn_misalignments_stay_in_range() {
        for seed in 0..20 {
            let (offset, rotation) = draw_misalignment(seed);
            let magnitude = offset.xy().norm();
            assert!((1e-3..=5e-3).contains(&magnitude));
            assert_eq!(offset.z, 0.0);
            let angle = rotation.norm().to_degrees();
            assert!((1.0..=5.0).contains(&angle));
        }
    }
}
