//! Experiment configuration: a flat `key = value` text format with dotted
//! section prefixes, strictly validated — unknown or repeated keys are
//! rejected. See `docs/formats.md` for the schema.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};

use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::sim::{ContactModel, SensorModel, SocketScene};
use crate::types::{NoiseSpec, Pose, Wrench, FEATURE_DIM};

/// Calibration-run parameters.
#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub duration_s: f64,
    pub rate_hz: f64,
    pub amplitude_pos: f64,
    pub amplitude_rot: f64,
    pub seed: u64,
    /// How deep the tip sits below the nominal socket mouth during
    /// calibration, meters.
    pub start_depth: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            duration_s: 10.0,
            rate_hz: 100.0,
            amplitude_pos: 5e-3,
            amplitude_rot: 0.035,
            seed: 7,
            start_depth: 0.015,
        }
    }
}

/// Alignment-episode parameters.
#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    /// Scripted (controller off) steps establishing the baseline force.
    pub hold_steps: usize,
    /// Controlled steps after the baseline.
    pub control_steps: usize,
    /// Tip depth below the nominal mouth at the start of the episode.
    pub start_depth: f64,
    /// Target insertion depth; the scripted feed stops once the tip
    /// reaches it.
    pub insertion_depth: f64,
    /// Seed for drawn misalignment scenarios.
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            hold_steps: 60,
            control_steps: 150,
            start_depth: 5e-3,
            insertion_depth: 0.03,
            seed: 99,
        }
    }
}

/// Everything a harness run needs, mirroring the module configs.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scene: SocketScene,
    pub misalignment_offset: Vector3<f64>,
    pub misalignment_rotation: Vector3<f64>,
    pub sensor_force_noise_std: f64,
    pub sensor_torque_noise_std: f64,
    pub sensor_bias: Wrench,
    pub sensor_seed: u64,
    /// Uniform regularization weight for every feature coordinate.
    pub reg_weight: f64,
    pub prior_variance_cap: Option<f64>,
    /// Process-noise intensity: the filter runs with this value times the
    /// identity as its per-step covariance inflation.
    pub process_noise: f64,
    /// Uniform adaptive regularization weight used when the regularization
    /// interval is active.
    pub adaptive_weight: f64,
    pub controller: ControllerConfig,
    pub calibration: CalibrationConfig,
    pub episode: EpisodeConfig,
}

/// Assumed sensor noise is floored here so the whitening factor exists even
/// for an exactly noiseless simulated sensor.
const ASSUMED_NOISE_FLOOR: f64 = 1e-6;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene: SocketScene::default(),
            misalignment_offset: Vector3::zeros(),
            misalignment_rotation: Vector3::zeros(),
            sensor_force_noise_std: 0.05,
            sensor_torque_noise_std: 0.005,
            sensor_bias: Wrench::zero(),
            sensor_seed: 17,
            reg_weight: 1e-6,
            prior_variance_cap: Some(1e12),
            process_noise: 0.0,
            adaptive_weight: 0.0,
            controller: ControllerConfig::default(),
            calibration: CalibrationConfig::default(),
            episode: EpisodeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = HashSet::new();
        for (line_no, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", line_no + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidConfig(format!("duplicate key {key:?}")));
            }
            cfg.apply(key, value)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", line_no + 1)))?;
        }
        cfg.assemble_scene()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "scene.contact_model" => {
                self.scene.contact_model = match value {
                    "linear" => ContactModel::Linear,
                    "piecewise_clearance" => ContactModel::PiecewiseClearance,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "unknown contact model {other:?} (expected linear or piecewise_clearance)"
                        )))
                    }
                }
            }
            "scene.clearance" => self.scene.clearance = parse_f64(value, key)?,
            "scene.stiffness_lateral" => self.scene.stiffness_lateral = parse_f64(value, key)?,
            "scene.stiffness_rotational" => {
                self.scene.stiffness_rotational = parse_f64(value, key)?
            }
            "scene.friction_insertion" => self.scene.friction_insertion = parse_f64(value, key)?,
            "scene.coupling_pos" => self.scene.coupling_pos = parse_f64(value, key)?,
            "scene.coupling_rot" => self.scene.coupling_rot = parse_f64(value, key)?,
            "scene.depth" => self.scene.depth = parse_f64(value, key)?,
            "scene.wall_limit" => self.scene.wall_limit = parse_f64(value, key)?,
            "scene.settle_fraction" => self.scene.settle_fraction = parse_f64(value, key)?,
            "scene.command_margin" => self.scene.command_margin = parse_f64(value, key)?,
            "scene.tip_offset" => self.scene.tip_offset = parse_vec3(value, key)?,
            "scene.misalignment_offset" => self.misalignment_offset = parse_vec3(value, key)?,
            "scene.misalignment_rotation" => self.misalignment_rotation = parse_vec3(value, key)?,
            "sensor.force_noise_std" => self.sensor_force_noise_std = parse_f64(value, key)?,
            "sensor.torque_noise_std" => self.sensor_torque_noise_std = parse_f64(value, key)?,
            "sensor.bias" => {
                let v = parse_floats(value, 6, key)?;
                self.sensor_bias = Wrench::from_vector(&Vector6::from_row_slice(&v));
            }
            "sensor.seed" => self.sensor_seed = parse_u64(value, key)?,
            "filter.reg_weight" => self.reg_weight = parse_f64(value, key)?,
            "filter.prior_variance_cap" => {
                self.prior_variance_cap = if value == "none" {
                    None
                } else {
                    Some(parse_f64(value, key)?)
                }
            }
            "filter.process_noise" => self.process_noise = parse_f64(value, key)?,
            "filter.adaptive_weight" => self.adaptive_weight = parse_f64(value, key)?,
            "controller.selector" => {
                let v = parse_floats(value, 6, key)?;
                self.controller.selector = [v[0], v[1], v[2], v[3], v[4], v[5]];
            }
            "controller.lambda" => self.controller.lambda = parse_f64(value, key)?,
            "controller.mu" => self.controller.mu = parse_f64(value, key)?,
            "controller.box_pos" => self.controller.box_pos = parse_f64(value, key)?,
            "controller.box_rot" => self.controller.box_rot = parse_f64(value, key)?,
            "controller.insertion_feed" => {
                self.controller.insertion_feed = parse_f64(value, key)?
            }
            "calibration.duration_s" => self.calibration.duration_s = parse_f64(value, key)?,
            "calibration.rate_hz" => self.calibration.rate_hz = parse_f64(value, key)?,
            "calibration.amplitude_pos" => self.calibration.amplitude_pos = parse_f64(value, key)?,
            "calibration.amplitude_rot" => self.calibration.amplitude_rot = parse_f64(value, key)?,
            "calibration.seed" => self.calibration.seed = parse_u64(value, key)?,
            "calibration.start_depth" => self.calibration.start_depth = parse_f64(value, key)?,
            "episode.hold_steps" => self.episode.hold_steps = parse_usize(value, key)?,
            "episode.control_steps" => self.episode.control_steps = parse_usize(value, key)?,
            "episode.start_depth" => self.episode.start_depth = parse_f64(value, key)?,
            "episode.insertion_depth" => self.episode.insertion_depth = parse_f64(value, key)?,
            "episode.seed" => self.episode.seed = parse_u64(value, key)?,
            other => return Err(Error::InvalidConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Rebuilds the socket pose from the misalignment fields.
    pub fn assemble_scene(&mut self) -> Result<()> {
        let rotation = *nalgebra::Rotation3::from_scaled_axis(self.misalignment_rotation).matrix();
        self.scene.socket_pose = Pose::new(self.misalignment_offset, rotation)
            .map_err(|e| Error::InvalidConfig(format!("misalignment: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.controller.validate()?;
        if !(self.sensor_force_noise_std >= 0.0 && self.sensor_force_noise_std.is_finite())
            || !(self.sensor_torque_noise_std >= 0.0 && self.sensor_torque_noise_std.is_finite())
        {
            return Err(Error::InvalidConfig("sensor noise levels must be >= 0".into()));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::InvalidConfig("filter.reg_weight must be >= 0".into()));
        }
        if !(self.process_noise >= 0.0 && self.process_noise.is_finite()) {
            return Err(Error::InvalidConfig("filter.process_noise must be >= 0".into()));
        }
        if !(self.adaptive_weight >= 0.0 && self.adaptive_weight.is_finite()) {
            return Err(Error::InvalidConfig("filter.adaptive_weight must be >= 0".into()));
        }
        let c = &self.calibration;
        if !(c.duration_s > 0.0 && c.rate_hz > 0.0 && c.start_depth > 0.0)
            || !(c.amplitude_pos >= 0.0 && c.amplitude_rot >= 0.0)
        {
            return Err(Error::InvalidConfig("calibration parameters out of range".into()));
        }
        if c.start_depth >= self.scene.depth {
            return Err(Error::InvalidConfig(
                "calibration.start_depth must be shallower than the socket depth".into(),
            ));
        }
        if self.episode.start_depth <= 0.0 || self.episode.start_depth >= self.scene.depth {
            return Err(Error::InvalidConfig(
                "episode.start_depth must lie inside the socket depth".into(),
            ));
        }
        if self.episode.insertion_depth <= self.episode.start_depth
            || self.episode.insertion_depth >= self.scene.depth
        {
            return Err(Error::InvalidConfig(
                "episode.insertion_depth must lie between the start depth and the socket depth"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Sensor covariance the simulated sensor actually uses (exactly zero
    /// when both noise levels are zero).
    pub fn simulated_sensor_cov(&self) -> Matrix6<f64> {
        let f = self.sensor_force_noise_std;
        let t = self.sensor_torque_noise_std;
        Matrix6::from_diagonal(&Vector6::new(
            f * f,
            f * f,
            f * f,
            t * t,
            t * t,
            t * t,
        ))
    }

    /// Sensor covariance the filter assumes; floored so whitening exists for
    /// noiseless runs.
    pub fn assumed_sensor_cov(&self) -> Matrix6<f64> {
        let f = self.sensor_force_noise_std.max(ASSUMED_NOISE_FLOOR);
        let t = self.sensor_torque_noise_std.max(ASSUMED_NOISE_FLOOR);
        Matrix6::from_diagonal(&Vector6::new(
            f * f,
            f * f,
            f * f,
            t * t,
            t * t,
            t * t,
        ))
    }

    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        let n = FEATURE_DIM;
        let spec = NoiseSpec::new(
            self.assumed_sensor_cov(),
            DMatrix::identity(n, n) * self.process_noise,
            DVector::from_element(n, self.reg_weight),
            DVector::from_element(n, self.adaptive_weight),
        )?;
        spec.with_prior_variance_cap(self.prior_variance_cap)
    }

    pub fn sensor_model(&self) -> Result<SensorModel> {
        SensorModel::new(self.simulated_sensor_cov(), self.sensor_bias, self.sensor_seed)
    }
}

fn parse_f64(value: &str, key: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?} as a number")))
}

fn parse_u64(value: &str, key: &str) -> Result<u64> {
    value
        .parse::<u64>()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?} as an integer")))
}

fn parse_usize(value: &str, key: &str) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?} as an integer")))
}

fn parse_floats(value: &str, n: usize, key: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{key}: expected {n} numbers, found {}",
            parts.len()
        )));
    }
    parts.iter().map(|p| parse_f64(p, key)).collect()
}

fn parse_vec3(value: &str, key: &str) -> Result<Vector3<f64>> {
    let v = parse_floats(value, 3, key)?;
    Ok(Vector3::new(v[0], v[1], v[2]))
}
