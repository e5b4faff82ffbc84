//! Quasi-static plug/socket plant.
//!
//! Stands in for a physics engine at desk scale: an impedance-controlled end
//! effector settles a fraction of the way toward each commanded pose, the
//! socket constrains where the plug tip can be, and the sensed wrench is
//! assembled from lateral and rotational contact springs, a constant
//! insertion friction, and the reaction to commanded offsets. With the
//! `Linear` contact model the wrench is exactly affine in the feature
//! vector, so the estimator can recover it perfectly; `PiecewiseClearance`
//! adds a lateral deadband and the exact rotational log map, producing
//! honest model mismatch.
//!
//! Socket frame convention: the mouth plane is at the frame origin with +z
//! pointing out of the socket, so the interior is z in [-depth, 0].

use nalgebra::{DMatrix, Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector3, Vector6};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audit;
use crate::error::{Error, Result};
use crate::types::{feature_map, ControlCommand, FeatureVector, Pose, Wrench, FEATURE_DIM};
use crate::types::{FEAT_BIAS, FEAT_CMD_POS, FEAT_CMD_ROT, FEAT_POS, FEAT_ROT};

/// Actuator box: commanded position offsets stay within this many meters
/// per axis.
pub const COMMAND_BOX_POS: f64 = 0.01;
/// Actuator box: commanded attitude corrections stay within this many
/// radians per axis (three degrees).
pub const COMMAND_BOX_ROT: f64 = 3.0 * std::f64::consts::PI / 180.0;

/// How the contact springs respond to lateral offset and misalignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactModel {
    /// No deadband, linearized misalignment measure: the wrench is exactly
    /// affine in the feature vector while the plug stays engaged.
    Linear,
    /// Free play inside the clearance, spring contact beyond it, exact
    /// axis-angle misalignment: not representable by any linear model.
    PiecewiseClearance,
}

/// Socket geometry, contact stiffnesses, and plant settling behavior.
#[derive(Debug, Clone)]
pub struct SocketScene {
    /// Socket frame in the world: mouth center and orientation.
    pub socket_pose: Pose,
    /// Lateral free play in meters.
    pub clearance: f64,
    /// Lateral contact stiffness in N/m.
    pub stiffness_lateral: f64,
    /// Rotational contact stiffness in N*m/rad.
    pub stiffness_rotational: f64,
    /// Constant resistive force along the insertion axis in N.
    pub friction_insertion: f64,
    /// Sensed reaction per meter of commanded position offset, N/m.
    pub coupling_pos: f64,
    /// Sensed reaction per radian of commanded attitude correction, N*m/rad.
    pub coupling_rot: f64,
    /// Engagement depth of the socket in meters.
    pub depth: f64,
    /// Hard lateral wall: the tip is clipped to this excursion while engaged.
    pub wall_limit: f64,
    /// Fraction of the commanded offset covered per settle step.
    pub settle_fraction: f64,
    /// Commands may exceed the actuator box by this factor before the plant
    /// rejects them (the pose lags commands, so transients overshoot).
    pub command_margin: f64,
    /// Plug tip in the end-effector frame.
    pub tip_offset: Vector3<f64>,
    pub contact_model: ContactModel,
}

impl Default for SocketScene {
    fn default() -> Self {
        SocketScene {
            socket_pose: Pose::identity(),
            clearance: 0.5e-3,
            stiffness_lateral: 500.0,
            stiffness_rotational: 5.0,
            friction_insertion: 2.0,
            coupling_pos: 500.0,
            coupling_rot: 5.0,
            depth: 0.05,
            wall_limit: 0.02,
            settle_fraction: 0.5,
            command_margin: 2.5,
            tip_offset: Vector3::new(0.0, 0.0, -0.01),
            contact_model: ContactModel::Linear,
        }
    }
}

impl SocketScene {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stiffness_lateral", self.stiffness_lateral),
            ("stiffness_rotational", self.stiffness_rotational),
            ("friction_insertion", self.friction_insertion),
            ("clearance", self.clearance),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.depth > 0.0 && self.depth.is_finite()) {
            return Err(Error::InvalidConfig(format!("depth must be > 0, got {}", self.depth)));
        }
        if !(self.wall_limit >= self.clearance && self.wall_limit.is_finite()) {
            return Err(Error::InvalidConfig(
                "wall_limit must be finite and at least the clearance".into(),
            ));
        }
        if !(self.settle_fraction > 0.0 && self.settle_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "settle_fraction must be in (0, 1], got {}",
                self.settle_fraction
            )));
        }
        if !(self.command_margin >= 1.0 && self.command_margin.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "command_margin must be >= 1, got {}",
                self.command_margin
            )));
        }
        if !(self.coupling_pos.is_finite() && self.coupling_pos >= 0.0)
            || !(self.coupling_rot.is_finite() && self.coupling_rot >= 0.0)
        {
            return Err(Error::InvalidConfig("coupling gains must be >= 0".into()));
        }
        if !self.tip_offset.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("tip_offset must be finite".into()));
        }
        Ok(())
    }

    /// Scene with the socket displaced and rotated away from the nominal
    /// origin the plug is scripted against.
    pub fn with_misalignment(mut self, offset: Vector3<f64>, rotation: Vector3<f64>) -> Result<Self> {
        let rot = *Rotation3::from_scaled_axis(rotation).matrix();
        self.socket_pose = Pose::new(offset, rot)?;
        Ok(self)
    }
}

/// Plant configuration: the current pose and the last applied command.
#[derive(Debug, Clone)]
pub struct PlantState {
    pub pose: Pose,
    pub command: ControlCommand,
}

impl PlantState {
    pub fn at_rest(pose: Pose) -> Self {
        let command = ControlCommand::hold(&pose);
        PlantState { pose, command }
    }
}

/// One settle step: the new state plus which constraints clipped the pose.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: PlantState,
    pub lateral_clipped: bool,
    pub bottom_clipped: bool,
}

impl StepOutcome {
    pub fn clipped(&self) -> bool {
        self.lateral_clipped || self.bottom_clipped
    }
}

/// Plug tip position expressed in the socket frame.
pub fn tip_in_socket_frame(pose: &Pose, scene: &SocketScene) -> Vector3<f64> {
    let tip_world = pose.position() + pose.rotation() * scene.tip_offset;
    scene.socket_pose.rotation().transpose() * (tip_world - scene.socket_pose.position())
}

/// Whether the plug tip sits inside the socket's engagement depth.
pub fn engaged(pose: &Pose, scene: &SocketScene) -> bool {
    let tip = tip_in_socket_frame(pose, scene);
    tip.z <= 0.0 && tip.z >= -scene.depth
}

/// Moves the pose a settle fraction toward the commanded pose, then projects
/// it back inside the socket's feasible region. Deterministic.
pub fn plant_step(state: &PlantState, cmd: &ControlCommand, scene: &SocketScene) -> Result<StepOutcome> {
    if !cmd.is_finite() {
        return Err(Error::InvalidInput("command contains non-finite entries".into()));
    }
    let offset = cmd.desired_position - state.pose.position();
    let pos_limit = COMMAND_BOX_POS * scene.command_margin;
    let rot_limit = COMMAND_BOX_ROT * scene.command_margin;
    if offset.amax() > pos_limit {
        return Err(Error::InvalidInput(format!(
            "commanded position offset {:.4} m exceeds the actuator limit {pos_limit:.4} m",
            offset.amax()
        )));
    }
    if cmd.rotation_correction.amax() > rot_limit {
        return Err(Error::InvalidInput(format!(
            "commanded rotation {:.4} rad exceeds the actuator limit {rot_limit:.4} rad",
            cmd.rotation_correction.amax()
        )));
    }

    let alpha = scene.settle_fraction;
    let mut position = state.pose.position() + alpha * offset;
    let step_rotation = Rotation3::from_scaled_axis(alpha * cmd.rotation_correction);
    let composed = state.pose.rotation() * step_rotation.matrix();
    // Renormalize through a quaternion so orthonormality never drifts over
    // long runs.
    let rotation = *UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(composed))
        .to_rotation_matrix()
        .matrix();

    let candidate = Pose::new(position, rotation)?;
    let mut tip = tip_in_socket_frame(&candidate, scene);
    let mut lateral_clipped = false;
    let mut bottom_clipped = false;
    if tip.z <= 0.0 {
        for axis in 0..2 {
            if tip[axis].abs() > scene.wall_limit {
                tip[axis] = tip[axis].signum() * scene.wall_limit;
                lateral_clipped = true;
            }
        }
        if tip.z < -scene.depth {
            tip.z = -scene.depth;
            bottom_clipped = true;
        }
    }
    if lateral_clipped || bottom_clipped {
        let tip_world = scene.socket_pose.position() + scene.socket_pose.rotation() * tip;
        position = tip_world - rotation * scene.tip_offset;
    }

    Ok(StepOutcome {
        state: PlantState {
            pose: Pose::new(position, rotation)?,
            command: cmd.clone(),
        },
        lateral_clipped,
        bottom_clipped,
    })
}

fn skew_part(m: &Matrix3<f64>) -> Vector3<f64> {
    0.5 * Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
}

/// Ground-truth sensed wrench for a configuration and command.
///
/// Zero (before sensor bias) whenever the tip is outside the engagement
/// depth. Torques are pure rotational-spring and coupling terms; no
/// force-moment arms.
pub fn true_wrench(state: &PlantState, cmd: &ControlCommand, scene: &SocketScene) -> Result<Wrench> {
    if !cmd.is_finite() {
        return Err(Error::InvalidInput("command contains non-finite entries".into()));
    }
    if !engaged(&state.pose, scene) {
        return Ok(Wrench::zero());
    }

    let tip = tip_in_socket_frame(&state.pose, scene);
    let lateral = match scene.contact_model {
        ContactModel::Linear => Vector3::new(tip.x, tip.y, 0.0),
        ContactModel::PiecewiseClearance => {
            let deadband = |v: f64| v.signum() * (v.abs() - scene.clearance).max(0.0);
            Vector3::new(deadband(tip.x), deadband(tip.y), 0.0)
        }
    };
    let contact_socket = -scene.stiffness_lateral * lateral
        + Vector3::new(0.0, 0.0, -scene.friction_insertion);
    let mut force = scene.socket_pose.rotation() * contact_socket;
    // Sensed reaction to the commanded offset (the arm pressing against the
    // constraint), opposing the command direction.
    force -= scene.coupling_pos * (cmd.desired_position - state.pose.position());

    let relative = scene.socket_pose.rotation().transpose() * state.pose.rotation();
    let misalignment = match scene.contact_model {
        ContactModel::Linear => skew_part(&relative),
        ContactModel::PiecewiseClearance => {
            crate::types::axis_angle_between(scene.socket_pose.rotation(), state.pose.rotation())?
        }
    };
    let mut torque = scene.socket_pose.rotation() * (-scene.stiffness_rotational * misalignment);
    torque -= scene.coupling_rot * cmd.rotation_correction;

    Ok(Wrench::new(force, torque))
}

/// The exact `6 x 19` model matrix realized by the `Linear` contact model in
/// the engaged regime, assembled analytically from the scene gains.
///
/// `true_wrench` computes the same physics from geometric quantities; the
/// two routes agreeing is what the identification tests check.
pub fn linear_model_matrix(scene: &SocketScene) -> DMatrix<f64> {
    let rot_socket = scene.socket_pose.rotation();
    let lateral_projector = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
    // Maps a world position of the tip to the sensed lateral spring force.
    let spring = -scene.stiffness_lateral * rot_socket * lateral_projector * rot_socket.transpose();

    let mut model = DMatrix::zeros(6, FEATURE_DIM);

    // Force rows, position columns: lateral spring through the tip plus the
    // command-offset reaction acting on the current position.
    let pos_block = spring + Matrix3::identity() * scene.coupling_pos;
    for i in 0..3 {
        for j in 0..3 {
            model[(i, FEAT_POS + j)] = pos_block[(i, j)];
        }
    }
    // Force rows, rotation columns: the tip moves with the attitude by
    // R * tip_offset; column-major flattening puts entry (i, j) of the
    // rotation at feature index 3j + i.
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                model[(i, FEAT_ROT + 3 * j + k)] = spring[(i, k)] * scene.tip_offset[j];
            }
        }
    }
    // Force rows, commanded-position columns.
    for i in 0..3 {
        model[(i, FEAT_CMD_POS + i)] = -scene.coupling_pos;
    }
    // Force rows, bias column: insertion friction plus the spring datum at
    // the socket center.
    let bias_force = rot_socket * Vector3::new(0.0, 0.0, -scene.friction_insertion)
        - spring * scene.socket_pose.position();
    for i in 0..3 {
        model[(i, FEAT_BIAS)] = bias_force[i];
    }

    // Torque rows, rotation columns: the linearized misalignment is the skew
    // part of R_socket^T R, whose entries are linear in R. With
    // A[a][b] = sum_c R_socket[c][a] R[c][b] the three misalignment
    // components differentiate to socket-rotation entries.
    let rs = rot_socket;
    let mut misalignment_jacobian = DMatrix::zeros(3, 9); // rows: component, cols: vec(R)
    for i in 0..3 {
        for j in 0..3 {
            let col = 3 * j + i;
            // d(A[2,1] - A[1,2]) / dR[i,j] etc., halved for the skew part.
            misalignment_jacobian[(0, col)] =
                0.5 * (if j == 1 { rs[(i, 2)] } else { 0.0 } - if j == 2 { rs[(i, 1)] } else { 0.0 });
            misalignment_jacobian[(1, col)] =
                0.5 * (if j == 2 { rs[(i, 0)] } else { 0.0 } - if j == 0 { rs[(i, 2)] } else { 0.0 });
            misalignment_jacobian[(2, col)] =
                0.5 * (if j == 0 { rs[(i, 1)] } else { 0.0 } - if j == 1 { rs[(i, 0)] } else { 0.0 });
        }
    }
    let torque_gain = -scene.stiffness_rotational * rot_socket;
    for i in 0..3 {
        for col in 0..9 {
            let mut v = 0.0;
            for k in 0..3 {
                v += torque_gain[(i, k)] * misalignment_jacobian[(k, col)];
            }
            model[(3 + i, FEAT_ROT + col)] = v;
        }
    }
    // Torque rows, commanded-rotation columns.
    for i in 0..3 {
        model[(3 + i, FEAT_CMD_ROT + i)] = -scene.coupling_rot;
    }

    model
}

/// Force-torque sensor: constant bias plus Gaussian noise with the given
/// covariance, drawn from a counter-indexed seeded stream so every sample
/// is reproducible in isolation.
#[derive(Debug, Clone)]
pub struct SensorModel {
    covariance: Matrix6<f64>,
    sampler: Matrix6<f64>,
    bias: Wrench,
    seed: u64,
    counter: u64,
}

impl SensorModel {
    /// `covariance` must be symmetric positive definite, or exactly zero for
    /// a noiseless sensor.
    pub fn new(covariance: Matrix6<f64>, bias: Wrench, seed: u64) -> Result<Self> {
        if !covariance.iter().all(|v| v.is_finite()) || !bias.is_finite() {
            return Err(Error::InvalidConfig("sensor model contains non-finite entries".into()));
        }
        if (covariance - covariance.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidConfig("sensor covariance must be symmetric".into()));
        }
        let sampler = if covariance.amax() == 0.0 {
            Matrix6::zeros()
        } else {
            audit::record_factorization();
            nalgebra::Cholesky::new(covariance)
                .ok_or_else(|| {
                    Error::InvalidConfig("sensor covariance is not positive definite".into())
                })?
                .l()
        };
        Ok(SensorModel {
            covariance,
            sampler,
            bias,
            seed,
            counter: 0,
        })
    }

    pub fn covariance(&self) -> &Matrix6<f64> {
        &self.covariance
    }

    pub fn bias(&self) -> Wrench {
        self.bias
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Noisy measurement of a true wrench, advancing the sample counter.
    pub fn measure(&mut self, truth: &Wrench) -> Wrench {
        let index = self.counter;
        self.counter += 1;
        self.measure_at(index, truth)
    }

    /// The measurement the sensor would produce at stream position `index`.
    pub fn measure_at(&self, index: u64, truth: &Wrench) -> Wrench {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, index));
        let normals = Vector6::from_fn(|_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let noise = self.sampler * normals;
        Wrench::from_vector(&(truth.to_vector() + self.bias.to_vector() + noise))
    }
}

/// SplitMix64 finalizer: decorrelates per-sample seeds.
fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-channel sinusoid triples at incommensurate frequencies (Hz).
///
/// Position commands are absolute, so their response is a bounded lag and
/// the fast tones keep commanded and actual positions distinguishable.
/// Attitude corrections integrate step over step, so the slow rotation
/// tones deliberately build up degrees of attitude wander: the quadratic
/// entries of the rotation matrix are unidentifiable without it.
const EXCITE_FREQ_SLOW: [f64; 6] = [1.1, 1.3, 1.5, 0.75, 0.9, 1.05];
const EXCITE_FREQ_MID: [f64; 6] = [2.0, 2.6, 3.4, 2.2, 2.9, 3.7];
const EXCITE_FREQ_FAST: [f64; 6] = [7.1, 8.3, 9.7, 7.7, 8.9, 10.3];
const EXCITE_WEIGHTS_POS: [f64; 3] = [0.3, 0.4, 0.3];
const EXCITE_WEIGHTS_ROT: [f64; 3] = [0.5, 0.3, 0.2];

/// Largest acceptable condition number of the scale-normalized feature Gram
/// matrix over a calibration run.
pub const EXCITATION_CONDITION_LIMIT: f64 = 1e6;

/// Multi-frequency command sequence exciting all six command channels.
///
/// Commands are offsets around the calibration center: `desired_position`
/// is relative to wherever the plug is held. Errors if the sequence cannot
/// identify a full model (too few samples or degenerate excitation).
pub fn calibration_trajectory(
    duration_s: f64,
    rate_hz: f64,
    amplitude_pos: f64,
    amplitude_rot: f64,
    seed: u64,
) -> Result<Vec<ControlCommand>> {
    if !(duration_s > 0.0 && rate_hz > 0.0 && duration_s.is_finite() && rate_hz.is_finite()) {
        return Err(Error::InvalidConfig("duration and rate must be positive".into()));
    }
    if !(amplitude_pos >= 0.0 && amplitude_rot >= 0.0) {
        return Err(Error::InvalidConfig("amplitudes must be >= 0".into()));
    }
    let samples = (duration_s * rate_hz).round() as usize;
    if samples < FEATURE_DIM {
        return Err(Error::Excitation(format!(
            "{samples} samples cannot identify {FEATURE_DIM} parameters"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phases = [[0.0; 6]; 3];
    for tone in &mut phases {
        for phase in tone.iter_mut() {
            *phase = rng.random::<f64>() * std::f64::consts::TAU;
        }
    }

    let frequencies = [EXCITE_FREQ_SLOW, EXCITE_FREQ_MID, EXCITE_FREQ_FAST];
    let mut commands = Vec::with_capacity(samples);
    for k in 0..samples {
        let t = k as f64 / rate_hz;
        let mut channels = [0.0; 6];
        for (d, value) in channels.iter_mut().enumerate() {
            let amplitude = if d < 3 { amplitude_pos } else { amplitude_rot };
            let weights = if d < 3 { EXCITE_WEIGHTS_POS } else { EXCITE_WEIGHTS_ROT };
            *value = amplitude
                * (0..3)
                    .map(|tone| {
                        weights[tone]
                            * (std::f64::consts::TAU * frequencies[tone][d] * t + phases[tone][d])
                                .sin()
                    })
                    .sum::<f64>();
        }
        commands.push(ControlCommand::new(
            Vector3::new(channels[0], channels[1], channels[2]),
            Vector3::new(channels[3], channels[4], channels[5]),
        ));
    }

    let condition = excitation_condition_number(&commands, rate_hz)?;
    if condition > EXCITATION_CONDITION_LIMIT {
        return Err(Error::Excitation(format!(
            "normalized feature Gram condition number {condition:.3e} exceeds {EXCITATION_CONDITION_LIMIT:.0e}"
        )));
    }
    Ok(commands)
}

/// Condition number of the scale-normalized feature Gram matrix a command
/// sequence produces through the nominal settle response (free space,
/// default settle fraction). Scale normalization makes the measure
/// unit-free; a channel with zero variance reads as unexcitable.
pub fn excitation_condition_number(commands: &[ControlCommand], rate_hz: f64) -> Result<f64> {
    if commands.is_empty() {
        return Err(Error::Excitation("empty command sequence".into()));
    }
    let _ = rate_hz; // the settle response is per-step; rate fixes only timing
    let alpha = SocketScene::default().settle_fraction;
    let mut pose = Pose::identity();
    let mut gram = DMatrix::zeros(FEATURE_DIM, FEATURE_DIM);
    for cmd in commands {
        let position = pose.position() + alpha * (cmd.desired_position - pose.position());
        let step_rotation = Rotation3::from_scaled_axis(alpha * cmd.rotation_correction);
        let composed = pose.rotation() * step_rotation.matrix();
        let rotation =
            *UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(composed))
                .to_rotation_matrix()
                .matrix();
        pose = Pose::new(position, rotation)?;
        let w = feature_map(&pose, cmd)?;
        gram.ger(1.0, w.as_vector(), w.as_vector(), 1.0);
    }
    gram /= commands.len() as f64;

    let mut scales = Vec::with_capacity(FEATURE_DIM);
    for i in 0..FEATURE_DIM {
        let d = gram[(i, i)];
        if d <= 0.0 {
            return Err(Error::Excitation(format!("feature channel {i} is never excited")));
        }
        scales.push(d.sqrt());
    }
    let mut normalized = gram;
    for i in 0..FEATURE_DIM {
        for j in 0..FEATURE_DIM {
            normalized[(i, j)] /= scales[i] * scales[j];
        }
    }
    audit::record_factorization();
    let eigenvalues = normalized.symmetric_eigenvalues();
    let max = eigenvalues.max();
    let min = eigenvalues.min();
    if min <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

/// Feature vector the identification loop uses: the settled pose paired
/// with the command that produced it.
pub fn features_for(state: &PlantState, cmd: &ControlCommand) -> Result<FeatureVector> {
    feature_map(&state.pose, cmd)
}
