//! Convex one-step alignment policy.
//!
//! With the learned model, the predicted wrench is affine in the command,
//! so minimizing the selected wrench components plus command regularization
//! is an unconstrained 6x6 quadratic with a closed-form solution. The box
//! constraints are enforced by clipping afterwards; a dedicated QP solver
//! is unnecessary because the minimizer rarely leaves the box.

use nalgebra::{DMatrix, Matrix6, Vector3, Vector6};

use crate::audit;
use crate::error::{Error, Result};
use crate::filter::{predict_with_model, ModelBelief};
use crate::io::TraceStep;
use crate::sim::{features_for, plant_step, true_wrench, PlantState, SensorModel, SocketScene};
use crate::sim::{COMMAND_BOX_POS, COMMAND_BOX_ROT};
use crate::types::{ControlCommand, FeatureVector, NoiseSpec, Pose, FEATURE_DIM, FEAT_CMD_POS};

/// Alignment policy weights and limits.
#[derive(Debug, Clone)]
pub struct ControllerConfig {
    /// Diagonal wrench selector; zero entries are free (by default the
    /// insertion-axis force).
    pub selector: [f64; 6],
    /// Position-correction regularization weight.
    pub lambda: f64,
    /// Rotation-correction regularization weight.
    pub mu: f64,
    /// Per-axis bound on commanded position offsets, meters.
    pub box_pos: f64,
    /// Per-axis bound on commanded attitude corrections, radians.
    pub box_rot: f64,
    /// Scripted downward feed per step, meters.
    pub insertion_feed: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            selector: [1.0, 1.0, 0.0, 1.0, 1.0, 1.0],
            lambda: 10.0,
            mu: 10.0,
            box_pos: COMMAND_BOX_POS,
            box_rot: COMMAND_BOX_ROT,
            insertion_feed: 2e-4,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidConfig(format!("mu must be > 0, got {}", self.mu)));
        }
        if !(self.box_pos > 0.0 && self.box_pos.is_finite())
            || !(self.box_rot > 0.0 && self.box_rot.is_finite())
        {
            return Err(Error::InvalidConfig("command boxes must be > 0".into()));
        }
        if self.selector.iter().any(|&s| s != 0.0 && s != 1.0) {
            return Err(Error::InvalidConfig("selector entries must be 0 or 1".into()));
        }
        if !(self.insertion_feed.is_finite() && self.insertion_feed.abs() <= self.box_pos) {
            return Err(Error::InvalidConfig(
                "insertion feed must fit inside the position box".into(),
            ));
        }
        Ok(())
    }
}

/// The unconstrained minimizer and its clipped version, as stacked
/// `[position, rotation]` corrections relative to the current pose.
#[derive(Debug, Clone)]
pub struct AlignmentSolution {
    pub unclipped: Vector6<f64>,
    pub clipped: Vector6<f64>,
}

/// Minimizes `|S y(u)|^2 + lambda |dr|^2 + mu |phi|^2` over the command
/// correction, where `y(u)` is the model's predicted wrench. Returns both
/// the closed-form minimizer and its box clipping.
pub fn alignment_correction(
    raw_model: &DMatrix<f64>,
    pose: &Pose,
    cfg: &ControllerConfig,
) -> Result<AlignmentSolution> {
    cfg.validate()?;
    if raw_model.nrows() != 6 || raw_model.ncols() != FEATURE_DIM {
        return Err(Error::InvalidInput(format!(
            "model is {}x{}, expected 6x{FEATURE_DIM}",
            raw_model.nrows(),
            raw_model.ncols()
        )));
    }
    if !raw_model.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("model contains non-finite entries".into()));
    }

    // Predicted wrench at the neutral command; corrections enter through the
    // six command columns.
    let neutral = crate::types::feature_map(pose, &ControlCommand::hold(pose))?;
    let at_neutral = raw_model * neutral.as_vector();

    let mut command_block = Matrix6::zeros();
    for i in 0..6 {
        for j in 0..6 {
            command_block[(i, j)] = raw_model[(i, FEAT_CMD_POS + j)];
        }
    }
    let selector = Matrix6::from_diagonal(&Vector6::from_row_slice(&cfg.selector));
    let mut hessian = command_block.transpose() * selector * command_block;
    for i in 0..3 {
        hessian[(i, i)] += cfg.lambda;
        hessian[(3 + i, 3 + i)] += cfg.mu;
    }
    let selected = selector * Vector6::from_iterator(at_neutral.iter().cloned());
    let gradient = command_block.transpose() * selected;

    audit::record_factorization();
    let chol = nalgebra::Cholesky::new(hessian).ok_or_else(|| {
        Error::InternalInvariant("alignment quadratic is not positive definite".into())
    })?;
    let unclipped = -chol.solve(&gradient);

    let mut clipped = unclipped;
    for i in 0..3 {
        clipped[i] = clipped[i].clamp(-cfg.box_pos, cfg.box_pos);
        clipped[3 + i] = clipped[3 + i].clamp(-cfg.box_rot, cfg.box_rot);
    }
    Ok(AlignmentSolution { unclipped, clipped })
}

/// The command the policy emits at a pose: the clipped correction applied
/// to the current position and attitude.
pub fn solve_alignment(
    raw_model: &DMatrix<f64>,
    pose: &Pose,
    cfg: &ControllerConfig,
) -> Result<ControlCommand> {
    let solution = alignment_correction(raw_model, pose, cfg)?;
    Ok(command_from_correction(pose, &solution.clipped))
}

fn command_from_correction(pose: &Pose, correction: &Vector6<f64>) -> ControlCommand {
    ControlCommand::new(
        pose.position() + Vector3::new(correction[0], correction[1], correction[2]),
        Vector3::new(correction[3], correction[4], correction[5]),
    )
}

/// The predicted cost `|S y|^2 + lambda |dr|^2 + mu |phi|^2` of a correction.
pub fn predicted_objective(
    raw_model: &DMatrix<f64>,
    pose: &Pose,
    cfg: &ControllerConfig,
    correction: &Vector6<f64>,
) -> Result<f64> {
    let cmd = command_from_correction(pose, correction);
    let w = crate::types::feature_map(pose, &cmd)?;
    let y = raw_model * w.as_vector();
    let mut cost = 0.0;
    for i in 0..6 {
        cost += cfg.selector[i] * y[i] * y[i];
    }
    for i in 0..3 {
        cost += cfg.lambda * correction[i] * correction[i];
        cost += cfg.mu * correction[3 + i] * correction[3 + i];
    }
    Ok(cost)
}

/// Closed-loop run against the plant: at each step the policy (or the
/// neutral hold when disabled) is combined with the scripted insertion feed,
/// the plant settles, and the sensed and predicted wrenches are recorded.
///
/// `feed_until_depth` stops the scripted descent once the tip reaches that
/// world depth, so the run ends in a genuine steady state.
#[allow(clippy::too_many_arguments)]
pub fn alignment_episode(
    scene: &SocketScene,
    sensor: &mut SensorModel,
    start: PlantState,
    belief: &ModelBelief,
    noise: &NoiseSpec,
    cfg: &ControllerConfig,
    steps: usize,
    controller_on: bool,
    feed_until_depth: Option<f64>,
) -> Result<Vec<TraceStep>> {
    scene.validate()?;
    cfg.validate()?;
    let raw_model = belief.unwhitened_model(noise)?;
    let mut state = start;
    let mut trace = Vec::with_capacity(steps);
    for k in 0..steps {
        let pose = state.pose.clone();
        let mut cmd = if controller_on {
            solve_alignment(&raw_model, &pose, cfg)?
        } else {
            ControlCommand::hold(&pose)
        };
        let tip_world_z = (pose.position() + pose.rotation() * scene.tip_offset).z;
        let feed = match feed_until_depth {
            Some(limit) if tip_world_z <= -limit => 0.0,
            _ => cfg.insertion_feed,
        };
        // Fold the scripted feed into the z command, keeping the emitted
        // command inside the box.
        let dz = (cmd.desired_position.z - pose.position().z - feed)
            .clamp(-cfg.box_pos, cfg.box_pos);
        cmd.desired_position.z = pose.position().z + dz;

        let outcome = plant_step(&state, &cmd, scene)?;
        state = outcome.state;
        let truth = true_wrench(&state, &cmd, scene)?;
        let measured = sensor.measure(&truth);
        let features = features_for(&state, &cmd)?;
        let predicted = predict_with_model(&raw_model, &features)?;
        trace.push(TraceStep {
            index: k as u64,
            pose: state.pose.clone(),
            command: cmd,
            measured,
            predicted,
            innovation_variance: innovation_variance(belief, &features),
            clipped: outcome.lateral_clipped || outcome.bottom_clipped,
        });
    }
    Ok(trace)
}

/// `w' Sigma w + 1` under a frozen belief.
pub fn innovation_variance(belief: &ModelBelief, features: &FeatureVector) -> f64 {
    let w = features.as_vector();
    let mut scaled = nalgebra::DVector::zeros(w.len());
    scaled.gemv(1.0, belief.covariance(), w, 0.0);
    w.dot(&scaled) + 1.0
}
