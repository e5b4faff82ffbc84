//! Domain types shared by the estimator, oracles, simulator, and controller,
//! plus the feature map that turns a pose/command pair into the regressor.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};

use crate::audit;
use crate::error::{Error, Result};

/// Wrench dimension: three force plus three torque components.
pub const WRENCH_DIM: usize = 6;

/// Length of the engineered feature vector:
/// position (3) + flattened rotation (9) + commanded position (3)
/// + commanded rotation correction (3) + constant bias (1).
pub const FEATURE_DIM: usize = 19;

/// Feature layout offsets.
pub const FEAT_POS: usize = 0;
pub const FEAT_ROT: usize = 3;
pub const FEAT_CMD_POS: usize = 12;
pub const FEAT_CMD_ROT: usize = 15;
pub const FEAT_BIAS: usize = 18;

/// Orthonormality tolerance for rotation matrices.
const ROTATION_TOL: f64 = 1e-9;

/// End-effector pose: Cartesian position in meters and a rotation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    position: Vector3<f64>,
    rotation: Matrix3<f64>,
}

impl Pose {
    /// Builds a pose, checking that `rotation` is orthonormal with
    /// determinant one and that everything is finite.
    pub fn new(position: Vector3<f64>, rotation: Matrix3<f64>) -> Result<Self> {
        if !position.iter().all(|v| v.is_finite()) || !rotation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("pose contains non-finite entries".into()));
        }
        check_rotation(&rotation)?;
        Ok(Pose { position, rotation })
    }

    pub fn identity() -> Self {
        Pose {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
        }
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.position
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }
}

/// Checks orthonormality and right-handedness of a rotation matrix.
pub fn check_rotation(rotation: &Matrix3<f64>) -> Result<()> {
    let defect = (rotation.transpose() * rotation - Matrix3::identity()).amax();
    if defect > ROTATION_TOL {
        return Err(Error::InvalidInput(format!(
            "rotation matrix is not orthonormal (defect {defect:.3e})"
        )));
    }
    let det = rotation.determinant();
    if (det - 1.0).abs() > ROTATION_TOL {
        return Err(Error::InvalidInput(format!(
            "rotation matrix determinant is {det:.12}, expected 1"
        )));
    }
    Ok(())
}

/// Impedance-controller setpoint: absolute desired position plus an
/// axis-angle attitude correction relative to the current attitude.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlCommand {
    pub desired_position: Vector3<f64>,
    pub rotation_correction: Vector3<f64>,
}

impl ControlCommand {
    pub fn new(desired_position: Vector3<f64>, rotation_correction: Vector3<f64>) -> Self {
        ControlCommand {
            desired_position,
            rotation_correction,
        }
    }

    /// The command that holds the given pose: desired position at the current
    /// position, no attitude correction.
    pub fn hold(pose: &Pose) -> Self {
        ControlCommand {
            desired_position: *pose.position(),
            rotation_correction: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.desired_position.iter().all(|v| v.is_finite())
            && self.rotation_correction.iter().all(|v| v.is_finite())
    }
}

/// Regressor vector fed to the linear model.
///
/// [`feature_map`] produces the engineered 19-entry layout; synthetic vectors
/// of any length are allowed so the estimator can be exercised at other sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(DVector<f64>);

impl FeatureVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("feature vector contains non-finite entries".into()));
        }
        Ok(FeatureVector(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

/// Sensed or predicted wrench: force in newtons, torque in newton-meters.
/// Serializes as the 6-vector `[force, torque]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn new(force: Vector3<f64>, torque: Vector3<f64>) -> Self {
        Wrench { force, torque }
    }

    pub fn zero() -> Self {
        Wrench {
            force: Vector3::zeros(),
            torque: Vector3::zeros(),
        }
    }

    pub fn to_vector(self) -> Vector6<f64> {
        Vector6::new(
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Wrench {
            force: Vector3::new(v[0], v[1], v[2]),
            torque: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().all(|v| v.is_finite()) && self.torque.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Add for Wrench {
    type Output = Wrench;
    fn add(self, rhs: Wrench) -> Wrench {
        Wrench {
            force: self.force + rhs.force,
            torque: self.torque + rhs.torque,
        }
    }
}

impl std::ops::Sub for Wrench {
    type Output = Wrench;
    fn sub(self, rhs: Wrench) -> Wrench {
        Wrench {
            force: self.force - rhs.force,
            torque: self.torque - rhs.torque,
        }
    }
}

/// Default cap on the prior variance substituted for unregularized
/// coordinates (entries of `b` equal to zero).
pub const DEFAULT_PRIOR_VARIANCE_CAP: f64 = 1e6;

/// Noise and regularization description: sensor covariance with its
/// whitening factors, process covariance, and regularization weights.
///
/// The whitening factors are computed once here and reused; the recursive
/// filter itself never factors anything.
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    sensor_cov: Matrix6<f64>,
    whitener: Matrix6<f64>,
    unwhitener: Matrix6<f64>,
    process_cov: DMatrix<f64>,
    process_cov_is_zero: bool,
    reg_weights: DVector<f64>,
    adaptive_weights: DVector<f64>,
    prior_variance_cap: Option<f64>,
}

impl NoiseSpec {
    /// Builds a spec from the sensor covariance, process covariance,
    /// regularization weights `b`, and adaptive regularization weights `rho`.
    ///
    /// `sensor_cov` must be symmetric positive definite; `process_cov`
    /// symmetric positive semidefinite and sized like `reg_weights`.
    pub fn new(
        sensor_cov: Matrix6<f64>,
        process_cov: DMatrix<f64>,
        reg_weights: DVector<f64>,
        adaptive_weights: DVector<f64>,
    ) -> Result<Self> {
        let n_w = reg_weights.len();
        if n_w == 0 {
            return Err(Error::InvalidConfig("regularization weights must be non-empty".into()));
        }
        if process_cov.nrows() != n_w || process_cov.ncols() != n_w {
            return Err(Error::InvalidConfig(format!(
                "process covariance is {}x{}, expected {n_w}x{n_w}",
                process_cov.nrows(),
                process_cov.ncols()
            )));
        }
        if adaptive_weights.len() != n_w {
            return Err(Error::InvalidConfig(format!(
                "adaptive weights have length {}, expected {n_w}",
                adaptive_weights.len()
            )));
        }
        if !sensor_cov.iter().all(|v| v.is_finite())
            || !process_cov.iter().all(|v| v.is_finite())
            || !reg_weights.iter().all(|v| v.is_finite())
            || !adaptive_weights.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidConfig("noise spec contains non-finite entries".into()));
        }
        if reg_weights.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidConfig("regularization weights must be >= 0".into()));
        }
        if adaptive_weights.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidConfig("adaptive weights must be >= 0".into()));
        }
        if (sensor_cov - sensor_cov.transpose()).amax() > 1e-10 {
            return Err(Error::InvalidConfig("sensor covariance must be symmetric".into()));
        }
        if (&process_cov - process_cov.transpose()).amax() > 1e-10 {
            return Err(Error::InvalidConfig("process covariance must be symmetric".into()));
        }

        // Offline factorization of the sensor covariance; stored and reused.
        audit::record_factorization();
        let chol = nalgebra::Cholesky::new(sensor_cov)
            .ok_or_else(|| Error::InvalidConfig("sensor covariance is not positive definite".into()))?;
        let sensor_cov_inv = chol.inverse();
        audit::record_factorization();
        let whitener = nalgebra::Cholesky::new(sensor_cov_inv)
            .ok_or_else(|| {
                Error::InvalidConfig("inverse sensor covariance is not positive definite".into())
            })?
            .l();
        audit::record_factorization();
        let unwhitener = whitener
            .transpose()
            .try_inverse()
            .ok_or_else(|| Error::InternalInvariant("whitening factor is singular".into()))?;

        let factor_defect = (whitener * whitener.transpose() - sensor_cov_inv).amax()
            / sensor_cov_inv.amax().max(1.0);
        if factor_defect > 1e-10 {
            return Err(Error::InternalInvariant(format!(
                "whitening factorization defect {factor_defect:.3e}"
            )));
        }
        let inverse_defect = (unwhitener * whitener.transpose() - Matrix6::identity()).amax();
        if inverse_defect > 1e-10 {
            return Err(Error::InternalInvariant(format!(
                "whitening inverse defect {inverse_defect:.3e}"
            )));
        }

        let process_cov_is_zero = process_cov.amax() == 0.0;
        let diagonal_only = (0..n_w).all(|i| {
            (0..n_w).all(|j| i == j || process_cov[(i, j)] == 0.0)
        });
        if !process_cov_is_zero {
            let min_eig = if diagonal_only {
                process_cov.diagonal().min()
            } else {
                audit::record_factorization();
                process_cov
                    .clone()
                    .symmetric_eigenvalues()
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min)
            };
            if min_eig < -1e-12 {
                return Err(Error::InvalidConfig(format!(
                    "process covariance has eigenvalue {min_eig:.3e} < -1e-12"
                )));
            }
        }
        Ok(NoiseSpec {
            sensor_cov,
            whitener,
            unwhitener,
            process_cov,
            process_cov_is_zero,
            reg_weights,
            adaptive_weights,
            prior_variance_cap: Some(DEFAULT_PRIOR_VARIANCE_CAP),
        })
    }

    /// Replaces the prior-variance cap. `None` disables the cap, in which
    /// case zero regularization weights become an error at belief
    /// initialization.
    pub fn with_prior_variance_cap(mut self, cap: Option<f64>) -> Result<Self> {
        if let Some(c) = cap {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "prior variance cap must be positive and finite, got {c}"
                )));
            }
        }
        self.prior_variance_cap = cap;
        Ok(self)
    }

    pub fn feature_dim(&self) -> usize {
        self.reg_weights.len()
    }

    pub fn sensor_cov(&self) -> &Matrix6<f64> {
        &self.sensor_cov
    }

    /// Lower-triangular Cholesky factor of the inverse sensor covariance.
    pub fn whitener(&self) -> &Matrix6<f64> {
        &self.whitener
    }

    /// Inverse transpose of the whitener; maps whitened model rows back to
    /// raw sensor coordinates.
    pub fn unwhitener(&self) -> &Matrix6<f64> {
        &self.unwhitener
    }

    pub fn process_cov(&self) -> &DMatrix<f64> {
        &self.process_cov
    }

    pub fn process_cov_is_zero(&self) -> bool {
        self.process_cov_is_zero
    }

    pub fn reg_weights(&self) -> &DVector<f64> {
        &self.reg_weights
    }

    pub fn adaptive_weights(&self) -> &DVector<f64> {
        &self.adaptive_weights
    }

    pub fn prior_variance_cap(&self) -> Option<f64> {
        self.prior_variance_cap
    }

    /// Per-coordinate prior variances `1/b^2`, capped where configured.
    ///
    /// Errors if an unregularized coordinate (`b = 0`) has no cap to fall
    /// back on.
    pub fn prior_variances(&self) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.reg_weights.len());
        for (i, &b) in self.reg_weights.iter().enumerate() {
            let raw = if b > 0.0 { 1.0 / (b * b) } else { f64::INFINITY };
            out[i] = match self.prior_variance_cap {
                Some(cap) => raw.min(cap),
                None if raw.is_finite() => raw,
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "regularization weight {i} is zero and no prior variance cap is configured"
                    )))
                }
            };
        }
        Ok(out)
    }

    /// Regularization weights as the prior actually encodes them:
    /// `sqrt(1 / prior_variance)`, i.e. the cap folded in. The batch oracle
    /// uses these for exact equivalence with the recursive filter.
    pub fn effective_reg_weights(&self) -> Result<DVector<f64>> {
        Ok(self.prior_variances()?.map(|v| (1.0 / v).sqrt()))
    }
}

/// Builds the regressor `[position, vec(rotation), desired_position,
/// rotation_correction, 1]` with the rotation flattened in column-major
/// order. Affine in the command for a fixed pose.
pub fn feature_map(pose: &Pose, cmd: &ControlCommand) -> Result<FeatureVector> {
    if !cmd.is_finite() {
        return Err(Error::InvalidInput("control command contains non-finite entries".into()));
    }
    let mut w = DVector::zeros(FEATURE_DIM);
    w.rows_mut(FEAT_POS, 3).copy_from(pose.position());
    w.rows_mut(FEAT_ROT, 9)
        .copy_from_slice(pose.rotation().as_slice());
    w.rows_mut(FEAT_CMD_POS, 3).copy_from(&cmd.desired_position);
    w.rows_mut(FEAT_CMD_ROT, 3).copy_from(&cmd.rotation_correction);
    w[FEAT_BIAS] = 1.0;
    Ok(FeatureVector(w))
}

fn unskew_twice(m: &Matrix3<f64>) -> Vector3<f64> {
    // For m = R - R^T this returns 2 sin(theta) * axis.
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// Rotation angle below which the relative rotation is treated as identity.
const AXIS_ANGLE_ZERO_TOL: f64 = 1e-12;
/// Distance from pi below which the symmetric-part branch is used.
const AXIS_ANGLE_NEAR_PI: f64 = 1e-4;
/// Distance from pi below which the sign of the axis is purely conventional.
const AXIS_ANGLE_PI_SIGN_TOL: f64 = 1e-7;

/// Axis-angle vector of the relative rotation from `current` to `desired`:
/// the result `phi` satisfies `exp(skew(phi)) = current^T * desired` with
/// `|phi| <= pi`.
///
/// Within `1e-7` of a half turn the axis sign is ambiguous; the convention
/// is then to make the first entry of the axis with magnitude above `1e-12`
/// positive.
pub fn axis_angle_between(current: &Matrix3<f64>, desired: &Matrix3<f64>) -> Result<Vector3<f64>> {
    check_rotation(current)?;
    check_rotation(desired)?;
    let q = current.transpose() * desired;
    let cos_theta = ((q.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();

    if theta < AXIS_ANGLE_ZERO_TOL {
        return Ok(0.5 * unskew_twice(&q));
    }

    if std::f64::consts::PI - theta > AXIS_ANGLE_NEAR_PI {
        // sin(theta) is safely away from zero here.
        let factor = theta / (2.0 * theta.sin());
        return Ok(factor * unskew_twice(&q));
    }

    // Near a half turn the antisymmetric part vanishes; recover the axis from
    // the symmetric part instead: (Q + Q^T)/2 = cos(theta) I + (1-cos) a a^T.
    let sym = (q + q.transpose()) / 2.0;
    let outer = (sym - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
    let pivot = (0..3)
        .max_by(|&a, &b| outer[(a, a)].partial_cmp(&outer[(b, b)]).unwrap())
        .unwrap();
    let scale = outer[(pivot, pivot)].max(0.0).sqrt();
    if scale == 0.0 {
        return Err(Error::InternalInvariant(
            "degenerate axis extraction near half turn".into(),
        ));
    }
    let mut axis = Vector3::new(
        outer[(0, pivot)] / scale,
        outer[(1, pivot)] / scale,
        outer[(2, pivot)] / scale,
    );
    axis /= axis.norm();

    let sin_part = 0.5 * unskew_twice(&q); // sin(theta) * axis
    let alignment = sin_part.dot(&axis);
    if alignment.abs() > AXIS_ANGLE_PI_SIGN_TOL {
        if alignment < 0.0 {
            axis = -axis;
        }
    } else {
        // Conventional deterministic sign at (numerically) half a turn.
        for i in 0..3 {
            if axis[i].abs() > 1e-12 {
                if axis[i] < 0.0 {
                    axis = -axis;
                }
                break;
            }
        }
    }
    Ok(theta * axis)
}
