//! Recursive estimator for the linear wrench model.
//!
//! Each row of the whitened model is a Kalman filter state with stationary
//! dynamics and a scalar measurement; because every row sees the same
//! feature vector, all rows share one covariance and one gain, and the whole
//! model updates with an outer product. The only division anywhere in the
//! update path is by the scalar innovation variance — no factorizations, no
//! solves, no inversions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::types::{FeatureVector, NoiseSpec, Wrench, WRENCH_DIM};

/// Innovation variances this far below one indicate the covariance lost
/// positive semidefiniteness.
const INNOVATION_VARIANCE_TOL: f64 = 1e-9;

/// Gaussian belief over the whitened model: mean estimate (one row per
/// sensor channel) and the covariance shared by all rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBelief {
    model: DMatrix<f64>,
    covariance: DMatrix<f64>,
    step_count: u64,
}

/// What a single measurement update produced.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    /// Innovation `z = y - G w`, one entry per sensor channel.
    pub innovation: DVector<f64>,
    /// Shared gain applied to every row.
    pub gain: DVector<f64>,
    /// Scalar innovation variance `s = w' Sigma w + 1`; never below one.
    pub innovation_variance: f64,
}

impl ModelBelief {
    /// Zero-mean belief with covariance `diag(prior_variances)`.
    pub fn from_prior(output_dim: usize, prior_variances: &DVector<f64>) -> Result<Self> {
        if output_dim == 0 || prior_variances.is_empty() {
            return Err(Error::InvalidInput("belief dimensions must be positive".into()));
        }
        if prior_variances.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::InvalidInput("prior variances must be positive and finite".into()));
        }
        Ok(ModelBelief {
            model: DMatrix::zeros(output_dim, prior_variances.len()),
            covariance: DMatrix::from_diagonal(prior_variances),
            step_count: 0,
        })
    }

    /// Rebuilds a belief from stored parts (e.g. a model file).
    pub fn from_parts(model: DMatrix<f64>, covariance: DMatrix<f64>, step_count: u64) -> Result<Self> {
        if model.ncols() != covariance.nrows() || !covariance.is_square() {
            return Err(Error::InvalidInput(format!(
                "model is {}x{} but covariance is {}x{}",
                model.nrows(),
                model.ncols(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if model.nrows() == 0 || model.ncols() == 0 {
            return Err(Error::InvalidInput("belief dimensions must be positive".into()));
        }
        if !model.iter().all(|v| v.is_finite()) || !covariance.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("belief contains non-finite entries".into()));
        }
        if (&covariance - covariance.transpose()).amax() > 1e-10 {
            return Err(Error::InvalidInput("covariance must be symmetric".into()));
        }
        Ok(ModelBelief {
            model,
            covariance,
            step_count,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.model.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.model.ncols()
    }

    /// Whitened-coordinate model estimate.
    pub fn model(&self) -> &DMatrix<f64> {
        &self.model
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One prediction/update cycle on a whitened measurement.
    ///
    /// Predict adds the process covariance; the measurement update applies
    /// the shared scalar-denominator gain to every row and refreshes the
    /// covariance in stabilized (Joseph) form, expanded into rank-one terms:
    /// `(I - l w')S(I - l w')' + l l' = S - l v' - v l' + s l l'` with
    /// `v = S w`. The expansion is exact and keeps the cost at
    /// matrix-vector products and rank-one updates.
    pub fn step(
        &mut self,
        noise: &NoiseSpec,
        features: &FeatureVector,
        target: &DVector<f64>,
    ) -> Result<StepDiagnostics> {
        let n_w = self.feature_dim();
        let n_y = self.output_dim();
        if features.len() != n_w {
            return Err(Error::InvalidInput(format!(
                "feature vector has length {}, expected {n_w}",
                features.len()
            )));
        }
        if noise.feature_dim() != n_w {
            return Err(Error::InvalidInput(format!(
                "noise spec is sized for {} features, expected {n_w}",
                noise.feature_dim()
            )));
        }
        if target.len() != n_y {
            return Err(Error::InvalidInput(format!(
                "target has length {}, expected {n_y}",
                target.len()
            )));
        }
        if !target.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("target contains non-finite entries".into()));
        }

        if !noise.process_cov_is_zero() {
            self.covariance += noise.process_cov();
        }

        let w = features.as_vector();
        let mut innovation = target.clone();
        innovation.gemv(-1.0, &self.model, w, 1.0);

        let mut scaled = DVector::zeros(n_w);
        scaled.gemv(1.0, &self.covariance, w, 0.0);
        let s = w.dot(&scaled) + 1.0;
        if !s.is_finite() {
            return Err(Error::InvalidInput("innovation variance overflowed".into()));
        }
        if s < 1.0 - INNOVATION_VARIANCE_TOL {
            return Err(Error::InternalInvariant(format!(
                "innovation variance {s} fell below one; covariance lost positive semidefiniteness"
            )));
        }
        let gain = &scaled / s;

        self.model.ger(1.0, &innovation, &gain, 1.0);

        self.covariance.ger(-1.0, &gain, &scaled, 1.0);
        self.covariance.ger(-1.0, &scaled, &gain, 1.0);
        self.covariance.ger(s, &gain, &gain, 1.0);
        symmetrize(&mut self.covariance);

        self.step_count += 1;
        Ok(StepDiagnostics {
            innovation,
            gain,
            innovation_variance: s,
        })
    }

    /// Conditions the belief on a zero-valued pseudo-measurement of each
    /// coordinate `i` with variance `(1/weights[i])^2`, one sequential
    /// scalar update per coordinate. Zero weights skip their coordinate.
    ///
    /// Immediately after initialization this is identical to having started
    /// from combined weights `sqrt(b^2 + rho^2)`; applied later it tightens
    /// the regularization without touching any past data.
    pub fn adaptive_regularize(&mut self, weights: &DVector<f64>) -> Result<()> {
        let n_w = self.feature_dim();
        if weights.len() != n_w {
            return Err(Error::InvalidInput(format!(
                "adaptive weights have length {}, expected {n_w}",
                weights.len()
            )));
        }
        if weights.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidInput("adaptive weights must be finite and >= 0".into()));
        }

        for i in 0..n_w {
            let rho = weights[i];
            if rho == 0.0 {
                continue;
            }
            let pseudo_variance = 1.0 / (rho * rho);
            let column = self.covariance.column(i).clone_owned();
            let s = column[i] + pseudo_variance;
            let gain = &column / s;

            let model_column = self.model.column(i).clone_owned();
            self.model.ger(-1.0, &model_column, &gain, 1.0);

            // Same expanded Joseph update as the measurement step, with the
            // unit coordinate vector as the observation row:
            // S - l v' - v l' + (S_ii + r) l l'.
            self.covariance.ger(-1.0, &gain, &column, 1.0);
            self.covariance.ger(-1.0, &column, &gain, 1.0);
            self.covariance.ger(s, &gain, &gain, 1.0);
        }
        symmetrize(&mut self.covariance);
        Ok(())
    }

    /// Raw-coordinate model view `L^{-T} G`.
    pub fn unwhitened_model(&self, noise: &NoiseSpec) -> Result<DMatrix<f64>> {
        unwhiten_model(noise, &self.model)
    }

    /// Predicted raw wrench for a feature vector.
    pub fn predict_wrench(&self, noise: &NoiseSpec, features: &FeatureVector) -> Result<Wrench> {
        let raw = self.unwhitened_model(noise)?;
        predict_with_model(&raw, features)
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Zero-mean belief over the full wrench model with covariance
/// `diag(1/b^2)` from the spec's regularization weights (capped where
/// configured).
pub fn init_belief(noise: &NoiseSpec) -> Result<ModelBelief> {
    ModelBelief::from_prior(WRENCH_DIM, &noise.prior_variances()?)
}

/// Maps a raw wrench into whitened coordinates (`L^T y`), where the sensor
/// noise has identity covariance.
pub fn whiten(noise: &NoiseSpec, measurement: &Wrench) -> Result<DVector<f64>> {
    if !measurement.is_finite() {
        return Err(Error::InvalidInput("measurement contains non-finite entries".into()));
    }
    let y = noise.whitener().transpose() * measurement.to_vector();
    Ok(DVector::from_column_slice(y.as_slice()))
}

/// Maps a whitened model back to raw sensor coordinates (`L^{-T} G`).
pub fn unwhiten_model(noise: &NoiseSpec, model: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if model.nrows() != WRENCH_DIM {
        return Err(Error::InvalidInput(format!(
            "model has {} rows, expected {WRENCH_DIM}",
            model.nrows()
        )));
    }
    let mut out = DMatrix::zeros(WRENCH_DIM, model.ncols());
    out.gemm(1.0, &DMatrix::from_iterator(6, 6, noise.unwhitener().iter().cloned()), model, 0.0);
    Ok(out)
}

/// Evaluates a raw-coordinate model on a feature vector.
pub fn predict_with_model(raw_model: &DMatrix<f64>, features: &FeatureVector) -> Result<Wrench> {
    if raw_model.nrows() != WRENCH_DIM || raw_model.ncols() != features.len() {
        return Err(Error::InvalidInput(format!(
            "model is {}x{} but feature vector has length {}",
            raw_model.nrows(),
            raw_model.ncols(),
            features.len()
        )));
    }
    let y = raw_model * features.as_vector();
    Ok(Wrench::new(
        nalgebra::Vector3::new(y[0], y[1], y[2]),
        nalgebra::Vector3::new(y[3], y[4], y[5]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::{solve_map_trajectory, solve_ridge_whitened, RegularizerForm};
    use nalgebra::{Matrix6, Vector3, Vector6};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_with(r: Matrix6<f64>, n_w: usize, b: f64, q: f64) -> NoiseSpec {
        NoiseSpec::new(
            r,
            DMatrix::identity(n_w, n_w) * q,
            DVector::from_element(n_w, b),
            DVector::zeros(n_w),
        )
        .unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn random_spd6(rng: &mut ChaCha8Rng) -> Matrix6<f64> {
        let mut a = Matrix6::zeros();
        for i in 0..6 {
            for j in 0..6 {
                a[(i, j)] = rng.random::<f64>() - 0.5;
            }
        }
        a * a.transpose() + Matrix6::identity() * 0.2
    }

    #[test]
    fn whiten_is_identity_for_unit_covariance() {
        let noise = noise_with(Matrix6::identity(), 3, 1.0, 0.0);
        let w = Wrench::new(Vector3::new(1.0, -2.0, 3.0), Vector3::new(0.5, 0.0, -0.1));
        let y = whiten(&noise, &w).unwrap();
        assert!((y - DVector::from_column_slice(w.to_vector().as_slice())).amax() < 1e-14);
    }

    #[test]
    fn whiten_halves_for_four_times_identity() {
        // R = 4I gives R^{-1} = (1/4)I = L L^T with L = (1/2)I.
        let noise = noise_with(Matrix6::identity() * 4.0, 3, 1.0, 0.0);
        let w = Wrench::new(Vector3::new(2.0, -4.0, 6.0), Vector3::new(1.0, 0.0, -0.2));
        let y = whiten(&noise, &w).unwrap();
        let expected = w.to_vector() / 2.0;
        assert!((y - DVector::from_column_slice(expected.as_slice())).amax() < 1e-12);
    }

    #[test]
    fn whitened_noise_has_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r = random_spd6(&mut rng);
        let noise = noise_with(r, 3, 1.0, 0.0);
        let sampler = nalgebra::Cholesky::new(r).unwrap().l();
        let samples = 100_000;
        let mut acc = Matrix6::zeros();
        for _ in 0..samples {
            let n = Vector6::from_fn(|_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let raw = Wrench::from_vector(&(sampler * n));
            let y = whiten(&noise, &raw).unwrap();
            let y6 = Vector6::from_column_slice(y.as_slice());
            acc += y6 * y6.transpose();
        }
        acc /= samples as f64;
        let defect = (acc - Matrix6::identity()).amax();
        assert!(defect < 5e-2, "sample covariance defect {defect:.3e}");
    }

    #[test]
    fn unwhiten_round_trips_the_whitener() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let noise = noise_with(random_spd6(&mut rng), 4, 1.0, 0.0);
        let g = DMatrix::from_fn(WRENCH_DIM, 4, |_, _| rng.random::<f64>() - 0.5);
        let raw = unwhiten_model(&noise, &g).unwrap();
        let lt = DMatrix::from_iterator(6, 6, noise.whitener().transpose().iter().cloned());
        let back = &lt * &raw;
        assert!((back - g).amax() < 1e-12);
    }

    #[test]
    fn init_belief_encodes_inverse_square_weights() {
        let noise = noise_with(Matrix6::identity(), 4, 1.0, 0.0);
        let belief = init_belief(&noise).unwrap();
        assert_eq!(belief.output_dim(), WRENCH_DIM);
        assert_eq!(belief.step_count(), 0);
        assert!(belief.model().amax() == 0.0);
        assert!((belief.covariance() - DMatrix::identity(4, 4)).amax() < 1e-15);

        let noise2 = noise_with(Matrix6::identity(), 4, 2.0, 0.0);
        let belief2 = init_belief(&noise2).unwrap();
        assert!((belief2.covariance() - DMatrix::identity(4, 4) * 0.25).amax() < 1e-15);
    }

    #[test]
    fn step_with_zero_features_only_inflates_covariance() {
        let n_w = 3;
        let noise = noise_with(Matrix6::identity(), n_w, 1.0, 0.125);
        let mut belief = init_belief(&noise).unwrap();
        let before_model = belief.model().clone();
        let w = FeatureVector::new(DVector::zeros(n_w)).unwrap();
        let y = DVector::from_element(WRENCH_DIM, 2.0);
        let diag = belief.step(&noise, &w, &y).unwrap();
        assert_eq!(diag.innovation, y);
        assert!(diag.gain.amax() == 0.0);
        assert_eq!(diag.innovation_variance, 1.0);
        assert_eq!(belief.model(), &before_model);
        let expected = DMatrix::identity(n_w, n_w) * 1.125;
        assert!((belief.covariance() - expected).amax() < 1e-15);
    }

    #[test]
    fn scalar_step_matches_hand_calculation_and_ridge() {
        // n_w = n_y = 1, unit prior, w = 1, y = 1:
        // s = 2, gain = 1/2, model = 1/2, covariance = 1/2.
        let noise = noise_with(Matrix6::identity(), 1, 1.0, 0.0);
        let mut belief = ModelBelief::from_prior(1, &DVector::from_vec(vec![1.0])).unwrap();
        let w = FeatureVector::new(DVector::from_vec(vec![1.0])).unwrap();
        let y = DVector::from_vec(vec![1.0]);
        let diag = belief.step(&noise, &w, &y).unwrap();
        assert_eq!(diag.innovation_variance, 2.0);
        assert_eq!(diag.gain[0], 0.5);
        assert_eq!(belief.model()[(0, 0)], 0.5);
        assert_eq!(belief.covariance()[(0, 0)], 0.5);

        let ridge = solve_ridge_whitened(
            &[DVector::from_vec(vec![1.0])],
            &[DVector::from_vec(vec![1.0])],
            &[(&DVector::from_vec(vec![1.0]), RegularizerForm::Diagonal)],
        )
        .unwrap();
        assert!((ridge[(0, 0)] - belief.model()[(0, 0)]).abs() < 1e-15);
    }

    #[test]
    fn filter_matches_batch_ridge_after_many_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let n_w = 7;
        let b = 0.7;
        let noise = noise_with(Matrix6::identity(), n_w, b, 0.0);
        let mut belief = init_belief(&noise).unwrap();
        let mut ws = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..500 {
            let w = random_vec(&mut rng, n_w);
            let y = random_vec(&mut rng, WRENCH_DIM);
            belief
                .step(&noise, &FeatureVector::new(w.clone()).unwrap(), &y)
                .unwrap();
            ws.push(w);
            ys.push(y);
        }
        let weights = DVector::from_element(n_w, b);
        let batch = solve_ridge_whitened(&ws, &ys, &[(&weights, RegularizerForm::Diagonal)]).unwrap();
        let rel = (belief.model() - &batch).norm() / batch.norm();
        assert!(rel < 1e-8, "relative error {rel:.3e}");
    }

    #[test]
    fn adaptive_regularize_with_zero_weights_is_a_no_op() {
        let noise = noise_with(Matrix6::identity(), 3, 1.0, 0.0);
        let mut belief = init_belief(&noise).unwrap();
        let w = FeatureVector::new(DVector::from_vec(vec![1.0, -0.5, 0.25])).unwrap();
        belief.step(&noise, &w, &DVector::from_element(6, 1.0)).unwrap();
        let snapshot = belief.clone();
        belief.adaptive_regularize(&DVector::zeros(3)).unwrap();
        assert_eq!(belief.model(), snapshot.model());
        assert_eq!(belief.covariance(), snapshot.covariance());
    }

    #[test]
    fn adaptive_regularize_rejects_negative_weights() {
        let noise = noise_with(Matrix6::identity(), 2, 1.0, 0.0);
        let mut belief = init_belief(&noise).unwrap();
        let err = belief.adaptive_regularize(&DVector::from_vec(vec![0.5, -0.1]));
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn scalar_adaptive_update_matches_hand_calculation() {
        // After the scalar step the belief is model = 1/2, covariance = 1/2.
        // A unit-weight pseudo-measurement gives r = 1, s = 3/2, gain = 1/3:
        // model -> 1/3, covariance -> 1/3, which is also the argmin of
        // (g - 1)^2 + g^2 + g^2.
        let noise = noise_with(Matrix6::identity(), 1, 1.0, 0.0);
        let mut belief = ModelBelief::from_prior(1, &DVector::from_vec(vec![1.0])).unwrap();
        let w = FeatureVector::new(DVector::from_vec(vec![1.0])).unwrap();
        belief.step(&noise, &w, &DVector::from_vec(vec![1.0])).unwrap();
        belief.adaptive_regularize(&DVector::from_vec(vec![1.0])).unwrap();
        assert!((belief.model()[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((belief.covariance()[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn filter_with_adaptive_regularization_matches_combined_batch_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let n_w = 5;
        let b = 0.9;
        let noise = noise_with(Matrix6::identity(), n_w, b, 0.0);
        let mut belief = init_belief(&noise).unwrap();
        let rho = DVector::from_vec(vec![0.8, 0.0, 1.5, 0.0, 0.3]);
        let mut ws = Vec::new();
        let mut ys = Vec::new();
        for k in 0..200 {
            if k == 50 {
                belief.adaptive_regularize(&rho).unwrap();
            }
            let w = random_vec(&mut rng, n_w);
            let y = random_vec(&mut rng, WRENCH_DIM);
            belief
                .step(&noise, &FeatureVector::new(w.clone()).unwrap(), &y)
                .unwrap();
            ws.push(w);
            ys.push(y);
        }
        let weights = DVector::from_element(n_w, b);
        let batch = solve_ridge_whitened(
            &ws,
            &ys,
            &[
                (&weights, RegularizerForm::Diagonal),
                (&rho, RegularizerForm::Diagonal),
            ],
        )
        .unwrap();
        let rel = (belief.model() - &batch).norm() / batch.norm();
        assert!(rel < 1e-8, "relative error {rel:.3e}");
    }

    #[test]
    fn adaptive_after_init_equals_init_with_combined_weights() {
        let n_w = 6;
        let b = DVector::from_vec(vec![0.5, 1.0, 2.0, 0.1, 3.0, 0.7]);
        let rho = DVector::from_vec(vec![1.0, 0.0, 0.5, 2.0, 0.0, 0.3]);
        let noise = NoiseSpec::new(
            Matrix6::identity(),
            DMatrix::zeros(n_w, n_w),
            b.clone(),
            rho.clone(),
        )
        .unwrap();
        let mut regularized = init_belief(&noise).unwrap();
        regularized.adaptive_regularize(&rho).unwrap();

        let combined = b.zip_map(&rho, |bi, ri| (bi * bi + ri * ri).sqrt());
        let noise_combined = NoiseSpec::new(
            Matrix6::identity(),
            DMatrix::zeros(n_w, n_w),
            combined,
            DVector::zeros(n_w),
        )
        .unwrap();
        let reference = init_belief(&noise_combined).unwrap();
        let defect = (regularized.covariance() - reference.covariance()).amax();
        assert!(defect < 1e-10, "covariance defect {defect:.3e}");
        assert_eq!(regularized.model(), reference.model());
    }

    #[test]
    fn predictions_from_zero_and_selector_models() {
        use crate::types::{feature_map, ControlCommand, Pose, FEATURE_DIM};
        let noise = noise_with(Matrix6::identity(), FEATURE_DIM, 1.0, 0.0);
        let belief = init_belief(&noise).unwrap();
        let pose = Pose::new(Vector3::new(0.1, 0.2, 0.3), nalgebra::Matrix3::identity()).unwrap();
        let cmd = ControlCommand::new(Vector3::new(0.4, 0.5, 0.6), Vector3::zeros());
        let w = feature_map(&pose, &cmd).unwrap();
        let zero = belief.predict_wrench(&noise, &w).unwrap();
        assert_eq!(zero, Wrench::zero());

        // Column j of an identity block maps feature j to output j.
        let mut selector = DMatrix::zeros(WRENCH_DIM, FEATURE_DIM);
        for j in 0..WRENCH_DIM {
            selector[(j, j)] = 1.0;
        }
        let belief =
            ModelBelief::from_parts(selector, DMatrix::identity(FEATURE_DIM, FEATURE_DIM), 0)
                .unwrap();
        let y = belief.predict_wrench(&noise, &w).unwrap().to_vector();
        for j in 0..WRENCH_DIM {
            assert!((y[j] - w.as_vector()[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn covariance_stays_symmetric_and_nearly_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let n_w = 8;
        let noise = noise_with(Matrix6::identity(), n_w, 0.5, 0.0);
        let mut belief = init_belief(&noise).unwrap();
        for _ in 0..1000 {
            let w = random_vec(&mut rng, n_w) * 3.0;
            let y = random_vec(&mut rng, WRENCH_DIM);
            let diag = belief
                .step(&noise, &FeatureVector::new(w).unwrap(), &y)
                .unwrap();
            assert!(diag.innovation_variance >= 1.0);
        }
        let cov = belief.covariance();
        assert!((cov - cov.transpose()).amax() <= 1e-10);
        let min_eig = cov
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(min_eig >= -1e-10, "min eigenvalue {min_eig:.3e}");
    }

    #[test]
    fn process_noise_tracks_a_model_change_better_than_none() {
        // Two data phases generated by different models; with forgetting the
        // terminal estimate must sit closer to the second model.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n_w = 5;
        let model_a = DMatrix::from_fn(WRENCH_DIM, n_w, |_, _| rng.random::<f64>() - 0.5);
        let model_b = DMatrix::from_fn(WRENCH_DIM, n_w, |_, _| rng.random::<f64>() - 0.5);
        let mut data = Vec::new();
        for k in 0..600 {
            let truth = if k < 300 { &model_a } else { &model_b };
            let w = random_vec(&mut rng, n_w);
            let y = truth * &w;
            data.push((w, y));
        }

        let mut errors = Vec::new();
        for q in [0.0, 1e-3] {
            let noise = noise_with(Matrix6::identity(), n_w, 1.0, q);
            let mut belief = init_belief(&noise).unwrap();
            for (w, y) in &data {
                belief
                    .step(&noise, &FeatureVector::new(w.clone()).unwrap(), y)
                    .unwrap();
            }
            errors.push((belief.model() - &model_b).norm());
        }
        assert!(
            errors[1] < errors[0],
            "forgetting error {} not below static error {}",
            errors[1],
            errors[0]
        );
    }

    #[test]
    fn broadcast_update_equals_independent_row_filters() {
        // Six scalar-measurement filters, one per sensor channel, each with
        // its own covariance copy, must reproduce the broadcast belief: the
        // covariance recursions are identical and the row updates share the
        // gain.
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let n_w = 6;
        let q = 1e-4;
        let noise = noise_with(Matrix6::identity(), n_w, 0.8, q);
        let mut belief = init_belief(&noise).unwrap();

        let prior = noise.prior_variances().unwrap();
        let mut row_models: Vec<DVector<f64>> =
            (0..WRENCH_DIM).map(|_| DVector::zeros(n_w)).collect();
        let mut row_covs: Vec<DMatrix<f64>> =
            (0..WRENCH_DIM).map(|_| DMatrix::from_diagonal(&prior)).collect();

        for _ in 0..200 {
            let w = random_vec(&mut rng, n_w);
            let y = random_vec(&mut rng, WRENCH_DIM);

            for j in 0..WRENCH_DIM {
                let cov = &mut row_covs[j];
                *cov += noise.process_cov();
                let mut scaled = DVector::zeros(n_w);
                scaled.gemv(1.0, cov, &w, 0.0);
                let s = w.dot(&scaled) + 1.0;
                let gain = &scaled / s;
                let innovation = y[j] - row_models[j].dot(&w);
                row_models[j].axpy(innovation, &gain, 1.0);
                cov.ger(-1.0, &gain, &scaled, 1.0);
                cov.ger(-1.0, &scaled, &gain, 1.0);
                cov.ger(s, &gain, &gain, 1.0);
                let n = cov.nrows();
                for a in 0..n {
                    for c in (a + 1)..n {
                        let avg = 0.5 * (cov[(a, c)] + cov[(c, a)]);
                        cov[(a, c)] = avg;
                        cov[(c, a)] = avg;
                    }
                }
            }

            belief
                .step(&noise, &FeatureVector::new(w.clone()).unwrap(), &y)
                .unwrap();
        }

        for j in 0..WRENCH_DIM {
            assert_eq!(
                row_covs[j], *belief.covariance(),
                "row {j} covariance diverged from the shared one"
            );
            for i in 0..n_w {
                assert!(
                    (row_models[j][i] - belief.model()[(j, i)]).abs() <= 1e-12,
                    "row {j} entry {i}"
                );
            }
        }
    }

    #[test]
    fn terminal_filter_mean_matches_map_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n_w = 3;
        let q = 0.01;
        let noise = noise_with(Matrix6::identity(), n_w, 1.0, q);
        let mut belief = ModelBelief::from_prior(1, &noise.prior_variances().unwrap()).unwrap();

        let mut observations = Vec::new();
        let mut measurements = Vec::new();
        for _ in 0..200 {
            let w = random_vec(&mut rng, n_w);
            let z = rng.random::<f64>() * 2.0 - 1.0;
            belief
                .step(
                    &noise,
                    &FeatureVector::new(w.clone()).unwrap(),
                    &DVector::from_vec(vec![z]),
                )
                .unwrap();
            observations.push(DMatrix::from_fn(1, n_w, |_, j| w[j]));
            measurements.push(DVector::from_vec(vec![z]));
        }

        let trajectory = solve_map_trajectory(
            &DVector::zeros(n_w),
            &DMatrix::identity(n_w, n_w),
            &DMatrix::identity(n_w, n_w),
            &observations,
            &(DMatrix::identity(n_w, n_w) * q),
            &DMatrix::identity(1, 1),
            &measurements,
        )
        .unwrap();
        let terminal = trajectory.last().unwrap();
        let filter_row = belief.model().row(0).transpose();
        let defect = (terminal - &filter_row).amax();
        assert!(defect < 1e-8, "terminal defect {defect:.3e}");
    }

    #[test]
    fn step_rejects_bad_inputs() {
        let noise = noise_with(Matrix6::identity(), 3, 1.0, 0.0);
        let mut belief = init_belief(&noise).unwrap();
        // Wrong feature length.
        let short = FeatureVector::new(DVector::zeros(2)).unwrap();
        assert!(belief.step(&noise, &short, &DVector::zeros(6)).is_err());
        // Wrong target length.
        let w = FeatureVector::new(DVector::zeros(3)).unwrap();
        assert!(belief.step(&noise, &w, &DVector::zeros(5)).is_err());
        // Non-finite target.
        let mut y = DVector::zeros(6);
        y[0] = f64::NAN;
        assert!(belief.step(&noise, &w, &y).is_err());
    }
}
