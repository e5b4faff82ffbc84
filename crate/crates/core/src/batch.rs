//! Closed-form reference solvers for the estimation problems the recursive
//! filter solves incrementally.
//!
//! These oracles are allowed to factor and invert matrices — their job is
//! correctness, not speed. Every equivalence test in the crate ultimately
//! bottoms out here.

use nalgebra::{DMatrix, DVector};

use crate::audit;
use crate::error::{Error, Result};
use crate::filter::whiten;
use crate::types::{FeatureVector, NoiseSpec, Wrench, WRENCH_DIM};

/// Singular values below this fraction of the largest are treated as zero
/// when deciding rank deficiency.
const RANK_TOL: f64 = 1e-12;

/// A recorded identification run: features paired with raw wrench
/// measurements.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<FeatureVector>,
    measurements: Vec<Wrench>,
}

impl Dataset {
    pub fn new(features: Vec<FeatureVector>, measurements: Vec<Wrench>) -> Result<Self> {
        if features.len() != measurements.len() {
            return Err(Error::InvalidInput(format!(
                "{} features but {} measurements",
                features.len(),
                measurements.len()
            )));
        }
        if features.is_empty() {
            return Err(Error::InvalidInput("dataset must contain at least one sample".into()));
        }
        let n_w = features[0].len();
        if features.iter().any(|f| f.len() != n_w) {
            return Err(Error::InvalidInput("feature vectors have inconsistent lengths".into()));
        }
        Ok(Dataset { features, measurements })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    pub fn measurements(&self) -> &[Wrench] {
        &self.measurements
    }
}

/// Which quadratic penalty a weight vector `b` denotes.
///
/// The same weights support two readings: the rank-one penalty `(b^T g)^2`
/// per row, and the diagonal penalty `|diag(b) g|^2` that a diagonal prior
/// covariance `diag(1/b^2)` encodes. They coincide only in one dimension;
/// both are kept so either reading can be checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizerForm {
    RankOne,
    Diagonal,
}

fn penalty_matrix(weights: &DVector<f64>, form: RegularizerForm) -> DMatrix<f64> {
    let n = weights.len();
    match form {
        RegularizerForm::RankOne => {
            let mut p = DMatrix::zeros(n, n);
            p.ger(1.0, weights, weights, 0.0);
            p
        }
        RegularizerForm::Diagonal => DMatrix::from_diagonal(&weights.map(|v| v * v)),
    }
}

fn validate_samples(features: &[DVector<f64>], targets: &[DVector<f64>]) -> Result<(usize, usize)> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::InvalidInput(
            "feature and target sequences must be non-empty and equally long".into(),
        ));
    }
    let n_w = features[0].len();
    let n_y = targets[0].len();
    for (k, (w, y)) in features.iter().zip(targets).enumerate() {
        if w.len() != n_w || y.len() != n_y {
            return Err(Error::InvalidInput(format!("inconsistent dimensions at sample {k}")));
        }
        if !w.iter().all(|v| v.is_finite()) || !y.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite values at sample {k}")));
        }
    }
    Ok((n_w, n_y))
}

/// Least-squares solve in whitened coordinates with arbitrary quadratic
/// penalties: minimizes `sum_k |G w_k - y_k|^2 + sum_p penalty_p(G)` and
/// returns the `n_y x n_w` minimizer.
///
/// Each row of `G` decouples; one shared normal-equation matrix is factored
/// and reused for all rows.
pub fn solve_ridge_whitened(
    features: &[DVector<f64>],
    targets: &[DVector<f64>],
    penalties: &[(&DVector<f64>, RegularizerForm)],
) -> Result<DMatrix<f64>> {
    let (n_w, n_y) = validate_samples(features, targets)?;
    for (weights, _) in penalties {
        if weights.len() != n_w {
            return Err(Error::InvalidInput(format!(
                "penalty weights have length {}, expected {n_w}",
                weights.len()
            )));
        }
        if weights.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput("penalty weights must be finite and >= 0".into()));
        }
    }

    let mut gram = DMatrix::zeros(n_w, n_w);
    let mut cross = DMatrix::zeros(n_w, n_y); // columns are per-row right-hand sides
    for (w, y) in features.iter().zip(targets) {
        gram.ger(1.0, w, w, 1.0);
        cross.ger(1.0, w, y, 1.0);
    }
    let mut system = gram;
    for (weights, form) in penalties {
        system += penalty_matrix(weights, *form);
    }

    audit::record_factorization();
    let svd = system.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let deficiency = svd
        .singular_values
        .iter()
        .filter(|&&sv| sv <= RANK_TOL * sigma_max)
        .count();
    if deficiency > 0 || sigma_max == 0.0 {
        return Err(Error::RankDeficient {
            dim: n_w,
            deficiency: if sigma_max == 0.0 { n_w } else { deficiency },
        });
    }
    let solution = svd
        .solve(&cross, 0.0)
        .map_err(|e| Error::InternalInvariant(format!("SVD solve failed: {e}")))?;
    Ok(solution.transpose())
}

fn whitened_targets(data: &Dataset, noise: &NoiseSpec) -> Result<Vec<DVector<f64>>> {
    data.measurements().iter().map(|y| whiten(noise, y)).collect()
}

fn feature_columns(data: &Dataset) -> Vec<DVector<f64>> {
    data.features().iter().map(|f| f.as_vector().clone()).collect()
}

/// Maximum-likelihood estimate of the raw model: minimizes the sensor-
/// covariance-weighted residual `sum_k |G~ w_k - y~_k|^2_{R^-1}` by solving
/// the whitened normal equations and mapping the result back.
///
/// Without regularization a singular feature Gram matrix is an error that
/// reports the dimension of the unidentifiable subspace.
pub fn solve_weighted(data: &Dataset, noise: &NoiseSpec) -> Result<DMatrix<f64>> {
    let ws = feature_columns(data);
    let ys = whitened_targets(data, noise)?;
    let whitened = solve_ridge_whitened(&ws, &ys, &[])?;
    crate::filter::unwhiten_model(noise, &whitened)
}

/// Regularized solve in whitened coordinates using the spec's weights `b`
/// (as the prior actually encodes them, i.e. with the variance cap folded
/// in) plus an optional extra penalty. Returns the whitened-coordinate
/// minimizer; map back with [`crate::filter::unwhiten_model`].
pub fn solve_ridge(
    data: &Dataset,
    noise: &NoiseSpec,
    form: RegularizerForm,
    extra_reg: Option<&DVector<f64>>,
) -> Result<DMatrix<f64>> {
    let ws = feature_columns(data);
    let ys = whitened_targets(data, noise)?;
    let base = noise.effective_reg_weights()?;
    let mut penalties: Vec<(&DVector<f64>, RegularizerForm)> = vec![(&base, form)];
    if let Some(extra) = extra_reg {
        penalties.push((extra, form));
    }
    solve_ridge_whitened(&ws, &ys, &penalties)
}

/// Same problem as [`solve_ridge_whitened`] posed over the stacked vector of
/// all rows of `G` and solved as one `n_y * n_w` system. Exists to verify
/// that the per-row decomposition loses nothing.
pub fn solve_ridge_whitened_joint(
    features: &[DVector<f64>],
    targets: &[DVector<f64>],
    penalties: &[(&DVector<f64>, RegularizerForm)],
) -> Result<DMatrix<f64>> {
    let (n_w, n_y) = validate_samples(features, targets)?;
    let dim = n_w * n_y;
    let mut system = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);

    // Stacking convention: g = [row_1, row_2, ..., row_{n_y}] so row j of G
    // occupies the block j*n_w..(j+1)*n_w. Measurement k contributes the
    // block matrix M_k with M_k[j, j*n_w..] = w_k^T.
    for (w, y) in features.iter().zip(targets) {
        let mut m = DMatrix::zeros(n_y, dim);
        for j in 0..n_y {
            m.view_mut((j, j * n_w), (1, n_w)).copy_from(&w.transpose());
        }
        system.gemm_tr(1.0, &m, &m, 1.0);
        rhs.gemv_tr(1.0, &m, y, 1.0);
    }
    for (weights, form) in penalties {
        if weights.len() != n_w {
            return Err(Error::InvalidInput(format!(
                "penalty weights have length {}, expected {n_w}",
                weights.len()
            )));
        }
        let block = penalty_matrix(weights, *form);
        for j in 0..n_y {
            system
                .view_mut((j * n_w, j * n_w), (n_w, n_w))
                .zip_apply(&block, |s, b| *s += b);
        }
    }

    audit::record_factorization();
    let chol = nalgebra::Cholesky::new(system)
        .ok_or(Error::RankDeficient { dim, deficiency: 0 })?;
    let stacked = chol.solve(&rhs);

    let mut out = DMatrix::zeros(n_y, n_w);
    for j in 0..n_y {
        out.row_mut(j).copy_from(&stacked.rows(j * n_w, n_w).transpose());
    }
    Ok(out)
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    audit::record_factorization();
    nalgebra::Cholesky::new(m.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::InvalidInput(format!("{what} must be symmetric positive definite")))
}

/// Jointly smoothed state trajectory of a linear-Gaussian chain: minimizes
/// the prior, dynamics, and measurement residuals (each weighted by the
/// inverse of its covariance) over the whole trajectory with one dense
/// normal-equation solve, returning states 0..=m.
///
/// The terminal entry must agree with a Kalman filter run over the same
/// data; tests rely on that identity.
#[allow(clippy::too_many_arguments)]
pub fn solve_map_trajectory(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    transition: &DMatrix<f64>,
    observations: &[DMatrix<f64>],
    process_cov: &DMatrix<f64>,
    measurement_cov: &DMatrix<f64>,
    measurements: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let n = prior_mean.len();
    if prior_cov.nrows() != n
        || prior_cov.ncols() != n
        || transition.nrows() != n
        || transition.ncols() != n
        || process_cov.nrows() != n
        || process_cov.ncols() != n
    {
        return Err(Error::InvalidInput("inconsistent state dimensions".into()));
    }
    if observations.len() != measurements.len() {
        return Err(Error::InvalidInput(format!(
            "{} observation matrices but {} measurements",
            observations.len(),
            measurements.len()
        )));
    }
    let n_z = measurement_cov.nrows();
    if measurement_cov.ncols() != n_z {
        return Err(Error::InvalidInput("measurement covariance must be square".into()));
    }
    for (k, (c, z)) in observations.iter().zip(measurements).enumerate() {
        if c.nrows() != n_z || c.ncols() != n || z.len() != n_z {
            return Err(Error::InvalidInput(format!("inconsistent dimensions at step {}", k + 1)));
        }
    }

    let steps = measurements.len();
    if steps == 0 {
        return Ok(vec![prior_mean.clone()]);
    }

    let prior_info = spd_inverse(prior_cov, "prior covariance")?;
    let process_info = spd_inverse(process_cov, "process covariance")?;
    let measurement_info = spd_inverse(measurement_cov, "measurement covariance")?;

    let dim = (steps + 1) * n;
    let mut system = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);

    system.view_mut((0, 0), (n, n)).copy_from(&prior_info);
    rhs.rows_mut(0, n).copy_from(&(&prior_info * prior_mean));

    let at_qi = transition.transpose() * &process_info;
    let at_qi_a = &at_qi * transition;
    let qi_a = &process_info * transition;
    for k in 0..steps {
        let row = k * n;
        let next = (k + 1) * n;
        system.view_mut((row, row), (n, n)).zip_apply(&at_qi_a, |s, v| *s += v);
        system.view_mut((row, next), (n, n)).zip_apply(&(-&at_qi), |s, v| *s += v);
        system.view_mut((next, row), (n, n)).zip_apply(&(-&qi_a), |s, v| *s += v);
        system.view_mut((next, next), (n, n)).zip_apply(&process_info, |s, v| *s += v);

        let c = &observations[k];
        let ct_ri = c.transpose() * &measurement_info;
        system.view_mut((next, next), (n, n)).zip_apply(&(&ct_ri * c), |s, v| *s += v);
        let contribution = &ct_ri * &measurements[k];
        for i in 0..n {
            rhs[next + i] += contribution[i];
        }
    }

    audit::record_factorization();
    let chol = nalgebra::Cholesky::new(system).ok_or_else(|| {
        Error::InvalidInput("trajectory normal equations are not positive definite".into())
    })?;
    let solution = chol.solve(&rhs);

    Ok((0..=steps).map(|k| solution.rows(k * n, n).clone_owned()).collect())
}

/// Assembles a [`Dataset`] plus whitened targets into plain column vectors —
/// shared by tests and the harness.
pub fn whitened_problem(
    data: &Dataset,
    noise: &NoiseSpec,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    Ok((feature_columns(data), whitened_targets(data, noise)?))
}

/// Convenience check that a dataset's measurements live in raw sensor
/// coordinates of the expected width.
pub fn output_dim(_data: &Dataset) -> usize {
    WRENCH_DIM
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::FEATURE_DIM;
    use nalgebra::{Matrix6, Vector6};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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

    fn noise_with(r: Matrix6<f64>, n_w: usize, b: f64) -> NoiseSpec {
        NoiseSpec::new(
            r,
            DMatrix::zeros(n_w, n_w),
            DVector::from_element(n_w, b),
            DVector::zeros(n_w),
        )
        .unwrap()
    }

    fn synthetic_dataset(
        rng: &mut ChaCha8Rng,
        samples: usize,
        n_w: usize,
        model: &DMatrix<f64>,
    ) -> Dataset {
        let mut features = Vec::with_capacity(samples);
        let mut measurements = Vec::with_capacity(samples);
        for _ in 0..samples {
            let w = random_vec(rng, n_w);
            let y = model * &w;
            features.push(FeatureVector::new(w).unwrap());
            measurements.push(Wrench::from_vector(&Vector6::from_iterator(y.iter().cloned())));
        }
        Dataset::new(features, measurements).unwrap()
    }

    #[test]
    fn recovers_true_model_from_noiseless_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n_w = 7;
        let truth = DMatrix::from_fn(WRENCH_DIM, n_w, |_, _| rng.random::<f64>() - 0.5);
        let data = synthetic_dataset(&mut rng, 40, n_w, &truth);
        let noise = noise_with(random_spd6(&mut rng), n_w, 1.0);
        let estimate = solve_weighted(&data, &noise).unwrap();
        let err = (&estimate - &truth).amax();
        assert!(err < 1e-10, "recovery error {err:.3e}");
    }

    #[test]
    fn zero_measurements_give_zero_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n_w = 5;
        let zero = DMatrix::zeros(WRENCH_DIM, n_w);
        let data = synthetic_dataset(&mut rng, 30, n_w, &zero);
        let noise = noise_with(random_spd6(&mut rng), n_w, 1.0);
        assert!(solve_weighted(&data, &noise).unwrap().amax() < 1e-14);
        assert!(
            solve_ridge(&data, &noise, RegularizerForm::Diagonal, None)
                .unwrap()
                .amax()
                < 1e-14
        );
    }

    #[test]
    fn weighted_solution_invariant_to_covariance_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n_w = 6;
        let truth = DMatrix::from_fn(WRENCH_DIM, n_w, |_, _| rng.random::<f64>() - 0.5);
        let mut data_features = Vec::new();
        let mut data_measurements = Vec::new();
        for _ in 0..50 {
            let w = random_vec(&mut rng, n_w);
            let mut y = &truth * &w;
            for v in y.iter_mut() {
                *v += 0.01 * (rng.random::<f64>() - 0.5);
            }
            data_features.push(FeatureVector::new(w).unwrap());
            data_measurements
                .push(Wrench::from_vector(&Vector6::from_iterator(y.iter().cloned())));
        }
        let data = Dataset::new(data_features, data_measurements).unwrap();
        let r = random_spd6(&mut rng);
        let a = solve_weighted(&data, &noise_with(r, n_w, 1.0)).unwrap();
        let b = solve_weighted(&data, &noise_with(r * 7.5, n_w, 1.0)).unwrap();
        assert!((a - b).amax() < 1e-10);
    }

    #[test]
    fn whitened_route_matches_direct_weighted_normal_equations() {
        // Solving in whitened coordinates then mapping back must equal the
        // raw weighted problem solved directly: G (sum w w^T) = sum y w^T.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n_w = 6;
        let truth = DMatrix::from_fn(WRENCH_DIM, n_w, |_, _| rng.random::<f64>() - 0.5);
        let mut features = Vec::new();
        let mut measurements = Vec::new();
        let mut gram = DMatrix::zeros(n_w, n_w);
        let mut cross = DMatrix::zeros(n_w, WRENCH_DIM);
        for _ in 0..60 {
            let w = random_vec(&mut rng, n_w);
            let mut y = &truth * &w;
            for v in y.iter_mut() {
                *v += 0.05 * (rng.random::<f64>() - 0.5);
            }
            gram.ger(1.0, &w, &w, 1.0);
            cross.ger(1.0, &w, &y, 1.0);
            features.push(FeatureVector::new(w).unwrap());
            measurements.push(Wrench::from_vector(&Vector6::from_iterator(y.iter().cloned())));
        }
        let data = Dataset::new(features, measurements).unwrap();
        let noise = noise_with(random_spd6(&mut rng), n_w, 1.0);
        let via_whitening = solve_weighted(&data, &noise).unwrap();
        let direct = gram
            .lu()
            .solve(&cross)
            .unwrap()
            .transpose();
        assert!((via_whitening - direct).amax() < 1e-10);
    }

    #[test]
    fn scalar_ridge_matches_hand_calculation() {
        // One sample w = 1, y = 1, unit weight: argmin (g - 1)^2 + g^2 = 1/2.
        let ws = vec![DVector::from_vec(vec![1.0])];
        let ys = vec![DVector::from_vec(vec![1.0])];
        let b = DVector::from_vec(vec![1.0]);
        for form in [RegularizerForm::RankOne, RegularizerForm::Diagonal] {
            let g = solve_ridge_whitened(&ws, &ys, &[(&b, form)]).unwrap();
            assert!((g[(0, 0)] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn stronger_regularization_shrinks_the_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n_w = 5;
        let truth = DMatrix::from_fn(WRENCH_DIM, n_w, |_, _| rng.random::<f64>() - 0.5);
        let data = synthetic_dataset(&mut rng, 30, n_w, &truth);
        let mut previous = f64::INFINITY;
        for b in [1.0, 10.0, 100.0, 1000.0] {
            let noise = noise_with(Matrix6::identity(), n_w, b);
            let g = solve_ridge(&data, &noise, RegularizerForm::Diagonal, None).unwrap();
            let norm = g.norm();
            assert!(norm < previous, "norm {norm} did not shrink at b = {b}");
            previous = norm;
        }
    }

    #[test]
    fn rank_deficiency_reports_null_space_dimension() {
        // Features confined to a 2-dimensional subspace of R^4.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut features = Vec::new();
        let mut measurements = Vec::new();
        for _ in 0..20 {
            let a = rng.random::<f64>();
            let b = rng.random::<f64>();
            let w = DVector::from_vec(vec![a, b, a + b, 2.0 * a - b]);
            features.push(FeatureVector::new(w).unwrap());
            measurements.push(Wrench::zero());
        }
        let data = Dataset::new(features, measurements).unwrap();
        let noise = noise_with(Matrix6::identity(), 4, 1.0);
        match solve_weighted(&data, &noise) {
            Err(Error::RankDeficient { dim, deficiency }) => {
                assert_eq!(dim, 4);
                assert_eq!(deficiency, 2);
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn per_row_solves_match_joint_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n_w = FEATURE_DIM;
        let mut ws = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..80 {
            ws.push(random_vec(&mut rng, n_w));
            ys.push(random_vec(&mut rng, WRENCH_DIM));
        }
        let b = DVector::from_fn(n_w, |_, _| 0.5 + rng.random::<f64>());
        for form in [RegularizerForm::RankOne, RegularizerForm::Diagonal] {
            let per_row = solve_ridge_whitened(&ws, &ys, &[(&b, form)]).unwrap();
            let joint = solve_ridge_whitened_joint(&ws, &ys, &[(&b, form)]).unwrap();
            let defect = (&per_row - &joint).amax();
            assert!(defect < 1e-10, "per-row vs joint defect {defect:.3e} for {form:?}");
        }
    }

    #[test]
    fn rank_one_and_diagonal_penalties_differ_beyond_one_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ws = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..30 {
            ws.push(random_vec(&mut rng, 3));
            ys.push(random_vec(&mut rng, 2));
        }
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let rank_one = solve_ridge_whitened(&ws, &ys, &[(&b, RegularizerForm::RankOne)]).unwrap();
        let diagonal = solve_ridge_whitened(&ws, &ys, &[(&b, RegularizerForm::Diagonal)]).unwrap();
        assert!((rank_one - diagonal).amax() > 1e-6);
    }

    #[test]
    fn map_with_no_measurements_returns_prior() {
        let prior = DVector::from_vec(vec![1.0, -2.0]);
        let cov = DMatrix::identity(2, 2);
        let out = solve_map_trajectory(
            &prior,
            &cov,
            &DMatrix::identity(2, 2),
            &[],
            &DMatrix::identity(2, 2),
            &DMatrix::identity(1, 1),
            &[],
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0], prior);
    }

    #[test]
    fn map_with_vanishing_process_noise_reduces_to_ridge() {
        // Stationary dynamics and near-zero process noise pin the whole
        // trajectory to one value: the ridge solution.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 3;
        let steps = 40;
        let mut ws = Vec::new();
        let mut zs = Vec::new();
        let mut observations = Vec::new();
        for _ in 0..steps {
            let w = random_vec(&mut rng, n);
            observations.push(DMatrix::from_fn(1, n, |_, j| w[j]));
            zs.push(DVector::from_vec(vec![rng.random::<f64>() - 0.5]));
            ws.push(w);
        }
        let b = DVector::from_element(n, 1.0);
        let ridge = solve_ridge_whitened(
            &ws,
            &zs.iter().map(|z| z.clone()).collect::<Vec<_>>(),
            &[(&b, RegularizerForm::Diagonal)],
        )
        .unwrap();

        let trajectory = solve_map_trajectory(
            &DVector::zeros(n),
            &DMatrix::identity(n, n), // diag(1/b^2) with b = 1
            &DMatrix::identity(n, n),
            &observations,
            &(DMatrix::identity(n, n) * 1e-12),
            &DMatrix::identity(1, 1),
            &zs,
        )
        .unwrap();
        let terminal = trajectory.last().unwrap();
        for j in 0..n {
            assert!(
                (terminal[j] - ridge[(0, j)]).abs() < 1e-5,
                "component {j}: {} vs {}",
                terminal[j],
                ridge[(0, j)]
            );
        }
    }

    #[test]
    fn map_rejects_singular_covariance() {
        let prior = DVector::zeros(2);
        let singular = DMatrix::zeros(2, 2);
        let err = solve_map_trajectory(
            &prior,
            &singular,
            &DMatrix::identity(2, 2),
            &[DMatrix::identity(1, 2).resize(1, 2, 0.0)],
            &DMatrix::identity(2, 2),
            &DMatrix::identity(1, 1),
            &[DVector::zeros(1)],
        );
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn dataset_rejects_mismatched_lengths() {
        let f = vec![FeatureVector::new(DVector::zeros(3)).unwrap()];
        assert!(Dataset::new(f, vec![]).is_err());
        assert!(Dataset::new(vec![], vec![]).is_err());
    }
}
