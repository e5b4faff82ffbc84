//! C ABI for the online contact-force model learner.
//!
//! The interface hands out an opaque filter handle that owns the noise
//! description and the model belief together. Measurements go in as raw
//! 6-vectors `[force, torque]`; whitening happens inside. All matrices
//! cross the boundary as row-major `double` buffers except rotation
//! matrices, which are column-major to match the feature layout.

#![allow(clippy::missing_safety_doc)]

use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};

use lml::error::Error;
use lml::filter::{init_belief, whiten, ModelBelief};
use lml::types::{feature_map, ControlCommand, FeatureVector, NoiseSpec, Pose, Wrench};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmlStatus {
    LmlOk = 0,
    /// A required pointer was null.
    LmlNullPointer = 1,
    /// An argument failed validation (non-finite values, bad dimensions).
    LmlInvalidArgument = 2,
    /// The configuration is unusable (e.g. covariance not positive definite).
    LmlInvalidConfig = 3,
    /// A numerical invariant failed inside the estimator.
    LmlNumericalFailure = 4,
}

fn status_of(err: &Error) -> LmlStatus {
    match err {
        Error::InvalidInput(_) | Error::Data(_) => LmlStatus::LmlInvalidArgument,
        Error::InvalidConfig(_) => LmlStatus::LmlInvalidConfig,
        _ => LmlStatus::LmlNumericalFailure,
    }
}

/// Opaque online estimator: shared covariance, model belief, and the sensor
/// noise description it was created with.
pub struct LmlFilter {
    noise: NoiseSpec,
    belief: ModelBelief,
}

/// Length of the engineered feature vector built by `lml_feature_map`.
#[no_mangle]
pub extern "C" fn lml_feature_dim() -> usize {
    lml::FEATURE_DIM
}

/// Number of wrench components in a measurement.
#[no_mangle]
pub extern "C" fn lml_wrench_dim() -> usize {
    lml::WRENCH_DIM
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn lml_status_message(status: LmlStatus) -> *const c_char {
    let message: &'static [u8] = match status {
        LmlStatus::LmlOk => b"ok\0",
        LmlStatus::LmlNullPointer => b"null pointer argument\0",
        LmlStatus::LmlInvalidArgument => b"invalid argument\0",
        LmlStatus::LmlInvalidConfig => b"invalid configuration\0",
        LmlStatus::LmlNumericalFailure => b"numerical failure\0",
    };
    message.as_ptr() as *const c_char
}

unsafe fn slice_arg<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

fn guarded<F: FnOnce() -> LmlStatus>(f: F) -> LmlStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(LmlStatus::LmlNumericalFailure)
}

/// Creates a filter for `feature_dim` features.
///
/// `sensor_cov` is the 6x6 sensor covariance in row-major order;
/// `reg_weights` has one entry per feature; `process_noise` scales the
/// identity process covariance (0 disables forgetting). On success the
/// handle is written to `out` and must be released with `lml_filter_free`.
#[no_mangle]
pub unsafe extern "C" fn lml_filter_new(
    feature_dim: usize,
    sensor_cov: *const f64,
    reg_weights: *const f64,
    process_noise: f64,
    out: *mut *mut LmlFilter,
) -> LmlStatus {
    guarded(|| {
        if out.is_null() {
            return LmlStatus::LmlNullPointer;
        }
        let (cov, weights) = match (slice_arg(sensor_cov, 36), slice_arg(reg_weights, feature_dim)) {
            (Some(c), Some(w)) => (c, w),
            _ => return LmlStatus::LmlNullPointer,
        };
        if feature_dim == 0 {
            return LmlStatus::LmlInvalidArgument;
        }
        let sensor = Matrix6::from_row_slice(cov);
        let noise = match NoiseSpec::new(
            sensor,
            DMatrix::identity(feature_dim, feature_dim) * process_noise,
            DVector::from_column_slice(weights),
            DVector::zeros(feature_dim),
        ) {
            Ok(n) => n,
            Err(e) => return status_of(&e),
        };
        let belief = match init_belief(&noise) {
            Ok(b) => b,
            Err(e) => return status_of(&e),
        };
        *out = Box::into_raw(Box::new(LmlFilter { noise, belief }));
        LmlStatus::LmlOk
    })
}

/// Releases a filter handle. Null is allowed.
#[no_mangle]
pub unsafe extern "C" fn lml_filter_free(filter: *mut LmlFilter) {
    if !filter.is_null() {
        drop(Box::from_raw(filter));
    }
}

/// Feature dimension of a filter.
#[no_mangle]
pub unsafe extern "C" fn lml_filter_feature_dim(filter: *const LmlFilter) -> usize {
    if filter.is_null() {
        return 0;
    }
    (*filter).belief.feature_dim()
}

/// Measurement updates absorbed so far.
#[no_mangle]
pub unsafe extern "C" fn lml_filter_step_count(filter: *const LmlFilter) -> u64 {
    if filter.is_null() {
        return 0;
    }
    (*filter).belief.step_count()
}

/// Absorbs one (features, raw measurement) pair. `measurement` is the raw
/// 6-vector `[force, torque]`. When `innovation_variance` is non-null the
/// scalar `w' Sigma w + 1` of this update is written there.
#[no_mangle]
pub unsafe extern "C" fn lml_filter_step(
    filter: *mut LmlFilter,
    features: *const f64,
    measurement: *const f64,
    innovation_variance: *mut f64,
) -> LmlStatus {
    guarded(|| {
        if filter.is_null() {
            return LmlStatus::LmlNullPointer;
        }
        let handle = &mut *filter;
        let n = handle.belief.feature_dim();
        let (w, y) = match (slice_arg(features, n), slice_arg(measurement, 6)) {
            (Some(w), Some(y)) => (w, y),
            _ => return LmlStatus::LmlNullPointer,
        };
        let features = match FeatureVector::new(DVector::from_column_slice(w)) {
            Ok(f) => f,
            Err(e) => return status_of(&e),
        };
        let wrench = Wrench::from_vector(&Vector6::from_column_slice(y));
        let whitened = match whiten(&handle.noise, &wrench) {
            Ok(v) => v,
            Err(e) => return status_of(&e),
        };
        match handle.belief.step(&handle.noise, &features, &whitened) {
            Ok(diag) => {
                if !innovation_variance.is_null() {
                    *innovation_variance = diag.innovation_variance;
                }
                LmlStatus::LmlOk
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Applies one adaptive-regularization pass with per-coordinate weights
/// (zero entries skip their coordinate).
#[no_mangle]
pub unsafe extern "C" fn lml_filter_regularize(
    filter: *mut LmlFilter,
    weights: *const f64,
) -> LmlStatus {
    guarded(|| {
        if filter.is_null() {
            return LmlStatus::LmlNullPointer;
        }
        let handle = &mut *filter;
        let n = handle.belief.feature_dim();
        let w = match slice_arg(weights, n) {
            Some(w) => w,
            None => return LmlStatus::LmlNullPointer,
        };
        match handle.belief.adaptive_regularize(&DVector::from_column_slice(w)) {
            Ok(()) => LmlStatus::LmlOk,
            Err(e) => status_of(&e),
        }
    })
}

/// Predicted raw wrench for a feature vector, written to `wrench_out[6]`.
#[no_mangle]
pub unsafe extern "C" fn lml_filter_predict(
    filter: *const LmlFilter,
    features: *const f64,
    wrench_out: *mut f64,
) -> LmlStatus {
    guarded(|| {
        if filter.is_null() || wrench_out.is_null() {
            return LmlStatus::LmlNullPointer;
        }
        let handle = &*filter;
        let n = handle.belief.feature_dim();
        let w = match slice_arg(features, n) {
            Some(w) => w,
            None => return LmlStatus::LmlNullPointer,
        };
        let features = match FeatureVector::new(DVector::from_column_slice(w)) {
            Ok(f) => f,
            Err(e) => return status_of(&e),
        };
        match handle.belief.predict_wrench(&handle.noise, &features) {
            Ok(wrench) => {
                let v = wrench.to_vector();
                std::ptr::copy_nonoverlapping(v.as_slice().as_ptr(), wrench_out, 6);
                LmlStatus::LmlOk
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Copies the raw-coordinate model estimate into `model_out` as a
/// row-major `6 x feature_dim` buffer.
#[no_mangle]
pub unsafe extern "C" fn lml_filter_model(
    filter: *const LmlFilter,
    model_out: *mut f64,
) -> LmlStatus {
    guarded(|| {
        if filter.is_null() || model_out.is_null() {
            return LmlStatus::LmlNullPointer;
        }
        let handle = &*filter;
        let raw = match handle.belief.unwhitened_model(&handle.noise) {
            Ok(m) => m,
            Err(e) => return status_of(&e),
        };
        let n = raw.ncols();
        for i in 0..raw.nrows() {
            for j in 0..n {
                *model_out.add(i * n + j) = raw[(i, j)];
            }
        }
        LmlStatus::LmlOk
    })
}

/// Builds the engineered 19-entry feature vector from a pose and command.
///
/// `rotation` is the 3x3 attitude matrix in column-major order; the output
/// layout is `[position, vec(rotation), desired_position,
/// rotation_correction, 1]`.
#[no_mangle]
pub unsafe extern "C" fn lml_feature_map(
    position: *const f64,
    rotation: *const f64,
    desired_position: *const f64,
    rotation_correction: *const f64,
    features_out: *mut f64,
) -> LmlStatus {
    guarded(|| {
        if features_out.is_null() {
            return LmlStatus::LmlNullPointer;
        }
        let (r, rot, des, phi) = match (
            slice_arg(position, 3),
            slice_arg(rotation, 9),
            slice_arg(desired_position, 3),
            slice_arg(rotation_correction, 3),
        ) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => return LmlStatus::LmlNullPointer,
        };
        let pose = match Pose::new(
            Vector3::from_column_slice(r),
            Matrix3::from_column_slice(rot),
        ) {
            Ok(p) => p,
            Err(e) => return status_of(&e),
        };
        let cmd = ControlCommand::new(
            Vector3::from_column_slice(des),
            Vector3::from_column_slice(phi),
        );
        match feature_map(&pose, &cmd) {
            Ok(features) => {
                let v = features.as_vector();
                ptr::copy_nonoverlapping(v.as_slice().as_ptr(), features_out, v.len());
                LmlStatus::LmlOk
            }
            Err(e) => status_of(&e),
        }
    })
}
