//! Online learning of a quasi-static contact-force model.
//!
//! A linear wrench model `y = G w` over an engineered feature vector is
//! estimated recursively by a bank of scalar-measurement Kalman filters that
//! share one covariance and gain, so a model update costs only matrix-vector
//! products and rank-one updates — no factorizations or inversions. Batch
//! least-squares oracles provide the closed-form solutions the filter must
//! match, a quasi-static plug/socket simulator supplies ground truth, and a
//! convex one-step controller uses the learned model to align a plug during
//! insertion.

pub mod audit;
pub mod batch;
pub mod config;
pub mod controller;
pub mod error;
pub mod filter;
pub mod io;
pub mod pipeline;
pub mod sim;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    axis_angle_between, check_rotation, feature_map, ControlCommand, FeatureVector, NoiseSpec,
    Pose, Wrench, DEFAULT_PRIOR_VARIANCE_CAP, FEATURE_DIM, WRENCH_DIM,
};
