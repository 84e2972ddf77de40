//! Mask nearest neighbors (MNN) matrix completion for outcomes that are
//! missing not at random.
//!
//! The estimator works in three stages: latent distances between users (and
//! between items) are estimated from the reveal pattern alone, units are
//! grouped around greedily chosen well-separated centers, and the
//! cluster-level outcome matrix is averaged, completed and expanded back to
//! every user-item pair.

pub mod baseline;
pub mod cluster;
pub mod complete;
pub mod distance;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod observation;
pub mod pipeline;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
pub use observation::{Observation, ObservationSet};
pub use pipeline::{fit, fit_predict, Algorithm, Hyper, HyperGrid, Model};
