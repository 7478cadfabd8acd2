//! Federated restarted dual averaging with local adaptive gradients.
//!
//! Clients accumulate gradient estimates in a local dual state and map back to
//! the primal space through a weighted proximal step anchored at the last
//! server iterate. The server averages dual states and refreshes the adaptive
//! metric once per round.

pub mod adaptivity;
pub mod error;
pub mod estimators;
pub mod federation;
pub mod linalg;
pub mod metrics;
pub mod problems;
pub mod prox;
pub mod rng;

pub use error::{FedError, Result};
pub use linalg::{DiagonalMetric, ParamVector};
