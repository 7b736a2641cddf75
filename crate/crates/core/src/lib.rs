//! Minibatch sliced-Wasserstein (SW) generative training with explicit
//! almost-everywhere gradients.
//!
//! The crate is organised bottom-up:
//!
//! - [`measures`]: discrete measures, sphere sampling and minibatch draws.
//! - [`network`]: a bounded recursive network class with smooth ball
//!   indicators, forward evaluation and the parameter Jacobian.
//! - [`swloss`]: sorting-based projected Wasserstein costs, the minibatch SW
//!   loss, its a.e. gradient for any order `p >= 1`, and Lipschitz / step-size
//!   constants.
//! - [`sgd`]: plain and projected-noised fixed-step SGD with trajectory
//!   recording.
//! - [`trajectory`]: piecewise-affine interpolation, the `d_c` path metric,
//!   an Euler reference flow and the criticality gap.
//! - [`oracle`]: brute-force and finite-difference oracles.
//! - [`cli`]: the experiment runner behind the `sliced-sgd` binary.

pub mod cli;
pub mod error;
pub mod measures;
pub mod network;
pub mod oracle;
pub mod sgd;
pub mod swloss;
pub mod toy;
pub mod trajectory;

pub use error::{Error, Result};
pub use measures::{DiscreteMeasure, SampleBatch};
pub use network::{Activation, NetworkSpec, ParamVector};
pub use sgd::{Scheme, SgdConfig, Trajectory};
pub use swloss::OrderP;
