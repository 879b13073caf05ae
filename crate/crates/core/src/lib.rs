//! Posterior sampling for Bayesian inverse problems.
//!
//! Two samplers over the same posterior, built for head-to-head comparison
//! on synthetic forward models with known ground truth:
//!
//! - an invertible coupling-layer network trained as a transport map from a
//!   standard-normal reference to the posterior (KL loss), and
//! - an affine-invariant ensemble MCMC sampler (stretch move), optionally
//!   sampling the noise scale `b` as an extra posterior coordinate.
//!
//! The crate is organized as:
//!
//! - [`nnet`]: dense ReLU networks with exact reverse-mode gradients and Adam;
//! - [`flow`]: the invertible network (permutations + affine coupling blocks)
//!   with analytic forward, inverse, and log-determinant;
//! - [`forward`]: forward-model kinds (linear, synthetic fluorescence-like
//!   curve, surrogate MLP), surrogate training, measurement synthesis;
//! - [`bayes`]: prior box, heteroscedastic Gaussian likelihood, boundary
//!   penalty, the transport-map training loss and loop;
//! - [`mcmc`]: stretch-move ensemble sampler and convergence diagnostics;
//! - [`harness`]: config-driven experiment pipeline, method comparison, and
//!   artifact I/O behind the `invflow` CLI.
//!
//! Everything is `f64`, deterministic under a fixed seed, and single-threaded.

pub mod bayes;
pub mod error;
pub mod flow;
pub mod forward;
pub mod harness;
pub mod linalg;
pub mod mcmc;
pub mod nnet;
pub mod samples;
pub mod stats;

pub use bayes::{InnPosterior, NoiseModel, PriorBox, TrainConfig};
pub use error::{Error, Result};
pub use flow::{CouplingBlock, FlowEval, FlowModel};
pub use forward::{ForwardModel, Measurement};
pub use harness::{ComparisonReport, ExperimentConfig};
pub use linalg::Matrix;
pub use mcmc::{DiagnosticsReport, Ensemble, McmcConfig};
pub use nnet::{Activation, AdamState, GradientBundle, MlpParams};
pub use samples::{SampleMeta, SampleSet};

/// The seedable RNG used everywhere reproducibility matters.
pub type Rng = rand_chacha::ChaCha8Rng;
