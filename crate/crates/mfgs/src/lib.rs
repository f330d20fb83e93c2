//! Closed-form predictive uncertainty for softmax classifiers.
//!
//! A trained network gives a point estimate of its last-layer weights. This
//! crate puts a Gaussian over those weights (from last-layer curvature or an
//! infinitesimal-jackknife ensemble), pushes it through the linear last layer
//! to get a Gaussian over logits, and then approximates the intractable
//! expected softmax under that Gaussian with closed-form mean-field schemes.
//! Monte Carlo and unscented-transform integrators serve as references, and
//! calibration / out-of-distribution metrics quantify whether the extra
//! variance actually helps.
//!
//! Module map:
//!
//! * [`linalg`]: dense symmetric matrices, Cholesky, eigenvalue extremes.
//! * [`gsint`]: the Gaussian-softmax integral and its approximations.
//! * [`model`]: a small ReLU MLP with deterministic Adam training.
//! * [`curvature`]: last-layer Hessian / Fisher and covariance assembly.
//! * [`jackknife`]: infinitesimal-jackknife ensembles and exact retraining.
//! * [`predictor`]: logit Gaussians and calibrated predictive distributions.
//! * [`metrics`]: ECE, AUROC, AUPR, detection accuracy, NLL.
//! * [`datasets`]: synthetic blobs, OOD shells, IDX loading, stratified splits.
//! * [`cli`]: the experiment commands behind the `mfgs` binary.

pub mod cli;
pub mod curvature;
pub mod datasets;
pub mod error;
pub mod gsint;
pub mod jackknife;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod predictor;

pub use error::{Error, Result};
