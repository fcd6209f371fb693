//! Fisher-guided latent-subgroup learning with do-no-harm adaptation.
//!
//! The pipeline has three training stages and an audit stage:
//!
//! 1. [`pretrain`] fits an encoder–decoder–classifier with a composite loss
//!    (reconstruction, cross-entropy and a Fisher curvature penalty gated on
//!    correctly classified samples) and keeps the best selection checkpoint.
//! 2. [`strata`] describes every sample by its latent code, loss and Fisher
//!    value under that checkpoint, embeds the descriptors and fits a Gaussian
//!    mixture whose components are the latent subgroups.
//! 3. [`adapt`] fine-tunes one model per subgroup with a one-sided hinge that
//!    penalizes any per-sample loss regression relative to the base model, and
//!    periodically offers every subgroup the parameter average.
//! 4. [`metrics`] scores predictions per known attribute category (benefit,
//!    harm-avoidance and equity deltas, EOD/AOD, relative disparity).
//!
//! [`harness`] wires the stages into person-disjoint cross-validation runs.

pub mod adapt;
pub mod data;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod metrics;
pub mod netkernel;
pub mod pretrain;
pub mod rng;
pub mod strata;

pub use error::{FlareError, Result};
pub use matrix::Matrix;
