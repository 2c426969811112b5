//! Evidence-empowered transfer learning for volumetric disease detection.
//!
//! Morphological-change (MC) labels are derived from per-region volumes
//! ([`labeler`]), a small 3D convolutional model is trained for NC/AD
//! detection with MC prediction as an auxiliary task ([`model`], [`transfer`]),
//! and the results are scored for accuracy, AUROC, counterfactual
//! faithfulness and data efficiency ([`eval`]). [`phantom`] generates
//! synthetic cases with known ground-truth morphology.

pub mod config;
pub mod domain;
pub mod error;
pub mod eval;
pub mod labeler;
pub mod model;
pub mod phantom;
pub mod seed;
pub mod transfer;

pub use error::{Error, Result};
