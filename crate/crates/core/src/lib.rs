//! Confidence calibration for multi-domain classifiers.
//!
//! A classifier's softmax confidence is rescaled with a single temperature
//! (`ts`), or with a per-sample temperature predicted from feature embeddings
//! by a regressor fitted to per-domain temperatures (`mdts`). Calibration
//! quality is measured with binned calibration error (`metrics`), compared
//! against histogram binning and isotonic regression (`baselines`), and
//! stress-tested on seeded synthetic domain families (`synth`). The `theory`
//! module estimates a divergence-based upper bound on the calibration risk a
//! fitted map incurs on an unseen domain.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod fileio;
pub mod mdts;
pub mod metrics;
pub mod model;
pub mod prob;
pub mod regress;
pub mod synth;
pub mod theory;
pub mod ts;

pub use error::{Error, Result};
pub use prob::{Calibrator, Msp, Prediction};
