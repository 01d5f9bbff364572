//! Uncertainty-guided referring image segmentation at desk scale.
//!
//! The pipeline predicts a pixel-wise referring-uncertainty logit map from the
//! coarsest visual tokens, uses it to gate a cross-modal fusion step, and uses
//! it again to confine a residual refinement of the coarse mask logits.

pub mod backbone;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rus;
pub mod synthdata;
pub mod udlr;
pub mod ugf;

pub use error::{Error, Result};
