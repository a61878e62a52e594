//! Few-shot recognition and localization of actions in untrimmed videos,
//! trained on weakly labeled base classes.
//!
//! Base-class training pseudo-labels each video's least confident segment as
//! background, treats low-confidence background as non-informative, pulls
//! non-informative background away from the confident segments with a
//! contrastive loss, and aggregates segments with weights derived from their
//! similarity to the pseudo-labeled background. Novel classes are then
//! recognized from a few trimmed support videos with cosine prototypes.

pub mod config;
pub mod datahub;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numgrad;
pub mod pseudo;
pub mod train;

pub use error::{Error, Result};
