//! Whole-slide malignancy detection as a cascade: slide triage by a patch
//! classifier, ensemble key-patch selection on flagged slides, and a
//! context-aware U-shaped segmenter trained with adversarial domain alignment.
//!
//! [`pipeline`] ties the stages together; the `wsi-cascade` binary wraps it.

pub mod adversarial;
pub mod backbone;
pub mod classification;
pub mod cli;
pub mod labeling;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod tiling;
