//! Small-data transfer-learning benchmark harness for tape-laying surface inspection.
//!
//! The crate covers the whole pipeline:
//!
//! - [`heightfield`]: calibrated 16-bit height profiles, a seeded synthetic generator for
//!   nominal / gap / overlap patches, and a minimal TIFF codec.
//! - [`preprocess`]: the 16-bit → 8-bit mean-centering chain, channel triplication and
//!   zero padding to the 224×224×3 model input.
//! - [`datakit`]: dataset indices, stratified splitting, balancing and the nested
//!   training-size ladder.
//! - [`metrics`]: confusion matrices, per-class precision / recall / F1 and macro-F1.
//! - [`learner`]: the trainer session contract, a built-in softmax-regression baseline and
//!   the line-delimited JSON client for external trainers.
//! - [`asha`]: the asynchronous successive halving scheduler, its event log and auditor.
//! - [`sweep`]: two-phase experiment orchestration (tune once, then sweep the ladder).

pub mod asha;
pub mod datakit;
mod error;
pub mod heightfield;
pub mod learner;
pub mod metrics;
pub mod pool;
pub mod preprocess;
pub mod rng;
pub mod source;
pub mod sweep;

pub use error::{Error, Result};
pub use heightfield::DefectLabel;
