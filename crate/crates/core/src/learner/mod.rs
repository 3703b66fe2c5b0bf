//! Trainer session contract and its implementations.
//!
//! A [`TrainerHandle`] is a resumable training session. ASHA and the sweep only ever talk to
//! this trait, so the built-in [`session::BaselineTrainer`] and out-of-process trainers behind
//! [`external::ExternalTrainer`] are interchangeable.

pub mod baseline;
pub mod external;
pub mod session;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datakit::DatasetIndex;
use crate::metrics::EvalReport;
use crate::{Error, Result};

pub use baseline::{BaselineModel, GradcheckSummary};
pub use session::{BaselineFactory, BaselineTrainer, FeatureStore};

/// Batch sizes of the hyperparameter search space.
pub const BATCH_SIZES: [usize; 4] = [16, 32, 64, 128];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !BATCH_SIZES.contains(&self.batch_size) {
            return Err(Error::Config(format!(
                "batch size {} is not one of {BATCH_SIZES:?}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Opaque resumable state returned by [`TrainerHandle::pause`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CheckpointToken(pub String);

/// A training session. One handle is driven by one thread at a time.
pub trait TrainerHandle: Send {
    fn init(&mut self, config: &TrainConfig) -> Result<()>;

    /// Trains `epochs` more epochs and returns macro-F1 on the eval split.
    /// `train(0)` reports the current metric without touching the parameters.
    fn train(&mut self, epochs: u32) -> Result<f64>;

    fn evaluate_test(&mut self) -> Result<EvalReport>;

    fn pause(&mut self) -> Result<CheckpointToken>;

    /// Restores a paused session. Called after `init` with the same config.
    fn resume(&mut self, token: &CheckpointToken) -> Result<()>;

    fn shutdown(&mut self) -> Result<()>;
}

/// Data a session trains, tunes and tests on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    pub train: Arc<DatasetIndex>,
    pub eval: Arc<DatasetIndex>,
    pub test: Arc<DatasetIndex>,
}

impl TrialData {
    pub fn new(train: DatasetIndex, eval: DatasetIndex, test: DatasetIndex) -> Self {
        TrialData {
            train: Arc::new(train),
            eval: Arc::new(eval),
            test: Arc::new(test),
        }
    }

    /// Fails if any training or eval item also appears in the test set.
    pub fn check_test_hygiene(&self) -> Result<()> {
        let test = self.test.ids();
        let leaked = self
            .train
            .entries()
            .iter()
            .chain(self.eval.entries())
            .find(|e| test.contains(e.item_id.as_str()));
        match leaked {
            Some(e) => Err(Error::Dataset(format!("item `{}` leaks into the test split", e.item_id))),
            None => Ok(()),
        }
    }
}

/// Creates fresh sessions bound to a data assignment.
pub trait TrainerFactory: Sync {
    fn create(&self, data: &TrialData) -> Result<Box<dyn TrainerHandle>>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heightfield::DefectLabel;

    #[test]
    fn config_validation() {
        let ok = TrainConfig {
            learning_rate: 1e-5,
            batch_size: 32,
            seed: 0,
        };
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { batch_size: 24, ..ok }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..ok }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::NAN, ..ok }.validate().is_err());
    }

    #[test]
    fn hygiene_detects_leak() {
        let idx = |ids: &[&str]| DatasetIndex::from_pairs(ids.iter().map(|&i| (i, DefectLabel::Gap))).unwrap();
        let clean = TrialData::new(idx(&["a"]), idx(&["b"]), idx(&["c"]));
        assert!(clean.check_test_hygiene().is_ok());
        let leak = TrialData::new(idx(&["a"]), idx(&["c"]), idx(&["c"]));
        assert!(leak.check_test_hygiene().is_err());
    }
}
