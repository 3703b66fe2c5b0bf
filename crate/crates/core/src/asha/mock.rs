//! Deterministic stand-in trainer for scheduler tests.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng as _;

use crate::learner::{CheckpointToken, TrainConfig, TrainerFactory, TrainerHandle, TrialData};
use crate::metrics::{confusion, evaluate, EvalReport};
use crate::{rng, Error, Result};

pub type MetricFn = dyn Fn(&TrainConfig, u32) -> f64 + Send + Sync;

/// Creates [`MockTrainer`]s whose metric is a fixed function of (config, cumulative epochs).
#[derive(Clone)]
pub struct MockFactory {
    metric: Arc<MetricFn>,
    jitter_seed: Option<u64>,
    failing_seeds: BTreeSet<u64>,
    epochs: Arc<AtomicU64>,
}

impl std::fmt::Debug for MockFactory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockFactory")
            .field("jitter_seed", &self.jitter_seed)
            .field("epochs", &self.epochs)
            .finish()
    }
}

impl MockFactory {
    pub fn new(metric: impl Fn(&TrainConfig, u32) -> f64 + Send + Sync + 'static) -> Self {
        MockFactory {
            metric: Arc::new(metric),
            jitter_seed: None,
            failing_seeds: BTreeSet::new(),
            epochs: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Metric is seeded noise around a learning curve; plenty of ties are avoided by the noise.
    pub fn seeded(seed: u64) -> Self {
        Self::new(move |cfg, epochs| {
            let mut r = rng::stream(rng::derive_seed(seed, cfg.seed), u64::from(epochs));
            let quality = 0.5 + 0.5 * rng::seeded(cfg.seed ^ seed).random::<f64>();
            let curve = 1.0 - (-f64::from(epochs) / 8.0).exp();
            (quality * curve + 0.05 * r.random::<f64>()).clamp(0.0, 1.0)
        })
    }

    /// Sleeps a seeded 0–400 µs per train call to shuffle completion order across workers.
    pub fn with_jitter(mut self, seed: u64) -> Self {
        self.jitter_seed = Some(seed);
        self
    }

    /// Trials whose config seed is listed fail on their first train call.
    pub fn failing(mut self, seeds: impl IntoIterator<Item = u64>) -> Self {
        self.failing_seeds.extend(seeds);
        self
    }

    /// Epochs trained by every handle this factory created.
    pub fn epochs_trained(&self) -> u64 {
        self.epochs.load(Ordering::SeqCst)
    }
}

impl TrainerFactory for MockFactory {
    fn create(&self, _data: &TrialData) -> Result<Box<dyn TrainerHandle>> {
        Ok(Box::new(MockTrainer {
            factory: self.clone(),
            config: None,
            epochs_done: 0,
        }))
    }
}

#[derive(Debug)]
pub struct MockTrainer {
    factory: MockFactory,
    config: Option<TrainConfig>,
    epochs_done: u32,
}

impl MockTrainer {
    fn config(&self) -> Result<TrainConfig> {
        self.config.ok_or_else(|| Error::Learner("trainer used before init".into()))
    }
}

impl TrainerHandle for MockTrainer {
    fn init(&mut self, config: &TrainConfig) -> Result<()> {
        self.config = Some(*config);
        self.epochs_done = 0;
        Ok(())
    }

    fn train(&mut self, epochs: u32) -> Result<f64> {
        let cfg = self.config()?;
        if self.factory.failing_seeds.contains(&cfg.seed) {
            return Err(Error::Learner(format!("mock failure for seed {}", cfg.seed)));
        }
        if let Some(j) = self.factory.jitter_seed {
            let micros = rng::stream(j, rng::derive_seed(cfg.seed, u64::from(self.epochs_done))).random_range(0..400);
            std::thread::sleep(Duration::from_micros(micros));
        }
        self.epochs_done += epochs;
        self.factory.epochs.fetch_add(u64::from(epochs), Ordering::SeqCst);
        Ok((self.factory.metric)(&cfg, self.epochs_done))
    }

    fn evaluate_test(&mut self) -> Result<EvalReport> {
        self.config()?;
        Ok(evaluate(&confusion(&[], &[])?))
    }

    fn pause(&mut self) -> Result<CheckpointToken> {
        self.config()?;
        Ok(CheckpointToken(self.epochs_done.to_string()))
    }

    fn resume(&mut self, token: &CheckpointToken) -> Result<()> {
        self.config()?;
        self.epochs_done = token
            .0
            .parse()
            .map_err(|_| Error::Learner(format!("bad mock token `{}`", token.0)))?;
        Ok(())
    }

    fn shutdown(&mut self) -> Result<()> {
        self.config = None;
        Ok(())
    }
}
