//! Asynchronous successive halving (pause-and-promote variant).
//!
//! Trials start at the lowest rung, train up to that rung's cumulative epoch budget, report
//! their eval metric and pause. A paused trial continues to the next rung only when it ranks in
//! the top ⌊|C|/η⌋ of the results recorded at its rung. [`Scheduler::get_job`] never waits for
//! stragglers: it answers [`Job::Wait`] and lets the caller decide how to idle.

mod audit;
pub mod mock;
mod runner;

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::learner::{TrainConfig, BATCH_SIZES};
use crate::{rng, Error, Result};

pub use audit::{audit, audit_jsonl, AuditReport, Violation};
pub use runner::{run_asha, RunOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub lr_min: f64,
    pub lr_max: f64,
    pub batch_sizes: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lr_min: 1e-6,
            lr_max: 1e-4,
            batch_sizes: BATCH_SIZES.to_vec(),
        }
    }
}

impl SearchSpace {
    /// `lr_min == lr_max` is allowed and pins the learning rate.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min.is_finite() && self.lr_max.is_finite() && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "learning-rate range [{}, {}] must satisfy 0 < min <= max",
                self.lr_min, self.lr_max
            )));
        }
        if self.batch_sizes.is_empty() {
            return Err(Error::Config("batch size set is empty".into()));
        }
        if let Some(b) = self.batch_sizes.iter().find(|b| !BATCH_SIZES.contains(b)) {
            return Err(Error::Config(format!("batch size {b} is not one of {BATCH_SIZES:?}")));
        }
        Ok(())
    }

    /// Learning rates for the softmax baseline, whose pooled features average about 0.5 and
    /// need steps two to three orders larger than fine-tuning a pretrained backbone.
    pub fn baseline() -> Self {
        SearchSpace {
            lr_min: 1e-3,
            lr_max: 3e-2,
            batch_sizes: BATCH_SIZES.to_vec(),
        }
    }

    pub fn without_batch(mut self, batch: usize) -> Self {
        self.batch_sizes.retain(|&b| b != batch);
        self
    }
}

/// Maps `u ∈ [0, 1)` to `exp(ln min + u (ln max − ln min))`.
pub fn log_uniform(min: f64, max: f64, u: f64) -> f64 {
    if min == max {
        return min;
    }
    let (a, b) = (min.ln(), max.ln());
    (a + u * (b - a)).exp().clamp(min, max)
}

/// Draws a learning rate log-uniformly and a batch size uniformly. Deterministic per seed.
pub fn sample_trial(space: &SearchSpace, seed: u64) -> TrainConfig {
    let mut r = rng::seeded(seed);
    let u: f64 = r.random();
    let learning_rate = log_uniform(space.lr_min, space.lr_max, u);
    let batch_size = *space.batch_sizes.choose(&mut r).expect("non-empty batch set");
    TrainConfig {
        learning_rate,
        batch_size,
        seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AshaConfig {
    pub max_t: u32,
    pub grace_period: u32,
    pub reduction_factor: u32,
    pub n_trials: usize,
    pub workers: usize,
    pub commit_order: CommitOrder,
}

/// When the runner hands finished results to the scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitOrder {
    /// As soon as a trial finishes. With several workers the schedule depends on timing.
    #[default]
    Completion,
    /// In the order jobs were handed out, so the event log is reproducible for any worker count.
    Issue,
}

impl Default for AshaConfig {
    fn default() -> Self {
        AshaConfig {
            max_t: 32,
            grace_period: 4,
            reduction_factor: 2,
            n_trials: 64,
            workers: 6,
            commit_order: CommitOrder::Completion,
        }
    }
}

impl AshaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.n_trials < self.reduction_factor as usize {
            return Err(Error::Config(format!(
                "n_trials {} must be >= reduction factor {}",
                self.n_trials, self.reduction_factor
            )));
        }
        rung_levels(self).map(|_| ())
    }
}

/// Cumulative epoch budgets `grace·η^k` up to and including `max_t`.
pub fn rung_levels(cfg: &AshaConfig) -> Result<Vec<u32>> {
    if cfg.grace_period == 0 {
        return Err(Error::Config("grace period must be >= 1".into()));
    }
    if cfg.reduction_factor < 2 {
        return Err(Error::Config("reduction factor must be >= 2".into()));
    }
    let mut levels = vec![cfg.grace_period];
    let mut level = cfg.grace_period;
    while level < cfg.max_t {
        level = level
            .checked_mul(cfg.reduction_factor)
            .ok_or_else(|| Error::Config("rung ladder overflows".into()))?;
        levels.push(level);
    }
    if level != cfg.max_t {
        return Err(Error::Config(format!(
            "grace {} · {}^k never equals max_t {}",
            cfg.grace_period, cfg.reduction_factor, cfg.max_t
        )));
    }
    Ok(levels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Pending,
    Running,
    Paused,
    Completed,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub config: TrainConfig,
    pub rung_index: usize,
    /// Eval metric per reached rung, indexed by rung.
    pub metrics: Vec<f64>,
    pub status: TrialStatus,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Rung {
    pub level: u32,
    pub results: Vec<(usize, f64)>,
    pub promoted: BTreeSet<usize>,
}

/// Orders results best first: higher metric, then lower trial id.
pub(crate) fn rank(results: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut sorted = results.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted
}

/// Trial ids in the top ⌊n/η⌋ of a rung's results.
pub(crate) fn top_k(results: &[(usize, f64)], eta: u32) -> Vec<usize> {
    let k = results.len() / eta as usize;
    rank(results).into_iter().take(k).map(|(id, _)| id).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungTable {
    pub rungs: Vec<Rung>,
}

impl RungTable {
    pub fn new(levels: &[u32]) -> Self {
        RungTable {
            rungs: levels
                .iter()
                .map(|&level| Rung {
                    level,
                    ..Rung::default()
                })
                .collect(),
        }
    }

    pub fn levels(&self) -> Vec<u32> {
        self.rungs.iter().map(|r| r.level).collect()
    }

    pub fn top(&self) -> usize {
        self.rungs.len() - 1
    }

    /// Epochs trained to move from the rung below `rung` up to `rung`.
    pub fn increment(&self, rung: usize) -> u32 {
        self.rungs[rung].level - if rung == 0 { 0 } else { self.rungs[rung - 1].level }
    }
}

/// One scheduler log entry. Serialized with an `"event"` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SchedulerEvent {
    /// Log header describing the ladder the remaining events refer to.
    Config {
        levels: Vec<u32>,
        reduction_factor: u32,
        n_trials: usize,
        seed: u64,
    },
    TrialStarted {
        trial: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    },
    MetricReported {
        trial: usize,
        rung: usize,
        value: f64,
    },
    Promoted {
        trial: usize,
        from_rung: usize,
    },
    Completed {
        trial: usize,
    },
    Terminated {
        trial: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    /// Logical time: position in the total order of scheduler operations.
    pub t: u64,
    #[serde(flatten)]
    pub event: SchedulerEvent,
}

pub fn events_to_jsonl(events: &[LoggedEvent]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn events_from_jsonl(text: &str) -> Result<Vec<LoggedEvent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Work handed to a trial executor.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub trial: usize,
    pub config: TrainConfig,
    /// Rung the trial trains up to.
    pub rung: usize,
    /// Epochs to train in this assignment.
    pub epochs: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Job {
    /// Continue a paused trial from `rung - 1` to `rung`.
    Promote(Assignment),
    StartNew(Assignment),
    Wait,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestTrial {
    pub trial: usize,
    pub config: TrainConfig,
    pub rung: usize,
    pub metric: f64,
}

/// Scheduler state. Every mutation appends to the event log.
#[derive(Debug, Clone)]
pub struct Scheduler {
    cfg: AshaConfig,
    space: SearchSpace,
    seed: u64,
    table: RungTable,
    trials: Vec<Trial>,
    events: Vec<LoggedEvent>,
}

impl Scheduler {
    pub fn new(cfg: AshaConfig, space: SearchSpace, seed: u64) -> Result<Self> {
        cfg.validate()?;
        space.validate()?;
        let levels = rung_levels(&cfg)?;
        let mut s = Scheduler {
            table: RungTable::new(&levels),
            cfg,
            space,
            seed,
            trials: Vec::new(),
            events: Vec::new(),
        };
        s.log(SchedulerEvent::Config {
            levels,
            reduction_factor: cfg.reduction_factor,
            n_trials: cfg.n_trials,
            seed,
        });
        Ok(s)
    }

    fn log(&mut self, event: SchedulerEvent) {
        let t = self.events.len() as u64;
        self.events.push(LoggedEvent { t, event });
    }

    pub fn config(&self) -> &AshaConfig {
        &self.cfg
    }

    pub fn table(&self) -> &RungTable {
        &self.table
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn events(&self) -> &[LoggedEvent] {
        &self.events
    }

    pub fn trial_seed(&self, id: usize) -> u64 {
        rng::derive_seed(self.seed, id as u64)
    }

    fn promotable(&self, k: usize) -> Option<usize> {
        let rung = &self.table.rungs[k];
        top_k(&rung.results, self.cfg.reduction_factor)
            .into_iter()
            .filter(|id| !rung.promoted.contains(id))
            .find(|&id| self.trials[id].status == TrialStatus::Paused)
    }

    pub fn get_job(&mut self) -> Job {
        let top = self.table.top();
        for k in (0..top).rev() {
            if let Some(id) = self.promotable(k) {
                self.table.rungs[k].promoted.insert(id);
                let trial = &mut self.trials[id];
                trial.status = TrialStatus::Running;
                trial.rung_index = k + 1;
                let assignment = Assignment {
                    trial: id,
                    config: trial.config,
                    rung: k + 1,
                    epochs: self.table.increment(k + 1),
                };
                self.log(SchedulerEvent::Promoted { trial: id, from_rung: k });
                return Job::Promote(assignment);
            }
        }
        if self.trials.len() < self.cfg.n_trials {
            let id = self.trials.len();
            let config = sample_trial(&self.space, self.trial_seed(id));
            self.trials.push(Trial {
                id,
                config,
                rung_index: 0,
                metrics: Vec::new(),
                status: TrialStatus::Running,
            });
            self.log(SchedulerEvent::TrialStarted {
                trial: id,
                lr: config.learning_rate,
                batch_size: config.batch_size,
                seed: config.seed,
            });
            return Job::StartNew(Assignment {
                trial: id,
                config,
                rung: 0,
                epochs: self.table.increment(0),
            });
        }
        if self.trials.iter().any(|t| t.status == TrialStatus::Running) {
            Job::Wait
        } else {
            Job::Done
        }
    }

    pub fn report(&mut self, trial: usize, rung: usize, metric: f64) -> Result<()> {
        let t = self
            .trials
            .get(trial)
            .ok_or_else(|| Error::Scheduler(format!("report for unknown trial {trial}")))?;
        if t.metrics.len() > rung {
            return Err(Error::Scheduler(format!("duplicate report for trial {trial} at rung {rung}")));
        }
        if t.status != TrialStatus::Running || t.rung_index != rung {
            return Err(Error::Scheduler(format!(
                "trial {trial} is not running at rung {rung} (status {:?}, rung {})",
                t.status, t.rung_index
            )));
        }
        if !metric.is_finite() {
            return Err(Error::Scheduler(format!("trial {trial} reported non-finite metric {metric}")));
        }
        let top = self.table.top();
        let t = &mut self.trials[trial];
        t.metrics.push(metric);
        t.status = if rung == top {
            TrialStatus::Completed
        } else {
            TrialStatus::Paused
        };
        self.table.rungs[rung].results.push((trial, metric));
        self.log(SchedulerEvent::MetricReported {
            trial,
            rung,
            value: metric,
        });
        if rung == top {
            self.log(SchedulerEvent::Completed { trial });
        }
        Ok(())
    }

    /// Marks a trial as failed; it will never be promoted.
    pub fn fail(&mut self, trial: usize, reason: impl Into<String>) -> Result<()> {
        let t = self
            .trials
            .get_mut(trial)
            .ok_or_else(|| Error::Scheduler(format!("failure for unknown trial {trial}")))?;
        t.status = TrialStatus::Terminated;
        self.log(SchedulerEvent::Terminated {
            trial,
            reason: reason.into(),
        });
        Ok(())
    }

    /// Terminates trials still paused once the search is done.
    pub fn finish(&mut self) {
        let paused: Vec<usize> = self
            .trials
            .iter()
            .filter(|t| t.status == TrialStatus::Paused)
            .map(|t| t.id)
            .collect();
        for id in paused {
            self.trials[id].status = TrialStatus::Terminated;
            self.log(SchedulerEvent::Terminated {
                trial: id,
                reason: "not promoted".into(),
            });
        }
    }

    /// Lexicographic maximum of (rung reached, metric there, −id).
    pub fn best_trial(&self) -> Result<BestTrial> {
        self.trials
            .iter()
            .filter_map(|t| {
                let rung = t.metrics.len().checked_sub(1)?;
                Some(BestTrial {
                    trial: t.id,
                    config: t.config,
                    rung,
                    metric: t.metrics[rung],
                })
            })
            .max_by(|a, b| {
                a.rung
                    .cmp(&b.rung)
                    .then(a.metric.total_cmp(&b.metric))
                    .then(b.trial.cmp(&a.trial))
            })
            .ok_or_else(|| Error::Scheduler("no metrics recorded".into()))
    }

    /// Σ over trials of the highest rung level they reported.
    pub fn epochs_by_reports(&self) -> u64 {
        self.trials
            .iter()
            .filter_map(|t| t.metrics.len().checked_sub(1))
            .map(|r| u64::from(self.table.rungs[r].level))
            .sum()
    }
}
