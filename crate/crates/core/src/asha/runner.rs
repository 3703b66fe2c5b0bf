//! Drives a [`Scheduler`] with up to `workers` concurrent trial executors.

use std::collections::{HashMap, VecDeque};
use std::sync::{Condvar, Mutex};

use log::{debug, warn};

use super::{AshaConfig, Assignment, BestTrial, CommitOrder, Job, LoggedEvent, Scheduler, SearchSpace, Trial};
use crate::learner::{CheckpointToken, TrainerFactory, TrialData};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub best: BestTrial,
    pub events: Vec<LoggedEvent>,
    pub trials: Vec<Trial>,
    /// Epochs actually trained by successful assignments.
    pub epochs_trained: u64,
    /// Σ over trials of the highest rung level they reported.
    pub epochs_by_reports: u64,
    pub failures: usize,
}

struct Shared {
    scheduler: Scheduler,
    tokens: HashMap<usize, CheckpointToken>,
    /// Issued jobs waiting for a worker, with their issue sequence numbers.
    queue: VecDeque<(u64, Assignment, Option<CheckpointToken>)>,
    issued: u64,
    committed: u64,
    in_flight: usize,
    done: bool,
    epochs_trained: u64,
    failures: usize,
}

impl Shared {
    /// Hands out jobs until every worker is busy or the scheduler has nothing to give.
    fn fill(&mut self, workers: usize) {
        while self.in_flight < workers {
            let (job, token) = match self.scheduler.get_job() {
                Job::Promote(a) => {
                    let token = self.tokens.remove(&a.trial);
                    (a, token)
                }
                Job::StartNew(a) => (a, None),
                Job::Wait => return,
                Job::Done => {
                    self.done = true;
                    return;
                }
            };
            self.queue.push_back((self.issued, job, token));
            self.issued += 1;
            self.in_flight += 1;
        }
    }
}

/// Trains `epochs` from scratch or from the trial's paused state, then pauses and shuts down.
fn execute(
    factory: &dyn TrainerFactory,
    data: &TrialData,
    job: &Assignment,
    resume_from: Option<CheckpointToken>,
    top: usize,
) -> Result<(f64, Option<CheckpointToken>)> {
    let mut handle = factory.create(data)?;
    let outcome = (|| {
        handle.init(&job.config)?;
        if let Some(token) = &resume_from {
            handle.resume(token)?;
        }
        let metric = handle.train(job.epochs)?;
        let token = if job.rung < top { Some(handle.pause()?) } else { None };
        Ok::<_, crate::Error>((metric, token))
    })();
    let closed = handle.shutdown();
    let outcome = outcome?;
    closed?;
    Ok(outcome)
}

/// Runs a full ASHA search. A trial whose trainer errors is terminated and the search goes on.
///
/// Jobs are handed out only when a worker is free, and after every result all free workers are
/// refilled before the next result is applied. With `cfg.workers == 1` or
/// [`CommitOrder::Issue`] the event log is a pure function of the seeds and the trainer.
pub fn run_asha(
    factory: &dyn TrainerFactory,
    data: &TrialData,
    cfg: &AshaConfig,
    space: &SearchSpace,
    seed: u64,
) -> Result<RunOutcome> {
    let scheduler = Scheduler::new(*cfg, space.clone(), seed)?;
    let top = scheduler.table().top();
    let workers = cfg.workers.min(cfg.n_trials).max(1);
    let mut initial = Shared {
        scheduler,
        tokens: HashMap::new(),
        queue: VecDeque::new(),
        issued: 0,
        committed: 0,
        in_flight: 0,
        done: false,
        epochs_trained: 0,
        failures: 0,
    };
    initial.fill(workers);
    let shared = Mutex::new(initial);
    let wake = Condvar::new();
    let ordered = cfg.commit_order == CommitOrder::Issue;

    std::thread::scope(|scope| {
        for w in 0..workers {
            let (shared, wake) = (&shared, &wake);
            scope.spawn(move || loop {
                let (seq, job, resume_from) = {
                    let mut s = shared.lock().expect("scheduler lock poisoned");
                    loop {
                        if let Some(next) = s.queue.pop_front() {
                            break next;
                        }
                        if s.done || s.in_flight == 0 {
                            return;
                        }
                        s = wake.wait(s).expect("scheduler lock poisoned");
                    }
                };
                debug!("worker {w}: trial {} to rung {} ({} epochs)", job.trial, job.rung, job.epochs);
                let result = execute(factory, data, &job, resume_from, top);
                let mut s = shared.lock().expect("scheduler lock poisoned");
                while ordered && s.committed != seq {
                    s = wake.wait(s).expect("scheduler lock poisoned");
                }
                match result {
                    Ok((metric, token)) => {
                        s.epochs_trained += u64::from(job.epochs);
                        if let Some(token) = token {
                            s.tokens.insert(job.trial, token);
                        }
                        s.scheduler
                            .report(job.trial, job.rung, metric)
                            .expect("assignment matches scheduler state");
                    }
                    Err(e) => {
                        warn!("trial {} failed at rung {}: {e}", job.trial, job.rung);
                        s.failures += 1;
                        s.scheduler.fail(job.trial, e.to_string()).expect("known trial");
                    }
                }
                s.committed += 1;
                s.in_flight -= 1;
                s.fill(workers);
                wake.notify_all();
            });
        }
    });

    let mut s = shared.into_inner().expect("scheduler lock poisoned");
    s.scheduler.finish();
    Ok(RunOutcome {
        best: s.scheduler.best_trial()?,
        events: s.scheduler.events().to_vec(),
        trials: s.scheduler.trials().to_vec(),
        epochs_trained: s.epochs_trained,
        epochs_by_reports: s.scheduler.epochs_by_reports(),
        failures: s.failures,
    })
}
