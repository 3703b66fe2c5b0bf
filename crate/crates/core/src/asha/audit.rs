//! Independent replay of a scheduler event log.
//!
//! The auditor shares no code with the scheduler. It rebuilds rung results from the log alone
//! and checks each promotion by counting how many recorded results beat the promoted trial.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{events_from_jsonl, LoggedEvent, SchedulerEvent};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Zero-based position of the offending event in the log.
    pub index: usize,
    pub t: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AuditReport {
    pub events: usize,
    pub trials: usize,
    pub promotions: usize,
    /// Σ over trials of the level of the highest rung they reported.
    pub epochs_by_reports: u64,
    /// Promotions beyond ⌊n/η⌋ of a rung's final result count, summed over rungs.
    pub excess_promotions: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Default)]
struct TrialView {
    reported: BTreeSet<usize>,
    promoted_from: BTreeSet<usize>,
    completed: bool,
    terminated: bool,
}

fn flag(v: &mut Vec<Violation>, index: usize, t: u64, message: String) {
    v.push(Violation { index, t, message });
}

pub fn audit_jsonl(text: &str) -> Result<AuditReport> {
    Ok(audit(&events_from_jsonl(text)?))
}

pub fn audit(events: &[LoggedEvent]) -> AuditReport {
    let mut report = AuditReport {
        events: events.len(),
        ..AuditReport::default()
    };
    let v = &mut report.violations;

    let (levels, eta, n_trials) = match events.first().map(|e| &e.event) {
        Some(SchedulerEvent::Config {
            levels,
            reduction_factor,
            n_trials,
            ..
        }) if !levels.is_empty() && *reduction_factor >= 2 => (levels.clone(), *reduction_factor as usize, *n_trials),
        _ => {
            flag(v, 0, events.first().map_or(0, |e| e.t), "log does not start with a valid config header".into());
            return report;
        }
    };
    let top = levels.len() - 1;

    let mut trials: BTreeMap<usize, TrialView> = BTreeMap::new();
    let mut results: Vec<Vec<(usize, f64)>> = vec![Vec::new(); levels.len()];
    let mut promotions = 0;
    let mut last_t = events[0].t;

    for (i, e) in events.iter().enumerate().skip(1) {
        if e.t <= last_t {
            flag(v, i, e.t, format!("logical time {} does not advance past {last_t}", e.t));
        }
        last_t = last_t.max(e.t);
        match &e.event {
            SchedulerEvent::Config { .. } => flag(v, i, e.t, "second config header".into()),
            SchedulerEvent::TrialStarted { trial, .. } => {
                if trials.contains_key(trial) {
                    flag(v, i, e.t, format!("trial {trial} started twice"));
                } else if *trial != trials.len() {
                    flag(v, i, e.t, format!("trial {trial} started out of sequence"));
                }
                trials.entry(*trial).or_default();
                if trials.len() > n_trials {
                    flag(v, i, e.t, format!("more than {n_trials} trials started"));
                }
            }
            SchedulerEvent::MetricReported { trial, rung, value } => {
                let Some(view) = trials.get_mut(trial) else {
                    flag(v, i, e.t, format!("report for trial {trial} that never started"));
                    continue;
                };
                if *rung > top {
                    flag(v, i, e.t, format!("trial {trial} reported at nonexistent rung {rung}"));
                    continue;
                }
                if view.reported.contains(rung) {
                    flag(v, i, e.t, format!("duplicate report for trial {trial} at rung {rung}"));
                    continue;
                }
                if view.terminated {
                    flag(v, i, e.t, format!("report from terminated trial {trial}"));
                }
                let reached = *rung == 0 || view.promoted_from.contains(&(rung - 1));
                if !reached {
                    flag(v, i, e.t, format!("trial {trial} reported at rung {rung} without being promoted there"));
                }
                if !value.is_finite() {
                    flag(v, i, e.t, format!("trial {trial} reported non-finite metric"));
                }
                view.reported.insert(*rung);
                results[*rung].push((*trial, *value));
            }
            SchedulerEvent::Promoted { trial, from_rung } => {
                promotions += 1;
                let k = *from_rung;
                let Some(view) = trials.get_mut(trial) else {
                    flag(v, i, e.t, format!("promotion of trial {trial} that never started"));
                    continue;
                };
                if k >= top {
                    flag(v, i, e.t, format!("trial {trial} promoted out of the top rung"));
                    continue;
                }
                if !view.reported.contains(&k) {
                    flag(v, i, e.t, format!("trial {trial} promoted from rung {k} before reporting there"));
                    continue;
                }
                if !view.promoted_from.insert(k) {
                    flag(v, i, e.t, format!("trial {trial} promoted from rung {k} twice"));
                }
                if view.terminated {
                    flag(v, i, e.t, format!("terminated trial {trial} promoted"));
                }
                let recorded = &results[k];
                let slots = recorded.len() / eta;
                let mine = recorded.iter().find(|(id, _)| id == trial).map(|r| r.1).unwrap_or(f64::NAN);
                let better = recorded
                    .iter()
                    .filter(|&&(id, m)| m > mine || (m == mine && id < *trial))
                    .count();
                if better >= slots {
                    flag(
                        v,
                        i,
                        e.t,
                        format!(
                            "promotion of trial {trial} from rung {k}: {better} of {} results rank higher but only {slots} slots exist",
                            recorded.len()
                        ),
                    );
                }
            }
            SchedulerEvent::Completed { trial } => match trials.get_mut(trial) {
                Some(view) if view.reported.contains(&top) && !view.completed => view.completed = true,
                _ => flag(v, i, e.t, format!("trial {trial} completed without a top-rung report")),
            },
            SchedulerEvent::Terminated { trial, .. } => match trials.get_mut(trial) {
                Some(view) => view.terminated = true,
                None => flag(v, i, e.t, format!("termination of trial {trial} that never started")),
            },
        }
    }

    // Asynchronous promotion can let more than ⌊n/η⌋ trials leave a rung once later results
    // push early promotions out of the top slice; this is counted, not flagged.
    for (k, recorded) in results.iter().enumerate().take(top) {
        let out = trials.values().filter(|view| view.promoted_from.contains(&k)).count();
        report.excess_promotions += out.saturating_sub(recorded.len() / eta);
    }

    report.trials = trials.len();
    report.promotions = promotions;
    report.epochs_by_reports = trials
        .values()
        .filter_map(|view| view.reported.iter().next_back())
        .map(|&r| u64::from(levels[r]))
        .sum();
    report
}

#[cfg(test)]
mod tests {
    use super::super::{AshaConfig, Job, Scheduler, SearchSpace};
    use super::*;

    fn ev(t: u64, event: SchedulerEvent) -> LoggedEvent {
        LoggedEvent { t, event }
    }

    fn header() -> LoggedEvent {
        ev(
            0,
            SchedulerEvent::Config {
                levels: vec![4, 8],
                reduction_factor: 2,
                n_trials: 4,
                seed: 0,
            },
        )
    }

    fn started(t: u64, trial: usize) -> LoggedEvent {
        ev(
            t,
            SchedulerEvent::TrialStarted {
                trial,
                lr: 1e-5,
                batch_size: 16,
                seed: 0,
            },
        )
    }

    fn reported(t: u64, trial: usize, rung: usize, value: f64) -> LoggedEvent {
        ev(t, SchedulerEvent::MetricReported { trial, rung, value })
    }

    #[test]
    fn accepts_scheduler_log() {
        let cfg = AshaConfig {
            max_t: 8,
            n_trials: 6,
            ..AshaConfig::default()
        };
        let mut s = Scheduler::new(cfg, SearchSpace::default(), 1).unwrap();
        let mut step = 0.0;
        loop {
            match s.get_job() {
                Job::StartNew(a) | Job::Promote(a) => {
                    step += 0.37;
                    s.report(a.trial, a.rung, (step * 7.0_f64).sin().abs()).unwrap();
                }
                Job::Wait => unreachable!("sequential"),
                Job::Done => break,
            }
        }
        s.finish();
        let r = audit(s.events());
        assert!(r.is_clean(), "{:?}", r.violations);
        assert_eq!(r.epochs_by_reports, s.epochs_by_reports());
        assert_eq!(r.trials, 6);
    }

    #[test]
    fn catches_promotion_outside_top_k() {
        let log = vec![
            header(),
            started(1, 0),
            started(2, 1),
            reported(3, 0, 0, 0.6),
            reported(4, 1, 0, 0.8),
            ev(5, SchedulerEvent::Promoted { trial: 0, from_rung: 0 }),
        ];
        let r = audit(&log);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].index, 5);
    }

    #[test]
    fn catches_early_promotion_and_repeat() {
        let log = vec![
            header(),
            started(1, 0),
            reported(2, 0, 0, 0.6),
            ev(3, SchedulerEvent::Promoted { trial: 0, from_rung: 0 }),
        ];
        // one result: ⌊1/2⌋ = 0 slots
        assert!(!audit(&log).is_clean());

        let log = vec![
            header(),
            started(1, 0),
            started(2, 1),
            reported(3, 0, 0, 0.9),
            reported(4, 1, 0, 0.1),
            ev(5, SchedulerEvent::Promoted { trial: 0, from_rung: 0 }),
            ev(6, SchedulerEvent::Promoted { trial: 0, from_rung: 0 }),
        ];
        let r = audit(&log);
        assert!(r.violations.iter().any(|v| v.index == 6));
    }

    #[test]
    fn catches_ordering_faults() {
        let log = vec![header(), reported(1, 0, 0, 0.5)];
        assert!(!audit(&log).is_clean());
        let log = vec![header(), started(1, 0), reported(2, 0, 1, 0.5)];
        assert!(!audit(&log).is_clean());
        let log = vec![header(), started(1, 0), reported(1, 0, 0, 0.5)];
        assert!(!audit(&log).is_clean());
        let log = vec![started(0, 0)];
        assert!(!audit(&log).is_clean());
        assert!(!audit(&[]).is_clean());
    }

    #[test]
    fn tie_goes_to_lower_id() {
        let base = vec![
            header(),
            started(1, 0),
            started(2, 1),
            reported(3, 0, 0, 0.5),
            reported(4, 1, 0, 0.5),
        ];
        let mut good = base.clone();
        good.push(ev(5, SchedulerEvent::Promoted { trial: 0, from_rung: 0 }));
        assert!(audit(&good).is_clean());
        let mut bad = base;
        bad.push(ev(5, SchedulerEvent::Promoted { trial: 1, from_rung: 0 }));
        assert!(!audit(&bad).is_clean());
    }
}
