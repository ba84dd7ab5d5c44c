//! Behavioral statistics, psychometric fits, signal detection, decoding
//! probes and perturbation sweeps over logged trials.

pub mod force;
pub mod log;
pub mod probe;
pub mod psychometric;
pub mod sdt;
pub mod tables;

use statrs::distribution::{Beta, ContinuousCDF};

pub use force::{grid_trials, parse_force, perturbation_sweep, play_forced, ForceSchedule, ForceTarget, SweepCondition, SweepResult, TimeSel};
pub use log::{read_trial_log, write_trial_log, TrialLogWriter, TrialRecord, TRIAL_LOG_SCHEMA};
pub use probe::{confusion, row_normalize, split_dataset, train_probe, Probe, ProbeConfig, ProbeDataset};
pub use psychometric::{fit_logistic, logistic, PsychometricFit, PsychometricPoint};
pub use sdt::{inverse_normal_cdf, normal_pdf, sdt, SdtEstimate};

use crate::environment::{Location, Outcome, LAST_STEP};
use crate::error::{Error, Result};

/// Grouping key of the behavior table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Condition {
    pub cue_pos: Location,
    pub validity: f64,
    pub change_pos: Option<Location>,
    pub delta: f64,
}

/// Counts for one condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorRow {
    pub condition: Condition,
    pub n_trials: usize,
    pub n_declare: usize,
    /// Sum of trial-end timesteps τ_i.
    pub rt_sum: usize,
    pub n_hit: usize,
    pub n_miss: usize,
    pub n_fa: usize,
    pub n_cr: usize,
}

impl BehaviorRow {
    fn empty(condition: Condition) -> Self {
        Self {
            condition,
            n_trials: 0,
            n_declare: 0,
            rt_sum: 0,
            n_hit: 0,
            n_miss: 0,
            n_fa: 0,
            n_cr: 0,
        }
    }

    fn add(&mut self, r: &TrialRecord) {
        self.n_trials += 1;
        self.n_declare += usize::from(r.declared());
        self.rt_sum += r.end_t;
        match r.outcome {
            Outcome::Hit => self.n_hit += 1,
            Outcome::Miss => self.n_miss += 1,
            Outcome::FalseAlarm => self.n_fa += 1,
            Outcome::CorrectReject => self.n_cr += 1,
        }
    }
}

/// Per-condition behavior, in order of first appearance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BehaviorTable {
    pub rows: Vec<BehaviorRow>,
}

impl BehaviorTable {
    pub fn from_records(records: &[TrialRecord]) -> Self {
        Self::grouped(records, |r| Condition {
            cue_pos: r.cue_pos,
            validity: r.validity,
            change_pos: r.change_pos,
            delta: r.delta,
        })
    }

    /// Groups by an arbitrary condition function.
    pub fn grouped(records: &[TrialRecord], key: impl Fn(&TrialRecord) -> Condition) -> Self {
        let mut rows: Vec<BehaviorRow> = Vec::new();
        for r in records {
            let c = key(r);
            match rows.iter_mut().find(|row| row.condition == c) {
                Some(row) => row.add(r),
                None => {
                    let mut row = BehaviorRow::empty(c);
                    row.add(r);
                    rows.push(row);
                }
            }
        }
        Self { rows }
    }

    /// All records pooled into one row keyed by `condition`.
    pub fn pooled(records: &[TrialRecord], condition: Condition) -> BehaviorRow {
        let mut row = BehaviorRow::empty(condition);
        for r in records {
            row.add(r);
        }
        row
    }
}

/// `n_declare / n_trials`.
pub fn response_rate(row: &BehaviorRow) -> Result<f64> {
    if row.n_trials == 0 {
        return Err(Error::MissingData("response rate of an empty condition".into()));
    }
    Ok(row.n_declare as f64 / row.n_trials as f64)
}

/// Mean trial-end timestep over all trials (waits end at the last step).
pub fn mean_rt(row: &BehaviorRow) -> Result<f64> {
    if row.n_trials == 0 {
        return Err(Error::MissingData("reaction time of an empty condition".into()));
    }
    debug_assert!(row.rt_sum <= row.n_trials * LAST_STEP);
    Ok(row.rt_sum as f64 / row.n_trials as f64)
}

/// Central credible interval of `Beta(k + ½, n − k + ½)`. The lower end is
/// pinned to 0 when `k = 0` and the upper end to 1 when `k = n`.
pub fn jeffreys_interval(k: usize, n: usize, level: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::MissingData("Jeffreys interval with no trials".into()));
    }
    if k > n || !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("Jeffreys interval for k={k}, n={n}, level={level}")));
    }
    let beta = Beta::new(k as f64 + 0.5, (n - k) as f64 + 0.5).map_err(|e| Error::Config(e.to_string()))?;
    let tail = (1.0 - level) / 2.0;
    let lo = if k == 0 { 0.0 } else { beta.inverse_cdf(tail) };
    let hi = if k == n { 1.0 } else { beta.inverse_cdf(1.0 - tail) };
    Ok((lo, hi))
}
