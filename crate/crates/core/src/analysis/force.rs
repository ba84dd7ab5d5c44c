//! Attention forcing schedules (`max:S1@t=5`, `uniform@t=*`,
//! `zero:change@t>=5`, …) and paired-seed perturbation sweeps.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BehaviorTable, TrialRecord};
use crate::agent::{play_encoded, ActMode, Agent, TrialResult};
use crate::attention::ForceSpec;
use crate::environment::{
    sample_trial, CueValidity, DeltaSpec, Location, TrialRequest, TrialSpec, N_STEPS,
};
use crate::error::{Error, Result};
use crate::model::PatchEncoder;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Location a forcing entry refers to, possibly resolved per trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForceTarget {
    At(Location),
    /// The change location; entries are skipped on no-change trials.
    Change,
    Cue,
}

impl fmt::Display for ForceTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForceTarget::At(l) => write!(f, "{l}"),
            ForceTarget::Change => f.write_str("change"),
            ForceTarget::Cue => f.write_str("cue"),
        }
    }
}

impl FromStr for ForceTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "change" => Ok(ForceTarget::Change),
            "cue" => Ok(ForceTarget::Cue),
            other => other
                .parse()
                .map(ForceTarget::At)
                .map_err(|_| Error::Config(format!("unknown force target {other:?}"))),
        }
    }
}

/// Timesteps an entry applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSel {
    All,
    At(usize),
    From(usize),
}

impl TimeSel {
    pub fn contains(self, t: usize) -> bool {
        match self {
            TimeSel::All => true,
            TimeSel::At(s) => t == s,
            TimeSel::From(s) => t >= s,
        }
    }
}

impl fmt::Display for TimeSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeSel::All => f.write_str("t=*"),
            TimeSel::At(t) => write!(f, "t={t}"),
            TimeSel::From(t) => write!(f, "t>={t}"),
        }
    }
}

/// Which override an entry applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForceKind {
    Uniform,
    Zero(ForceTarget),
    Max(ForceTarget),
    Alpha(ForceTarget, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceEntry {
    pub kind: ForceKind,
    pub time: TimeSel,
}

/// A list of forcing entries; later entries apply after earlier ones.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForceSchedule {
    pub entries: Vec<ForceEntry>,
}

impl ForceSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Concrete overrides for each step of `spec`.
    pub fn resolve(&self, spec: &TrialSpec) -> Vec<Vec<ForceSpec>> {
        let loc = |t: ForceTarget| match t {
            ForceTarget::At(l) => Some(l),
            ForceTarget::Change => spec.change_position,
            ForceTarget::Cue => Some(spec.cue_position),
        };
        (0..N_STEPS)
            .map(|t| {
                self.entries
                    .iter()
                    .filter(|e| e.time.contains(t))
                    .filter_map(|e| match e.kind {
                        ForceKind::Uniform => Some(ForceSpec::Uniform),
                        ForceKind::Zero(x) => loc(x).map(ForceSpec::ZeroColumn),
                        ForceKind::Max(x) => loc(x).map(ForceSpec::MaxColumn),
                        ForceKind::Alpha(x, v) => loc(x).map(|l| ForceSpec::SetAlpha(l, v)),
                    })
                    .collect()
            })
            .collect()
    }
}

impl fmt::Display for ForceSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return f.write_str("none");
        }
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            match e.kind {
                ForceKind::Uniform => f.write_str("uniform")?,
                ForceKind::Zero(t) => write!(f, "zero:{t}")?,
                ForceKind::Max(t) => write!(f, "max:{t}")?,
                ForceKind::Alpha(t, v) => write!(f, "alpha:{t}={v}")?,
            }
            write!(f, "@{}", e.time)?;
        }
        Ok(())
    }
}

impl FromStr for ForceSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_force(s)
    }
}

fn parse_time(s: &str) -> Result<TimeSel> {
    let bad = || Error::Config(format!("bad force time {s:?} (use t=N, t>=N or t=*)"));
    let step = |v: &str| -> Result<usize> {
        let t: usize = v.parse().map_err(|_| bad())?;
        if t >= N_STEPS {
            return Err(bad());
        }
        Ok(t)
    };
    if let Some(v) = s.strip_prefix("t>=") {
        Ok(TimeSel::From(step(v)?))
    } else if let Some(v) = s.strip_prefix("t=") {
        if v == "*" {
            Ok(TimeSel::All)
        } else {
            Ok(TimeSel::At(step(v)?))
        }
    } else {
        Err(bad())
    }
}

fn parse_entry(s: &str) -> Result<ForceEntry> {
    let (spec, time) = s
        .split_once('@')
        .ok_or_else(|| Error::Config(format!("force entry {s:?} lacks an @time part")))?;
    let time = parse_time(time.trim())?;
    let spec = spec.trim();
    let kind = if spec == "uniform" {
        ForceKind::Uniform
    } else if let Some(t) = spec.strip_prefix("zero:") {
        ForceKind::Zero(t.parse()?)
    } else if let Some(t) = spec.strip_prefix("max:") {
        ForceKind::Max(t.parse()?)
    } else if let Some(rest) = spec.strip_prefix("alpha:") {
        let (t, v) = rest
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("alpha forcing {spec:?} needs =value")))?;
        let v: f64 = v.parse().map_err(|_| Error::Config(format!("bad α value in {spec:?}")))?;
        ForceKind::Alpha(t.parse()?, v)
    } else {
        return Err(Error::Config(format!("unknown force spec {spec:?}")));
    };
    Ok(ForceEntry { kind, time })
}

/// Parses `entry(;entry)*`, or `none` for the empty schedule.
pub fn parse_force(s: &str) -> Result<ForceSchedule> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(ForceSchedule::none());
    }
    Ok(ForceSchedule {
        entries: s.split(';').map(parse_entry).collect::<Result<_>>()?,
    })
}

/// A cell of an evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCondition {
    pub cue_pos: Location,
    pub validity: CueValidity,
    pub delta: f64,
    /// `Some(true)` makes every trial a change trial.
    pub force_change: Option<bool>,
    pub force_location: Option<Location>,
    pub sigma: f64,
}

/// `n` trials per condition with seeds `base_seed + i` (`i` counting over
/// the whole grid), so that every schedule sees the same trials.
pub fn grid_trials(conditions: &[SweepCondition], n: usize, base_seed: u64) -> Result<Vec<TrialSpec>> {
    let mut out = Vec::with_capacity(conditions.len() * n);
    for c in conditions {
        let mut req = TrialRequest::new(c.cue_pos, c.validity, DeltaSpec::Fixed(c.delta));
        req.force_change = c.force_change;
        req.force_location = c.force_location;
        req.sigma = c.sigma;
        for _ in 0..n {
            out.push(sample_trial(base_seed + out.len() as u64, &req)?);
        }
    }
    Ok(out)
}

/// Plays trials greedily under a schedule. Trials whose resolved
/// overrides coincide share a batch; results keep the input order.
pub fn play_forced<T: Scalar>(
    store: &ParamStore<T>,
    agent: &Agent,
    encoder: &PatchEncoder<T>,
    specs: &[TrialSpec],
    schedule: &ForceSchedule,
    gamma: f64,
    batch: usize,
) -> Result<Vec<TrialResult>> {
    let resolved: Vec<Vec<Vec<ForceSpec>>> = specs.iter().map(|s| schedule.resolve(s)).collect();
    let mut groups: Vec<(Vec<Vec<ForceSpec>>, Vec<usize>)> = Vec::new();
    for (i, r) in resolved.into_iter().enumerate() {
        match groups.iter_mut().find(|g| g.0 == r) {
            Some(g) => g.1.push(i),
            None => groups.push((r, vec![i])),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out: Vec<Option<TrialResult>> = vec![None; specs.len()];
    for (forces, members) in &groups {
        let force = |t: usize| forces.get(t).cloned().unwrap_or_default();
        for chunk in members.chunks(batch.max(1)) {
            let chunk_specs: Vec<TrialSpec> = chunk.iter().map(|&i| specs[i].clone()).collect();
            let feats: Vec<Vec<Tensor<T>>> =
                chunk_specs.iter().map(|s| encoder.encode_trial(s)).collect::<Result<_>>()?;
            let refs: Vec<&[Tensor<T>]> = feats.iter().map(Vec::as_slice).collect();
            let (res, _) = play_encoded(store, agent, &chunk_specs, &refs, &force, ActMode::Greedy, gamma, &mut rng)?;
            for (&i, r) in chunk.iter().zip(res) {
                out[i] = Some(r);
            }
        }
    }
    Ok(out.into_iter().map(|r| r.expect("every trial was played")).collect())
}

/// Behavior of the same trials under each schedule.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub schedule: ForceSchedule,
    pub records: Vec<TrialRecord>,
    pub table: BehaviorTable,
}

pub fn perturbation_sweep<T: Scalar>(
    store: &ParamStore<T>,
    agent: &Agent,
    encoder: &PatchEncoder<T>,
    specs: &[TrialSpec],
    schedules: &[ForceSchedule],
    gamma: f64,
    batch: usize,
) -> Result<Vec<SweepResult>> {
    schedules
        .iter()
        .map(|s| {
            let results = play_forced(store, agent, encoder, specs, s, gamma, batch)?;
            let records: Vec<TrialRecord> =
                results.iter().enumerate().map(|(i, r)| TrialRecord::from_result(i, r)).collect();
            Ok(SweepResult {
                schedule: s.clone(),
                table: BehaviorTable::from_records(&records),
                records,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_examples() {
        let s = parse_force("max:S1@t=5").unwrap();
        assert_eq!(
            s.entries,
            vec![ForceEntry {
                kind: ForceKind::Max(ForceTarget::At(Location::S1)),
                time: TimeSel::At(5)
            }]
        );
        let s = parse_force("uniform@t=*").unwrap();
        assert_eq!(s.entries[0].time, TimeSel::All);
        let s = parse_force("zero:S4@t>=5;alpha:cue=2.5@t=1").unwrap();
        assert_eq!(s.entries.len(), 2);
        assert_eq!(s.to_string(), "zero:S4@t>=5;alpha:cue=2.5@t=1");
        assert_eq!(parse_force(&s.to_string()).unwrap(), s);
    }

    #[test]
    fn parse_errors() {
        for bad in ["max:S5@t=5", "zero:S1", "uniform@t=9", "spin:S1@t=1", "alpha:S1@t=1"] {
            assert!(matches!(parse_force(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn change_target_skips_no_change_trials() {
        let mut req = TrialRequest::new(Location::S2, CueValidity::new(1.0).unwrap(), DeltaSpec::Fixed(30.0));
        req.force_change = Some(false);
        let spec = sample_trial(1, &req).unwrap();
        let r = parse_force("zero:change@t>=5").unwrap().resolve(&spec);
        assert!(r.iter().all(Vec::is_empty));
        req.force_change = Some(true);
        let spec = sample_trial(1, &req).unwrap();
        let r = parse_force("zero:change@t>=5").unwrap().resolve(&spec);
        assert_eq!(r[5], vec![ForceSpec::ZeroColumn(Location::S2)]);
        assert!(r[4].is_empty());
    }
}
