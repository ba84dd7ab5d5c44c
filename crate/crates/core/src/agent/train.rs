//! Online episodic actor-critic training with an episode replay buffer and
//! a periodically synchronized target network.

use std::collections::VecDeque;

use rand::seq::IndexedRandom;
use rand::Rng;

use super::heads::{build_targets, head_losses, HeadOutputs, RlHyper};
use super::{play_encoded, ActMode, Agent};
use crate::environment::{
    sample_trial, CueValidity, DeltaSpec, DifficultySchedule, DifficultyState, Location, Outcome, TrialRequest,
    TrialSpec, N_PATCHES, N_STEPS,
};
use crate::error::{Error, Result};
use crate::model::{batch_inputs, PatchEncoder};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::scalar::Scalar;
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// How the change magnitude of training trials is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaMode {
    /// `Δ ~ U(−k, k)` with `k` shrunk by the difficulty schedule.
    Curriculum(DifficultySchedule),
    Fixed(f64),
}

/// Distribution of training and evaluation trials.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub validities: Vec<CueValidity>,
    pub cue_positions: Vec<Location>,
    pub delta: DeltaMode,
    pub sigma: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            validities: CueValidity::all().to_vec(),
            cue_positions: Location::ALL.to_vec(),
            delta: DeltaMode::Curriculum(DifficultySchedule::default()),
            sigma: 5.0,
        }
    }
}

impl TaskConfig {
    /// Δ range half-width before any curriculum step.
    pub fn initial_k(&self) -> f64 {
        match self.delta {
            DeltaMode::Curriculum(s) => s.k_start,
            DeltaMode::Fixed(d) => d.abs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.validities.is_empty() || self.cue_positions.is_empty() {
            return Err(Error::Config("task needs at least one validity and one cue position".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("orientation noise σ = {} must be nonnegative", self.sigma)));
        }
        Ok(())
    }
}

/// Draws the cue position and validity of one trial; `k` is the current
/// curriculum half-width.
pub fn sample_request<R: Rng + ?Sized>(task: &TaskConfig, k: f64, rng: &mut R) -> TrialRequest {
    let cue = *task.cue_positions.choose(rng).expect("validated task has cue positions");
    let validity = *task.validities.choose(rng).expect("validated task has validities");
    let delta = match task.delta {
        DeltaMode::Curriculum(_) => DeltaSpec::Uniform { k },
        DeltaMode::Fixed(d) => DeltaSpec::Fixed(d),
    };
    let mut req = TrialRequest::new(cue, validity, delta);
    req.sigma = task.sigma;
    req
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    pub hyper: RlHyper,
    pub task: TaskConfig,
    /// Trials rolled out per parameter snapshot. Each wave is followed by
    /// `wave · updates_per_trial` updates.
    pub wave: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            hyper: RlHyper::default(),
            task: TaskConfig::default(),
            wave: 1,
        }
    }
}

/// A stored trial: per-step patch features plus what the agent did.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T: Scalar> {
    pub features: Vec<Tensor<T>>,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub end_t: usize,
}

impl<T: Scalar> Episode<T> {
    pub fn transitions(&self) -> usize {
        self.end_t + 1
    }
}

/// FIFO buffer of whole episodes, bounded by the number of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T: Scalar> {
    episodes: VecDeque<Episode<T>>,
    transitions: usize,
    capacity: usize,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            episodes: VecDeque::new(),
            transitions: 0,
            capacity,
        }
    }

    pub fn push(&mut self, ep: Episode<T>) {
        self.transitions += ep.transitions();
        self.episodes.push_back(ep);
        while self.transitions > self.capacity && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().expect("buffer is non-empty");
            self.transitions -= old.transitions();
        }
    }

    pub fn transitions(&self) -> usize {
        self.transitions
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Draws episodes uniformly with replacement until they hold at least
    /// `batch` transitions.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Episode<T>> {
        let mut out = Vec::new();
        let mut n = 0;
        while n < batch && !self.episodes.is_empty() {
            let ep = &self.episodes[rng.random_range(0..self.episodes.len())];
            n += ep.transitions();
            out.push(ep);
        }
        out
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub episode: usize,
    pub seed: u64,
    pub delta: f64,
    /// Curriculum half-width used for this trial.
    pub k: f64,
    pub reward: f64,
    pub outcome: Outcome,
    pub end_t: usize,
    pub td: Vec<f64>,
    pub alpha: Vec<[f64; N_PATCHES]>,
    /// Mean losses of the updates that followed this trial's wave (NaN
    /// when no update ran).
    pub loss_actor: f64,
    pub loss_critic: f64,
    pub loss_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<TrainLogEntry>,
    pub updates: usize,
    pub final_k: f64,
}

impl TrainReport {
    pub fn mean_reward(&self) -> f64 {
        self.log.iter().map(|e| e.reward).sum::<f64>() / self.log.len().max(1) as f64
    }
}

/// Runs online training. `store` holds the agent's parameters and is
/// updated in place.
pub fn train<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    agent: &Agent,
    encoder: &PatchEncoder<T>,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    let hyper = config.hyper;
    hyper.validate()?;
    config.task.validate()?;
    agent.heads()?;
    let mut target = store.clone();
    let mut adam = Adam::new(
        store,
        AdamConfig {
            lr: hyper.lr,
            max_grad_norm: hyper.max_grad_norm,
            ..AdamConfig::default()
        },
    );
    let mut replay = ReplayBuffer::new(hyper.replay_capacity);
    let mut difficulty = match config.task.delta {
        DeltaMode::Curriculum(s) => Some(DifficultyState::new(s)),
        DeltaMode::Fixed(_) => None,
    };
    let mut report = TrainReport {
        log: Vec::with_capacity(config.episodes),
        updates: 0,
        final_k: config.task.initial_k(),
    };
    let no_force = |_: usize| Vec::new();
    while report.log.len() < config.episodes {
        let n = config.wave.max(1).min(config.episodes - report.log.len());
        let k = difficulty.map_or(config.task.initial_k(), |d| d.k);
        let specs: Vec<TrialSpec> = (0..n)
            .map(|_| {
                let seed = rng.random();
                sample_trial(seed, &sample_request(&config.task, k, rng))
            })
            .collect::<Result<_>>()?;
        let feats: Vec<Vec<Tensor<T>>> = specs.iter().map(|s| encoder.encode_trial(s)).collect::<Result<_>>()?;
        let refs: Vec<&[Tensor<T>]> = feats.iter().map(Vec::as_slice).collect();
        let (results, _) = play_encoded(store, agent, &specs, &refs, &no_force, ActMode::Sample, hyper.gamma, rng)?;
        let first = report.log.len();
        for (res, f) in results.into_iter().zip(feats) {
            let reward = f64::from(res.reward);
            if let Some(d) = difficulty.as_mut() {
                d.record(reward);
            }
            report.log.push(TrainLogEntry {
                episode: report.log.len(),
                seed: res.spec.seed,
                delta: res.spec.delta,
                k,
                reward,
                outcome: res.outcome,
                end_t: res.end_t,
                td: res.td.clone(),
                alpha: res.alpha(),
                loss_actor: f64::NAN,
                loss_critic: f64::NAN,
                loss_total: f64::NAN,
            });
            replay.push(Episode {
                features: f,
                actions: res.actions.iter().map(|a| a.index()).collect(),
                reward,
                end_t: res.end_t,
            });
        }
        let mut sums = [0.0; 3];
        let mut count = 0;
        for _ in 0..n * hyper.updates_per_trial {
            if replay.transitions() < hyper.batch {
                break;
            }
            let batch = replay.sample(hyper.batch, rng);
            let l = update(store, &target, agent, &batch, &hyper, &mut adam)?;
            for (s, v) in sums.iter_mut().zip(l) {
                *s += v;
            }
            count += 1;
            report.updates += 1;
            if report.updates % hyper.target_sync == 0 {
                target.copy_from(store)?;
            }
        }
        if count > 0 {
            for e in &mut report.log[first..] {
                e.loss_actor = sums[0] / count as f64;
                e.loss_critic = sums[1] / count as f64;
                e.loss_total = sums[2] / count as f64;
            }
        }
    }
    report.final_k = difficulty.map_or(config.task.initial_k(), |d| d.k);
    Ok(report)
}

/// Selects rows of head outputs.
fn gather(out: &HeadOutputs, rows: &[usize]) -> HeadOutputs {
    HeadOutputs {
        pi: rows.iter().map(|&r| out.pi[r].clone()).collect(),
        dists: rows.iter().map(|&r| out.dists[r].clone()).collect(),
        q: rows.iter().map(|&r| out.q[r].clone()).collect(),
    }
}

/// One gradient step on a minibatch of episodes. Every step of every
/// episode is a row; steps past the end of an episode carry zero weight.
/// Returns the actor, critic and total loss.
pub fn update<T: Scalar>(
    store: &mut ParamStore<T>,
    target: &ParamStore<T>,
    agent: &Agent,
    batch: &[&Episode<T>],
    hyper: &RlHyper,
    adam: &mut Adam<T>,
) -> Result<[f64; 3]> {
    let heads = agent.heads()?;
    let b = batch.len();
    let refs: Vec<&[Tensor<T>]> = batch.iter().map(|e| e.features.as_slice()).collect();
    let inputs = batch_inputs(&refs, agent.config.core.n_time)?;
    let no_force = |_: usize| Vec::new();

    let h_target = {
        let mut tape = GradTape::new(target);
        let (h, _) = agent.percepts_tape(&mut tape, &inputs, &no_force)?;
        tape.value(h).clone()
    };
    let at_target = heads.evaluate(target, &h_target)?;

    let rows = N_STEPS * b;
    let mut actions = Vec::with_capacity(rows);
    let mut rewards = Vec::with_capacity(rows);
    let mut terminal = Vec::with_capacity(rows);
    let mut weights = Vec::with_capacity(rows);
    let mut next_rows = Vec::with_capacity(rows);
    for t in 0..N_STEPS {
        for (i, ep) in batch.iter().enumerate() {
            let live = t <= ep.end_t;
            actions.push(if live { ep.actions[t] } else { 0 });
            rewards.push(if t == ep.end_t { ep.reward } else { 0.0 });
            terminal.push(t >= ep.end_t);
            weights.push(if live { 1.0 } else { 0.0 });
            next_rows.push(if t + 1 < N_STEPS { (t + 1) * b + i } else { t * b + i });
        }
    }
    let at_next = gather(&at_target, &next_rows);
    let targets = build_targets(hyper, &heads.support, &actions, &rewards, &terminal, &at_target, &at_next, weights)?;

    let mut tape = GradTape::new(store);
    let (h, _) = agent.percepts_tape(&mut tape, &inputs, &no_force)?;
    let losses = head_losses(&mut tape, heads, h, &targets, hyper)?;
    let values = [losses.actor, losses.critic, losses.total].map(|v| tape.value(v).item().to_f64_lossy());
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "training loss diverged (actor {}, critic {}, total {})",
            values[0], values[1], values[2]
        )));
    }
    let grads = tape.backward(losses.total)?;
    drop(tape);
    if !grads.all_finite() {
        return Err(Error::NonFinite("non-finite gradient".into()));
    }
    adam.step(store, &grads);
    Ok(values)
}
