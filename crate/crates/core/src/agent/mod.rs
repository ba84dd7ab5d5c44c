//! The agent: recurrent core plus a decision head, trial rollouts, the
//! distributional actor-critic trainer and the supervised baselines.

pub mod dist;
pub mod heads;
pub mod supervised;
pub mod train;
pub mod transitions;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use dist::{
    bellman_target_binned, bellman_target_projected, improved_policy, kl_divergence, q_mean, Support, LOG_FLOOR,
};
pub use heads::{head_losses, Heads, HeadOutputs, LossTargets, LossVars, RlHyper, TargetKind, Transition, N_ACTIONS};
pub use supervised::{bce_tape, labels, train_supervised, SupervisedConfig, SupervisedMode};
pub use train::{sample_request, train, update, DeltaMode, Episode, ReplayBuffer, TaskConfig, TrainConfig, TrainLogEntry, TrainReport};
pub use transitions::{read_transitions, train_offline, transitions_from_rollout, write_transitions, OfflineConfig};

use crate::attention::{AttentionMap, ForceSpec};
use crate::environment::{score, Action, Outcome, TrialSpec, N_PATCHES, N_STEPS, T_CHANGE};
use crate::error::{Error, Result};
use crate::model::{batch_inputs, CoreConfig, RecurrentCore};
use crate::nn::Mlp;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{GradTape, Var};
use crate::tensor::{concat_rows, sigmoid, Tensor};

/// Which decision head sits on top of the recurrent core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadKind {
    #[default]
    ActorCritic,
    Supervised(SupervisedMode),
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadKind::ActorCritic => f.write_str("actor-critic"),
            HeadKind::Supervised(m) => write!(f, "supervised-{m}"),
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "actor-critic" => Ok(HeadKind::ActorCritic),
            "supervised-actions" => Ok(HeadKind::Supervised(SupervisedMode::Actions)),
            "supervised-beliefs" => Ok(HeadKind::Supervised(SupervisedMode::Beliefs)),
            other => Err(Error::Config(format!("unknown head kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub core: CoreConfig,
    /// Hidden widths of the actor, critic and supervised decoder.
    pub widths: Vec<usize>,
    pub support: Support,
    pub head: HeadKind,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            core: CoreConfig::default(),
            widths: vec![256, 128, 64],
            support: Support::default(),
            head: HeadKind::ActorCritic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    ActorCritic(Heads),
    Supervised { mode: SupervisedMode, head: Mlp },
}

/// Recurrent core and decision head sharing one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub config: AgentConfig,
    pub core: RecurrentCore,
    pub decoder: Decoder,
}

impl Agent {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: AgentConfig, rng: &mut R) -> Self {
        let core = RecurrentCore::new(store, config.core, rng);
        let d_in = N_PATCHES * config.core.d_mem;
        let decoder = match config.head {
            HeadKind::ActorCritic => Decoder::ActorCritic(Heads::new(store, d_in, &config.widths, config.support, rng)),
            HeadKind::Supervised(mode) => {
                let mut w = vec![d_in];
                w.extend_from_slice(&config.widths);
                w.push(1);
                Decoder::Supervised {
                    mode,
                    head: Mlp::new(store, "decoder", &w, true, rng),
                }
            }
        };
        Self { config, core, decoder }
    }

    pub fn heads(&self) -> Result<&Heads> {
        match &self.decoder {
            Decoder::ActorCritic(h) => Ok(h),
            Decoder::Supervised { .. } => Err(Error::Config("agent has a supervised decoder, not actor-critic heads".into())),
        }
    }

    pub fn d_percept(&self) -> usize {
        N_PATCHES * self.config.core.d_mem
    }

    /// Unrolls the core and stacks the flattened percepts of every step,
    /// step-major: row `t·B + b` is trial `b` at step `t`.
    pub fn percepts_tape<T: Scalar>(
        &self,
        tape: &mut GradTape<'_, T>,
        inputs: &[Tensor<T>],
        force: &dyn Fn(usize) -> Vec<ForceSpec>,
    ) -> Result<(Var, Vec<Var>)> {
        let un = self.core.unroll_tape(tape, inputs, force)?;
        let batch = inputs.first().map(|x| x.rows() / N_PATCHES).unwrap_or(0);
        let mut flat = Vec::with_capacity(un.h.len());
        for &h in &un.h {
            flat.push(tape.reshape(h, &[batch, self.d_percept()])?);
        }
        Ok((tape.concat_rows(&flat)?, un.attn))
    }
}

/// Action selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    /// Declare only when the declare probability exceeds one half.
    Greedy,
    /// Draw actions from the policy.
    Sample,
}

/// Everything recorded about one played trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub spec: TrialSpec,
    pub actions: Vec<Action>,
    pub end_t: usize,
    pub reward: u8,
    pub outcome: Outcome,
    /// Attention map at every step (all seven, also after termination).
    pub maps: Vec<AttentionMap>,
    /// Probability of declaring at each step.
    pub p_declare: Vec<f64>,
    /// State values `V(H_t)` (actor-critic only).
    pub values: Vec<f64>,
    /// TD errors `r_t + γ V(H_{t+1}) − V(H_t)` up to the end of the trial.
    pub td: Vec<f64>,
}

impl TrialResult {
    /// Column sums α per step.
    pub fn alpha(&self) -> Vec<[f64; N_PATCHES]> {
        self.maps.iter().map(AttentionMap::alpha).collect()
    }
}

/// Per-step declare probabilities, values and attention for a batch of
/// pre-encoded trials, computed in one forward pass.
pub struct BatchForward {
    pub p_declare: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub maps: Vec<Vec<AttentionMap>>,
    /// Flattened percepts `[7·B, 4·d_mem]`, step-major.
    pub percepts: Vec<Vec<f32>>,
}

/// Runs the agent forward over trials whose patch features are given.
pub fn forward_batch<T: Scalar>(
    store: &ParamStore<T>,
    agent: &Agent,
    features: &[&[Tensor<T>]],
    force: &dyn Fn(usize) -> Vec<ForceSpec>,
) -> Result<BatchForward> {
    let b = features.len();
    let inputs = batch_inputs(features, agent.config.core.n_time)?;
    let mut tape = GradTape::new(store);
    let (h, attn) = agent.percepts_tape(&mut tape, &inputs, force)?;
    let hv = tape.value(h).clone();
    if !hv.is_finite() {
        return Err(Error::Numerical {
            block: "lstm".into(),
            slot: 0,
            detail: "non-finite memory output during rollout".into(),
        });
    }
    let steps = inputs.len();
    let mut out = BatchForward {
        p_declare: vec![Vec::with_capacity(steps); b],
        values: vec![Vec::with_capacity(steps); b],
        maps: vec![Vec::with_capacity(steps); b],
        percepts: (0..hv.rows()).map(|r| hv.row(r).iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()).collect(),
    };
    for a in &attn {
        for (i, m) in crate::attention::maps_from_batch(tape.value(*a))?.into_iter().enumerate() {
            out.maps[i].push(m);
        }
    }
    match &agent.decoder {
        Decoder::ActorCritic(heads) => {
            let ho = heads.evaluate(store, &hv)?;
            for t in 0..steps {
                for (i, (p, v)) in out.p_declare.iter_mut().zip(out.values.iter_mut()).enumerate() {
                    let r = t * b + i;
                    p.push(ho.pi[r][Action::Declare.index()]);
                    v.push(ho.value(r));
                }
            }
        }
        Decoder::Supervised { mode, head } => {
            let mut tape = GradTape::new(store);
            let x = tape.constant(hv);
            let logit = head.forward(&mut tape, x)?;
            let lv = tape.value(logit);
            for t in 0..steps {
                for (i, p) in out.p_declare.iter_mut().enumerate() {
                    let c = sigmoid(lv.at(t * b + i, 0)).to_f64_lossy();
                    p.push(match mode {
                        SupervisedMode::Beliefs if t < T_CHANGE => 0.0,
                        _ => c,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Plays pre-encoded trials. Forcing applies to every trial in the batch.
#[allow(clippy::too_many_arguments)]
pub fn play_encoded<T: Scalar, R: Rng + ?Sized>(
    store: &ParamStore<T>,
    agent: &Agent,
    specs: &[TrialSpec],
    features: &[&[Tensor<T>]],
    force: &dyn Fn(usize) -> Vec<ForceSpec>,
    mode: ActMode,
    gamma: f64,
    rng: &mut R,
) -> Result<(Vec<TrialResult>, BatchForward)> {
    let fw = forward_batch(store, agent, features, force)?;
    let mut results = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let mut actions = Vec::new();
        let mut end = None;
        for t in 0..N_STEPS {
            let p = fw.p_declare[i][t];
            let declare = match mode {
                ActMode::Greedy => p > 0.5,
                ActMode::Sample => rng.random::<f64>() < p,
            };
            let a = if declare { Action::Declare } else { Action::Wait };
            actions.push(a);
            let o = score(spec, t, a);
            if o.terminal {
                end = Some((t, o));
                break;
            }
        }
        let (end_t, last) = end.expect("the last step is always terminal");
        let values = fw.values[i].clone();
        let td = if values.is_empty() {
            Vec::new()
        } else {
            (0..=end_t)
                .map(|t| {
                    let r = if t == end_t { f64::from(last.reward) } else { 0.0 };
                    let next = if t == end_t { 0.0 } else { values[t + 1] };
                    r + gamma * next - values[t]
                })
                .collect()
        };
        results.push(TrialResult {
            spec: spec.clone(),
            actions,
            end_t,
            reward: last.reward,
            outcome: last.outcome.expect("terminal steps carry an outcome"),
            maps: fw.maps[i].clone(),
            p_declare: fw.p_declare[i].clone(),
            values,
            td,
        });
    }
    Ok((results, fw))
}

/// Encodes and plays trials in batches of `batch`.
#[allow(clippy::too_many_arguments)]
pub fn play_trials<T: Scalar, R: Rng + ?Sized>(
    store: &ParamStore<T>,
    agent: &Agent,
    encoder: &crate::model::PatchEncoder<T>,
    specs: &[TrialSpec],
    force: &dyn Fn(usize) -> Vec<ForceSpec>,
    mode: ActMode,
    gamma: f64,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<TrialResult>> {
    let mut out = Vec::with_capacity(specs.len());
    for chunk in specs.chunks(batch.max(1)) {
        let feats: Vec<Vec<Tensor<T>>> = chunk.iter().map(|s| encoder.encode_trial(s)).collect::<Result<_>>()?;
        let refs: Vec<&[Tensor<T>]> = feats.iter().map(Vec::as_slice).collect();
        out.extend(play_encoded(store, agent, chunk, &refs, force, mode, gamma, rng)?.0);
    }
    Ok(out)
}

/// Ids of every parameter in `store` (the agent owns the whole store).
pub fn all_ids<T: Scalar>(store: &ParamStore<T>) -> Vec<ParamId> {
    store.ids().collect()
}

/// Flattened percept rows `[rows, d]` from f32 vectors.
pub fn percept_tensor<T: Scalar>(rows: &[&[f32]]) -> Result<Tensor<T>> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let parts: Vec<Tensor<T>> = rows
        .iter()
        .map(|r| Tensor::new(&[1, d], r.iter().map(|&v| crate::scalar::sc(f64::from(v))).collect()))
        .collect::<Result<_>>()?;
    concat_rows(&parts.iter().collect::<Vec<_>>())
}
