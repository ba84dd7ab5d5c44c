//! Supervised baselines: a sigmoid decoder over the flattened percept,
//! trained with binary cross-entropy on action or trial-type labels.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::train::{sample_request, TaskConfig};
use super::{Agent, Decoder};
use crate::environment::{sample_trial, TrialSpec, N_STEPS, T_CHANGE};
use crate::error::{Error, Result};
use crate::model::{batch_inputs, PatchEncoder};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::scalar::{sc, Scalar};
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// What the decoder is taught to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupervisedMode {
    /// The correct action: declare from the change onwards on change trials.
    Actions,
    /// The trial type at every step; responses are read out by rounding
    /// once the change could have happened.
    Beliefs,
}

impl fmt::Display for SupervisedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SupervisedMode::Actions => "actions",
            SupervisedMode::Beliefs => "beliefs",
        })
    }
}

impl FromStr for SupervisedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "actions" => Ok(SupervisedMode::Actions),
            "beliefs" => Ok(SupervisedMode::Beliefs),
            other => Err(Error::Config(format!("unknown supervised mode {other:?}"))),
        }
    }
}

/// Per-step labels of one trial.
pub fn labels(mode: SupervisedMode, spec: &TrialSpec) -> [f64; N_STEPS] {
    let change = if spec.is_change_trial { 1.0 } else { 0.0 };
    let mut out = [0.0; N_STEPS];
    for (t, l) in out.iter_mut().enumerate() {
        *l = match mode {
            SupervisedMode::Actions if t >= T_CHANGE => change,
            SupervisedMode::Actions => 0.0,
            SupervisedMode::Beliefs => change,
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedConfig {
    pub episodes: usize,
    /// Trials per update.
    pub batch: usize,
    pub lr: f64,
    pub task: TaskConfig,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            batch: 16,
            lr: 1e-4,
            task: TaskConfig::default(),
        }
    }
}

/// Mean binary cross-entropy `−[y log σ(x) + (1−y) log(1−σ(x))]` of the
/// logits against the labels, recorded on the tape.
pub fn bce_tape<T: Scalar>(
    tape: &mut GradTape<'_, T>,
    logits: crate::tape::Var,
    labels: &[f64],
) -> Result<crate::tape::Var> {
    let rows = labels.len();
    // log σ(x) and log(1 − σ(x)) are the two log-softmax columns of [x, 0].
    let zeros = tape.constant(Tensor::zeros(&[rows, 1]));
    let pair = tape.concat_cols(&[logits, zeros])?;
    let logp = tape.log_softmax_rows(pair);
    let mut coef = Tensor::zeros(&[rows, 2]);
    for (r, &y) in labels.iter().enumerate() {
        coef.set(r, 0, sc(-y / rows as f64));
        coef.set(r, 1, sc(-(1.0 - y) / rows as f64));
    }
    let coef = tape.constant(coef);
    let prod = tape.mul(coef, logp)?;
    Ok(tape.sum(prod))
}

/// Trains core and decoder end to end on freshly sampled trials. Returns
/// the loss of every update.
pub fn train_supervised<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    agent: &Agent,
    encoder: &PatchEncoder<T>,
    config: &SupervisedConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let Decoder::Supervised { mode, head } = &agent.decoder else {
        return Err(Error::Config("supervised training needs a supervised decoder".into()));
    };
    let mut adam = Adam::new(
        store,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut losses = Vec::new();
    let mut done = 0;
    while done < config.episodes {
        let n = config.batch.max(1).min(config.episodes - done);
        let specs: Vec<TrialSpec> = (0..n)
            .map(|_| sample_trial(rng.random(), &sample_request(&config.task, config.task.initial_k(), rng)))
            .collect::<Result<_>>()?;
        let feats: Vec<Vec<Tensor<T>>> = specs.iter().map(|s| encoder.encode_trial(s)).collect::<Result<_>>()?;
        let refs: Vec<&[Tensor<T>]> = feats.iter().map(Vec::as_slice).collect();
        let inputs = batch_inputs(&refs, agent.config.core.n_time)?;
        let mut y = Vec::with_capacity(N_STEPS * n);
        for t in 0..N_STEPS {
            for s in &specs {
                y.push(labels(*mode, s)[t]);
            }
        }
        let mut tape = GradTape::new(store);
        let (h, _) = agent.percepts_tape(&mut tape, &inputs, &|_| Vec::new())?;
        let logits = head.forward(&mut tape, h)?;
        let loss = bce_tape(&mut tape, logits, &y)?;
        let value = tape.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("supervised loss after {done} trials")));
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        adam.step(store, &grads);
        losses.push(value);
        done += n;
    }
    Ok(losses)
}
