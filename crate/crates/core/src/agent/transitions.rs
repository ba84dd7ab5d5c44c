//! Fixed transition files and offline (frozen behavior data) training of
//! the actor and critic heads.

use std::io::{BufRead, Write};

use rand::Rng;

use super::heads::{build_targets, head_losses, Heads, RlHyper, Transition};
use super::{BatchForward, TrialResult};
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::scalar::{sc, Scalar};
use crate::tape::GradTape;
use crate::tensor::Tensor;

const HEADER: &str = "vstb-transitions v1";

/// Writes a header `vstb-transitions v1 d_h=<d>` followed by one record per
/// line: `h…, a, r, h_next…, terminal`, all as 32-bit floats.
pub fn write_transitions<W: Write>(mut out: W, transitions: &[Transition]) -> Result<()> {
    let d = transitions.first().map(|t| t.h.len()).unwrap_or(0);
    writeln!(out, "{HEADER} d_h={d}")?;
    for tr in transitions {
        if tr.h.len() != d || tr.h_next.len() != d {
            return Err(Error::Format(format!("transition with percept width {} in a d_h={d} file", tr.h.len())));
        }
        let mut fields: Vec<String> = tr.h.iter().map(f32::to_string).collect();
        fields.push((tr.action as f32).to_string());
        fields.push((tr.reward as f32).to_string());
        fields.extend(tr.h_next.iter().map(f32::to_string));
        fields.push(if tr.terminal { "1" } else { "0" }.to_string());
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn read_transitions<R: BufRead>(input: R) -> Result<Vec<Transition>> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty transition file".into()))??;
    let d: usize = header
        .strip_prefix(HEADER)
        .and_then(|rest| rest.trim().strip_prefix("d_h="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad transition header {header:?}")))?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f32> = line
            .split(',')
            .map(|f| f.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("record {i}: {e}")))?;
        if v.len() != 2 * d + 3 {
            return Err(Error::Format(format!("record {i} has {} fields, expected {}", v.len(), 2 * d + 3)));
        }
        let action = v[d];
        if action != 0.0 && action != 1.0 {
            return Err(Error::Format(format!("record {i}: action {action}")));
        }
        out.push(Transition {
            h: v[..d].to_vec(),
            action: action as usize,
            reward: f64::from(v[d + 1]),
            h_next: v[d + 2..2 * d + 2].to_vec(),
            terminal: v[2 * d + 2] != 0.0,
        });
    }
    Ok(out)
}

/// Transitions of played trials, using the percepts of the same forward
/// pass (rows are step-major, `t·B + b`).
pub fn transitions_from_rollout(results: &[TrialResult], fw: &BatchForward) -> Vec<Transition> {
    let b = results.len();
    let mut out = Vec::new();
    for (i, res) in results.iter().enumerate() {
        for t in 0..=res.end_t {
            let terminal = t == res.end_t;
            let next = if terminal { t } else { t + 1 };
            out.push(Transition {
                h: fw.percepts[t * b + i].clone(),
                action: res.actions[t].index(),
                reward: if terminal { f64::from(res.reward) } else { 0.0 },
                h_next: fw.percepts[next * b + i].clone(),
                terminal,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OfflineConfig {
    pub updates: usize,
    pub hyper: RlHyper,
}

fn rows_tensor<T: Scalar>(rows: &[&[f32]]) -> Result<Tensor<T>> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let data = rows.iter().flat_map(|r| r.iter().map(|&v| sc::<T>(f64::from(v)))).collect();
    Tensor::new(&[rows.len(), d], data)
}

/// Trains the heads on a fixed set of transitions with uniform minibatch
/// sampling and a target network. Returns the total loss of every update.
pub fn train_offline<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    heads: &Heads,
    transitions: &[Transition],
    config: &OfflineConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let hyper = config.hyper;
    hyper.validate()?;
    if transitions.is_empty() {
        return Err(Error::MissingData("no transitions to train on".into()));
    }
    let mut target = store.clone();
    let mut adam = Adam::new(
        store,
        AdamConfig {
            lr: hyper.lr,
            max_grad_norm: hyper.max_grad_norm,
            ..AdamConfig::default()
        },
    );
    let mut losses = Vec::with_capacity(config.updates);
    for u in 0..config.updates {
        let batch: Vec<&Transition> = (0..hyper.batch)
            .map(|_| &transitions[rng.random_range(0..transitions.len())])
            .collect();
        let h: Tensor<T> = rows_tensor(&batch.iter().map(|t| t.h.as_slice()).collect::<Vec<_>>())?;
        let h_next: Tensor<T> = rows_tensor(&batch.iter().map(|t| t.h_next.as_slice()).collect::<Vec<_>>())?;
        let at_s = heads.evaluate(&target, &h)?;
        let at_next = heads.evaluate(&target, &h_next)?;
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        let terminal: Vec<bool> = batch.iter().map(|t| t.terminal).collect();
        let targets = build_targets(
            &hyper,
            &heads.support,
            &actions,
            &rewards,
            &terminal,
            &at_s,
            &at_next,
            vec![1.0; batch.len()],
        )?;
        let mut tape = GradTape::new(store);
        let hv = tape.constant(h);
        let l = head_losses(&mut tape, heads, hv, &targets, &hyper)?;
        let total = tape.value(l.total).item().to_f64_lossy();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("offline loss diverged at update {u}")));
        }
        let grads = tape.backward(l.total)?;
        drop(tape);
        adam.step(store, &grads);
        losses.push(total);
        if (u + 1) % hyper.target_sync == 0 {
            target.copy_from(store)?;
        }
    }
    Ok(losses)
}
