//! Actor and distributional critic over the flattened mnemonic percept,
//! and their KL-regularized losses.

use rand::Rng;

use super::dist::{bellman_target_binned, bellman_target_projected, improved_policy, mix, q_mean, Support, LOG_FLOOR};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{sc, Scalar};
use crate::tape::{GradTape, Var};
use crate::tensor::{softmax_rows, Tensor};

pub const N_ACTIONS: usize = 2;

/// Which distributional Bellman target the critic regresses onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetKind {
    /// Hard ε-interval binning.
    #[default]
    Binned,
    /// Linear interpolation onto neighbouring atoms.
    Projected,
}

/// Reinforcement-learning hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlHyper {
    pub gamma: f64,
    pub eta: f64,
    pub beta: f64,
    pub lambda_pol: f64,
    pub lambda_ent: f64,
    /// Bin width of the hard-binned target; `None` means the atom spacing.
    pub epsilon: Option<f64>,
    pub target: TargetKind,
    pub target_sync: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub replay_capacity: usize,
    /// Transitions per minibatch.
    pub batch: usize,
    pub updates_per_trial: usize,
}

impl Default for RlHyper {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            eta: 1.0,
            beta: 1.0,
            lambda_pol: 0.0,
            lambda_ent: 0.0,
            epsilon: None,
            target: TargetKind::Binned,
            target_sync: 200,
            lr: 1e-4,
            max_grad_norm: 0.0,
            replay_capacity: 50_000,
            batch: 64,
            updates_per_trial: 4,
        }
    }
}

impl RlHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("γ = {} outside [0, 1]", self.gamma)));
        }
        if !(self.eta > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config(format!("η = {} and β = {} must be positive", self.eta, self.beta)));
        }
        if self.batch == 0 || self.target_sync == 0 {
            return Err(Error::Config("batch and target sync period must be positive".into()));
        }
        Ok(())
    }

    /// Distributional Bellman target for one transition.
    pub fn target(&self, support: &Support, r: f64, next: &[f64], terminal: bool) -> Vec<f64> {
        match self.target {
            TargetKind::Binned => {
                bellman_target_binned(r, self.gamma, next, terminal, support, self.epsilon.unwrap_or(support.dz()))
            }
            TargetKind::Projected => bellman_target_projected(r, self.gamma, next, terminal, support),
        }
    }
}

/// Actor `d_in → widths… → 2` and critic `[h, a′] → widths… → K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub d_in: usize,
    pub support: Support,
    pub actor: Mlp,
    pub action_embed: Linear,
    pub critic: Mlp,
}

impl Heads {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        d_in: usize,
        widths: &[usize],
        support: Support,
        rng: &mut R,
    ) -> Self {
        let mut aw = vec![d_in];
        aw.extend_from_slice(widths);
        aw.push(N_ACTIONS);
        let actor = Mlp::new(store, "actor", &aw, false, rng);
        let action_embed = Linear::new(store, "critic.action", N_ACTIONS, d_in, rng);
        let mut cw = vec![2 * d_in];
        cw.extend_from_slice(widths);
        cw.push(support.k);
        let critic = Mlp::new(store, "critic", &cw, false, rng);
        Self {
            d_in,
            support,
            actor,
            action_embed,
            critic,
        }
    }

    fn check(&self, h: &Tensor<impl Scalar>) -> Result<()> {
        if h.shape().len() != 2 || h.cols() != self.d_in {
            return Err(dim_err("heads", format!("expected [rows, {}], got {:?}", self.d_in, h.shape())));
        }
        Ok(())
    }

    /// Actor logits `[R, 2]`; the hidden activations come second.
    pub fn actor_logits<T: Scalar>(&self, tape: &mut GradTape<'_, T>, h: Var) -> Result<(Var, Vec<Var>)> {
        self.check(tape.value(h))?;
        self.actor.forward_with_hidden(tape, h)
    }

    /// Critic logits `[R, K]` for one-hot actions `[R, 2]`.
    pub fn critic_logits<T: Scalar>(&self, tape: &mut GradTape<'_, T>, h: Var, actions: Var) -> Result<Var> {
        self.check(tape.value(h))?;
        let a = self.action_embed.forward(tape, actions)?;
        let q0 = tape.concat_cols(&[h, a])?;
        self.critic.forward(tape, q0)
    }

    /// π(·|h) for every row.
    pub fn policy<T: Scalar>(&self, store: &ParamStore<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = GradTape::new(store);
        let hv = tape.constant(h.clone());
        let (logits, _) = self.actor_logits(&mut tape, hv)?;
        Ok(softmax_rows(tape.value(logits)))
    }

    /// Return distributions for every row under each action:
    /// `out[a]` is `[R, K]`.
    pub fn critic_all<T: Scalar>(&self, store: &ParamStore<T>, h: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        (0..N_ACTIONS)
            .map(|a| {
                let mut tape = GradTape::new(store);
                let hv = tape.constant(h.clone());
                let av = tape.constant(one_hot_rows(&vec![a; h.rows()]));
                let logits = self.critic_logits(&mut tape, hv, av)?;
                Ok(softmax_rows(tape.value(logits)))
            })
            .collect()
    }

    /// Policy, per-action distributions and per-action means for every row.
    pub fn evaluate<T: Scalar>(&self, store: &ParamStore<T>, h: &Tensor<T>) -> Result<HeadOutputs> {
        let pi = self.policy(store, h)?;
        let dists = self.critic_all(store, h)?;
        let rows = h.rows();
        let mut out = HeadOutputs {
            pi: Vec::with_capacity(rows),
            dists: Vec::with_capacity(rows),
            q: Vec::with_capacity(rows),
        };
        for r in 0..rows {
            out.pi.push(pi.row(r).iter().map(|v| v.to_f64_lossy()).collect());
            let d: Vec<Vec<f64>> = dists
                .iter()
                .map(|t| t.row(r).iter().map(|v| v.to_f64_lossy()).collect())
                .collect();
            out.q.push(d.iter().map(|p| q_mean(p, &self.support)).collect());
            out.dists.push(d);
        }
        Ok(out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in self.actor.layers.iter().chain([&self.action_embed]).chain(&self.critic.layers) {
            ids.extend([l.w, l.b]);
        }
        ids
    }
}

/// Per-row head outputs as plain numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub pi: Vec<Vec<f64>>,
    /// `dists[row][action]` over atoms.
    pub dists: Vec<Vec<Vec<f64>>>,
    /// `q[row][action]` = mean of the return distribution.
    pub q: Vec<Vec<f64>>,
}

impl HeadOutputs {
    /// State value `V = Σ_a π(a) q(a)` of a row.
    pub fn value(&self, row: usize) -> f64 {
        self.pi[row].iter().zip(&self.q[row]).map(|(p, q)| p * q).sum()
    }
}

pub fn one_hot_rows<T: Scalar>(actions: &[usize]) -> Tensor<T> {
    let mut t = Tensor::zeros(&[actions.len(), N_ACTIONS]);
    for (r, &a) in actions.iter().enumerate() {
        t.set(r, a, T::one());
    }
    t
}

/// Regression targets for one minibatch, row-aligned with the percepts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    pub actions: Vec<usize>,
    /// Bellman target Γ per row.
    pub critic: Vec<Vec<f64>>,
    /// Improved policy π_imp per row.
    pub pi_imp: Vec<Vec<f64>>,
    /// Target-network action values, used by the policy term.
    pub q: Vec<Vec<f64>>,
    /// Row weights; rows with weight 0 are ignored.
    pub weights: Vec<f64>,
}

impl LossTargets {
    fn rows(&self) -> usize {
        self.actions.len()
    }
}

/// One transition `(s, a, r, s′, terminal)` over flattened percepts.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub h: Vec<f32>,
    pub action: usize,
    pub reward: f64,
    pub h_next: Vec<f32>,
    pub terminal: bool,
}

/// Builds the loss targets from target-network outputs at `s` and `s′`.
pub fn build_targets(
    hyper: &RlHyper,
    support: &Support,
    actions: &[usize],
    rewards: &[f64],
    terminal: &[bool],
    at_s: &HeadOutputs,
    at_next: &HeadOutputs,
    weights: Vec<f64>,
) -> Result<LossTargets> {
    let rows = actions.len();
    let mut critic = Vec::with_capacity(rows);
    let mut pi_imp = Vec::with_capacity(rows);
    for r in 0..rows {
        pi_imp.push(improved_policy(&at_s.q[r], &at_s.pi[r], hyper.eta)?);
        let next = if terminal[r] {
            vec![0.0; support.k]
        } else {
            let dists: Vec<&[f64]> = at_next.dists[r].iter().map(Vec::as_slice).collect();
            mix(&at_next.pi[r], &dists)
        };
        critic.push(hyper.target(support, rewards[r], &next, terminal[r]));
    }
    Ok(LossTargets {
        actions: actions.to_vec(),
        critic,
        pi_imp,
        q: at_s.q.clone(),
        weights,
    })
}

/// Loss terms recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub actor: Var,
    pub critic: Var,
    pub policy: Var,
    pub entropy: Var,
    pub total: Var,
}

fn weighted_rows<T: Scalar>(rows: &[Vec<f64>], weights: &[f64], norm: f64) -> Tensor<T> {
    let cols = rows.first().map(Vec::len).unwrap_or(0);
    let mut t = Tensor::zeros(&[rows.len(), cols]);
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            t.set(r, c, sc(v * weights[r] / norm));
        }
    }
    t
}

/// Negative entropy `Σ p log p` of the weighted rows, divided by `norm`.
fn weighted_neg_entropy(rows: &[Vec<f64>], weights: &[f64], norm: f64) -> f64 {
    rows.iter()
        .zip(weights)
        .map(|(row, w)| w * row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.max(LOG_FLOOR).ln()).sum::<f64>())
        .sum::<f64>()
        / norm
}

/// Records `L_actor = KL(π_imp ∥ π_θ)`, `L_critic = β·KL(Γ ∥ p_θ)`, the
/// optional policy-value and entropy terms, and their weighted sum. Each
/// term is a weighted mean over rows.
pub fn head_losses<T: Scalar>(
    tape: &mut GradTape<'_, T>,
    heads: &Heads,
    h: Var,
    targets: &LossTargets,
    hyper: &RlHyper,
) -> Result<LossVars> {
    let rows = tape.value(h).rows();
    if targets.rows() != rows {
        return Err(dim_err("losses", format!("{} target rows for {rows} percept rows", targets.rows())));
    }
    let norm: f64 = targets.weights.iter().sum();
    if norm <= 0.0 {
        return Err(Error::Config("loss batch has no weighted rows".into()));
    }
    let (logits, _) = heads.actor_logits(tape, h)?;
    let logp = tape.log_softmax_rows(logits);
    let coef = tape.constant(weighted_rows::<T>(&targets.pi_imp, &targets.weights, -norm));
    let cross = tape.mul(coef, logp)?;
    let cross = tape.sum(cross);
    let actor = tape.add_scalar(cross, sc(weighted_neg_entropy(&targets.pi_imp, &targets.weights, norm)));

    let onehot = tape.constant(one_hot_rows(&targets.actions));
    let clog = heads.critic_logits(tape, h, onehot)?;
    let logq = tape.log_softmax_rows(clog);
    let coef = tape.constant(weighted_rows::<T>(&targets.critic, &targets.weights, -norm));
    let cross = tape.mul(coef, logq)?;
    let cross = tape.sum(cross);
    let kl = tape.add_scalar(cross, sc(weighted_neg_entropy(&targets.critic, &targets.weights, norm)));
    let critic = tape.scale(kl, sc(hyper.beta));

    let pi = tape.exp(logp);
    let qc = tape.constant(weighted_rows::<T>(&targets.q, &targets.weights, -norm));
    let pol = tape.mul(pi, qc)?;
    let policy = tape.sum(pol);
    let wc = tape.constant(weighted_rows::<T>(&vec![vec![1.0; N_ACTIONS]; rows], &targets.weights, norm));
    let plogp = tape.mul(pi, logp)?;
    let plogp = tape.mul(plogp, wc)?;
    let entropy = tape.sum(plogp);

    let mut total = tape.add(actor, critic)?;
    if hyper.lambda_pol != 0.0 {
        let t = tape.scale(policy, sc(hyper.lambda_pol));
        total = tape.add(total, t)?;
    }
    if hyper.lambda_ent != 0.0 {
        let t = tape.scale(entropy, sc(hyper.lambda_ent));
        total = tape.add(total, t)?;
    }
    Ok(LossVars {
        actor,
        critic,
        policy,
        entropy,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_even_policy() {
        let mut store = ParamStore::<f64>::new();
        let heads = Heads::new(&mut store, 4, &[6, 5], Support::default(), &mut ChaCha8Rng::seed_from_u64(1));
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let pi = heads.policy(&store, &Tensor::ones(&[3, 4])).unwrap();
        assert!(pi.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn matching_targets_give_zero_loss() {
        let mut store = ParamStore::<f64>::new();
        let heads = Heads::new(&mut store, 4, &[6], Support::default(), &mut ChaCha8Rng::seed_from_u64(2));
        let h = Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let out = heads.evaluate(&store, &h).unwrap();
        let actions = vec![0, 1, 1];
        let targets = LossTargets {
            critic: (0..3).map(|r| out.dists[r][actions[r]].clone()).collect(),
            pi_imp: out.pi.clone(),
            q: out.q.clone(),
            actions,
            weights: vec![1.0; 3],
        };
        let mut tape = GradTape::new(&store);
        let hv = tape.constant(h);
        let l = head_losses(&mut tape, &heads, hv, &targets, &RlHyper::default()).unwrap();
        assert!(tape.value(l.total).item().abs() < 1e-12);
    }
}
