//! Categorical return distributions, distributional Bellman targets and
//! the exponentially tilted policy.

use crate::error::{Error, Result};

/// Floor applied before taking the log of a probability.
pub const LOG_FLOOR: f64 = 1e-12;

/// Fixed, evenly spaced atom support `z_1 < … < z_K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Support {
    pub v_min: f64,
    pub v_max: f64,
    pub k: usize,
}

impl Default for Support {
    fn default() -> Self {
        Self {
            v_min: 0.0,
            v_max: 1.0,
            k: 15,
        }
    }
}

impl Support {
    pub fn new(v_min: f64, v_max: f64, k: usize) -> Result<Self> {
        if k < 2 || !(v_max > v_min) {
            return Err(Error::Config(format!("support [{v_min}, {v_max}] with {k} atoms")));
        }
        Ok(Self { v_min, v_max, k })
    }

    pub fn dz(&self) -> f64 {
        (self.v_max - self.v_min) / (self.k - 1) as f64
    }

    pub fn atom(&self, i: usize) -> f64 {
        if i + 1 == self.k {
            self.v_max
        } else {
            self.v_min + i as f64 * self.dz()
        }
    }

    pub fn atoms(&self) -> Vec<f64> {
        (0..self.k).map(|i| self.atom(i)).collect()
    }

    fn clamp(&self, u: f64) -> f64 {
        u.clamp(self.v_min, self.v_max)
    }

    /// Index of the bin `[z_i − ε/2, z_i + ε/2)` containing `u` (after
    /// clamping to the support); the nearest atom when `u` falls in a gap.
    pub fn bin(&self, u: f64, eps: f64) -> usize {
        let u = self.clamp(u);
        let half = eps / 2.0;
        if let Some(i) = (0..self.k).find(|&i| {
            let z = self.atom(i);
            z - half <= u && (u < z + half || i + 1 == self.k)
        }) {
            return i;
        }
        (0..self.k)
            .min_by(|&a, &b| (self.atom(a) - u).abs().total_cmp(&(self.atom(b) - u).abs()))
            .expect("support is non-empty")
    }
}

/// Expected value `Σ_k p_k z_k`.
pub fn q_mean(probs: &[f64], support: &Support) -> f64 {
    probs.iter().enumerate().map(|(i, p)| p * support.atom(i)).sum()
}

/// `π_imp(a) ∝ π_prev(a) · exp(q(a) / η)`.
pub fn improved_policy(q: &[f64], pi_prev: &[f64], eta: f64) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::Config(format!("improvement temperature η = {eta} must be positive")));
    }
    if q.len() != pi_prev.len() {
        return Err(Error::Dimension {
            op: "improved_policy",
            detail: format!("{} action values vs {} probabilities", q.len(), pi_prev.len()),
        });
    }
    let qmax = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = q
        .iter()
        .zip(pi_prev)
        .map(|(&qa, &p)| p * ((qa - qmax) / eta).exp())
        .collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Hard-binned target: the mass of each next atom moves to the bin whose
/// ε-interval contains `r + γ z_j`. Terminal transitions put all mass on
/// the bin containing `r`.
pub fn bellman_target_binned(r: f64, gamma: f64, next: &[f64], terminal: bool, support: &Support, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; support.k];
    if terminal {
        out[support.bin(r, eps)] = 1.0;
        return out;
    }
    for (j, &p) in next.iter().enumerate() {
        out[support.bin(r + gamma * support.atom(j), eps)] += p;
    }
    out
}

/// Categorical projection: each `u_j = r + γ z_j` (clamped to the
/// support) splits its mass linearly between its two neighbouring atoms.
pub fn bellman_target_projected(r: f64, gamma: f64, next: &[f64], terminal: bool, support: &Support) -> Vec<f64> {
    let mut out = vec![0.0; support.k];
    let mut put = |u: f64, p: f64| {
        let b = (support.clamp(u) - support.v_min) / support.dz();
        let lo = b.floor() as usize;
        let hi = b.ceil() as usize;
        if lo == hi || hi >= support.k {
            out[lo.min(support.k - 1)] += p;
        } else {
            out[lo] += p * (hi as f64 - b);
            out[hi] += p * (b - lo as f64);
        }
    };
    if terminal {
        put(r, 1.0);
    } else {
        for (j, &p) in next.iter().enumerate() {
            put(r + gamma * support.atom(j), p);
        }
    }
    out
}

/// `KL(p ∥ q) = Σ p log(p / q)`, with `q` floored at [`LOG_FLOOR`]. The
/// second value counts how many entries needed the floor.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> (f64, usize) {
    let mut floored = 0;
    let kl = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| {
            if qi < LOG_FLOOR {
                floored += 1;
            }
            pi * (pi.ln() - qi.max(LOG_FLOOR).ln())
        })
        .sum();
    (kl, floored)
}

/// Mixture `Σ_a w(a) · dist_a` of per-action distributions.
pub fn mix(weights: &[f64], dists: &[&[f64]]) -> Vec<f64> {
    let k = dists.first().map(|d| d.len()).unwrap_or(0);
    let mut out = vec![0.0; k];
    for (&w, d) in weights.iter().zip(dists) {
        for (o, &p) in out.iter_mut().zip(d.iter()) {
            *o += w * p;
        }
    }
    out
}
