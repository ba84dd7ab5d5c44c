//! Four-parameter logistic psychometric function fitted by damped
//! Gauss-Newton (Levenberg-Marquardt) with multiple starts.

use nalgebra::{Matrix4, Vector4};

use super::{jeffreys_interval, TrialRecord};
use crate::error::{Error, Result};

/// `f(x) = A + (1 − B) / (1 + exp(−C (x − D)))`.
pub fn logistic(x: f64, p: &[f64; 4]) -> f64 {
    let [a, b, c, d] = *p;
    a + (1.0 - b) / (1.0 + (-c * (x - d)).exp())
}

/// One point of a psychometric curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsychometricPoint {
    pub delta: f64,
    pub rate: f64,
    pub n: usize,
    /// 95% Jeffreys interval of the rate.
    pub lo: f64,
    pub hi: f64,
}

impl PsychometricPoint {
    pub fn new(delta: f64, k: usize, n: usize) -> Result<Self> {
        let (lo, hi) = jeffreys_interval(k, n, 0.95)?;
        Ok(Self {
            delta,
            rate: k as f64 / n as f64,
            n,
            lo,
            hi,
        })
    }

    /// Response rate per distinct Δ, sorted by Δ.
    pub fn from_records(records: &[TrialRecord]) -> Result<Vec<Self>> {
        let mut groups: Vec<(f64, usize, usize)> = Vec::new();
        for r in records {
            match groups.iter_mut().find(|g| g.0 == r.delta) {
                Some(g) => {
                    g.1 += usize::from(r.declared());
                    g.2 += 1;
                }
                None => groups.push((r.delta, usize::from(r.declared()), 1)),
            }
        }
        groups.sort_by(|a, b| a.0.total_cmp(&b.0));
        groups.into_iter().map(|(d, k, n)| Self::new(d, k, n)).collect()
    }
}

/// Fitted parameters `[A, B, C, D]` with standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsychometricFit {
    pub params: [f64; 4],
    pub se: [f64; 4],
    pub covariance: [[f64; 4]; 4],
    /// Residual sum of squares.
    pub residual: f64,
}

impl PsychometricFit {
    pub fn a(&self) -> f64 {
        self.params[0]
    }
    pub fn b(&self) -> f64 {
        self.params[1]
    }
    pub fn c(&self) -> f64 {
        self.params[2]
    }
    pub fn d(&self) -> f64 {
        self.params[3]
    }

    pub fn eval(&self, x: f64) -> f64 {
        logistic(x, &self.params)
    }
}

const AB_MAX: f64 = 0.5;
const C_MIN: f64 = 1e-9;

fn project(p: [f64; 4]) -> [f64; 4] {
    [p[0].clamp(0.0, AB_MAX), p[1].clamp(0.0, AB_MAX), p[2].max(C_MIN), p[3]]
}

fn rss(xs: &[f64], ys: &[f64], p: &[f64; 4]) -> f64 {
    xs.iter().zip(ys).map(|(&x, &y)| (y - logistic(x, p)).powi(2)).sum()
}

/// `JᵀJ` and `Jᵀr` at `p`.
fn normal_equations(xs: &[f64], ys: &[f64], p: &[f64; 4]) -> (Matrix4<f64>, Vector4<f64>) {
    let [_, b, c, d] = *p;
    let mut jtj = Matrix4::zeros();
    let mut jtr = Vector4::zeros();
    for (&x, &y) in xs.iter().zip(ys) {
        let s = 1.0 / (1.0 + (-c * (x - d)).exp());
        let ds = s * (1.0 - s);
        let j = Vector4::new(1.0, -s, (1.0 - b) * ds * (x - d), -(1.0 - b) * ds * c);
        jtj += j * j.transpose();
        jtr += j * (y - logistic(x, p));
    }
    (jtj, jtr)
}

fn levenberg_marquardt(xs: &[f64], ys: &[f64], start: [f64; 4]) -> Option<([f64; 4], f64)> {
    let mut p = project(start);
    let mut cost = rss(xs, ys, &p);
    let mut lambda = 1e-3;
    for _ in 0..2000 {
        let (jtj, jtr) = normal_equations(xs, ys, &p);
        let mut damped = jtj;
        for i in 0..4 {
            damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
        }
        let Some(step) = damped.lu().solve(&jtr) else {
            lambda *= 10.0;
            continue;
        };
        let cand = project([p[0] + step[0], p[1] + step[1], p[2] + step[2], p[3] + step[3]]);
        let c_cost = rss(xs, ys, &cand);
        if c_cost.is_finite() && c_cost <= cost {
            let moved = (0..4).map(|i| (cand[i] - p[i]).abs()).fold(0.0, f64::max);
            let gain = cost - c_cost;
            p = cand;
            cost = c_cost;
            lambda = (lambda / 10.0).max(1e-15);
            if moved < 1e-13 || gain <= 1e-16 * cost.max(1e-300) && moved < 1e-9 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e15 {
                break;
            }
        }
    }
    cost.is_finite().then_some((p, cost))
}

/// Least-squares fit of the four-parameter logistic to `(Δ, rate)` points.
/// Starts from a grid over the slope C and the midpoint D; bounds are
/// `A, B ∈ [0, 0.5]` and `C > 0`.
pub fn fit_logistic(points: &[(f64, f64)]) -> Result<PsychometricFit> {
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let mut distinct = xs.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 5 {
        return Err(Error::Fit {
            reason: format!("need at least 5 distinct Δ levels, got {}", distinct.len()),
            best_residual: f64::NAN,
        });
    }
    let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
    let ymin = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let ymax = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<([f64; 4], f64)> = None;
    for c0 in [0.1, 0.3, 1.0] {
        for q in [0.25, 0.5, 0.75] {
            let start = [ymin, 1.0 - ymax, c0, lo + q * (hi - lo)];
            if let Some((p, cost)) = levenberg_marquardt(&xs, &ys, start) {
                if best.is_none_or(|b| cost < b.1) {
                    best = Some((p, cost));
                }
            }
        }
    }
    let Some((params, residual)) = best else {
        return Err(Error::Fit {
            reason: "no start converged to a finite residual".into(),
            best_residual: f64::NAN,
        });
    };
    let (jtj, _) = normal_equations(&xs, &ys, &params);
    let dof = xs.len().saturating_sub(4);
    let s2 = if dof > 0 { residual / dof as f64 } else { f64::NAN };
    let (covariance, se) = match jtj.try_inverse() {
        Some(inv) => {
            let cov = inv * s2;
            let mut c = [[0.0; 4]; 4];
            for (i, row) in c.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = cov[(i, j)];
                }
            }
            (c, [0, 1, 2, 3].map(|i| cov[(i, i)].max(0.0).sqrt()))
        }
        None => ([[f64::NAN; 4]; 4], [f64::NAN; 4]),
    };
    Ok(PsychometricFit {
        params,
        se,
        covariance,
        residual,
    })
}
