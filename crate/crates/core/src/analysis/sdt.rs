//! Signal-detection estimates with delta-method sampling variances.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Standard normal density `e^{−x²/2} / √(2π)`.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF: Acklam's rational approximation refined by
/// one Halley step on the erfc-based CDF.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Hit/false-alarm rates, criterion, sensitivity and their variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdtEstimate {
    pub theta_h: f64,
    pub theta_fa: f64,
    pub c: f64,
    pub d_prime: f64,
    pub var_c: f64,
    pub var_d: f64,
    pub n_ct: usize,
    pub n_nt: usize,
    /// The hit rate was 0 or 1 and was replaced by 1/(2n) or 1 − 1/(2n).
    pub clamped_h: bool,
    pub clamped_fa: bool,
}

fn clamp_rate(k: usize, n: usize) -> (f64, bool) {
    let n_f = n as f64;
    if k == 0 {
        (1.0 / (2.0 * n_f), true)
    } else if k == n {
        (1.0 - 1.0 / (2.0 * n_f), true)
    } else {
        (k as f64 / n_f, false)
    }
}

/// Delta-method variance of `z(θ̂)`: `θ(1−θ)/n · [1/ψ(z(θ))]²`.
fn z_variance(theta: f64, n: usize) -> f64 {
    let d = 1.0 / normal_pdf(inverse_normal_cdf(theta));
    theta * (1.0 - theta) / n as f64 * d * d
}

/// Criterion `c = −½(z(θ_H) + z(θ_FA))` and sensitivity
/// `d′ = z(θ_H) − z(θ_FA)` from outcome counts.
pub fn sdt(n_hit: usize, n_miss: usize, n_fa: usize, n_cr: usize) -> Result<SdtEstimate> {
    let n_ct = n_hit + n_miss;
    let n_nt = n_fa + n_cr;
    if n_ct == 0 || n_nt == 0 {
        return Err(Error::MissingData(format!(
            "SDT needs change and no-change trials ({n_ct} change, {n_nt} no-change)"
        )));
    }
    let (theta_h, clamped_h) = clamp_rate(n_hit, n_ct);
    let (theta_fa, clamped_fa) = clamp_rate(n_fa, n_nt);
    let (zh, zf) = (inverse_normal_cdf(theta_h), inverse_normal_cdf(theta_fa));
    let (vh, vf) = (z_variance(theta_h, n_ct), z_variance(theta_fa, n_nt));
    Ok(SdtEstimate {
        theta_h,
        theta_fa,
        c: -0.5 * (zh + zf),
        d_prime: zh - zf,
        var_c: 0.25 * (vh + vf),
        var_d: vh + vf,
        n_ct,
        n_nt,
        clamped_h,
        clamped_fa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_rates_give_zero() {
        let e = sdt(50, 50, 50, 50).unwrap();
        assert_eq!(e.c, 0.0);
        assert_eq!(e.d_prime, 0.0);
        // θ = 0.5, n = 100: 0.25/100 · 2π per rate.
        assert!((e.var_d - 2.0 * 0.0025 * 2.0 * std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn extreme_rates_are_clamped() {
        let e = sdt(10, 0, 0, 10).unwrap();
        assert!(e.clamped_h && e.clamped_fa);
        assert_eq!(e.theta_h, 0.95);
        assert_eq!(e.theta_fa, 0.05);
        assert!(e.d_prime.is_finite());
        assert!(matches!(sdt(0, 0, 3, 4), Err(Error::MissingData(_))));
    }
}
