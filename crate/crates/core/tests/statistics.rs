mod support;

use rand::Rng;
use statrs::function::erf::erf;
use vstb::analysis::{confusion, inverse_normal_cdf, sdt, train_probe, ProbeConfig, ProbeDataset};
use vstb::Tensor;

#[test]
fn delta_method_variances_match_monte_carlo() {
    support::sdt_calibration().unwrap();
}

#[test]
fn d_prime_of_symmetric_rates() {
    let e = sdt(8413, 1587, 1587, 8413).unwrap();
    assert!((e.d_prime - 2.0).abs() <= 0.01, "{}", e.d_prime);
    assert!(e.c.abs() < 1e-9);
}

fn bisect_quantile(p: f64) -> f64 {
    let cdf = |x: f64| 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn inverse_normal_matches_bisection_on_erf() {
    for i in 1..1000 {
        let p = i as f64 / 1000.0;
        let (a, b) = (inverse_normal_cdf(p), bisect_quantile(p));
        assert!((a - b).abs() < 1e-9, "p={p}: {a} vs {b}");
    }
}

#[test]
fn logistic_fit_recovers_planted_parameters() {
    support::psychometric_recovery().unwrap();
}

fn clusters(n: usize, seed: u64) -> ProbeDataset<f64> {
    let mut r = support::rng(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = i % 3;
        for d in 0..4 {
            let centre = if d == c { 4.0 } else { 0.0 };
            x.push(centre + r.random_range(-0.5..0.5));
        }
        y.push(c);
    }
    ProbeDataset::new(Tensor::from_f64(&[n, 4], &x).unwrap(), y, 3).unwrap()
}

#[test]
fn probe_separates_clusters_and_checks_its_input() {
    let train = clusters(300, 80);
    let cfg = ProbeConfig::default();
    let mut r = support::rng(81);
    let probe = train_probe(&train, &cfg, &mut r).unwrap();
    let test = clusters(150, 82);
    let conf = confusion(&probe, &test).unwrap();
    let total: usize = conf.iter().flatten().sum();
    let correct: usize = (0..3).map(|i| conf[i][i]).sum();
    assert_eq!(total, 150);
    for (i, row) in conf.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), test.y.iter().filter(|&&c| c == i).count());
    }
    assert!(correct as f64 / total as f64 > 0.99, "{conf:?}");
    let wrong = ProbeDataset::new(Tensor::<f64>::zeros(&[5, 3]), vec![0; 5], 3).unwrap();
    assert!(confusion(&probe, &wrong).is_err());
}
