//! Checks shared by the integration tests and the acceptance report. Each
//! returns a short detail string on success and a diagnosis on failure.

#![allow(dead_code)]

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use vstb::agent::{
    bellman_target_binned, bellman_target_projected, head_losses, improved_policy, play_trials, sample_request, train,
    train_offline, ActMode, Agent, AgentConfig, DeltaMode, Heads, LossTargets, OfflineConfig, RlHyper, Support,
    TaskConfig, TrainConfig, Transition, TrialResult,
};
use vstb::analysis::{fit_logistic, logistic, parse_force, play_forced, sdt};
use vstb::attention::{Attention, AttentionConfig, FeedbackVariant, ForceSpec};
use vstb::environment::{
    render, sample_trial, Action, CueValidity, DeltaSpec, Location, Outcome, RenderConfig, TrialRequest, TrialSpec,
    N_STEPS, T_CHANGE,
};
use vstb::gradcheck::grad_check_tape;
use vstb::memory::{LstmParams, MemoryState, MemoryVars};
use vstb::model::{batch_inputs, PatchEncoder};
use vstb::vae::{pretrain, PretrainConfig, Reduction, Vae, VaeConfig};
use vstb::{GradTape, ParamStore, Scalar, Tensor};

pub type Check = Result<String, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- gradients

pub const GRAD_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-5;

fn random_dist<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Largest relative gradient error of a small VAE loss.
pub fn grad_vae() -> Result<f64, String> {
    let mut r = rng(10);
    let cfg = VaeConfig {
        patch: 8,
        conv1_channels: 2,
        conv2_channels: 3,
        hidden: 5,
        d_latent: 3,
        beta: 0.5,
        reduction: Reduction::PerSample,
    };
    let mut store = ParamStore::<f64>::new();
    let vae = Vae::new(&mut store, cfg, &mut r);
    // Zero-initialized biases put dead receptive fields exactly on the ReLU
    // kink, where central differences are meaningless; move off it.
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    let x = Tensor::<f64>::uniform(&[2, 64], 1.0, &mut r).map(f64::abs);
    let eps = Tensor::randn(&[2, 3], 1.0, &mut r);
    grad_check_tape(&store, GRAD_H, |tape| {
        let xv = tape.constant(x.clone());
        vae.loss_tape(tape, xv, &eps)
    })
    .map_err(err)
}

/// Largest relative gradient error of `Σ Z ⊙ W` through one attention block.
pub fn grad_attention(variant: FeedbackVariant) -> Result<f64, String> {
    let mut r = rng(11);
    let (d_model, d_mem) = (6, 4);
    let mut store = ParamStore::<f64>::new();
    let attn = Attention::new(
        &mut store,
        AttentionConfig {
            variant,
            d_model,
            d_mem,
            scaled: false,
        },
        &mut r,
    );
    let x = Tensor::<f64>::randn(&[8, d_model], 1.0, &mut r);
    let h = Tensor::<f64>::randn(&[8, d_mem], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[8, d_model], 1.0, &mut r);
    grad_check_tape(&store, GRAD_H, |tape| {
        let (xv, hv, wv) = (tape.constant(x.clone()), tape.constant(h.clone()), tape.constant(w.clone()));
        let (z, _) = attn.attend_tape(tape, xv, hv, &[])?;
        let p = tape.mul(z, wv)?;
        Ok(tape.sum(p))
    })
    .map_err(err)
}

/// Largest relative gradient error of `Σ H₃ ⊙ W` over a 3-step unroll.
pub fn grad_lstm() -> Result<f64, String> {
    let mut r = rng(12);
    let (d_model, d_mem) = (6, 4);
    let mut store = ParamStore::<f64>::new();
    let lstm = LstmParams::new(&mut store, d_model, d_mem, &mut r);
    let zs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[4, d_model], 1.0, &mut r)).collect();
    let w = Tensor::<f64>::randn(&[4, d_mem], 1.0, &mut r);
    grad_check_tape(&store, GRAD_H, |tape| {
        let mut s = MemoryVars::constant(tape, &MemoryState::reset(d_mem));
        for z in &zs {
            let zv = tape.constant(z.clone());
            s = lstm.step_tape(tape, zv, s)?;
        }
        let wv = tape.constant(w.clone());
        let p = tape.mul(s.h, wv)?;
        Ok(tape.sum(p))
    })
    .map_err(err)
}

/// Largest relative gradient errors of the actor and critic losses.
pub fn grad_heads() -> Result<(f64, f64), String> {
    let mut r = rng(13);
    let support = Support::default();
    let mut store = ParamStore::<f64>::new();
    let heads = Heads::new(&mut store, 6, &[5], support, &mut r);
    let h = Tensor::<f64>::randn(&[3, 6], 1.0, &mut r);
    let targets = LossTargets {
        actions: vec![0, 1, 1],
        critic: (0..3).map(|_| random_dist(support.k, &mut r)).collect(),
        pi_imp: (0..3).map(|_| random_dist(2, &mut r)).collect(),
        q: (0..3).map(|_| vec![r.random(), r.random()]).collect(),
        weights: vec![1.0, 1.0, 0.5],
    };
    let hyper = RlHyper::default();
    let check = |actor: bool| {
        grad_check_tape(&store, GRAD_H, |tape: &mut GradTape<'_, f64>| {
            let hv = tape.constant(h.clone());
            let l = head_losses(tape, &heads, hv, &targets, &hyper)?;
            Ok(if actor { l.actor } else { l.critic })
        })
        .map_err(err)
    };
    Ok((check(true)?, check(false)?))
}

pub fn gradient_integrity() -> Check {
    let start = Instant::now();
    let (actor, critic) = grad_heads()?;
    let mut all = vec![
        ("vae".to_string(), grad_vae()?),
        ("lstm-3".to_string(), grad_lstm()?),
        ("actor".to_string(), actor),
        ("critic".to_string(), critic),
    ];
    for v in [FeedbackVariant::Tokens, FeedbackVariant::Additive, FeedbackVariant::Multiplicative] {
        all.push((format!("attn-{v}"), grad_attention(v)?));
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = all.iter().map(|a| a.1).fold(0.0, f64::max);
    let detail = all.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    if worst <= GRAD_TOL && secs < 60.0 {
        Ok(format!("{detail}; {secs:.1}s"))
    } else {
        Err(format!("{detail}; {secs:.1}s (limit {GRAD_TOL:e}, 60s)"))
    }
}

// ------------------------------------------------------------ distributions

/// `Σ_j p_j · max(0, 1 − |clip(r + γ z_j) − z_i| / Δz)` evaluated atom by atom.
pub fn triangular_oracle(r: f64, gamma: f64, next: &[f64], terminal: bool, s: &Support) -> Vec<f64> {
    let dz = (s.v_max - s.v_min) / (s.k - 1) as f64;
    let atoms: Vec<f64> = (0..s.k).map(|i| s.v_min + i as f64 * dz).collect();
    let sources: Vec<(f64, f64)> = if terminal {
        vec![(r, 1.0)]
    } else {
        next.iter().zip(&atoms).map(|(&p, &z)| (r + gamma * z, p)).collect()
    };
    atoms
        .iter()
        .map(|&zi| {
            sources
                .iter()
                .map(|&(u, p)| {
                    let u = u.max(s.v_min).min(s.v_max);
                    p * (1.0 - (u - zi).abs() / dz).max(0.0)
                })
                .sum()
        })
        .collect()
}

fn stochastic(v: &[f64], what: &str) -> Result<(), String> {
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-6 || v.iter().any(|&p| !(p >= 0.0)) {
        return Err(format!("{what} is not a distribution: {v:?}"));
    }
    Ok(())
}

pub fn distribution_hygiene(cases: usize) -> Check {
    let mut r = rng(20);
    let (d_model, d_mem) = (6, 4);
    let mut store = ParamStore::<f64>::new();
    let attns: Vec<(ParamStore<f64>, Attention)> = [FeedbackVariant::Tokens, FeedbackVariant::Additive, FeedbackVariant::Multiplicative]
        .into_iter()
        .map(|variant| {
            let mut s = ParamStore::<f64>::new();
            let a = Attention::new(
                &mut s,
                AttentionConfig {
                    variant,
                    d_model,
                    d_mem,
                    scaled: false,
                },
                &mut r,
            );
            (s, a)
        })
        .collect();
    let heads = Heads::new(&mut store, d_mem, &[8], Support::default(), &mut r);
    let mut worst_oracle = 0.0f64;
    for case in 0..cases {
        let scale = 10f64.powf(r.random_range(-1.0..1.5));
        let x = Tensor::<f64>::randn(&[4, d_model], scale, &mut r);
        let h = Tensor::<f64>::randn(&[4, d_mem], scale, &mut r);
        let (attn_store, attn) = &attns[case % attns.len()];
        let (_, map) = attn.attend(attn_store, &x, &h, &[]).map_err(err)?;
        for row in 0..4 {
            stochastic(&(0..map.cols()).map(|c| map.get(row, c)).collect::<Vec<_>>(), "attention row")?;
        }
        let out = heads.evaluate(&store, &h).map_err(err)?;
        for row in 0..4 {
            stochastic(&out.pi[row], "π")?;
            for d in &out.dists[row] {
                stochastic(d, "critic output")?;
            }
        }
        let q: Vec<f64> = (0..2).map(|_| r.random_range(-scale..scale)).collect();
        let pi = random_dist(2, &mut r);
        let eta = 10f64.powf(r.random_range(-2.0..1.0));
        stochastic(&improved_policy(&q, &pi, eta).map_err(err)?, "π_imp")?;

        let support = if case % 2 == 0 {
            Support::default()
        } else {
            let v_min = r.random_range(-2.0..0.0);
            Support::new(v_min, v_min + r.random_range(0.5..3.0), r.random_range(2..40)).map_err(err)?
        };
        let next = random_dist(support.k, &mut r);
        let reward = if r.random_bool(0.5) {
            f64::from(r.random_range(0..2u8))
        } else {
            r.random_range(support.v_min - 0.5..support.v_max + 0.5)
        };
        let gamma = r.random::<f64>();
        let terminal = r.random_bool(0.2);
        let binned = bellman_target_binned(reward, gamma, &next, terminal, &support, support.dz());
        stochastic(&binned, "binned target")?;
        let projected = bellman_target_projected(reward, gamma, &next, terminal, &support);
        stochastic(&projected, "projected target")?;
        let oracle = triangular_oracle(reward, gamma, &next, terminal, &support);
        for (a, b) in projected.iter().zip(&oracle) {
            worst_oracle = worst_oracle.max((a - b).abs());
        }
    }
    if worst_oracle <= 1e-9 {
        Ok(format!("{cases} cases, projection vs oracle max |Δ| {worst_oracle:.1e}"))
    } else {
        Err(format!("projection differs from the triangular oracle by {worst_oracle:e}"))
    }
}

// --------------------------------------------------------------- recurrence

fn eye<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::eye(n)
}

/// Pre-activations within ±80 for many steps: every state stays finite.
pub fn lstm_extremes<T: Scalar>() -> Check {
    let d = 4;
    let mut store = ParamStore::<T>::new();
    let lstm = LstmParams::new(&mut store, d, d, &mut rng(30));
    for g in 0..4 {
        *store.get_mut(lstm.w[g]) = eye(d);
        *store.get_mut(lstm.r[g]) = Tensor::zeros(&[d, d]);
    }
    let mut r = rng(31);
    let mut state = MemoryState::<T>::reset(d);
    for step in 0..200 {
        let z: Vec<f64> = (0..4 * d)
            .map(|_| match r.random_range(0..3) {
                0 => 80.0,
                1 => -80.0,
                _ => r.random_range(-80.0..80.0),
            })
            .collect();
        state = lstm
            .step(&store, &Tensor::from_f64(&[4, d], &z).map_err(err)?, &state)
            .map_err(|e| format!("step {step}: {e}"))?;
    }
    Ok("200 steps at ±80 finite".into())
}

/// All-zero parameters give `H = 0` exactly.
pub fn lstm_zero_params<T: Scalar>() -> Check {
    let d = 5;
    let mut store = ParamStore::<T>::new();
    let lstm = LstmParams::new(&mut store, 7, d, &mut rng(32));
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().fill(T::zero());
    }
    let mut r = rng(33);
    let mut state = MemoryState::<T>::reset(d);
    for _ in 0..5 {
        state = lstm.step(&store, &Tensor::randn(&[4, 7], 3.0, &mut r), &state).map_err(err)?;
        if state.h.data().iter().any(|&v| v != T::zero()) {
            return Err("zero parameters produced nonzero H".into());
        }
    }
    Ok("H = 0".into())
}

fn permute_rows<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let mut out = t.clone();
    for (dst, &src) in perm.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(t.row(src));
    }
    out
}

/// Permuting slots permutes the next state identically, bit for bit.
pub fn lstm_permutation<T: Scalar>() -> Check {
    let (d_model, d) = (6, 5);
    let mut store = ParamStore::<T>::new();
    let lstm = LstmParams::new(&mut store, d_model, d, &mut rng(34));
    let mut r = rng(35);
    let mut state = MemoryState::<T>::reset(d);
    for _ in 0..3 {
        state = lstm.step(&store, &Tensor::randn(&[4, d_model], 1.0, &mut r), &state).map_err(err)?;
    }
    for trial in 0..24 {
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut r);
        let z = Tensor::randn(&[4, d_model], 2.0, &mut r);
        let plain = lstm.step(&store, &z, &state).map_err(err)?;
        let p = |t: &Tensor<T>| permute_rows(t, &perm);
        let permuted_in = MemoryState {
            c: p(&state.c),
            h: p(&state.h),
            m: p(&state.m),
            n: p(&state.n),
        };
        let permuted = lstm.step(&store, &p(&z), &permuted_in).map_err(err)?;
        for (a, b) in [(&plain.c, &permuted.c), (&plain.h, &permuted.h), (&plain.m, &permuted.m), (&plain.n, &permuted.n)] {
            if p(a).data() != b.data() {
                return Err(format!("permutation {perm:?} (case {trial}) changed the state"));
            }
        }
        state = plain;
    }
    Ok("24 permutations exact".into())
}

pub fn lstm_stabilization() -> Check {
    let parts = [
        lstm_extremes::<f32>()?,
        lstm_extremes::<f64>()?,
        lstm_zero_params::<f32>()?,
        lstm_zero_params::<f64>()?,
        lstm_permutation::<f32>()?,
        lstm_permutation::<f64>()?,
    ];
    Ok(format!("f32+f64: {}; {}; {}", parts[0], parts[2], parts[4]))
}

// ---------------------------------------------------------------- isolation

/// Random-weight encoder and agent (no training needed for exactness checks).
pub fn random_model(seed: u64) -> (PatchEncoder<f32>, ParamStore<f32>, Agent) {
    let mut r = rng(seed);
    let mut vs = ParamStore::new();
    let vae = Vae::new(&mut vs, VaeConfig::default(), &mut r);
    let encoder = PatchEncoder::new(vs, vae, RenderConfig::default()).expect("encoder");
    let mut store = ParamStore::new();
    let agent = Agent::new(&mut store, AgentConfig::default(), &mut r);
    (encoder, store, agent)
}

/// Memory traces of one trial under a per-step forcing.
pub fn core_trace(
    encoder: &PatchEncoder<f32>,
    store: &ParamStore<f32>,
    agent: &Agent,
    spec: &TrialSpec,
    force: &dyn Fn(usize) -> Vec<ForceSpec>,
) -> Result<vstb::model::CoreTrace<f32>, String> {
    let feats = encoder.encode_trial(spec).map_err(err)?;
    let inputs = batch_inputs(&[feats.as_slice()], agent.config.core.n_time).map_err(err)?;
    agent.core.run(store, &inputs, force).map_err(err)
}

pub fn isolation(pairs: usize) -> Check {
    let (encoder, store, agent) = random_model(40);
    let mut informative = 0;
    for i in 0..pairs {
        let loc = Location::ALL[i % 4];
        let mut req = TrialRequest::new(Location::ALL[(i / 4) % 4], CueValidity::new(0.5).map_err(err)?, DeltaSpec::Fixed(45.0));
        req.force_change = Some(true);
        req.force_location = Some(loc);
        let change = sample_trial(1000 + i as u64, &req).map_err(err)?;
        let same = change.without_change();
        let force = move |t: usize| if t >= T_CHANGE { vec![ForceSpec::ZeroColumn(loc)] } else { Vec::new() };
        let a = core_trace(&encoder, &store, &agent, &change, &force)?;
        let b = core_trace(&encoder, &store, &agent, &same, &force)?;
        for t in 0..N_STEPS {
            for slot in (0..4).filter(|&s| s != loc.index()) {
                let bits = |h: &Tensor<f32>| h.row(slot).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                if bits(&a.h[t]) != bits(&b.h[t]) {
                    return Err(format!("pair {i}: slot {} differs at t={t} (change at {loc})", slot + 1));
                }
            }
        }
        if a.h[N_STEPS - 1].row(loc.index()) != b.h[N_STEPS - 1].row(loc.index()) {
            informative += 1;
        }
    }
    Ok(format!("{pairs} pairs bit-identical off the changed slot; changed slot differs in {informative}"))
}

// -------------------------------------------------------------------- SDT

fn moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let skew = x.iter().map(|v| ((v - mean) / var.sqrt()).powi(3)).sum::<f64>() / n;
    (mean, var, skew)
}

pub struct SdtCalibration {
    pub var_c: (f64, f64),
    pub var_d: (f64, f64),
    pub skew_d: f64,
    pub d_example: f64,
}

pub fn sdt_calibration_numbers() -> Result<SdtCalibration, String> {
    let (th, tf, n) = (0.7, 0.2, 200u64);
    let closed = sdt(140, 60, 40, 160).map_err(err)?;
    let mut r = rng(50);
    let (bh, bf) = (Binomial::new(n, th).map_err(err)?, Binomial::new(n, tf).map_err(err)?);
    let mut cs = Vec::with_capacity(10_000);
    let mut ds = Vec::with_capacity(10_000);
    for _ in 0..10_000 {
        let (h, f) = (bh.sample(&mut r) as usize, bf.sample(&mut r) as usize);
        let e = sdt(h, n as usize - h, f, n as usize - f).map_err(err)?;
        cs.push(e.c);
        ds.push(e.d_prime);
    }
    let (_, vc, _) = moments(&cs);
    let (_, vd, skew) = moments(&ds);
    let ex = sdt(8413, 1587, 1587, 8413).map_err(err)?;
    Ok(SdtCalibration {
        var_c: (vc, closed.var_c),
        var_d: (vd, closed.var_d),
        skew_d: skew,
        d_example: ex.d_prime,
    })
}

pub fn sdt_calibration() -> Check {
    let s = sdt_calibration_numbers()?;
    let rel = |(emp, cf): (f64, f64)| (emp - cf).abs() / cf;
    let detail = format!(
        "Var(c) {:.3e} vs {:.3e} ({:.1}%), Var(d′) {:.3e} vs {:.3e} ({:.1}%), d′(0.8413, 0.1587) = {:.4}",
        s.var_c.0,
        s.var_c.1,
        100.0 * rel(s.var_c),
        s.var_d.0,
        s.var_d.1,
        100.0 * rel(s.var_d),
        s.d_example
    );
    if rel(s.var_c) <= 0.1 && rel(s.var_d) <= 0.1 && (s.d_example - 2.0).abs() <= 0.01 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------ psychometric

pub const PLANTED: [f64; 4] = [0.07, 0.07, 0.30, 13.0];

pub fn psychometric_levels() -> Vec<f64> {
    (0..=20).map(|i| 2.0 * i as f64).collect()
}

pub fn psychometric_recovery() -> Check {
    let start = Instant::now();
    let levels = psychometric_levels();
    let clean: Vec<(f64, f64)> = levels.iter().map(|&x| (x, logistic(x, &PLANTED))).collect();
    let fit = fit_logistic(&clean).map_err(err)?;
    let clean_err = (0..4).map(|i| (fit.params[i] - PLANTED[i]).abs()).fold(0.0, f64::max);
    let mut r = rng(60);
    let noisy: Vec<(f64, f64)> = levels
        .iter()
        .map(|&x| {
            let k = Binomial::new(500, logistic(x, &PLANTED)).expect("valid p").sample(&mut r);
            (x, k as f64 / 500.0)
        })
        .collect();
    let nf = fit_logistic(&noisy).map_err(err)?;
    let z: Vec<f64> = (0..4).map(|i| (nf.params[i] - PLANTED[i]).abs() / nf.se[i]).collect();
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "noise-free max |Δθ| {clean_err:.1e}; binomial |Δθ|/SE = [{:.2}, {:.2}, {:.2}, {:.2}]; {secs:.2}s",
        z[0], z[1], z[2], z[3]
    );
    if clean_err <= 1e-3 && z.iter().all(|&v| v <= 2.0) && secs < 10.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------- environment

pub fn cued_change_frequency(validity: f64, n: usize, seed0: u64) -> Result<f64, String> {
    let v = CueValidity::new(validity).map_err(err)?;
    let mut hits = 0;
    for i in 0..n {
        let cue = Location::ALL[i % 4];
        let mut req = TrialRequest::new(cue, v, DeltaSpec::Uniform { k: 65.0 });
        req.force_change = Some(true);
        let s = sample_trial(seed0 + i as u64, &req).map_err(err)?;
        if s.change_position == Some(cue) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Same seed → identical trial and pixel-identical frames.
pub fn trial_determinism(seeds: usize) -> Result<(), String> {
    let req = TrialRequest::new(Location::S3, CueValidity::new(0.75).map_err(err)?, DeltaSpec::Uniform { k: 40.0 });
    for seed in 0..seeds as u64 {
        let (a, b) = (sample_trial(seed, &req).map_err(err)?, sample_trial(seed, &req).map_err(err)?);
        if a != b {
            return Err(format!("seed {seed}: trial specs differ"));
        }
        for t in 0..N_STEPS {
            let fa = render(&a, t, &RenderConfig::default()).map_err(err)?;
            let fb = render(&b, t, &RenderConfig::default()).map_err(err)?;
            let bits = |f: &vstb::environment::Frame| f.pixels().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
            if bits(&fa) != bits(&fb) {
                return Err(format!("seed {seed}: frame {t} differs"));
            }
        }
    }
    Ok(())
}

pub fn environment_statistics() -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, v) in CueValidity::LEVELS.into_iter().enumerate() {
        let f = cued_change_frequency(v, 10_000, 1_000_000 * (i as u64 + 1))?;
        ok &= (f - v).abs() <= 0.015;
        parts.push(format!("{v}→{f:.4}"));
    }
    trial_determinism(20)?;
    let detail = format!("{}; 20 seeds deterministic", parts.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------ smoke agent

/// The seed-pinned toy-scale training run and its greedy evaluation.
pub struct Smoke {
    pub encoder: PatchEncoder<f32>,
    pub store: ParamStore<f32>,
    pub agent: Agent,
    pub train_reward: f64,
    pub eval_reward: f64,
    pub rate_60: f64,
    pub rate_0: f64,
    pub secs: f64,
}

pub fn fixed_task(delta: f64) -> TaskConfig {
    TaskConfig {
        delta: DeltaMode::Fixed(delta),
        sigma: 0.0,
        ..TaskConfig::default()
    }
}

fn greedy(smoke_parts: (&ParamStore<f32>, &Agent, &PatchEncoder<f32>), specs: &[TrialSpec]) -> Result<Vec<TrialResult>, String> {
    let (store, agent, encoder) = smoke_parts;
    play_trials(store, agent, encoder, specs, &|_| Vec::new(), ActMode::Greedy, 0.95, 50, &mut rng(0)).map_err(err)
}

fn fresh_trials(delta: f64, n: usize, seed0: u64) -> Result<Vec<TrialSpec>, String> {
    let task = fixed_task(delta);
    let mut r = rng(seed0);
    (0..n)
        .map(|i| sample_trial(seed0 + i as u64, &sample_request(&task, 0.0, &mut r)).map_err(err))
        .collect()
}

pub fn smoke_train() -> Result<Smoke, String> {
    let start = Instant::now();
    let mut r = rng(1);
    let mut vs = ParamStore::<f32>::new();
    let vae = Vae::new(&mut vs, VaeConfig::default(), &mut r);
    let pre = PretrainConfig {
        steps: 1000,
        ..PretrainConfig::default()
    };
    pretrain(&mut vs, &vae, &pre, &RenderConfig::default(), &mut r).map_err(err)?;
    let encoder = PatchEncoder::new(vs, vae, RenderConfig::default()).map_err(err)?;
    let mut store = ParamStore::<f32>::new();
    let agent = Agent::new(&mut store, AgentConfig::default(), &mut r);
    let hyper = RlHyper {
        lr: 1e-3,
        updates_per_trial: 2,
        batch: 32,
        target_sync: 200,
        eta: 1.0,
        ..RlHyper::default()
    };
    let config = TrainConfig {
        episodes: 2000,
        hyper,
        task: fixed_task(60.0),
        wave: 8,
    };
    let report = train(&mut store, &agent, &encoder, &config, &mut r).map_err(err)?;
    let parts = (&store, &agent, &encoder);
    let at60 = greedy(parts, &fresh_trials(60.0, 400, 900_000)?)?;
    let at0 = greedy(parts, &fresh_trials(0.0, 400, 910_000)?)?;
    let declare_rate =
        |rs: &[TrialResult]| rs.iter().filter(|x| x.actions.last() == Some(&Action::Declare)).count() as f64 / rs.len() as f64;
    let eval_reward = at60.iter().map(|x| f64::from(x.reward)).sum::<f64>() / at60.len() as f64;
    let (rate_60, rate_0) = (declare_rate(&at60), declare_rate(&at0));
    Ok(Smoke {
        train_reward: report.mean_reward(),
        eval_reward,
        rate_60,
        rate_0,
        secs: start.elapsed().as_secs_f64(),
        encoder,
        store,
        agent,
    })
}

pub fn learning_smoke(s: &Smoke) -> Check {
    let detail = format!(
        "greedy reward after training {:.3} (mean over training episodes {:.3}), rate(Δ=60) {:.3} vs rate(Δ=0) {:.3}, {:.0}s",
        s.eval_reward, s.train_reward, s.rate_60, s.rate_0, s.secs
    );
    if s.eval_reward >= 0.8 && s.rate_60 > s.rate_0 && s.secs <= 600.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// One-sided sign-test p-value `P(X ≥ wins)`, `X ~ Bin(n, ½)`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    let mut binom = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            binom *= (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += binom;
        }
    }
    p / 2f64.powi(n as i32)
}

pub fn perturbation_direction(s: &Smoke) -> Check {
    let schedule = parse_force("zero:change@t>=5").map_err(err)?;
    let none = parse_force("none").map_err(err)?;
    let (mut lower, mut higher) = (0, 0);
    for k in 0..20 {
        let delta = 15.0 + 4.0 * k as f64;
        let task = fixed_task(delta);
        let mut r = rng(50_000 + k);
        let specs: Vec<TrialSpec> = (0..200)
            .map(|i| {
                let mut req = sample_request(&task, 0.0, &mut r);
                req.force_change = Some(true);
                sample_trial(50_000 + 1000 * k + i, &req).map_err(err)
            })
            .collect::<Result<_, _>>()?;
        let hits = |sched| -> Result<usize, String> {
            let res = play_forced(&s.store, &s.agent, &s.encoder, &specs, sched, 0.95, 50).map_err(err)?;
            Ok(res.iter().filter(|x| x.outcome == Outcome::Hit).count())
        };
        let (base, forced) = (hits(&none)?, hits(&schedule)?);
        if forced < base {
            lower += 1;
        } else if forced > base {
            higher += 1;
        }
    }
    let p = sign_test_p(lower, lower + higher);
    let detail = format!("hit rate lower in {lower}, higher in {higher} of 20 Δ conditions; sign test p = {p:.2e}");
    if p < 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ----------------------------------------------------------------- toy MDP

/// Two-state chain A → B → end with reward 1 on leaving B.
pub fn toy_mdp_values() -> Result<(f64, f64, f64), String> {
    let (a, b) = (vec![1.0f32, 0.0], vec![0.0f32, 1.0]);
    let mut transitions = Vec::new();
    for action in 0..2 {
        transitions.push(Transition {
            h: a.clone(),
            action,
            reward: 0.0,
            h_next: b.clone(),
            terminal: false,
        });
        transitions.push(Transition {
            h: b.clone(),
            action,
            reward: 1.0,
            h_next: b.clone(),
            terminal: true,
        });
    }
    let mut r = rng(70);
    let mut store = ParamStore::<f64>::new();
    let heads = Heads::new(&mut store, 2, &[32, 32], Support::default(), &mut r);
    let hyper = RlHyper {
        lr: 1e-3,
        batch: 32,
        target_sync: 100,
        ..RlHyper::default()
    };
    train_offline(&mut store, &heads, &transitions, &OfflineConfig { updates: 3000, hyper }, &mut r).map_err(err)?;
    let h = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).map_err(err)?;
    let out = heads.evaluate(&store, &h).map_err(err)?;
    Ok((out.value(0), out.value(1), hyper.gamma))
}

pub fn toy_mdp() -> Check {
    let (va, vb, gamma) = toy_mdp_values()?;
    let detail = format!("V(A) = {va:.4} (V* = {gamma}), V(B) = {vb:.4} (V* = 1)");
    if (va - gamma).abs() <= 0.05 && (vb - 1.0).abs() <= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
