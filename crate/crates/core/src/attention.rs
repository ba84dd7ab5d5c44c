//! Patch embedding and the memory-gated self-attention stage.
//!
//! Batched forward passes stack `B` trials as `B·4` rows; every attention
//! operation is block-diagonal over groups of four patch rows, so trials
//! never exchange information.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::environment::{Location, N_PATCHES};
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{sc, Scalar};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// How the mnemonic percept enters the attention computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FeedbackVariant {
    /// Memory rows are appended as extra tokens; attention runs over 8 tokens.
    Tokens,
    /// Memory projections are added to the visual queries, keys and values.
    Additive,
    /// Memory projections gate the visual queries, keys and values elementwise.
    #[default]
    Multiplicative,
}

impl fmt::Display for FeedbackVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeedbackVariant::Tokens => "tokens",
            FeedbackVariant::Additive => "additive",
            FeedbackVariant::Multiplicative => "multiplicative",
        })
    }
}

impl FromStr for FeedbackVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tokens" => Ok(FeedbackVariant::Tokens),
            "additive" => Ok(FeedbackVariant::Additive),
            "multiplicative" => Ok(FeedbackVariant::Multiplicative),
            other => Err(Error::Config(format!("unknown feedback variant {other:?}"))),
        }
    }
}

/// Width of a patch embedding: features, one-hot position, one-hot time.
pub fn d_model(d_features: usize, n_time: usize) -> usize {
    d_features + N_PATCHES + n_time
}

/// Builds `X = [features | ρ_i | τ]` for one frame.
pub fn embed<T: Scalar>(features: &Tensor<T>, t: usize, n_time: usize) -> Result<Tensor<T>> {
    if features.shape().len() != 2 || features.rows() != N_PATCHES {
        return Err(dim_err("embed", format!("expected 4 feature rows, got {:?}", features.shape())));
    }
    if t >= n_time {
        return Err(Error::Config(format!("timestep {t} exceeds the {n_time} time codes")));
    }
    let f = features.cols();
    let d = d_model(f, n_time);
    let mut out = Tensor::zeros(&[N_PATCHES, d]);
    for i in 0..N_PATCHES {
        let row = out.row_mut(i);
        row[..f].copy_from_slice(features.row(i));
        row[f + i] = T::one();
        row[f + N_PATCHES + t] = T::one();
    }
    Ok(out)
}

/// A row-stochastic attention map over one trial's patch rows.
///
/// For the tokens variant the map is 4×8: columns `j` and `j + 4` are the
/// visual and memory tokens of location `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    rows: usize,
    cols: usize,
    a: Vec<f64>,
}

impl AttentionMap {
    pub fn new(rows: usize, cols: usize, a: Vec<f64>) -> Result<Self> {
        if a.len() != rows * cols || cols % N_PATCHES != 0 || rows == 0 {
            return Err(dim_err("AttentionMap", format!("{rows}×{cols} with {} entries", a.len())));
        }
        Ok(Self { rows, cols, a })
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            a: vec![1.0 / cols as f64; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.cols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.a
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.cols..(i + 1) * self.cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.a[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    /// Columns belonging to location `j`.
    fn location_cols(&self, j: usize) -> impl Iterator<Item = usize> {
        (j..self.cols).step_by(N_PATCHES)
    }

    /// Attention bias per location: α_j = Σ_i a_ij (range `[0, 4]`).
    pub fn alpha(&self) -> [f64; N_PATCHES] {
        let mut out = [0.0; N_PATCHES];
        for i in 0..self.rows {
            for (j, &v) in self.row(i).iter().enumerate() {
                out[j % N_PATCHES] += v;
            }
        }
        out
    }

    /// Normalized per-row share α_j / 4 (range `[0, 1]`).
    pub fn share(&self) -> [f64; N_PATCHES] {
        self.alpha().map(|a| a / self.rows as f64)
    }
}

/// An attention override used in perturbation experiments.
#[derive(Debug, Clone, PartialEq)]
pub enum ForceSpec {
    /// Every entry `1 / columns`.
    Uniform,
    /// Location `j` receives no attention; the other columns keep their
    /// relative weights.
    ZeroColumn(Location),
    /// Every row attends only to location `j`.
    MaxColumn(Location),
    /// Location `j` receives a column sum of `value` (share `value / 4`),
    /// the rest of each row is rescaled proportionally.
    SetAlpha(Location, f64),
    /// Replace the map outright.
    Map(AttentionMap),
}

impl fmt::Display for ForceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForceSpec::Uniform => f.write_str("uniform"),
            ForceSpec::ZeroColumn(l) => write!(f, "zero:{l}"),
            ForceSpec::MaxColumn(l) => write!(f, "max:{l}"),
            ForceSpec::SetAlpha(l, v) => write!(f, "alpha:{l}={v}"),
            ForceSpec::Map(_) => f.write_str("map"),
        }
    }
}

/// Applies `spec` to a map; the result is row-stochastic.
pub fn force_attention(map: &AttentionMap, spec: &ForceSpec) -> Result<AttentionMap> {
    let mut out = map.clone();
    let cols = map.cols;
    match spec {
        ForceSpec::Uniform => return Ok(AttentionMap::uniform(map.rows, cols)),
        ForceSpec::Map(m) => {
            if m.rows != map.rows || m.cols != map.cols {
                return Err(Error::Perturbation(format!(
                    "forced map is {}×{}, attention is {}×{}",
                    m.rows, m.cols, map.rows, map.cols
                )));
            }
            for (i, s) in m.row_sums().into_iter().enumerate() {
                if (s - 1.0).abs() > 1e-6 || m.row(i).iter().any(|&v| v < 0.0) {
                    return Err(Error::Perturbation(format!("forced map row {i} is not a distribution")));
                }
            }
            return Ok(m.clone());
        }
        ForceSpec::MaxColumn(loc) => {
            for i in 0..map.rows {
                let row = out.row_mut(i);
                row.fill(0.0);
                row[loc.index()] = 1.0;
            }
        }
        ForceSpec::ZeroColumn(loc) => {
            let owned: Vec<usize> = map.location_cols(loc.index()).collect();
            for i in 0..map.rows {
                let row = out.row_mut(i);
                for &c in &owned {
                    row[c] = 0.0;
                }
                let s: f64 = row.iter().sum();
                if s <= 0.0 {
                    return Err(Error::Perturbation(format!("row {i} has no attention left after zeroing {loc}")));
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        ForceSpec::SetAlpha(loc, value) => {
            let share = value / map.rows as f64;
            if !(0.0..=1.0).contains(&share) {
                return Err(Error::Perturbation(format!("α = {value} outside [0, {}]", map.rows)));
            }
            let owned: Vec<usize> = map.location_cols(loc.index()).collect();
            for i in 0..map.rows {
                let row = out.row_mut(i);
                let inside: f64 = owned.iter().map(|&c| row[c]).sum();
                let outside = 1.0 - inside;
                if (share < 1.0 && outside <= 0.0) || (share > 0.0 && inside <= 0.0 && owned.len() > 1) {
                    return Err(Error::Perturbation(format!("row {i} cannot be redistributed to set α_{loc}")));
                }
                for (c, v) in row.iter_mut().enumerate() {
                    if owned.contains(&c) {
                        *v = if owned.len() == 1 { share } else { *v / inside * share };
                    } else if outside > 0.0 {
                        *v *= (1.0 - share) / outside;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub variant: FeedbackVariant,
    pub d_model: usize,
    pub d_mem: usize,
    /// Divide logits by √d_model.
    pub scaled: bool,
}

/// Projection matrices of the attention stage (no biases).
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub config: AttentionConfig,
    w_xq: ParamId,
    w_xk: ParamId,
    w_xv: ParamId,
    w_hq: ParamId,
    w_hk: ParamId,
    w_hv: ParamId,
    /// Tokens variant only: lifts memory rows to `d_model` before they
    /// share the token projections.
    w_hx: Option<ParamId>,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: AttentionConfig, rng: &mut R) -> Self {
        let (dm, dh) = (config.d_model, config.d_mem);
        let w_xq = store.add_glorot("attn.w_xq", dm, dm, rng);
        let w_xk = store.add_glorot("attn.w_xk", dm, dm, rng);
        let w_xv = store.add_glorot("attn.w_xv", dm, dm, rng);
        let (w_hq, w_hk, w_hv, w_hx) = match config.variant {
            FeedbackVariant::Tokens => {
                let w_hx = store.add_glorot("attn.w_hx", dh, dm, rng);
                // The token variant reuses the visual projections for memory tokens.
                (w_xq, w_xk, w_xv, Some(w_hx))
            }
            _ => (
                store.add_glorot("attn.w_hq", dh, dm, rng),
                store.add_glorot("attn.w_hk", dh, dm, rng),
                store.add_glorot("attn.w_hv", dh, dm, rng),
                None,
            ),
        };
        Self {
            config,
            w_xq,
            w_xk,
            w_xv,
            w_hq,
            w_hk,
            w_hv,
            w_hx,
        }
    }

    /// Number of attention columns per trial.
    pub fn n_cols(&self) -> usize {
        match self.config.variant {
            FeedbackVariant::Tokens => 2 * N_PATCHES,
            _ => N_PATCHES,
        }
    }

    /// Batched attention: `x` is `[B·4, d_model]`, `h` is `[B·4, d_mem]`.
    /// Returns `Z` and the attention weights `[B·4, columns]`.
    pub fn attend_tape<T: Scalar>(
        &self,
        tape: &mut GradTape<'_, T>,
        x: Var,
        h: Var,
        force: &[ForceSpec],
    ) -> Result<(Var, Var)> {
        let cfg = self.config;
        let (xs, hs) = (tape.value(x).shape().to_vec(), tape.value(h).shape().to_vec());
        if xs.len() != 2 || hs.len() != 2 || xs[1] != cfg.d_model || hs[1] != cfg.d_mem || xs[0] != hs[0] || xs[0] % N_PATCHES != 0 {
            return Err(dim_err("attend", format!("X {xs:?}, H {hs:?} for {cfg:?}")));
        }
        let g = N_PATCHES;
        let proj = |tape: &mut GradTape<'_, T>, input: Var, w: ParamId| -> Result<Var> {
            let w = tape.param(w);
            tape.matmul(input, w)
        };
        match cfg.variant {
            FeedbackVariant::Multiplicative | FeedbackVariant::Additive => {
                let mut qkv = Vec::with_capacity(3);
                for (wx, wh) in [(self.w_xq, self.w_hq), (self.w_xk, self.w_hk), (self.w_xv, self.w_hv)] {
                    let px = proj(tape, x, wx)?;
                    let ph = proj(tape, h, wh)?;
                    qkv.push(if cfg.variant == FeedbackVariant::Multiplicative {
                        tape.mul(px, ph)?
                    } else {
                        tape.add(px, ph)?
                    });
                }
                let scores = tape.grouped_scores(qkv[0], qkv[1], g, g)?;
                let a = self.normalize(tape, scores, force)?;
                let mixed = tape.grouped_mix(a, qkv[2], g, g)?;
                let z = tape.add(x, mixed)?;
                Ok((z, a))
            }
            FeedbackVariant::Tokens => {
                let w_hx = self.w_hx.expect("tokens variant has a memory lift");
                let hx = proj(tape, h, w_hx)?;
                let q = proj(tape, x, self.w_xq)?;
                let kx = proj(tape, x, self.w_xk)?;
                let kh = proj(tape, hx, self.w_xk)?;
                let vx = proj(tape, x, self.w_xv)?;
                let vh = proj(tape, hx, self.w_xv)?;
                let sx = tape.grouped_scores(q, kx, g, g)?;
                let sh = tape.grouped_scores(q, kh, g, g)?;
                let scores = tape.concat_cols(&[sx, sh])?;
                let a = self.normalize(tape, scores, force)?;
                let ax = tape.slice_cols(a, 0, g)?;
                let ah = tape.slice_cols(a, g, 2 * g)?;
                let mx = tape.grouped_mix(ax, vx, g, g)?;
                let mh = tape.grouped_mix(ah, vh, g, g)?;
                let mixed = tape.add(mx, mh)?;
                let z = tape.add(x, mixed)?;
                Ok((z, a))
            }
        }
    }

    /// Logits → row-stochastic weights, applying any forcing.
    fn normalize<T: Scalar>(&self, tape: &mut GradTape<'_, T>, scores: Var, force: &[ForceSpec]) -> Result<Var> {
        let scores = if self.config.scaled {
            tape.scale(scores, sc(1.0 / (self.config.d_model as f64).sqrt()))
        } else {
            scores
        };
        let (rows, cols) = (tape.value(scores).rows(), tape.value(scores).cols());
        // Zeroed columns are removed before the softmax so the remaining
        // weights are computed from the remaining logits alone.
        let mut masked = vec![false; cols];
        for spec in force {
            if let ForceSpec::ZeroColumn(loc) = spec {
                for c in (loc.index()..cols).step_by(N_PATCHES) {
                    masked[c] = true;
                }
            }
        }
        let scores = if masked.iter().any(|&m| m) {
            if masked.iter().all(|&m| m) {
                return Err(Error::Perturbation("every attention column is zeroed".into()));
            }
            let mut mask = Tensor::zeros(&[rows, cols]);
            for r in 0..rows {
                for (c, &m) in masked.iter().enumerate() {
                    if m {
                        mask.set(r, c, T::neg_infinity());
                    }
                }
            }
            let mask = tape.constant(mask);
            tape.add(scores, mask)?
        } else {
            scores
        };
        let mut a = tape.softmax_rows(scores);
        let replacing: Vec<&ForceSpec> = force.iter().filter(|s| !matches!(s, ForceSpec::ZeroColumn(_))).collect();
        if !replacing.is_empty() {
            let current = tape.value(a).clone();
            let mut forced = Tensor::zeros(&[rows, cols]);
            for grp in 0..rows / N_PATCHES {
                let block: Vec<f64> = (0..N_PATCHES)
                    .flat_map(|i| current.row(grp * N_PATCHES + i).iter().map(|v| v.to_f64_lossy()))
                    .collect();
                let mut map = AttentionMap::new(N_PATCHES, cols, block)?;
                for spec in &replacing {
                    map = force_attention(&map, spec)?;
                }
                for i in 0..N_PATCHES {
                    for c in 0..cols {
                        forced.set(grp * N_PATCHES + i, c, sc(map.get(i, c)));
                    }
                }
            }
            a = tape.constant(forced);
        }
        Ok(a)
    }

    /// Single-trial attention on plain tensors.
    pub fn attend<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        h: &Tensor<T>,
        force: &[ForceSpec],
    ) -> Result<(Tensor<T>, AttentionMap)> {
        let mut tape = GradTape::new(store);
        let (xv, hv) = (tape.constant(x.clone()), tape.constant(h.clone()));
        let (z, a) = self.attend_tape(&mut tape, xv, hv, force)?;
        let av = tape.value(a);
        let map = AttentionMap::new(av.rows(), av.cols(), av.to_f64_vec())?;
        Ok((tape.value(z).clone(), map))
    }
}

/// Splits batched attention weights `[B·4, columns]` into per-trial maps.
pub fn maps_from_batch<T: Scalar>(a: &Tensor<T>) -> Result<Vec<AttentionMap>> {
    let cols = a.cols();
    (0..a.rows() / N_PATCHES)
        .map(|g| {
            let vals = (0..N_PATCHES)
                .flat_map(|i| a.row(g * N_PATCHES + i).iter().map(|v| v.to_f64_lossy()))
                .collect();
            AttentionMap::new(N_PATCHES, cols, vals)
        })
        .collect()
}
