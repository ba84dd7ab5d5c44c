//! Convolutional variational autoencoder over single stimulus patches.
//!
//! Images are laid out as NHWC rows: a batch of `B` square patches of side
//! `P` is a `[B·P·P, channels]` tensor, and a flat batch is `[B, P·P]`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::environment::{gabor_patch, RenderConfig, PATCH_SIDE};
use crate::error::{dim_err, Result};
use crate::nn::Linear;
use crate::params::{Adam, AdamConfig, ParamId, ParamStore};
use crate::scalar::{sc, Scalar};
use crate::tape::{ConvGeom, GradTape, Var};
use crate::tensor::Tensor;

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeConfig {
    /// Side length of the (square) input patch.
    pub patch: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    /// Width of the feature layer consumed downstream.
    pub hidden: usize,
    pub d_latent: usize,
    /// Weight of the KL term.
    pub beta: f64,
    pub reduction: Reduction,
}

/// How the reconstruction and KL terms are reduced over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Summed over pixels and latent dimensions, averaged over the batch.
    #[default]
    PerSample,
    /// Averaged over every pixel and every latent coordinate.
    PerElement,
}

impl Reduction {
    /// Divisors of the squared-error and KL sums for a batch.
    fn divisors(self, batch: usize, pixels: usize, latents: usize) -> (f64, f64) {
        match self {
            Reduction::PerSample => (batch as f64, batch as f64),
            Reduction::PerElement => ((batch * pixels) as f64, (batch * latents) as f64),
        }
    }
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            patch: PATCH_SIDE,
            conv1_channels: 16,
            conv2_channels: 32,
            hidden: 128,
            d_latent: 32,
            beta: 0.5,
            reduction: Reduction::PerSample,
        }
    }
}

impl VaeConfig {
    /// Spatial side after one stride-2 convolution: `⌊(n + 2p − k)/s⌋ + 1`.
    pub fn conv_out(n: usize) -> usize {
        (n + 2 * PAD - KERNEL) / STRIDE + 1
    }

    pub fn grid1(&self) -> usize {
        Self::conv_out(self.patch)
    }

    pub fn grid2(&self) -> usize {
        Self::conv_out(self.grid1())
    }

    /// Length of the flattened second convolution output.
    pub fn flat(&self) -> usize {
        self.grid2() * self.grid2() * self.conv2_channels
    }

    fn output_pad(small: usize, big: usize) -> usize {
        big - ((small - 1) * STRIDE + KERNEL - 2 * PAD)
    }
}

/// Parameter handles of the encoder and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    pub config: VaeConfig,
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    fc: Linear,
    fc_mu: Linear,
    fc_logvar: Linear,
    dec_fc1: Linear,
    dec_fc2: Linear,
    deconv1_w: ParamId,
    deconv1_b: ParamId,
    deconv2_w: ParamId,
    deconv2_b: ParamId,
}

/// Tape handles produced by the encoder.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Feature layer `[B, hidden]` fed to the attention stage.
    pub features: Var,
    pub mu: Var,
    pub logvar: Var,
}

fn conv_init<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[rows, cols], limit, rng)
}

impl Vae {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: VaeConfig, rng: &mut R) -> Self {
        let (c1, c2) = (config.conv1_channels, config.conv2_channels);
        let kk = KERNEL * KERNEL;
        let conv1_w = store.add("vae.conv1.w", conv_init(c1, kk, kk, kk * c1, rng));
        let conv1_b = store.add_zeros("vae.conv1.b", &[1, c1]);
        let conv2_w = store.add("vae.conv2.w", conv_init(c2, kk * c1, kk * c1, kk * c2, rng));
        let conv2_b = store.add_zeros("vae.conv2.b", &[1, c2]);
        let fc = Linear::new(store, "vae.fc", config.flat(), config.hidden, rng);
        let fc_mu = Linear::new(store, "vae.mu", config.hidden, config.d_latent, rng);
        let fc_logvar = Linear::new(store, "vae.logvar", config.hidden, config.d_latent, rng);
        let dec_fc1 = Linear::new(store, "vae.dec.fc1", config.d_latent, config.hidden, rng);
        let dec_fc2 = Linear::new(store, "vae.dec.fc2", config.hidden, config.flat(), rng);
        let deconv1_w = store.add("vae.deconv1.w", conv_init(c2, kk * c1, kk * c2, kk * c1, rng));
        let deconv1_b = store.add_zeros("vae.deconv1.b", &[1, c1]);
        let deconv2_w = store.add("vae.deconv2.w", conv_init(c1, kk, kk * c1, kk, rng));
        let deconv2_b = store.add_zeros("vae.deconv2.b", &[1, 1]);
        Self {
            config,
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            fc,
            fc_mu,
            fc_logvar,
            dec_fc1,
            dec_fc2,
            deconv1_w,
            deconv1_b,
            deconv2_w,
            deconv2_b,
        }
    }

    /// Every parameter owned by the autoencoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b];
        for l in [&self.fc, &self.fc_mu, &self.fc_logvar, &self.dec_fc1, &self.dec_fc2] {
            ids.extend([l.w, l.b]);
        }
        ids.extend([self.deconv1_w, self.deconv1_b, self.deconv2_w, self.deconv2_b]);
        ids
    }

    /// Encoder on a flat batch `[B, patch²]`.
    pub fn encode_tape<T: Scalar>(&self, tape: &mut GradTape<'_, T>, x: Var) -> Result<Encoded> {
        let cfg = self.config;
        let p2 = cfg.patch * cfg.patch;
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != p2 {
            return Err(dim_err("vae.encode", format!("expected [batch, {p2}] patches, got {shape:?}")));
        }
        let batch = shape[0];
        let img = tape.reshape(x, &[batch * p2, 1])?;
        let g1 = ConvGeom::conv(batch, cfg.patch, cfg.patch, KERNEL, STRIDE, PAD);
        let (w1, b1) = (tape.param(self.conv1_w), tape.param(self.conv1_b));
        let h = tape.conv2d(img, w1, g1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let g2 = ConvGeom::conv(batch, g1.grid_h, g1.grid_w, KERNEL, STRIDE, PAD);
        let (w2, b2) = (tape.param(self.conv2_w), tape.param(self.conv2_b));
        let h = tape.conv2d(h, w2, g2)?;
        let h = tape.add_row(h, b2)?;
        let h = tape.relu(h);
        let flat = tape.reshape(h, &[batch, cfg.flat()])?;
        let f = self.fc.forward(tape, flat)?;
        let features = tape.relu(f);
        let mu = self.fc_mu.forward(tape, features)?;
        let logvar = self.fc_logvar.forward(tape, features)?;
        Ok(Encoded { features, mu, logvar })
    }

    /// Decoder from `[B, d_latent]` to a flat `[B, patch²]` reconstruction.
    pub fn decode_tape<T: Scalar>(&self, tape: &mut GradTape<'_, T>, z: Var) -> Result<Var> {
        let cfg = self.config;
        let batch = tape.value(z).rows();
        let h = self.dec_fc1.forward(tape, z)?;
        let h = tape.relu(h);
        let h = self.dec_fc2.forward(tape, h)?;
        let h = tape.relu(h);
        let (g2, g1) = (cfg.grid2(), cfg.grid1());
        let h = tape.reshape(h, &[batch * g2 * g2, cfg.conv2_channels])?;
        let t1 = ConvGeom::transposed(batch, g2, g2, KERNEL, STRIDE, PAD, VaeConfig::output_pad(g2, g1));
        let (w1, b1) = (tape.param(self.deconv1_w), tape.param(self.deconv1_b));
        let h = tape.conv_transpose2d(h, w1, t1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let t2 = ConvGeom::transposed(batch, g1, g1, KERNEL, STRIDE, PAD, VaeConfig::output_pad(g1, cfg.patch));
        let (w2, b2) = (tape.param(self.deconv2_w), tape.param(self.deconv2_b));
        let h = tape.conv_transpose2d(h, w2, t2)?;
        let h = tape.add_row(h, b2)?;
        let h = tape.sigmoid(h);
        tape.reshape(h, &[batch, cfg.patch * cfg.patch])
    }

    /// Inference-only encoder: returns `(features, mu, logvar)` values.
    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        patches: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let mut tape = GradTape::new(store);
        let x = tape.constant(patches.clone());
        let e = self.encode_tape(&mut tape, x)?;
        Ok((tape.value(e.features).clone(), tape.value(e.mu).clone(), tape.value(e.logvar).clone()))
    }

    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = GradTape::new(store);
        let zv = tape.constant(z.clone());
        let out = self.decode_tape(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Records encode → reparameterize (with the given noise) → decode → loss.
    pub fn loss_tape<T: Scalar>(&self, tape: &mut GradTape<'_, T>, x: Var, eps: &Tensor<T>) -> Result<Var> {
        let e = self.encode_tape(tape, x)?;
        let half = tape.scale(e.logvar, sc(0.5));
        let std = tape.exp(half);
        let eps = tape.constant(eps.clone());
        let noise = tape.mul(std, eps)?;
        let z = tape.add(e.mu, noise)?;
        let recon = self.decode_tape(tape, z)?;
        vae_loss_tape(tape, x, recon, e.mu, e.logvar, self.config.beta, self.config.reduction)
    }
}

/// One draw of the reparameterized latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample<T: Scalar> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
    pub eps: Tensor<T>,
    pub z: Tensor<T>,
}

/// `z = mu + exp(½·logvar) ⊙ eps` with the supplied noise.
pub fn reparameterize_with<T: Scalar>(mu: &Tensor<T>, logvar: &Tensor<T>, eps: &Tensor<T>) -> Result<LatentSample<T>> {
    mu.same_shape(logvar, "reparameterize")?;
    mu.same_shape(eps, "reparameterize")?;
    let std = logvar.map(|v| (v * sc(0.5)).exp());
    let z = mu.add(&std.mul(eps)?)?;
    Ok(LatentSample {
        mu: mu.clone(),
        logvar: logvar.clone(),
        eps: eps.clone(),
        z,
    })
}

/// `z = mu + exp(½·logvar) ⊙ eps` with `eps ~ N(0, I)`.
pub fn reparameterize<T: Scalar, R: Rng + ?Sized>(
    mu: &Tensor<T>,
    logvar: &Tensor<T>,
    rng: &mut R,
) -> Result<LatentSample<T>> {
    let eps = Tensor::randn(mu.shape(), 1.0, rng);
    reparameterize_with(mu, logvar, &eps)
}

/// Squared reconstruction error plus `beta` times the KL divergence to the
/// unit Gaussian, both reduced as `reduction` says.
pub fn vae_loss<T: Scalar>(
    patch: &Tensor<T>,
    recon: &Tensor<T>,
    mu: &Tensor<T>,
    logvar: &Tensor<T>,
    beta: f64,
    reduction: Reduction,
) -> Result<T> {
    mu.same_shape(logvar, "vae_loss")?;
    let (d_rec, d_kl) = reduction.divisors(patch.rows(), patch.cols(), mu.cols());
    let sq = recon.sub(patch)?.map(|d| d * d).sum();
    let kl = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| sc::<T>(0.5) * (lv.exp() + m * m - T::one() - lv))
        .sum::<T>();
    Ok(sq / sc(d_rec) + sc::<T>(beta / d_kl) * kl)
}

/// Tape version of [`vae_loss`].
pub fn vae_loss_tape<T: Scalar>(
    tape: &mut GradTape<'_, T>,
    patch: Var,
    recon: Var,
    mu: Var,
    logvar: Var,
    beta: f64,
    reduction: Reduction,
) -> Result<Var> {
    let (p, m) = (tape.value(patch), tape.value(mu));
    let (d_rec, d_kl) = reduction.divisors(p.rows(), p.cols(), m.cols());
    let diff = tape.sub(recon, patch)?;
    let sq = tape.square(diff);
    let sq = tape.sum(sq);
    let rec = tape.scale(sq, sc(1.0 / d_rec));
    let ev = tape.exp(logvar);
    let m2 = tape.square(mu);
    let s = tape.add(ev, m2)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -T::one());
    let kl = tape.sum(s);
    let kl = tape.scale(kl, sc(0.5 * beta / d_kl));
    tape.add(rec, kl)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Size of the fixed pool of random Gabor patches sampled from.
    pub dataset: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            dataset: 10_000,
            lr: 1e-3,
        }
    }
}

/// Random Gabor patches at uniform orientations, flattened `[n, patch²]`,
/// with their orientations in degrees.
pub fn gabor_dataset<T: Scalar, R: Rng + ?Sized>(n: usize, render: &RenderConfig, rng: &mut R) -> (Tensor<T>, Vec<f64>) {
    let mut data = Vec::with_capacity(n * PATCH_SIDE * PATCH_SIDE);
    let mut thetas = Vec::with_capacity(n);
    for _ in 0..n {
        let theta = rng.random::<f64>() * 180.0;
        thetas.push(theta);
        data.extend(gabor_patch(theta, render).into_iter().map(|p| sc::<T>(f64::from(p))));
    }
    (Tensor::new(&[n, PATCH_SIDE * PATCH_SIDE], data).expect("dataset shape"), thetas)
}

/// Per-step pretraining losses.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

/// Trains the autoencoder on random Gabor patches with Adam.
pub fn pretrain<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    vae: &Vae,
    cfg: &PretrainConfig,
    render: &RenderConfig,
    rng: &mut R,
) -> Result<PretrainReport> {
    let (pool, _) = gabor_dataset::<T, _>(cfg.dataset, render, rng);
    let p2 = vae.config.patch * vae.config.patch;
    let ids = vae.param_ids();
    let mut opt = Adam::new(
        store,
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch * p2);
        for _ in 0..cfg.batch {
            let i = rng.random_range(0..cfg.dataset);
            batch.extend_from_slice(pool.row(i));
        }
        let x = Tensor::new(&[cfg.batch, p2], batch)?;
        let eps = Tensor::from_f64(
            &[cfg.batch, vae.config.d_latent],
            &(0..cfg.batch * vae.config.d_latent)
                .map(|_| StandardNormal.sample(rng))
                .collect::<Vec<f64>>(),
        )?;
        let grads = {
            let mut tape = GradTape::new(store);
            let xv = tape.constant(x);
            let loss = vae.loss_tape(&mut tape, xv, &eps)?;
            let l = tape.value(loss).item();
            if !l.is_finite() {
                return Err(crate::Error::NonFinite(format!("VAE loss {l} at step {}", losses.len())));
            }
            losses.push(l.to_f64_lossy());
            tape.backward(loss)?
        };
        opt.step_masked(store, &grads, |id| ids.contains(&id));
    }
    Ok(PretrainReport { losses })
}

/// Mean per-pixel reconstruction error of the posterior mean on `patches`.
pub fn reconstruction_mse<T: Scalar>(store: &ParamStore<T>, vae: &Vae, patches: &Tensor<T>) -> Result<f64> {
    let (_, mu, _) = vae.encode(store, patches)?;
    let recon = vae.decode(store, &mu)?;
    Ok(recon.sub(patches)?.map(|d| d * d).mean().to_f64_lossy())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_trace_matches_floor_arithmetic() {
        let cfg = VaeConfig::default();
        // floor((n + 2p − f)/s) + 1 with p=1, f=3, s=2
        assert_eq!(cfg.grid1(), (25 + 2 - 3) / 2 + 1);
        assert_eq!(cfg.grid1(), 13);
        assert_eq!(cfg.grid2(), 7);
        assert_eq!(cfg.flat(), 1568);
        let mut store = ParamStore::<f32>::new();
        let vae = Vae::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Tensor::full(&[2, 625], 0.5);
        let (f, mu, lv) = vae.encode(&store, &x).unwrap();
        assert_eq!(f.shape(), &[2, 128]);
        assert_eq!(mu.shape(), &[2, 32]);
        assert_eq!(lv.shape(), &[2, 32]);
        assert_eq!(vae.decode(&store, &mu).unwrap().shape(), &[2, 625]);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut store = ParamStore::<f32>::new();
        let vae = Vae::new(&mut store, VaeConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let (f, _, _) = vae.encode(&store, &Tensor::full(&[1, 625], 0.7)).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_patch_shape_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        let vae = Vae::new(&mut store, VaeConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(vae.encode(&store, &Tensor::zeros(&[1, 624])).is_err());
    }

    #[test]
    fn reparameterize_cases() {
        let mu = Tensor::<f64>::from_f64(&[1, 3], &[0.5, -1.0, 2.0]).unwrap();
        let zero = Tensor::zeros(&[1, 3]);
        assert_eq!(reparameterize_with(&mu, &zero, &zero).unwrap().z, mu);
        let e = Tensor::from_f64(&[1, 3], &[0.1, 0.2, -0.3]).unwrap();
        let s = reparameterize_with(&mu, &zero, &e).unwrap();
        assert_eq!(s.z, mu.add(&e).unwrap());
    }

    #[test]
    fn loss_plug_in_values() {
        let p = Tensor::<f64>::full(&[1, 4], 0.3);
        let zero = Tensor::zeros(&[1, 5]);
        for r in [Reduction::PerSample, Reduction::PerElement] {
            assert_eq!(vae_loss(&p, &p, &zero, &zero, 0.5, r).unwrap(), 0.0);
        }
        let ones = Tensor::ones(&[1, 5]);
        // β·½ per latent coordinate.
        let l = vae_loss(&p, &p, &ones, &zero, 0.5, Reduction::PerElement).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
        let l = vae_loss(&p, &p, &ones, &zero, 0.5, Reduction::PerSample).unwrap();
        assert!((l - 5.0 * 0.25).abs() < 1e-12);
        // Squared error 0.04 on each of four pixels.
        let q = Tensor::<f64>::full(&[1, 4], 0.5);
        let l = vae_loss(&p, &q, &zero, &zero, 0.5, Reduction::PerElement).unwrap();
        assert!((l - 0.04).abs() < 1e-12);
        let l = vae_loss(&p, &q, &zero, &zero, 0.5, Reduction::PerSample).unwrap();
        assert!((l - 0.16).abs() < 1e-12);
    }
}
