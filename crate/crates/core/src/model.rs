//! The recurrent vision transformer: frozen patch encoder, embedding,
//! memory-gated attention and the patch LSTM, unrolled over a trial.

use rand::Rng;

use crate::attention::{d_model, embed, maps_from_batch, Attention, AttentionConfig, AttentionMap, FeedbackVariant, ForceSpec};
use crate::environment::{
    cue_patch, gabor_patch, Location, RenderConfig, TrialSpec, N_PATCHES, N_STEPS, PATCH_PIXELS, T_CUE, T_ONSET,
};
use crate::error::{dim_err, Error, Result};
use crate::memory::{LstmParams, MemoryState, MemoryVars};
use crate::params::ParamStore;
use crate::scalar::{sc, Scalar};
use crate::tape::{GradTape, Var};
use crate::tensor::{concat_rows, Tensor};
use crate::vae::Vae;

/// Shape of the recurrent core.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoreConfig {
    pub variant: FeedbackVariant,
    pub d_features: usize,
    pub d_mem: usize,
    pub n_time: usize,
    pub scaled_attention: bool,
}

impl Default for CoreConfig {
    fn default() -> Self {
        Self {
            variant: FeedbackVariant::Multiplicative,
            d_features: 128,
            d_mem: 64,
            n_time: 8,
            scaled_attention: false,
        }
    }
}

impl CoreConfig {
    pub fn d_model(&self) -> usize {
        d_model(self.d_features, self.n_time)
    }
}

/// Attention followed by the patch LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentCore {
    pub config: CoreConfig,
    pub attention: Attention,
    pub lstm: LstmParams,
}

/// Tape handles of an unroll: `h[t]` and `attn[t]` are `[B·4, ·]`.
#[derive(Debug, Clone)]
pub struct Unrolled {
    pub h: Vec<Var>,
    pub attn: Vec<Var>,
}

impl RecurrentCore {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: CoreConfig, rng: &mut R) -> Self {
        let attention = Attention::new(
            store,
            AttentionConfig {
                variant: config.variant,
                d_model: config.d_model(),
                d_mem: config.d_mem,
                scaled: config.scaled_attention,
            },
            rng,
        );
        let lstm = LstmParams::new(store, config.d_model(), config.d_mem, rng);
        Self { config, attention, lstm }
    }

    /// Unrolls over `inputs[t]` (`[B·4, d_model]` each) from the zero state.
    /// `force(t)` lists the attention overrides applied at step `t`.
    pub fn unroll_tape<T: Scalar>(
        &self,
        tape: &mut GradTape<'_, T>,
        inputs: &[Tensor<T>],
        force: &dyn Fn(usize) -> Vec<ForceSpec>,
    ) -> Result<Unrolled> {
        let rows = inputs.first().map(Tensor::rows).unwrap_or(0);
        let mut state = MemoryVars::constant(tape, &MemoryState::reset_rows(rows, self.config.d_mem));
        let mut out = Unrolled {
            h: Vec::with_capacity(inputs.len()),
            attn: Vec::with_capacity(inputs.len()),
        };
        for (t, x) in inputs.iter().enumerate() {
            if x.rows() != rows {
                return Err(dim_err("unroll", format!("step {t} has {} rows, expected {rows}", x.rows())));
            }
            let xv = tape.constant(x.clone());
            let (z, a) = self.attention.attend_tape(tape, xv, state.h, &force(t))?;
            state = self.lstm.step_tape(tape, z, state)?;
            out.h.push(state.h);
            out.attn.push(a);
        }
        Ok(out)
    }

    /// Forward-only unroll; fails if any memory output is not finite.
    pub fn run<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        inputs: &[Tensor<T>],
        force: &dyn Fn(usize) -> Vec<ForceSpec>,
    ) -> Result<CoreTrace<T>> {
        let mut tape = GradTape::new(store);
        let un = self.unroll_tape(&mut tape, inputs, force)?;
        let trace = CoreTrace {
            h: un.h.iter().map(|&h| tape.value(h).clone()).collect(),
            attn: un.attn.iter().map(|&a| tape.value(a).clone()).collect(),
        };
        for h in &trace.h {
            check_finite_rows(h)?;
        }
        Ok(trace)
    }
}

fn check_finite_rows<T: Scalar>(h: &Tensor<T>) -> Result<()> {
    for slot in 0..h.rows() {
        if let Some(v) = h.row(slot).iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                block: "lstm".into(),
                slot: slot % N_PATCHES,
                detail: format!("H = {v} in batch row {slot}"),
            });
        }
    }
    Ok(())
}

/// Values of a forward-only unroll.
#[derive(Debug, Clone)]
pub struct CoreTrace<T: Scalar> {
    pub h: Vec<Tensor<T>>,
    pub attn: Vec<Tensor<T>>,
}

impl<T: Scalar> CoreTrace<T> {
    /// Attention maps of trial `b` at each step.
    pub fn maps(&self, b: usize) -> Result<Vec<AttentionMap>> {
        self.attn
            .iter()
            .map(|a| maps_from_batch(a).map(|mut v| v.swap_remove(b)))
            .collect()
    }
}

/// Frozen VAE encoder turning trials into per-step patch features.
#[derive(Debug, Clone)]
pub struct PatchEncoder<T: Scalar> {
    pub store: ParamStore<T>,
    pub vae: Vae,
    pub render: RenderConfig,
    black: Tensor<T>,
}

impl<T: Scalar> PatchEncoder<T> {
    pub fn new(store: ParamStore<T>, vae: Vae, render: RenderConfig) -> Result<Self> {
        let (black, _, _) = vae.encode(&store, &Tensor::zeros(&[1, PATCH_PIXELS]))?;
        Ok(Self {
            store,
            vae,
            render,
            black,
        })
    }

    pub fn d_features(&self) -> usize {
        self.vae.config.hidden
    }

    /// Features `[4, d_features]` for each of the seven frames.
    pub fn encode_trial(&self, spec: &TrialSpec) -> Result<Vec<Tensor<T>>> {
        let d = self.d_features();
        let mut pixels = Vec::with_capacity((1 + 4 * (N_STEPS - T_ONSET)) * PATCH_PIXELS);
        pixels.extend(cue_patch(spec.cue_validity, &self.render).into_iter().map(|p| sc::<T>(f64::from(p))));
        for t in T_ONSET..N_STEPS {
            for loc in Location::ALL {
                pixels.extend(
                    gabor_patch(spec.orientation(loc.index(), t), &self.render)
                        .into_iter()
                        .map(|p| sc::<T>(f64::from(p))),
                );
            }
        }
        let n = pixels.len() / PATCH_PIXELS;
        let (feats, _, _) = self.vae.encode(&self.store, &Tensor::new(&[n, PATCH_PIXELS], pixels)?)?;
        let black_frame = concat_rows(&[&self.black, &self.black, &self.black, &self.black])?;
        let mut out = Vec::with_capacity(N_STEPS);
        for t in 0..N_STEPS {
            let frame = if t == T_CUE {
                let mut f = black_frame.clone();
                f.row_mut(spec.cue_position.index()).copy_from_slice(feats.row(0));
                f
            } else if t >= T_ONSET {
                let start = 1 + (t - T_ONSET) * N_PATCHES;
                let mut f = Tensor::zeros(&[N_PATCHES, d]);
                for i in 0..N_PATCHES {
                    f.row_mut(i).copy_from_slice(feats.row(start + i));
                }
                f
            } else {
                black_frame.clone()
            };
            out.push(frame);
        }
        Ok(out)
    }
}

/// Embeds per-step features of several trials into batched inputs
/// `[B·4, d_model]`, one tensor per step.
pub fn batch_inputs<T: Scalar>(trials: &[&[Tensor<T>]], n_time: usize) -> Result<Vec<Tensor<T>>> {
    let steps = trials.first().map(|t| t.len()).unwrap_or(N_STEPS);
    (0..steps)
        .map(|t| {
            let embedded: Vec<Tensor<T>> = trials.iter().map(|f| embed(&f[t], t, n_time)).collect::<Result<_>>()?;
            concat_rows(&embedded.iter().collect::<Vec<_>>())
        })
        .collect()
}
