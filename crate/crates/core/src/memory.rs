//! Patch-based exponential-gated LSTM: one memory slot per stimulus patch,
//! weights shared across slots, no cross-slot terms.

use rand::Rng;

use crate::environment::N_PATCHES;
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{sc, Scalar};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Recurrent state of the memory slots (`[rows, d_mem]` each).
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<T: Scalar> {
    pub c: Tensor<T>,
    pub h: Tensor<T>,
    /// Log-domain stabilizer.
    pub m: Tensor<T>,
    /// Normalizer.
    pub n: Tensor<T>,
}

impl<T: Scalar> MemoryState<T> {
    /// All-zero state for one trial (four slots).
    pub fn reset(d_mem: usize) -> Self {
        Self::reset_rows(N_PATCHES, d_mem)
    }

    /// All-zero state for `rows` slots (e.g. a batch of trials).
    pub fn reset_rows(rows: usize, d_mem: usize) -> Self {
        let z = Tensor::zeros(&[rows, d_mem]);
        Self {
            c: z.clone(),
            h: z.clone(),
            m: z.clone(),
            n: z,
        }
    }
}

/// Tape handles of a [`MemoryState`].
#[derive(Debug, Clone, Copy)]
pub struct MemoryVars {
    pub c: Var,
    pub h: Var,
    pub m: Var,
    pub n: Var,
}

impl MemoryVars {
    pub fn constant<T: Scalar>(tape: &mut GradTape<'_, T>, s: &MemoryState<T>) -> Self {
        Self {
            c: tape.constant(s.c.clone()),
            h: tape.constant(s.h.clone()),
            m: tape.constant(s.m.clone()),
            n: tape.constant(s.n.clone()),
        }
    }

    pub fn values<T: Scalar>(&self, tape: &GradTape<'_, T>) -> MemoryState<T> {
        MemoryState {
            c: tape.value(self.c).clone(),
            h: tape.value(self.h).clone(),
            m: tape.value(self.m).clone(),
            n: tape.value(self.n).clone(),
        }
    }
}

/// Input projections `W_*: d_model × d_mem` and recurrent projections
/// `R_*: d_mem × d_mem` for the input, forget, output and update gates.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub d_model: usize,
    pub d_mem: usize,
    pub w: [ParamId; 4],
    pub r: [ParamId; 4],
}

const GATES: [&str; 4] = ["i", "f", "o", "u"];

/// Lower bound applied to the normalizer in the `C/N` division.
pub const N_FLOOR: f64 = 1e-12;

impl LstmParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, d_model: usize, d_mem: usize, rng: &mut R) -> Self {
        let w = GATES.map(|g| store.add_glorot(format!("lstm.w_{g}"), d_model, d_mem, rng));
        let r = GATES.map(|g| store.add_glorot(format!("lstm.r_{g}"), d_mem, d_mem, rng));
        Self { d_model, d_mem, w, r }
    }

    /// One update on the tape. Rows are independent slots.
    pub fn step_tape<T: Scalar>(&self, tape: &mut GradTape<'_, T>, z: Var, s: MemoryVars) -> Result<MemoryVars> {
        let (zs, hs) = (tape.value(z).shape().to_vec(), tape.value(s.h).shape().to_vec());
        if zs.len() != 2 || zs[1] != self.d_model || hs != [zs[0], self.d_mem] {
            return Err(dim_err(
                "lstm_step",
                format!("Z {zs:?}, H {hs:?} for d_model {} d_mem {}", self.d_model, self.d_mem),
            ));
        }
        let mut pre = Vec::with_capacity(4);
        for g in 0..4 {
            let w = tape.param(self.w[g]);
            let r = tape.param(self.r[g]);
            let zw = tape.matmul(z, w)?;
            let hr = tape.matmul(s.h, r)?;
            pre.push(tape.add(zw, hr)?);
        }
        let (i_t, f_t, o_t, u_t) = (pre[0], pre[1], pre[2], pre[3]);
        let f_m = tape.add(f_t, s.m)?;
        let m = tape.maximum(f_m, i_t)?;
        let i_arg = tape.sub(i_t, m)?;
        let i = tape.exp(i_arg);
        let f_arg = tape.sub(f_m, m)?;
        let f = tape.exp(f_arg);
        let o = tape.sigmoid(o_t);
        let u = tape.tanh(u_t);
        let fn_ = tape.mul(f, s.n)?;
        let n = tape.add(fn_, i)?;
        let fc = tape.mul(s.c, f)?;
        let ui = tape.mul(u, i)?;
        let c = tape.add(fc, ui)?;
        // N is zero only if the first input gate underflows; the floor then
        // gives H = 0 instead of 0/0 and leaves every other case untouched.
        let floor = tape.constant(Tensor::full(tape.value(n).shape(), sc(N_FLOOR)));
        let n_safe = tape.maximum(n, floor)?;
        let ratio = tape.div(c, n_safe)?;
        let h = tape.mul(o, ratio)?;
        Ok(MemoryVars { c, h, m, n })
    }

    /// One update on plain tensors, with a finiteness check per slot.
    pub fn step<T: Scalar>(&self, store: &ParamStore<T>, z: &Tensor<T>, state: &MemoryState<T>) -> Result<MemoryState<T>> {
        let mut tape = GradTape::new(store);
        let zv = tape.constant(z.clone());
        let sv = MemoryVars::constant(&mut tape, state);
        let out = self.step_tape(&mut tape, zv, sv)?.values(&tape);
        check_state(&out)?;
        Ok(out)
    }
}

/// Reports the first slot whose state is not finite.
pub fn check_state<T: Scalar>(s: &MemoryState<T>) -> Result<()> {
    for (name, t) in [("C", &s.c), ("H", &s.h), ("M", &s.m), ("N", &s.n)] {
        for slot in 0..t.rows() {
            if let Some(v) = t.row(slot).iter().find(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    block: "lstm".into(),
                    slot,
                    detail: format!("{name} = {v}"),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_and_state_give_zero_output() {
        let mut store = ParamStore::<f32>::new();
        let p = LstmParams::new(&mut store, 5, 3, &mut ChaCha8Rng::seed_from_u64(0));
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let z = Tensor::ones(&[4, 5]);
        let s = p.step(&store, &z, &MemoryState::reset(3)).unwrap();
        assert!(s.h.data().iter().all(|&v| v == 0.0));
        assert!(s.n.data().iter().all(|&v| v == 1.0));
        assert!(s.m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resets_are_identical_across_slots() {
        let s = MemoryState::<f32>::reset(6);
        assert_eq!(s, MemoryState::reset(6));
        for i in 1..4 {
            assert_eq!(s.h.row(0), s.h.row(i));
        }
    }
}
