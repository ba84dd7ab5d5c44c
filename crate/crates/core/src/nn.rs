//! Parameterized layers shared by the model blocks.

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Affine map `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_glorot(format!("{name}.w"), d_in, d_out, rng);
        let b = store.add_zeros(format!("{name}.b"), &[1, d_out]);
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut GradTape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::ones(&[1, d]));
        let bias = store.add_zeros(format!("{name}.bias"), &[1, d]);
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut GradTape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Stack of affine layers with ELU between them and an optional layer
/// norm before each activation. The last layer is left linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        layer_norm: bool,
        rng: &mut R,
    ) -> Self {
        let layers: Vec<Linear> = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        let norms = if layer_norm {
            widths[1..widths.len() - 1]
                .iter()
                .enumerate()
                .map(|(i, &d)| LayerNorm::new(store, &format!("{name}.ln{i}"), d))
                .collect()
        } else {
            Vec::new()
        };
        Self { layers, norms }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    /// Returns the output and the post-activation of every hidden layer.
    pub fn forward_with_hidden<T: Scalar>(&self, tape: &mut GradTape<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut hidden = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                if let Some(ln) = self.norms.get(i) {
                    h = ln.forward(tape, h)?;
                }
                h = tape.elu(h);
                hidden.push(h);
            }
        }
        Ok((h, hidden))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut GradTape<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_hidden(tape, x)?.0)
    }
}
