//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! A [`GradTape`] is built fresh for every forward pass (one trial or one
//! minibatch unroll). Nodes are appended in evaluation order, so walking the
//! node list backwards is a reverse topological order and each node is
//! visited exactly once.

use crate::error::{dim_err, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::{sc, Scalar};
use crate::tensor::{
    self, concat_cols, concat_rows, gemm_into, layer_norm_rows, log_softmax_rows, matmul_ex,
    slice_cols, slice_rows, softmax_rows, LayerNormCache, Tensor,
};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over NHWC row layout
/// (`[batch·height·width, channels]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    /// Spatial size of the larger (image) side.
    pub img_h: usize,
    pub img_w: usize,
    /// Spatial size of the patch grid (output of a forward convolution).
    pub grid_h: usize,
    pub grid_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Geometry of a strided convolution mapping `img_h × img_w` to its output grid.
    pub fn conv(batch: usize, img_h: usize, img_w: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let grid_h = (img_h + 2 * pad - kernel) / stride + 1;
        let grid_w = (img_w + 2 * pad - kernel) / stride + 1;
        Self {
            batch,
            img_h,
            img_w,
            grid_h,
            grid_w,
            kernel,
            stride,
            pad,
        }
    }

    /// Geometry of a transposed convolution from a `grid_h × grid_w` input.
    pub fn transposed(
        batch: usize,
        grid_h: usize,
        grid_w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Self {
        let img_h = (grid_h - 1) * stride + kernel + output_pad - 2 * pad;
        let img_w = (grid_w - 1) * stride + kernel + output_pad - 2 * pad;
        Self {
            batch,
            img_h,
            img_w,
            grid_h,
            grid_w,
            kernel,
            stride,
            pad,
        }
    }

    fn grid_rows(&self) -> usize {
        self.batch * self.grid_h * self.grid_w
    }

    fn img_rows(&self) -> usize {
        self.batch * self.img_h * self.img_w
    }
}

/// Unfolds image patches: `[batch·img_h·img_w, c]` → `[batch·grid_h·grid_w, k·k·c]`.
pub fn im2col<T: Scalar>(img: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let c = img.cols();
    let k = g.kernel;
    let width = k * k * c;
    let mut out = Tensor::zeros(&[g.grid_rows(), width]);
    let data = out.data_mut();
    for b in 0..g.batch {
        for gy in 0..g.grid_h {
            for gx in 0..g.grid_w {
                let row = ((b * g.grid_h + gy) * g.grid_w + gx) * width;
                for ky in 0..k {
                    let iy = (gy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.img_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (gx * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.img_w as isize {
                            continue;
                        }
                        let src = ((b * g.img_h + iy as usize) * g.img_w + ix as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        data[dst..dst + c].copy_from_slice(&img.data()[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto the image.
pub fn col2im<T: Scalar>(cols: &Tensor<T>, g: &ConvGeom, c: usize) -> Tensor<T> {
    let k = g.kernel;
    let width = k * k * c;
    let mut out = Tensor::zeros(&[g.img_rows(), c]);
    let data = out.data_mut();
    for b in 0..g.batch {
        for gy in 0..g.grid_h {
            for gx in 0..g.grid_w {
                let row = ((b * g.grid_h + gy) * g.grid_w + gx) * width;
                for ky in 0..k {
                    let iy = (gy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.img_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (gx * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.img_w as isize {
                            continue;
                        }
                        let dst = ((b * g.img_h + iy as usize) * g.img_w + ix as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for ch in 0..c {
                            data[dst + ch] += cols.data()[src + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Elu(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Maximum(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, cache: LayerNormCache<T> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    SumRows(Var),
    GroupedScores { q: Var, k: Var, gq: usize, gk: usize },
    GroupedMix { a: Var, v: Var, gq: usize, gk: usize },
    Conv { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose { x: Var, w: Var, geom: ConvGeom },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Option<Tensor<T>>,
    op: Op<T>,
}

/// Recorded computation graph with per-node saved activations.
pub struct GradTape<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'s, T: Scalar> GradTape<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("every non-parameter node stores its value"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input. No gradient is reported for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = matmul_ex(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b)))
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.row_broadcast(x, bias, "add_row", |a, b| a + b)?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// `x ⊙ gain` with `gain` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let out = self.row_broadcast(x, gain, "mul_row", |a, b| a * b)?;
        Ok(self.push(out, Op::MulRow(x, gain)))
    }

    fn row_broadcast(&self, x: Var, r: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (xv, rv) = (self.value(x), self.value(r));
        if rv.len() != xv.cols() {
            return Err(dim_err(
                op,
                format!("row vector of {} against {} columns", rv.len(), xv.cols()),
            ));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(*v, rv.data()[i % c]);
        }
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).scale(k);
        self.push(out, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v + k);
        self.push(out, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.ln());
        self.push(out, Op::Log(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::elu);
        self.push(out, Op::Elu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::relu);
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "maximum", |x, y| if x >= y { x } else { y })?;
        Ok(self.push(out, Op::Maximum(a, b)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let out = log_softmax_rows(self.value(x));
        self.push(out, Op::LogSoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, cache) = layer_norm_rows(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, cache }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concat_cols(&vals)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = slice_cols(self.value(x), start, end)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = slice_rows(self.value(x), start, end)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, sc::<T>(1.0 / n as f64))
    }

    /// Per-row sum: `[rows, cols]` → `[rows, 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|i| xv.row(i).iter().copied().sum()).collect();
        let out = Tensor::new(&[xv.rows(), 1], data).expect("row sums");
        self.push(out, Op::SumRows(x))
    }

    /// Blockwise query-key scores. `q` holds `gq` rows per group and `k`
    /// holds `gk` rows per group; row `g·gq + i` of the result holds
    /// `⟨q_{g,i}, k_{g,j}⟩` for `j < gk`.
    pub fn grouped_scores(&mut self, q: Var, k: Var, gq: usize, gk: usize) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        let d = qv.cols();
        if kv.cols() != d || qv.rows() % gq != 0 || kv.rows() % gk != 0 || qv.rows() / gq != kv.rows() / gk {
            return Err(dim_err(
                "grouped_scores",
                format!("q {:?} (groups of {gq}) vs k {:?} (groups of {gk})", qv.shape(), kv.shape()),
            ));
        }
        let groups = qv.rows() / gq;
        let mut out = Tensor::zeros(&[groups * gq, gk]);
        for g in 0..groups {
            for i in 0..gq {
                let qr = qv.row(g * gq + i);
                for j in 0..gk {
                    let kr = kv.row(g * gk + j);
                    let dot = qr.iter().zip(kr).map(|(&a, &b)| a * b).sum();
                    out.set(g * gq + i, j, dot);
                }
            }
        }
        Ok(self.push(out, Op::GroupedScores { q, k, gq, gk }))
    }

    /// Blockwise mixing: row `g·gq + i` of the result is `Σ_j a[g·gq+i, j] · v_{g,j}`.
    pub fn grouped_mix(&mut self, a: Var, v: Var, gq: usize, gk: usize) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        if av.cols() != gk || av.rows() % gq != 0 || vv.rows() % gk != 0 || av.rows() / gq != vv.rows() / gk {
            return Err(dim_err(
                "grouped_mix",
                format!("weights {:?} (groups of {gq}) vs values {:?} (groups of {gk})", av.shape(), vv.shape()),
            ));
        }
        let groups = av.rows() / gq;
        let d = vv.cols();
        let mut out = Tensor::zeros(&[groups * gq, d]);
        for g in 0..groups {
            for i in 0..gq {
                let w = av.row(g * gq + i).to_vec();
                let dst = out.row_mut(g * gq + i);
                for (j, &wj) in w.iter().enumerate() {
                    let src = vv.row(g * gk + j);
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o += wj * s;
                    }
                }
            }
        }
        Ok(self.push(out, Op::GroupedMix { a, v, gq, gk }))
    }

    /// Strided convolution. `x` is `[batch·img_h·img_w, c_in]`, `w` is
    /// `[c_out, k·k·c_in]`; the result is `[batch·grid_h·grid_w, c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let k2c = geom.kernel * geom.kernel * xv.cols();
        if xv.rows() != geom.img_rows() || wv.cols() != k2c {
            return Err(dim_err(
                "conv2d",
                format!("input {:?}, weights {:?}, geometry {geom:?}", xv.shape(), wv.shape()),
            ));
        }
        let cols = im2col(xv, &geom);
        let out = matmul_ex(&cols, false, wv, true)?;
        Ok(self.push(out, Op::Conv { x, w, geom }))
    }

    /// Transposed convolution. `x` is `[batch·grid_h·grid_w, c_in]`, `w` is
    /// `[c_in, k·k·c_out]`; the result is `[batch·img_h·img_w, c_out]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let kk = geom.kernel * geom.kernel;
        if xv.rows() != geom.grid_rows() || wv.rows() != xv.cols() || wv.cols() % kk != 0 {
            return Err(dim_err(
                "conv_transpose2d",
                format!("input {:?}, weights {:?}, geometry {geom:?}", xv.shape(), wv.shape()),
            ));
        }
        let c_out = wv.cols() / kk;
        let cols = matmul_ex(xv, false, wv, false)?;
        let out = col2im(&cols, &geom, c_out);
        Ok(self.push(out, Op::ConvTranspose { x, w, geom }))
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let seed = Tensor::ones(self.value(loss).shape());
        self.backward_with(loss, seed)
    }

    /// Vector-Jacobian product seeded with `seed` at node `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.value(out).same_shape(&seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        let mut params = Gradients::empty(self.store.len());
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.accumulate(*id, &g),
                op => self.propagate(idx, op, &g, &mut grads)?,
            }
        }
        Ok(params)
    }

    fn propagate(&self, idx: usize, op: &Op<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = self.nodes[idx].value.as_ref().expect("value");
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // y = op(a)·op(b)
                let ga = if *ta {
                    matmul_ex(bv, *tb, g, true)?
                } else {
                    matmul_ex(g, false, bv, !*tb)?
                };
                let gb = if *tb {
                    matmul_ex(g, true, av, *ta)?
                } else {
                    matmul_ex(av, !*ta, g, false)?
                };
                acc(grads, *a, ga.reshape(av.shape())?);
                acc(grads, *b, gb.reshape(bv.shape())?);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.mul(self.value(*b))?);
                acc(grads, *b, g.mul(self.value(*a))?);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                acc(grads, *a, g.zip_map(bv, "div", |gi, bi| gi / bi)?);
                let gb = g.zip_map(y, "div", |gi, yi| gi * yi)?.zip_map(bv, "div", |t, bi| -t / bi)?;
                acc(grads, *b, gb);
            }
            Op::AddRow(x, bias) => {
                acc(grads, *x, g.clone());
                let bv = self.value(*bias);
                acc(grads, *bias, column_sums(g).reshape(bv.shape())?);
            }
            Op::MulRow(x, gain) => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let c = xv.cols();
                let gx = Tensor::new(
                    xv.shape(),
                    g.data().iter().enumerate().map(|(i, &gi)| gi * gv.data()[i % c]).collect(),
                )?;
                acc(grads, *x, gx);
                let prod = g.mul(xv)?;
                acc(grads, *gain, column_sums(&prod).reshape(gv.shape())?);
            }
            Op::Scale(x, k) => acc(grads, *x, g.scale(*k)),
            Op::AddScalar(x) => acc(grads, *x, g.clone()),
            Op::Exp(x) => acc(grads, *x, g.mul(y)?),
            Op::Log(x) => acc(grads, *x, g.zip_map(self.value(*x), "log", |gi, xi| gi / xi)?),
            Op::Elu(x) => {
                let gx = g.zip_map(y, "elu", |gi, yi| {
                    if yi >= T::zero() {
                        gi
                    } else {
                        gi * (yi + T::one())
                    }
                })?;
                acc(grads, *x, gx)
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), "relu", |gi, xi| if xi > T::zero() { gi } else { T::zero() })?;
                acc(grads, *x, gx)
            }
            Op::Sigmoid(x) => acc(grads, *x, g.zip_map(y, "sigmoid", |gi, yi| gi * yi * (T::one() - yi))?),
            Op::Tanh(x) => acc(grads, *x, g.zip_map(y, "tanh", |gi, yi| gi * (T::one() - yi * yi))?),
            Op::Square(x) => {
                let two = sc::<T>(2.0);
                acc(grads, *x, g.zip_map(self.value(*x), "square", |gi, xi| two * gi * xi)?)
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                for i in 0..g.len() {
                    if av.data()[i] >= bv.data()[i] {
                        gb.data_mut()[i] = T::zero();
                    } else {
                        ga.data_mut()[i] = T::zero();
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::SoftmaxRows(x) => {
                let mut gx = g.clone();
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (j, v) in gx.row_mut(i).iter_mut().enumerate() {
                        *v = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, gx)
            }
            Op::LogSoftmaxRows(x) => {
                let mut gx = g.clone();
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let total: T = gr.iter().copied().sum();
                    for (j, v) in gx.row_mut(i).iter_mut().enumerate() {
                        *v = gr[j] - yr[j].exp() * total;
                    }
                }
                acc(grads, *x, gx)
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let gv = self.value(*gain);
                let c = y.cols();
                let n = sc::<T>(c as f64);
                let mut gx = Tensor::zeros(y.shape());
                let mut g_gain = vec![T::zero(); c];
                let mut g_bias = vec![T::zero(); c];
                for i in 0..y.rows() {
                    let xh = cache.xhat.row(i);
                    let gr = g.row(i);
                    let mut dxh = vec![T::zero(); c];
                    for j in 0..c {
                        g_gain[j] += gr[j] * xh[j];
                        g_bias[j] += gr[j];
                        dxh[j] = gr[j] * gv.data()[j];
                    }
                    let mean_d: T = dxh.iter().copied().sum::<T>() / n;
                    let mean_dx: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
                    let is = cache.inv_std[i];
                    for (j, v) in gx.row_mut(i).iter_mut().enumerate() {
                        *v = is * (dxh[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gain, Tensor::new(gv.shape(), g_gain)?);
                acc(grads, *bias, Tensor::new(self.value(*bias).shape(), g_bias)?);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let piece = slice_cols(g, start, start + w)?.reshape(self.value(p).shape())?;
                    acc(grads, p, piece);
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let piece = slice_rows(g, start, start + r)?.reshape(self.value(p).shape())?;
                    acc(grads, p, piece);
                    start += r;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                let w = g.cols();
                for i in 0..g.rows() {
                    gx.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                acc(grads, *x, gx)
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                let c = xv.cols();
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(grads, *x, gx)
            }
            Op::Reshape(x) => acc(grads, *x, g.clone().reshape(self.value(*x).shape())?),
            Op::Sum(x) => acc(grads, *x, Tensor::full(self.value(*x).shape(), g.item())),
            Op::SumRows(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let gx = Tensor::new(
                    xv.shape(),
                    (0..xv.len()).map(|i| g.data()[i / c]).collect(),
                )?;
                acc(grads, *x, gx)
            }
            Op::GroupedScores { q, k, gq, gk } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let groups = qv.rows() / gq;
                let mut gqt = Tensor::zeros(qv.shape());
                let mut gkt = Tensor::zeros(kv.shape());
                for grp in 0..groups {
                    for i in 0..*gq {
                        let qi = grp * gq + i;
                        for j in 0..*gk {
                            let kj = grp * gk + j;
                            let s = g.at(qi, j);
                            if s == T::zero() {
                                continue;
                            }
                            for (o, &kval) in gqt.row_mut(qi).iter_mut().zip(kv.row(kj)) {
                                *o += s * kval;
                            }
                            for (o, &qval) in gkt.row_mut(kj).iter_mut().zip(qv.row(qi)) {
                                *o += s * qval;
                            }
                        }
                    }
                }
                acc(grads, *q, gqt);
                acc(grads, *k, gkt);
            }
            Op::GroupedMix { a, v, gq, gk } => {
                let (av, vv) = (self.value(*a), self.value(*v));
                let groups = av.rows() / gq;
                let mut ga = Tensor::zeros(av.shape());
                let mut gvt = Tensor::zeros(vv.shape());
                for grp in 0..groups {
                    for i in 0..*gq {
                        let ai = grp * gq + i;
                        let gr = g.row(ai);
                        for j in 0..*gk {
                            let vj = grp * gk + j;
                            let dot: T = gr.iter().zip(vv.row(vj)).map(|(&x, &y)| x * y).sum();
                            ga.set(ai, j, dot);
                            let w = av.at(ai, j);
                            for (o, &x) in gvt.row_mut(vj).iter_mut().zip(gr) {
                                *o += w * x;
                            }
                        }
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *v, gvt);
            }
            Op::Conv { x, w, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let cols = im2col(xv, geom);
                let gcols = matmul_ex(g, false, wv, false)?;
                acc(grads, *x, col2im(&gcols, geom, xv.cols()));
                acc(grads, *w, matmul_ex(g, true, &cols, false)?);
            }
            Op::ConvTranspose { x, w, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let gcols = im2col(g, geom);
                acc(grads, *x, matmul_ex(&gcols, false, wv, true)?);
                acc(grads, *w, matmul_ex(xv, true, &gcols, false)?);
            }
        }
        Ok(())
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let ones = Tensor::ones(&[1, g.rows()]);
    let mut out = Tensor::zeros(&[1, g.cols()]);
    gemm_into(&ones, false, g, false, T::one(), T::zero(), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for (name, shape) in shapes {
            s.add(*name, Tensor::randn(shape, 0.7, &mut rng));
        }
        s
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let store = store_with(&[("a", &[2, 2]), ("b", &[2, 2])], 1);
        let mut tape = GradTape::new(&store);
        let a = tape.param(ParamId(0));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert!(g.get(ParamId(1)).is_none());
        assert_eq!(g.get_or_zeros(ParamId(1), store.get(ParamId(1))), Tensor::zeros(&[2, 2]));
        assert_eq!(g.get(ParamId(0)).unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn reused_parameter_accumulates() {
        let store = store_with(&[("a", &[3])], 2);
        let mut tape = GradTape::new(&store);
        let a = tape.param(ParamId(0));
        let a2 = tape.param(ParamId(0));
        assert_eq!(a, a2);
        let p = tape.mul(a, a2).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        let want = store.get(ParamId(0)).scale(2.0);
        assert_eq!(g.get(ParamId(0)).unwrap(), &want);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let store = store_with(&[("x", &[3, 5]), ("y", &[3, 5]), ("g", &[5]), ("b", &[5])], 3);
        let err = grad_check_tape(&store, 1e-6, |tape| {
            let x = tape.param(ParamId(0));
            let y = tape.param(ParamId(1));
            let gain = tape.param(ParamId(2));
            let bias = tape.param(ParamId(3));
            let e = tape.elu(x);
            let s = tape.sigmoid(y);
            let t = tape.tanh(x);
            let m = tape.mul(e, s)?;
            let d = tape.add_scalar(s, 1.5);
            let q = tape.div(t, d)?;
            let sum = tape.add(m, q)?;
            let ln = tape.layer_norm(sum, gain, bias)?;
            let sm = tape.softmax_rows(ln);
            let ls = tape.log_softmax_rows(y);
            let w = tape.mul(sm, ls)?;
            let ex = tape.exp(t);
            let lg = tape.log(ex);
            let sq = tape.square(lg);
            let mx = tape.maximum(w, sq)?;
            let r = tape.sum_rows(mx);
            let sc = tape.scale(r, 0.3);
            Ok(tape.sum(sc))
        })
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let store = store_with(
            &[("a", &[4, 3]), ("b", &[3, 2]), ("c", &[4, 2]), ("bias", &[2]), ("gain", &[5])],
            4,
        );
        let err = grad_check_tape(&store, 1e-6, |tape| {
            let a = tape.param(ParamId(0));
            let b = tape.param(ParamId(1));
            let c = tape.param(ParamId(2));
            let bias = tape.param(ParamId(3));
            let gain = tape.param(ParamId(4));
            let ab = tape.matmul(a, b)?; // 4x2
            let abb = tape.add_row(ab, bias)?;
            let ct = tape.matmul_ex(c, true, a, false)?; // 2x3
            let back = tape.matmul_ex(a, false, ct, true)?; // 4x2
            let both = tape.concat_cols(&[abb, back, c])?; // 4x6
            let mid = tape.slice_cols(both, 1, 6)?; // 4x5
            let scaled = tape.mul_row(mid, gain)?;
            let stacked = tape.concat_rows(&[scaled, mid])?; // 8x5
            let part = tape.slice_rows(stacked, 2, 7)?;
            let flat = tape.reshape(part, &[25])?;
            let sq = tape.square(flat);
            let m = tape.mean(sq);
            let diff = tape.sub(m, m)?;
            Ok(tape.add(m, diff)?)
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn grouped_attention_ops_match_finite_differences() {
        let store = store_with(&[("q", &[8, 3]), ("k", &[16, 3]), ("v", &[16, 2])], 5);
        let err = grad_check_tape(&store, 1e-6, |tape| {
            let q = tape.param(ParamId(0));
            let k = tape.param(ParamId(1));
            let v = tape.param(ParamId(2));
            let s = tape.grouped_scores(q, k, 4, 8)?;
            let a = tape.softmax_rows(s);
            let z = tape.grouped_mix(a, v, 4, 8)?;
            let sq = tape.square(z);
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn convolutions_match_finite_differences() {
        // 2 images of 5x5x2 -> 3x3x3 -> back to 5x5x2
        let store = store_with(&[("x", &[50, 2]), ("w", &[3, 18]), ("wt", &[3, 18])], 6);
        let err = grad_check_tape(&store, 1e-6, |tape| {
            let x = tape.param(ParamId(0));
            let w = tape.param(ParamId(1));
            let wt = tape.param(ParamId(2));
            let g = ConvGeom::conv(2, 5, 5, 3, 2, 1);
            assert_eq!((g.grid_h, g.grid_w), (3, 3));
            let y = tape.conv2d(x, w, g)?;
            let t = tape.tanh(y);
            let gt = ConvGeom::transposed(2, 3, 3, 3, 2, 1, 0);
            assert_eq!((gt.img_h, gt.img_w), (5, 5));
            let back = tape.conv_transpose2d(t, wt, gt)?;
            let sq = tape.square(back);
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = ConvGeom::conv(2, 7, 6, 3, 2, 1);
        let img = Tensor::<f64>::randn(&[2 * 7 * 6, 3], 1.0, &mut rng);
        let cols = Tensor::<f64>::randn(&[2 * g.grid_h * g.grid_w, 27], 1.0, &mut rng);
        let lhs: f64 = im2col(&img, &g).mul(&cols).unwrap().sum();
        let rhs: f64 = img.mul(&col2im(&cols, &g, 3)).unwrap().sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
