//! Multi-range spectral graph convolution with context attention.
//!
//! One single-range convolution applies the operator
//! `M_k = Ψ_k diag(θ_k) Ψ_k^{-1} (+ α L1 L2)` to a node signal and then a
//! feature map: `g_k(X) = M_k X W_k + B_k`. An AGC layer mixes the `K`
//! convolutions with weights `π` (context attention or fixed learnable
//! logits, both through a softmax) and applies a ReLU.
//!
//! The parameter types here are borrowed views so the same code runs on
//! standalone arrays and on slices of a model's flat parameter buffer.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::wavelet::WaveletBasis;

#[derive(Debug, Clone, Copy)]
pub struct SingleRangeKernel<'a> {
    /// Diagonal of `Θ_k`, length `N`.
    pub theta: ArrayView1<'a, f64>,
    /// `C_in × C_out`.
    pub weight: ArrayView2<'a, f64>,
    /// Per-node bias, `N × C_out`.
    pub bias: ArrayView2<'a, f64>,
    pub scale_index: usize,
}

impl SingleRangeKernel<'_> {
    pub fn in_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.theta.len() != n {
            return Err(Error::shape("kernel theta", n, self.theta.len()));
        }
        if self.bias.dim() != (n, self.out_channels()) {
            return Err(Error::shape(
                "kernel bias",
                (n, self.out_channels()),
                self.bias.dim(),
            ));
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite kernel theta".into()));
        }
        Ok(())
    }
}

/// Two affine maps onto a shared `S`-dimensional space: pooled context
/// (`C_in`) through `w_q`, pooled convolution output (`C_out`) through `w_v`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock<'a> {
    pub w_q: ArrayView2<'a, f64>,
    pub b_q: ArrayView1<'a, f64>,
    pub w_v: ArrayView2<'a, f64>,
    pub b_v: ArrayView1<'a, f64>,
}

impl AttentionBlock<'_> {
    pub fn dim_s(&self) -> usize {
        self.w_q.ncols()
    }
}

/// Low-rank additive correction `α L1 L2` to every kernel operator of a layer.
#[derive(Debug, Clone, Copy)]
pub struct ShiftKernel<'a> {
    /// `N × r`.
    pub l1: ArrayView2<'a, f64>,
    /// `r × N`.
    pub l2: ArrayView2<'a, f64>,
    pub alpha: f64,
}

impl ShiftKernel<'_> {
    pub fn rank_bound(&self) -> usize {
        self.l1.ncols()
    }

    /// `D̃ = L1 L2`.
    pub fn matrix(&self) -> Array2<f64> {
        self.l1.dot(&self.l2)
    }
}

/// `Σ_ij (L1 L2)_ij^2`.
pub fn shift_frobenius_sq(shift: &ShiftKernel) -> f64 {
    shift.matrix().iter().map(|x| x * x).sum()
}

#[derive(Debug, Clone, Copy)]
pub enum Mixing<'a> {
    /// Context attention.
    Attention(AttentionBlock<'a>),
    /// Free coefficients, softmax-normalized before use.
    Weighted(ArrayView1<'a, f64>),
}

#[derive(Debug, Clone)]
pub struct MgcLayer<'a> {
    pub kernels: Vec<SingleRangeKernel<'a>>,
    pub mixing: Mixing<'a>,
    pub shift: Option<ShiftKernel<'a>>,
}

impl MgcLayer<'_> {
    pub fn in_channels(&self) -> usize {
        self.kernels[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.kernels[0].out_channels()
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::Config("layer has no kernels".into()));
        }
        let (cin, cout) = (self.in_channels(), self.out_channels());
        for k in &self.kernels {
            k.check(n)?;
            if k.weight.dim() != (cin, cout) {
                return Err(Error::shape("kernel weight", (cin, cout), k.weight.dim()));
            }
        }
        match &self.mixing {
            Mixing::Attention(att) => {
                let s = att.dim_s();
                if att.w_q.nrows() != cin
                    || att.w_v.dim() != (cout, s)
                    || att.b_q.len() != s
                    || att.b_v.len() != s
                {
                    return Err(Error::shape(
                        "attention block",
                        format!("w_q {cin}x{s}, w_v {cout}x{s}"),
                        format!("w_q {:?}, w_v {:?}", att.w_q.dim(), att.w_v.dim()),
                    ));
                }
            }
            Mixing::Weighted(logits) => {
                if logits.len() != self.kernels.len() {
                    return Err(Error::shape(
                        "mixing coefficients",
                        self.kernels.len(),
                        logits.len(),
                    ));
                }
            }
        }
        if let Some(shift) = &self.shift {
            let r = shift.rank_bound();
            if shift.l1.nrows() != n || shift.l2.dim() != (r, n) {
                return Err(Error::shape(
                    "shift kernel",
                    format!("{n}x{r} and {r}x{n}"),
                    format!("{:?} and {:?}", shift.l1.dim(), shift.l2.dim()),
                ));
            }
        }
        Ok(())
    }
}

/// `left diag(θ) right + α L1 L2`.
pub fn kernel_operator(
    theta: ArrayView1<f64>,
    left: &Array2<f64>,
    right: &Array2<f64>,
    shift: Option<&ShiftKernel>,
) -> Array2<f64> {
    let scaled = left * &theta.insert_axis(Axis(0));
    let mut op = scaled.dot(right);
    if let Some(shift) = shift {
        if shift.alpha != 0.0 {
            op.scaled_add(shift.alpha, &shift.matrix());
        }
    }
    op
}

/// `g_k(x) = (Ψ Θ Ψ^{-1} + α L1 L2) x W + bias`.
pub fn single_range_conv(
    kernel: &SingleRangeKernel,
    basis: &WaveletBasis,
    shift: Option<&ShiftKernel>,
    x: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let n = basis.node_count();
    kernel.check(n)?;
    if x.dim() != (n, kernel.in_channels()) {
        return Err(Error::shape("conv input", (n, kernel.in_channels()), x.dim()));
    }
    if let Some(s) = shift {
        if s.l1.nrows() != n || s.l2.ncols() != n || s.l1.ncols() != s.l2.nrows() {
            return Err(Error::shape("shift kernel", n, (s.l1.dim(), s.l2.dim())));
        }
    }
    let op = kernel_operator(kernel.theta, &basis.forward, &basis.inverse, shift);
    Ok(apply_kernel(&op, kernel, x))
}

fn apply_kernel(op: &Array2<f64>, kernel: &SingleRangeKernel, x: ArrayView2<f64>) -> Array2<f64> {
    op.dot(&x).dot(&kernel.weight) + kernel.bias
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Cosine similarity scaled by `1/S` between the pooled query and each pooled
/// value; zero when either norm vanishes.
fn cosine_scores(q: &Array1<f64>, values: &[Array1<f64>], dim_s: usize) -> Array1<f64> {
    let qn = norm(q);
    values
        .iter()
        .map(|v| {
            let vn = norm(v);
            if qn == 0.0 || vn == 0.0 {
                0.0
            } else {
                q.dot(v) / (dim_s as f64 * qn * vn)
            }
        })
        .collect()
}

fn pool_nodes(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).expect("non-empty node axis")
}

/// Similarity scores `s_k` between the layer context and each convolution
/// output, after mean-pooling over nodes and the two affine maps.
pub fn context_scores(
    att: &AttentionBlock,
    context: ArrayView2<f64>,
    conv_outputs: &[Array2<f64>],
) -> Array1<f64> {
    let q = pool_nodes(context).dot(&att.w_q) + att.b_q;
    let values: Vec<Array1<f64>> = conv_outputs
        .iter()
        .map(|y| pool_nodes(y.view()).dot(&att.w_v) + att.b_v)
        .collect();
    cosine_scores(&q, &values, att.dim_s())
}

/// Softmax with max subtraction.
pub fn attention_weights(scores: &Array1<f64>) -> Array1<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = scores.mapv(|s| (s - max).exp());
    let total = exp.sum();
    exp / total
}

/// `Σ_k π_k · outputs[k]`. Zero weights are skipped so a one-hot `π`
/// reproduces the selected output exactly.
pub fn mgc_compose(conv_outputs: &[Array2<f64>], pi: &Array1<f64>) -> Result<Array2<f64>> {
    if conv_outputs.len() != pi.len() || conv_outputs.is_empty() {
        return Err(Error::shape("mgc_compose", conv_outputs.len(), pi.len()));
    }
    let dim = conv_outputs[0].dim();
    let mut acc: Option<Array2<f64>> = None;
    for (y, &w) in conv_outputs.iter().zip(pi.iter()) {
        if y.dim() != dim {
            return Err(Error::shape("mgc_compose output", dim, y.dim()));
        }
        if w == 0.0 {
            continue;
        }
        match acc.as_mut() {
            None => acc = Some(y * w),
            Some(a) => a.scaled_add(w, y),
        }
    }
    Ok(acc.unwrap_or_else(|| Array2::zeros(dim)))
}

/// Full AGC layer: convolutions at every scale, mixing, ReLU. Returns the
/// activations and the mixing weights used.
pub fn agc_forward(
    layer: &MgcLayer,
    bases: &[WaveletBasis],
    z_prev: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array1<f64>)> {
    if bases.len() != layer.kernels.len() {
        return Err(Error::shape("bases", layer.kernels.len(), bases.len()));
    }
    let ops: Vec<Array2<f64>> = layer
        .kernels
        .iter()
        .zip(bases)
        .map(|(k, b)| kernel_operator(k.theta, &b.forward, &b.inverse, layer.shift.as_ref()))
        .collect();
    let tape = layer_forward(layer, &ops, z_prev)?;
    Ok((tape.out, tape.pi))
}

/// Intermediate values of one layer application, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerTape {
    z_in: Array2<f64>,
    /// `M_k Z` per kernel.
    mz: Vec<Array2<f64>>,
    y: Vec<Array2<f64>>,
    attn: Option<AttentionTape>,
    pub(crate) pi: Array1<f64>,
    pre: Array2<f64>,
    pub(crate) out: Array2<f64>,
}

#[derive(Debug, Clone)]
struct AttentionTape {
    z_bar: Array1<f64>,
    q: Array1<f64>,
    y_bar: Vec<Array1<f64>>,
    v: Vec<Array1<f64>>,
}

/// Forward pass with precomputed kernel operators `ops[k]` (`N × N`).
pub(crate) fn layer_forward(
    layer: &MgcLayer,
    ops: &[Array2<f64>],
    z: ArrayView2<f64>,
) -> Result<LayerTape> {
    let n = z.nrows();
    layer.check(n)?;
    if z.ncols() != layer.in_channels() {
        return Err(Error::shape("layer input", (n, layer.in_channels()), z.dim()));
    }
    if ops.len() != layer.kernels.len() {
        return Err(Error::shape("kernel operators", layer.kernels.len(), ops.len()));
    }
    let mut mz = Vec::with_capacity(ops.len());
    let mut y = Vec::with_capacity(ops.len());
    for (op, kernel) in ops.iter().zip(&layer.kernels) {
        if op.dim() != (n, n) {
            return Err(Error::shape("kernel operator", (n, n), op.dim()));
        }
        let p = op.dot(&z);
        y.push(p.dot(&kernel.weight) + kernel.bias);
        mz.push(p);
    }

    let (pi, attn) = match &layer.mixing {
        Mixing::Attention(att) => {
            let z_bar = pool_nodes(z);
            let q = z_bar.dot(&att.w_q) + att.b_q;
            let y_bar: Vec<Array1<f64>> = y.iter().map(|yk| pool_nodes(yk.view())).collect();
            let v: Vec<Array1<f64>> = y_bar.iter().map(|yb| yb.dot(&att.w_v) + att.b_v).collect();
            let scores = cosine_scores(&q, &v, att.dim_s());
            (
                attention_weights(&scores),
                Some(AttentionTape { z_bar, q, y_bar, v }),
            )
        }
        Mixing::Weighted(logits) => (attention_weights(&logits.to_owned()), None),
    };

    let pre = mgc_compose(&y, &pi)?;
    let out = pre.mapv(|v| v.max(0.0));
    Ok(LayerTape {
        z_in: z.to_owned(),
        mz,
        y,
        attn,
        pi,
        pre,
        out,
    })
}

/// Gradient accumulators for one layer. Operator gradients `d_ops` are mapped
/// onto `θ`, scales and the shift factors once per batch.
#[derive(Debug, Clone)]
pub(crate) struct LayerGrad {
    pub(crate) d_ops: Vec<Array2<f64>>,
    pub(crate) weight: Vec<Array2<f64>>,
    pub(crate) bias: Vec<Array2<f64>>,
    pub(crate) w_q: Array2<f64>,
    pub(crate) b_q: Array1<f64>,
    pub(crate) w_v: Array2<f64>,
    pub(crate) b_v: Array1<f64>,
    pub(crate) logits: Array1<f64>,
}

impl LayerGrad {
    pub(crate) fn zeros(layer: &MgcLayer, n: usize) -> Self {
        let k = layer.kernels.len();
        let (cin, cout) = (layer.in_channels(), layer.out_channels());
        let s = match &layer.mixing {
            Mixing::Attention(att) => att.dim_s(),
            Mixing::Weighted(_) => 0,
        };
        Self {
            d_ops: vec![Array2::zeros((n, n)); k],
            weight: vec![Array2::zeros((cin, cout)); k],
            bias: vec![Array2::zeros((n, cout)); k],
            w_q: Array2::zeros((cin, s)),
            b_q: Array1::zeros(s),
            w_v: Array2::zeros((cout, s)),
            b_v: Array1::zeros(s),
            logits: Array1::zeros(k),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &LayerGrad) {
        for (a, b) in self.d_ops.iter_mut().zip(&other.d_ops) {
            *a += b;
        }
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
        self.w_q += &other.w_q;
        self.b_q += &other.b_q;
        self.w_v += &other.w_v;
        self.b_v += &other.b_v;
        self.logits += &other.logits;
    }
}

/// Softmax backward: `dπ -> ds`.
fn softmax_backward(pi: &Array1<f64>, d_pi: &Array1<f64>) -> Array1<f64> {
    let inner = pi.dot(d_pi);
    Zip::from(pi).and(d_pi).map_collect(|&p, &d| p * (d - inner))
}

fn add_outer(acc: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    let outer = a
        .view()
        .insert_axis(Axis(1))
        .dot(&b.view().insert_axis(Axis(0)));
    *acc += &outer;
}

/// Backpropagate `d_out` through one layer application, accumulating into
/// `grad` and returning the gradient with respect to the layer input.
pub(crate) fn layer_backward(
    layer: &MgcLayer,
    ops: &[Array2<f64>],
    tape: &LayerTape,
    d_out: &Array2<f64>,
    grad: &mut LayerGrad,
) -> Array2<f64> {
    let n = tape.z_in.nrows() as f64;
    let k_count = layer.kernels.len();
    let d_pre = Zip::from(d_out)
        .and(&tape.pre)
        .map_collect(|&d, &p| if p > 0.0 { d } else { 0.0 });

    let mut d_y: Vec<Array2<f64>> = tape.pi.iter().map(|&p| &d_pre * p).collect();
    let d_pi: Array1<f64> = tape.y.iter().map(|y| (y * &d_pre).sum()).collect();
    let d_scores = softmax_backward(&tape.pi, &d_pi);

    let mut d_z = Array2::<f64>::zeros(tape.z_in.dim());
    match (&layer.mixing, &tape.attn) {
        (Mixing::Attention(att), Some(at)) => {
            let s = att.dim_s() as f64;
            let qn = norm(&at.q);
            let mut d_q = Array1::<f64>::zeros(at.q.len());
            for k in 0..k_count {
                let v = &at.v[k];
                let vn = norm(v);
                if qn == 0.0 || vn == 0.0 {
                    continue;
                }
                let ds = d_scores[k];
                let dot = at.q.dot(v);
                let inv = 1.0 / (s * qn * vn);
                d_q.scaled_add(ds * inv, v);
                d_q.scaled_add(-ds * dot * inv / (qn * qn), &at.q);
                let mut d_v = &at.q * (ds * inv);
                d_v.scaled_add(-ds * dot * inv / (vn * vn), v);

                add_outer(&mut grad.w_v, &at.y_bar[k], &d_v);
                grad.b_v += &d_v;
                let d_ybar = att.w_v.dot(&d_v) / n;
                d_y[k] += &d_ybar.insert_axis(Axis(0));
            }
            add_outer(&mut grad.w_q, &at.z_bar, &d_q);
            grad.b_q += &d_q;
            let d_zbar = att.w_q.dot(&d_q) / n;
            d_z += &d_zbar.insert_axis(Axis(0));
        }
        (Mixing::Weighted(_), _) => {
            grad.logits += &d_scores;
        }
        (Mixing::Attention(_), None) => unreachable!("attention tape missing"),
    }

    for k in 0..k_count {
        let kernel = &layer.kernels[k];
        grad.bias[k] += &d_y[k];
        grad.weight[k] += &tape.mz[k].t().dot(&d_y[k]);
        let d_mz = d_y[k].dot(&kernel.weight.t());
        grad.d_ops[k] += &d_mz.dot(&tape.z_in.t());
        d_z += &ops[k].t().dot(&d_mz);
    }
    d_z
}
