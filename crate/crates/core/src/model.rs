//! The AGC-net forecaster: a stack of AGC layers applied to every input frame
//! with shared weights, a GRU run per node over the encoded frames, and a
//! linear head producing all `P` horizons from the final hidden state.
//!
//! Parameters live in a flat buffer described by a [`ParamRegistry`]. The
//! backward pass is hand-derived; kernel operators are built once per
//! forward/batch and their gradients are folded back onto `θ`, the scales and
//! the shift factors in [`Prepared::finish`].

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::conv::{
    kernel_operator, layer_backward, layer_forward, AttentionBlock, LayerGrad, LayerTape,
    MgcLayer, Mixing, ShiftKernel, SingleRangeKernel,
};
use crate::error::{Error, Result};
use crate::graph::{eigendecompose, normalized_laplacian, LaplacianSpectrum, RoadGraph};
use crate::params::{ParamId, ParamRegistry};
use crate::wavelet::{basis_scale_gradient, build_basis, sigmoid, softplus, softplus_inverse, WaveletBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MixingMode {
    #[default]
    Attention,
    Weighted,
}

/// Which operator a single-range convolution uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// `Ψ_k diag(θ_k) Ψ_k^{-1}` with heat-kernel wavelets.
    #[default]
    Wavelet,
    /// `D^{-1/2} A D^{-1/2} diag(θ_k)`; no scales.
    Adjacency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub nodes: usize,
    pub in_channels: usize,
    pub horizon: usize,
    pub scales: usize,
    pub layers: usize,
    pub enc_channels: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub mixing: MixingMode,
    pub kernel: KernelKind,
    /// Rank of the shifted kernel; `None` disables it.
    pub shift_rank: Option<usize>,
    pub alpha: f64,
    pub scale_init: (f64, f64),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("in_channels", self.in_channels),
            ("horizon", self.horizon),
            ("scales", self.scales),
            ("layers", self.layers),
            ("enc_channels", self.enc_channels),
            ("hidden", self.hidden),
            ("attn_dim", self.attn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(r) = self.shift_rank {
            if r == 0 || r > self.nodes {
                return Err(Error::Config(format!(
                    "shift rank {r} must lie in [1, {}]",
                    self.nodes
                )));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be finite and nonnegative".into()));
        }
        let (lo, hi) = self.scale_init;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config("scale_init must satisfy 0 < lo <= hi".into()));
        }
        Ok(())
    }
}

/// Graph-derived quantities shared by every forward pass.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub graph: RoadGraph,
    pub spectrum: LaplacianSpectrum,
    pub normalized_adjacency: Array2<f64>,
}

impl GraphContext {
    pub fn new(graph: RoadGraph) -> Result<Self> {
        let spectrum = eigendecompose(&normalized_laplacian(&graph))?;
        let normalized_adjacency = graph.normalized_adjacency();
        Ok(Self {
            graph,
            spectrum,
            normalized_adjacency,
        })
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }
}

#[derive(Debug, Clone)]
struct KernelIds {
    theta: ParamId,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
enum MixingIds {
    Attention {
        w_q: ParamId,
        b_q: ParamId,
        w_v: ParamId,
        b_v: ParamId,
    },
    Weighted {
        logits: ParamId,
    },
}

#[derive(Debug, Clone)]
struct LayerIds {
    kernels: Vec<KernelIds>,
    mixing: MixingIds,
    shift: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
struct GruIds {
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
}

#[derive(Debug, Clone)]
struct NetIds {
    scales: Option<ParamId>,
    layers: Vec<LayerIds>,
    gru: GruIds,
    head_weight: ParamId,
    head_bias: ParamId,
}

/// GRU gate parameters, shared across nodes. Gate order is
/// `[update, reset, candidate]`.
#[derive(Debug, Clone, Copy)]
pub struct GruDecoder<'a> {
    /// Input maps, `C_enc × d_h`.
    pub w: [ArrayView2<'a, f64>; 3],
    /// Recurrent maps, `d_h × d_h`.
    pub u: [ArrayView2<'a, f64>; 3],
    pub b: [ArrayView1<'a, f64>; 3],
}

impl GruDecoder<'_> {
    pub fn hidden_dim(&self) -> usize {
        self.u[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w[0].nrows()
    }
}

/// Affine map from the final hidden state to the `P` horizons.
#[derive(Debug, Clone, Copy)]
pub struct ForecastHead<'a> {
    pub weight: ArrayView2<'a, f64>,
    pub bias: ArrayView1<'a, f64>,
}

const GATE_NAMES: [&str; 3] = ["z", "r", "h"];

#[derive(Debug, Clone)]
pub struct AgcNet {
    config: ModelConfig,
    context: Arc<GraphContext>,
    registry: ParamRegistry,
    params: Vec<f64>,
    ids: NetIds,
}

impl AgcNet {
    /// Build a network and initialize every parameter from `rng`.
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        context: Arc<GraphContext>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if context.node_count() != config.nodes {
            return Err(Error::shape("graph nodes", config.nodes, context.node_count()));
        }
        let (registry, ids) = build_registry(&config);
        let mut net = Self {
            params: vec![0.0; registry.len()],
            config,
            context,
            registry,
            ids,
        };
        net.initialize(rng);
        Ok(net)
    }

    fn initialize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let cfg = self.config.clone();
        let reg = self.registry.clone();
        let ids = self.ids.clone();
        let p = &mut self.params;
        fn uniform<R: Rng + ?Sized>(
            reg: &ParamRegistry,
            p: &mut [f64],
            id: ParamId,
            bound: f64,
            rng: &mut R,
        ) {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for v in reg.slice_mut(p, id) {
                *v = dist.sample(rng);
            }
        }

        if let Some(sid) = ids.scales {
            let k = cfg.scales;
            let (lo, hi) = cfg.scale_init;
            let raw = reg.slice_mut(p, sid);
            for (i, r) in raw.iter_mut().enumerate() {
                let s = if k == 1 {
                    (lo * hi).sqrt()
                } else {
                    lo * (hi / lo).powf(i as f64 / (k - 1) as f64)
                };
                *r = softplus_inverse(s);
            }
        }
        for (l, layer) in ids.layers.iter().enumerate() {
            let cin = if l == 0 { cfg.in_channels } else { cfg.enc_channels };
            for k in &layer.kernels {
                reg.slice_mut(p, k.theta).fill(1.0);
                uniform(&reg, p, k.weight, 1.0 / (cin as f64).sqrt(), rng);
                reg.slice_mut(p, k.bias).fill(0.0);
            }
            match layer.mixing {
                MixingIds::Attention { w_q, b_q, w_v, b_v } => {
                    let bq = 1.0 / (cin as f64).sqrt();
                    let bv = 1.0 / (cfg.enc_channels as f64).sqrt();
                    uniform(&reg, p, w_q, bq, rng);
                    uniform(&reg, p, b_q, bq, rng);
                    uniform(&reg, p, w_v, bv, rng);
                    uniform(&reg, p, b_v, bv, rng);
                }
                MixingIds::Weighted { logits } => reg.slice_mut(p, logits).fill(0.0),
            }
            if let Some((l1, l2)) = layer.shift {
                let normal = Normal::new(0.0, 0.01).expect("valid std");
                for id in [l1, l2] {
                    for v in reg.slice_mut(p, id) {
                        *v = normal.sample(rng);
                    }
                }
            }
        }
        let gb = 1.0 / (cfg.hidden as f64).sqrt();
        for g in 0..3 {
            uniform(&reg, p, ids.gru.w[g], gb, rng);
            uniform(&reg, p, ids.gru.u[g], gb, rng);
            uniform(&reg, p, ids.gru.b[g], gb, rng);
        }
        uniform(&reg, p, ids.head_weight, gb, rng);
        uniform(&reg, p, ids.head_bias, gb, rng);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn context(&self) -> &Arc<GraphContext> {
        &self.context
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Replace every parameter from a flat vector in registry order.
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.params.len() {
            return Err(Error::shape("parameter vector", self.params.len(), flat.len()));
        }
        self.params.copy_from_slice(flat);
        Ok(())
    }

    /// Current positive scales `s_k` (empty for the adjacency kernel).
    pub fn scales(&self) -> Array1<f64> {
        match self.ids.scales {
            Some(id) => self.registry.view1(&self.params, id).mapv(softplus),
            None => Array1::zeros(0),
        }
    }

    /// Borrowed view of layer `l`.
    pub fn layer(&self, l: usize) -> MgcLayer<'_> {
        layer_view(&self.registry, &self.params, &self.ids.layers[l], self.config.alpha)
    }

    pub fn decoder(&self) -> GruDecoder<'_> {
        gru_view(&self.registry, &self.params, &self.ids.gru)
    }

    pub fn head(&self) -> ForecastHead<'_> {
        ForecastHead {
            weight: self.registry.view2(&self.params, self.ids.head_weight),
            bias: self.registry.view1(&self.params, self.ids.head_bias),
        }
    }

    /// Shift kernels of every layer that has one.
    pub fn shifts(&self) -> Vec<ShiftKernel<'_>> {
        (0..self.config.layers)
            .filter_map(|l| self.layer(l).shift)
            .collect()
    }

    /// Wavelet bases for the current scales.
    pub fn bases(&self) -> Result<Vec<WaveletBasis>> {
        self.scales()
            .iter()
            .map(|&s| build_basis(&self.context.spectrum, s))
            .collect()
    }

    /// Build bases and kernel operators for the current parameters.
    pub fn prepare(&self) -> Result<Prepared<'_>> {
        Prepared::new(self)
    }

    /// Run the encoder over all `H` frames.
    pub fn encode_sequence(&self, x_seq: ArrayView3<f64>) -> Result<Array3<f64>> {
        self.prepare()?.encode_sequence(x_seq)
    }

    /// Run the decoder and head on an encoded sequence.
    pub fn decode(&self, encoded: ArrayView3<f64>) -> Result<Array2<f64>> {
        decode(&self.decoder(), &self.head(), encoded)
    }

    /// `N × P` predictions in normalized units.
    pub fn forward(&self, x_seq: ArrayView3<f64>) -> Result<Array2<f64>> {
        self.prepare()?.forward(x_seq)
    }
}

fn build_registry(cfg: &ModelConfig) -> (ParamRegistry, NetIds) {
    let mut reg = ParamRegistry::new();
    let n = cfg.nodes;
    let scales = match cfg.kernel {
        KernelKind::Wavelet => Some(reg.push("scales.raw", &[cfg.scales])),
        KernelKind::Adjacency => None,
    };
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let cin = if l == 0 { cfg.in_channels } else { cfg.enc_channels };
        let cout = cfg.enc_channels;
        let kernels = (0..cfg.scales)
            .map(|k| KernelIds {
                theta: reg.push(format!("layer{l}.kernel{k}.theta"), &[n]),
                weight: reg.push(format!("layer{l}.kernel{k}.weight"), &[cin, cout]),
                bias: reg.push(format!("layer{l}.kernel{k}.bias"), &[n, cout]),
            })
            .collect();
        let mixing = match cfg.mixing {
            MixingMode::Attention => MixingIds::Attention {
                w_q: reg.push(format!("layer{l}.attention.w_q"), &[cin, cfg.attn_dim]),
                b_q: reg.push(format!("layer{l}.attention.b_q"), &[cfg.attn_dim]),
                w_v: reg.push(format!("layer{l}.attention.w_v"), &[cout, cfg.attn_dim]),
                b_v: reg.push(format!("layer{l}.attention.b_v"), &[cfg.attn_dim]),
            },
            MixingMode::Weighted => MixingIds::Weighted {
                logits: reg.push(format!("layer{l}.mixing.logits"), &[cfg.scales]),
            },
        };
        let shift = cfg.shift_rank.map(|r| {
            (
                reg.push(format!("layer{l}.shift.l1"), &[n, r]),
                reg.push(format!("layer{l}.shift.l2"), &[r, n]),
            )
        });
        layers.push(LayerIds {
            kernels,
            mixing,
            shift,
        });
    }
    let d = cfg.hidden;
    let c = cfg.enc_channels;
    let w = GATE_NAMES.map(|g| reg.push(format!("decoder.w_{g}"), &[c, d]));
    let u = GATE_NAMES.map(|g| reg.push(format!("decoder.u_{g}"), &[d, d]));
    let b = GATE_NAMES.map(|g| reg.push(format!("decoder.b_{g}"), &[d]));
    let head_weight = reg.push("head.weight", &[d, cfg.horizon]);
    let head_bias = reg.push("head.bias", &[cfg.horizon]);
    (
        reg,
        NetIds {
            scales,
            layers,
            gru: GruIds { w, u, b },
            head_weight,
            head_bias,
        },
    )
}

fn layer_view<'a>(reg: &ParamRegistry, p: &'a [f64], ids: &LayerIds, alpha: f64) -> MgcLayer<'a> {
    let kernels = ids
        .kernels
        .iter()
        .enumerate()
        .map(|(k, kid)| SingleRangeKernel {
            theta: reg.view1(p, kid.theta),
            weight: reg.view2(p, kid.weight),
            bias: reg.view2(p, kid.bias),
            scale_index: k,
        })
        .collect();
    let mixing = match ids.mixing {
        MixingIds::Attention { w_q, b_q, w_v, b_v } => Mixing::Attention(AttentionBlock {
            w_q: reg.view2(p, w_q),
            b_q: reg.view1(p, b_q),
            w_v: reg.view2(p, w_v),
            b_v: reg.view1(p, b_v),
        }),
        MixingIds::Weighted { logits } => Mixing::Weighted(reg.view1(p, logits)),
    };
    let shift = ids.shift.map(|(l1, l2)| ShiftKernel {
        l1: reg.view2(p, l1),
        l2: reg.view2(p, l2),
        alpha,
    });
    MgcLayer {
        kernels,
        mixing,
        shift,
    }
}

fn gru_view<'a>(reg: &ParamRegistry, p: &'a [f64], ids: &GruIds) -> GruDecoder<'a> {
    GruDecoder {
        w: ids.w.map(|id| reg.view2(p, id)),
        u: ids.u.map(|id| reg.view2(p, id)),
        b: ids.b.map(|id| reg.view1(p, id)),
    }
}

/// One GRU update for a single node:
/// `z = σ(x W_z + h U_z + b_z)`, `r = σ(x W_r + h U_r + b_r)`,
/// `h̃ = tanh(x W_h + (r ⊙ h) U_h + b_h)`, `h' = (1 - z) ⊙ h + z ⊙ h̃`.
pub fn gru_step(dec: &GruDecoder, input: ArrayView1<f64>, h: ArrayView1<f64>) -> Array1<f64> {
    let x = input.insert_axis(Axis(0));
    let hh = h.insert_axis(Axis(0));
    let (next, _) = gru_step_rows(dec, x, hh);
    next.index_axis_move(Axis(0), 0)
}

#[derive(Debug, Clone)]
struct GruTape {
    x: Array2<f64>,
    h: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    c: Array2<f64>,
    rh: Array2<f64>,
}

/// Row-batched GRU step: each row is one node.
fn gru_step_rows(dec: &GruDecoder, x: ArrayView2<f64>, h: ArrayView2<f64>) -> (Array2<f64>, GruTape) {
    let gate = |g: usize, rec: &ArrayView2<f64>| -> Array2<f64> {
        x.dot(&dec.w[g]) + rec.dot(&dec.u[g]) + dec.b[g]
    };
    let z = gate(0, &h).mapv_into(sigmoid);
    let r = gate(1, &h).mapv_into(sigmoid);
    let rh = &r * &h;
    let c = gate(2, &rh.view()).mapv_into(f64::tanh);
    let next = Zip::from(&z)
        .and(&h)
        .and(&c)
        .map_collect(|&z, &h, &c| (1.0 - z) * h + z * c);
    (
        next,
        GruTape {
            x: x.to_owned(),
            h: h.to_owned(),
            z,
            r,
            c,
            rh,
        },
    )
}

#[derive(Debug, Clone)]
struct GruGrad {
    w: [Array2<f64>; 3],
    u: [Array2<f64>; 3],
    b: [Array1<f64>; 3],
}

impl GruGrad {
    fn zeros(c: usize, d: usize) -> Self {
        Self {
            w: std::array::from_fn(|_| Array2::zeros((c, d))),
            u: std::array::from_fn(|_| Array2::zeros((d, d))),
            b: std::array::from_fn(|_| Array1::zeros(d)),
        }
    }

    fn add_assign(&mut self, o: &GruGrad) {
        for g in 0..3 {
            self.w[g] += &o.w[g];
            self.u[g] += &o.u[g];
            self.b[g] += &o.b[g];
        }
    }
}

/// Backprop one GRU step. Returns `(d_x, d_h_prev)`.
fn gru_step_backward(
    dec: &GruDecoder,
    tape: &GruTape,
    d_next: &Array2<f64>,
    grad: &mut GruGrad,
) -> (Array2<f64>, Array2<f64>) {
    let d_z = d_next * &(&tape.c - &tape.h);
    let d_c = d_next * &tape.z;
    let mut d_h = Zip::from(d_next)
        .and(&tape.z)
        .map_collect(|&d, &z| d * (1.0 - z));

    let a_c = Zip::from(&d_c).and(&tape.c).map_collect(|&d, &c| d * (1.0 - c * c));
    let a_r_pre = a_c.dot(&dec.u[2].t());
    let d_r = &a_r_pre * &tape.h;
    d_h += &(&a_r_pre * &tape.r);
    let a_r = Zip::from(&d_r).and(&tape.r).map_collect(|&d, &r| d * r * (1.0 - r));
    let a_z = Zip::from(&d_z).and(&tape.z).map_collect(|&d, &z| d * z * (1.0 - z));

    let mut d_x = Array2::<f64>::zeros(tape.x.dim());
    for (g, a, rec_in) in [(0usize, &a_z, &tape.h), (1, &a_r, &tape.h), (2, &a_c, &tape.rh)] {
        grad.w[g] += &tape.x.t().dot(a);
        grad.u[g] += &rec_in.t().dot(a);
        grad.b[g] += &a.sum_axis(Axis(0));
        d_x += &a.dot(&dec.w[g].t());
        if g != 2 {
            d_h += &a.dot(&dec.u[g].t());
        }
    }
    (d_x, d_h)
}

fn check_decoder_input(dec: &GruDecoder, encoded: &ArrayView3<f64>) -> Result<()> {
    if encoded.shape()[0] == 0 || encoded.shape()[2] != dec.input_dim() {
        return Err(Error::shape(
            "encoded sequence",
            format!("H>0 x N x {}", dec.input_dim()),
            encoded.shape(),
        ));
    }
    Ok(())
}

/// Per-node GRU over the `H` encoded frames from a zero state, then the head.
pub fn decode(dec: &GruDecoder, head: &ForecastHead, encoded: ArrayView3<f64>) -> Result<Array2<f64>> {
    check_decoder_input(dec, &encoded)?;
    let n = encoded.shape()[1];
    let mut h = Array2::<f64>::zeros((n, dec.hidden_dim()));
    for frame in encoded.axis_iter(Axis(0)) {
        h = gru_step_rows(dec, frame, h.view()).0;
    }
    Ok(h.dot(&head.weight) + head.bias)
}

/// Bases, kernel operators and parameter views for one fixed parameter state.
#[derive(Debug)]
pub struct Prepared<'a> {
    net: &'a AgcNet,
    /// `(left, right)` factors per kernel index.
    factors: Vec<(Array2<f64>, Array2<f64>)>,
    layers: Vec<MgcLayer<'a>>,
    /// `ops[l][k]`.
    ops: Vec<Vec<Array2<f64>>>,
    decoder: GruDecoder<'a>,
    head: ForecastHead<'a>,
}

/// Everything recorded by a forward pass over one sample.
#[derive(Debug, Clone)]
pub struct SampleTape {
    layers: Vec<Vec<LayerTape>>,
    gru: Vec<GruTape>,
    h_final: Array2<f64>,
}

impl SampleTape {
    /// Mixing weights `π` per frame and layer.
    pub fn mixing_weights(&self) -> Vec<Vec<Array1<f64>>> {
        self.layers
            .iter()
            .map(|frame| frame.iter().map(|t| t.pi.clone()).collect())
            .collect()
    }
}

/// Gradient accumulators for a batch, prior to folding operator gradients
/// onto their parameters.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    layers: Vec<LayerGrad>,
    gru: GruGrad,
    head_weight: Array2<f64>,
    head_bias: Array1<f64>,
}

impl GradAccumulator {
    pub fn add_assign(&mut self, other: &GradAccumulator) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
        self.gru.add_assign(&other.gru);
        self.head_weight += &other.head_weight;
        self.head_bias += &other.head_bias;
    }
}

impl<'a> Prepared<'a> {
    fn new(net: &'a AgcNet) -> Result<Self> {
        let ctx = &net.context;
        let cfg = &net.config;
        let factors: Vec<(Array2<f64>, Array2<f64>)> = match cfg.kernel {
            KernelKind::Wavelet => net
                .bases()?
                .into_iter()
                .map(|b| (b.forward, b.inverse))
                .collect(),
            KernelKind::Adjacency => {
                let n = cfg.nodes;
                vec![(ctx.normalized_adjacency.clone(), Array2::eye(n)); cfg.scales]
            }
        };
        let layers: Vec<MgcLayer<'a>> = (0..cfg.layers).map(|l| net.layer(l)).collect();
        let ops = layers
            .iter()
            .map(|layer| {
                layer
                    .kernels
                    .iter()
                    .zip(&factors)
                    .map(|(k, (left, right))| kernel_operator(k.theta, left, right, layer.shift.as_ref()))
                    .collect()
            })
            .collect();
        Ok(Self {
            net,
            factors,
            layers,
            ops,
            decoder: net.decoder(),
            head: net.head(),
        })
    }

    pub fn net(&self) -> &'a AgcNet {
        self.net
    }

    fn check_input(&self, x: &ArrayView3<f64>) -> Result<()> {
        let cfg = &self.net.config;
        let sh = x.shape();
        if sh[0] == 0 || sh[1] != cfg.nodes || sh[2] != cfg.in_channels {
            return Err(Error::shape(
                "input sequence",
                format!("H x {} x {}", cfg.nodes, cfg.in_channels),
                sh,
            ));
        }
        Ok(())
    }

    fn encode_frame(&self, frame: ArrayView2<f64>) -> Result<Vec<LayerTape>> {
        let mut tapes: Vec<LayerTape> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = match tapes.last() {
                Some(t) => t.out.view(),
                None => frame,
            };
            let tape = layer_forward(layer, &self.ops[l], input)?;
            tapes.push(tape);
        }
        Ok(tapes)
    }

    pub fn encode_sequence(&self, x_seq: ArrayView3<f64>) -> Result<Array3<f64>> {
        self.check_input(&x_seq)?;
        let (h, n) = (x_seq.shape()[0], x_seq.shape()[1]);
        let mut out = Array3::<f64>::zeros((h, n, self.net.config.enc_channels));
        for (t, frame) in x_seq.axis_iter(Axis(0)).enumerate() {
            let tapes = self.encode_frame(frame)?;
            out.index_axis_mut(Axis(0), t)
                .assign(&tapes.last().expect("at least one layer").out);
        }
        Ok(out)
    }

    pub fn forward(&self, x_seq: ArrayView3<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_tape(x_seq)?.0)
    }

    /// Forward pass keeping everything the backward pass needs.
    pub fn forward_tape(&self, x_seq: ArrayView3<f64>) -> Result<(Array2<f64>, SampleTape)> {
        self.check_input(&x_seq)?;
        let n = x_seq.shape()[1];
        let mut layers = Vec::with_capacity(x_seq.shape()[0]);
        let mut gru = Vec::with_capacity(x_seq.shape()[0]);
        let mut h = Array2::<f64>::zeros((n, self.decoder.hidden_dim()));
        for frame in x_seq.axis_iter(Axis(0)) {
            let tapes = self.encode_frame(frame)?;
            let (next, gt) = gru_step_rows(
                &self.decoder,
                tapes.last().expect("at least one layer").out.view(),
                h.view(),
            );
            h = next;
            layers.push(tapes);
            gru.push(gt);
        }
        let pred = h.dot(&self.head.weight) + self.head.bias;
        Ok((
            pred,
            SampleTape {
                layers,
                gru,
                h_final: h,
            },
        ))
    }

    pub fn zero_grad(&self) -> GradAccumulator {
        let cfg = &self.net.config;
        GradAccumulator {
            layers: self
                .layers
                .iter()
                .map(|layer| LayerGrad::zeros(layer, cfg.nodes))
                .collect(),
            gru: GruGrad::zeros(cfg.enc_channels, cfg.hidden),
            head_weight: Array2::zeros((cfg.hidden, cfg.horizon)),
            head_bias: Array1::zeros(cfg.horizon),
        }
    }

    /// Accumulate gradients of a loss whose derivative with respect to the
    /// prediction is `d_pred`.
    pub fn backward(&self, tape: &SampleTape, d_pred: &Array2<f64>, acc: &mut GradAccumulator) {
        acc.head_weight += &tape.h_final.t().dot(d_pred);
        acc.head_bias += &d_pred.sum_axis(Axis(0));
        let mut d_h = d_pred.dot(&self.head.weight.t());
        for t in (0..tape.gru.len()).rev() {
            let (d_enc, d_prev) = gru_step_backward(&self.decoder, &tape.gru[t], &d_h, &mut acc.gru);
            d_h = d_prev;
            let mut d = d_enc;
            for l in (0..self.layers.len()).rev() {
                d = layer_backward(
                    &self.layers[l],
                    &self.ops[l],
                    &tape.layers[t][l],
                    &d,
                    &mut acc.layers[l],
                );
            }
        }
    }

    /// Fold accumulated gradients into a flat vector in registry order. The
    /// squared-Frobenius penalty `frobenius_weight * Σ ||L1 L2||_F^2` is
    /// differentiated here as well.
    pub fn finish(&self, acc: &GradAccumulator, frobenius_weight: f64) -> Result<Vec<f64>> {
        let net = self.net;
        let reg = &net.registry;
        let cfg = &net.config;
        let mut g = vec![0.0; reg.len()];
        let n = cfg.nodes;
        let mut d_left = vec![Array2::<f64>::zeros((n, n)); cfg.scales];
        let mut d_right = vec![Array2::<f64>::zeros((n, n)); cfg.scales];

        for (l, ids) in net.ids.layers.iter().enumerate() {
            let layer = &self.layers[l];
            let lg = &acc.layers[l];
            let mut d_shift = Array2::<f64>::zeros((n, n));
            for (k, kid) in ids.kernels.iter().enumerate() {
                let (left, right) = &self.factors[k];
                let theta = layer.kernels[k].theta;
                let d_op = &lg.d_ops[k];
                // dθ_i = Σ_ab dM_ab left_ai right_ib
                let lt_dm = left.t().dot(d_op);
                let d_theta = Zip::from(lt_dm.rows())
                    .and(right.rows())
                    .map_collect(|a, b| a.dot(&b));
                reg.view1_mut(&mut g, kid.theta).assign(&d_theta);
                reg.view2_mut(&mut g, kid.weight).assign(&lg.weight[k]);
                reg.view2_mut(&mut g, kid.bias).assign(&lg.bias[k]);
                if cfg.kernel == KernelKind::Wavelet {
                    let th_row = theta.insert_axis(Axis(0));
                    d_left[k] += &(d_op.dot(&right.t()) * th_row);
                    d_right[k] += &(&lt_dm * &theta.insert_axis(Axis(1)));
                }
                if let Some(shift) = &layer.shift {
                    d_shift.scaled_add(shift.alpha, d_op);
                }
            }
            match ids.mixing {
                MixingIds::Attention { w_q, b_q, w_v, b_v } => {
                    reg.view2_mut(&mut g, w_q).assign(&lg.w_q);
                    reg.view1_mut(&mut g, b_q).assign(&lg.b_q);
                    reg.view2_mut(&mut g, w_v).assign(&lg.w_v);
                    reg.view1_mut(&mut g, b_v).assign(&lg.b_v);
                }
                MixingIds::Weighted { logits } => {
                    reg.view1_mut(&mut g, logits).assign(&lg.logits);
                }
            }
            if let (Some((l1_id, l2_id)), Some(shift)) = (ids.shift, &layer.shift) {
                if frobenius_weight != 0.0 {
                    d_shift.scaled_add(2.0 * frobenius_weight, &shift.matrix());
                }
                reg.view2_mut(&mut g, l1_id).assign(&d_shift.dot(&shift.l2.t()));
                reg.view2_mut(&mut g, l2_id).assign(&shift.l1.t().dot(&d_shift));
            }
        }

        if let Some(sid) = net.ids.scales {
            let raw = reg.view1(&net.params, sid);
            let scales = raw.mapv(softplus);
            let mut d_raw = Array1::<f64>::zeros(cfg.scales);
            for k in 0..cfg.scales {
                let (g_fwd, g_inv) = basis_scale_gradient(&net.context.spectrum, scales[k])?;
                let ds = (&d_left[k] * &g_fwd).sum() + (&d_right[k] * &g_inv).sum();
                d_raw[k] = ds * sigmoid(raw[k]);
            }
            reg.view1_mut(&mut g, sid).assign(&d_raw);
        }

        let gru = &net.ids.gru;
        for i in 0..3 {
            reg.view2_mut(&mut g, gru.w[i]).assign(&acc.gru.w[i]);
            reg.view2_mut(&mut g, gru.u[i]).assign(&acc.gru.u[i]);
            reg.view1_mut(&mut g, gru.b[i]).assign(&acc.gru.b[i]);
        }
        reg.view2_mut(&mut g, net.ids.head_weight).assign(&acc.head_weight);
        reg.view1_mut(&mut g, net.ids.head_bias).assign(&acc.head_bias);
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generators;
    use ndarray::{arr1, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config(mixing: MixingMode, shift: bool) -> ModelConfig {
        ModelConfig {
            nodes: 5,
            in_channels: 1,
            horizon: 2,
            scales: 2,
            layers: 1,
            enc_channels: 3,
            hidden: 3,
            attn_dim: 4,
            mixing,
            kernel: KernelKind::Wavelet,
            shift_rank: shift.then_some(2),
            alpha: 0.01,
            scale_init: (0.1, 2.0),
        }
    }

    fn tiny_net(mixing: MixingMode, shift: bool, seed: u64) -> AgcNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = generators::random_connected(5, 0.3, &mut rng);
        let ctx = Arc::new(GraphContext::new(graph).unwrap());
        AgcNet::new(tiny_config(mixing, shift), ctx, &mut rng).unwrap()
    }

    #[test]
    fn registry_names_unique_and_ordered() {
        let net = tiny_net(MixingMode::Attention, true, 1);
        let names: Vec<&str> = net.registry().entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names[0], "scales.raw");
        assert_eq!(*names.last().unwrap(), "head.bias");
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"layer0.shift.l1"));
        assert!(names.contains(&"decoder.u_r"));
        let again = tiny_net(MixingMode::Attention, true, 1);
        assert_eq!(net.registry(), again.registry());
        assert_eq!(net.params(), again.params());
    }

    #[test]
    fn gru_zero_parameters() {
        let zc = Array2::<f64>::zeros((2, 3));
        let zd = Array2::<f64>::zeros((3, 3));
        let zb = Array1::<f64>::zeros(3);
        let dec = GruDecoder {
            w: [zc.view(); 3],
            u: [zd.view(); 3],
            b: [zb.view(); 3],
        };
        let h = arr1(&[1.0, -2.0, 0.5]);
        let next = gru_step(&dec, arr1(&[0.3, 0.7]).view(), h.view());
        assert_eq!(next, arr1(&[0.5, -1.0, 0.25]));
        let zero = gru_step(&dec, arr1(&[0.3, 0.7]).view(), zb.view());
        assert_eq!(zero, zb);
    }

    #[test]
    fn decode_zero_network_is_zero() {
        let zc = Array2::<f64>::zeros((2, 3));
        let zd = Array2::<f64>::zeros((3, 3));
        let zb = Array1::<f64>::zeros(3);
        let dec = GruDecoder {
            w: [zc.view(); 3],
            u: [zd.view(); 3],
            b: [zb.view(); 3],
        };
        let hw = Array2::<f64>::zeros((3, 4));
        let hb = Array1::<f64>::zeros(4);
        let head = ForecastHead {
            weight: hw.view(),
            bias: hb.view(),
        };
        let enc = Array3::<f64>::zeros((5, 6, 2));
        assert_eq!(decode(&dec, &head, enc.view()).unwrap(), Array2::<f64>::zeros((6, 4)));
    }

    #[test]
    fn decode_single_step_matches_unrolled() {
        let net = tiny_net(MixingMode::Attention, false, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = Array::from_shape_fn((1, 5, 3), |_| rng.random_range(-1.0..1.0));
        let pred = net.decode(enc.view()).unwrap();
        let dec = net.decoder();
        let head = net.head();
        for node in 0..5 {
            let h = gru_step(&dec, enc.slice(ndarray::s![0, node, ..]), Array1::zeros(3).view());
            let want = h.dot(&head.weight) + head.bias;
            for p in 0..2 {
                assert!((pred[[node, p]] - want[p]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn decoder_is_node_equivariant() {
        let net = tiny_net(MixingMode::Weighted, false, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Array::from_shape_fn((4, 5, 3), |_| rng.random_range(-1.0..1.0));
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = enc.select(Axis(1), &perm);
        let a = net.decode(enc.view()).unwrap();
        let b = net.decode(permuted.view()).unwrap();
        assert_eq!(a.select(Axis(0), &perm), b);
    }

    #[test]
    fn forward_shape_and_determinism() {
        let net = tiny_net(MixingMode::Attention, true, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array::from_shape_fn((4, 5, 1), |_| rng.random_range(-1.0..1.0));
        let a = net.forward(x.view()).unwrap();
        let b = net.forward(x.view()).unwrap();
        assert_eq!(a.dim(), (5, 2));
        assert_eq!(a, b);
        let bad = Array3::<f64>::zeros((4, 6, 1));
        assert!(net.forward(bad.view()).is_err());
    }

    #[test]
    fn identical_frames_encode_identically() {
        let net = tiny_net(MixingMode::Attention, true, 6);
        let frame = Array::from_shape_fn((1, 5, 1), |(_, n, _)| n as f64 * 0.3 - 0.5);
        let two = ndarray::concatenate(Axis(0), &[frame.view(), frame.view()]).unwrap();
        let enc = net.encode_sequence(two.view()).unwrap();
        assert_eq!(enc.index_axis(Axis(0), 0), enc.index_axis(Axis(0), 1));
        let single = net.encode_sequence(frame.view()).unwrap();
        assert_eq!(single.index_axis(Axis(0), 0), enc.index_axis(Axis(0), 0));
    }

    #[test]
    fn flatten_restore_roundtrip() {
        let mut net = tiny_net(MixingMode::Attention, true, 8);
        let x = Array::from_shape_fn((3, 5, 1), |(t, n, _)| (t * 5 + n) as f64 * 0.1);
        let before = net.forward(x.view()).unwrap();
        let flat = net.params().to_vec();
        let other = tiny_net(MixingMode::Attention, true, 99);
        net.set_params(other.params()).unwrap();
        assert_ne!(net.forward(x.view()).unwrap(), before);
        net.set_params(&flat).unwrap();
        assert_eq!(net.forward(x.view()).unwrap(), before);
    }
}
