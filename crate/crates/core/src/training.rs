//! Masked MAE loss, Adam, batch gradients, finite-difference checks and the
//! training loop.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{shift_frobenius_sq, ShiftKernel};
use crate::data::{NormalizationStats, Sample, SlidingWindowDataset, MASK_VALUE};
use crate::error::{Error, Result};
use crate::metrics::{horizon_eval, HorizonReport};
use crate::model::{AgcNet, GradAccumulator, GraphContext, KernelKind, MixingMode, ModelConfig};
use crate::par::{map_chunks, Parallelism};
use crate::params::ParamRegistry;

/// Samples per work unit. Fixed so reductions do not depend on thread count.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub frobenius_weight: f64,
    pub mask_value: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            frobenius_weight: 1e-4,
            mask_value: MASK_VALUE,
        }
    }
}

/// Maps normalized model output back to raw target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub mean: f64,
    pub std: f64,
}

impl TargetScale {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn from_stats(stats: &NormalizationStats) -> Self {
        Self {
            mean: stats.mean[0],
            std: stats.std[0],
        }
    }

    pub fn denormalize(&self, pred: &Array2<f64>) -> Array2<f64> {
        pred.mapv(|v| v * self.std + self.mean)
    }
}

fn frobenius_term(shifts: &[ShiftKernel], weight: f64) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    weight * shifts.iter().map(shift_frobenius_sq).sum::<f64>()
}

/// Mean absolute error over entries whose target differs from the mask value,
/// plus `frobenius_weight · Σ ||L1 L2||_F²`. Predictions and targets share
/// units. An all-masked target contributes nothing but the penalty.
pub fn masked_mae_loss(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    cfg: &LossConfig,
    shifts: &[ShiftKernel],
) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape("loss", target.dim(), pred.dim()));
    }
    let (sum, count) = pred
        .iter()
        .zip(target.iter())
        .filter(|(_, t)| **t != cfg.mask_value)
        .fold((0.0, 0usize), |(s, c), (p, t)| (s + (p - t).abs(), c + 1));
    let reg = frobenius_term(shifts, cfg.frobenius_weight);
    if count == 0 {
        log::warn!("every target entry is masked; loss is the regularization term alone");
        return Ok(reg);
    }
    Ok(sum / count as f64 + reg)
}

fn unmasked_count(samples: &[&Sample], mask: f64) -> usize {
    samples
        .iter()
        .map(|s| s.y.iter().filter(|&&t| t != mask).count())
        .sum()
}

/// Pooled masked MAE over a batch (raw units) plus the shift penalty.
pub fn batch_loss(net: &AgcNet, samples: &[&Sample], scale: TargetScale, cfg: &LossConfig) -> Result<f64> {
    let prepared = net.prepare()?;
    let count = unmasked_count(samples, cfg.mask_value);
    let mut sum = 0.0;
    for s in samples {
        let pred = scale.denormalize(&prepared.forward(s.x.view())?);
        for (p, t) in pred.iter().zip(s.y.iter()) {
            if *t != cfg.mask_value {
                sum += (p - t).abs();
            }
        }
    }
    let reg = frobenius_term(&net.shifts(), cfg.frobenius_weight);
    if count == 0 {
        log::warn!("every target entry in the batch is masked");
        return Ok(reg);
    }
    Ok(sum / count as f64 + reg)
}

/// Loss and gradient in registry order for one batch.
pub fn batch_loss_and_grad(
    net: &AgcNet,
    samples: &[&Sample],
    scale: TargetScale,
    cfg: &LossConfig,
    mode: Parallelism,
) -> Result<(f64, Vec<f64>)> {
    let prepared = net.prepare()?;
    let count = unmasked_count(samples, cfg.mask_value);
    let inv = if count == 0 {
        log::warn!("every target entry in the batch is masked");
        0.0
    } else {
        1.0 / count as f64
    };
    let partials: Vec<Result<(f64, GradAccumulator)>> = map_chunks(samples, CHUNK, mode, |chunk| {
        let mut acc = prepared.zero_grad();
        let mut sum = 0.0;
        for s in chunk {
            let (pred, tape) = prepared.forward_tape(s.x.view())?;
            let raw = scale.denormalize(&pred);
            let mut d_pred = Array2::<f64>::zeros(raw.dim());
            for ((d, p), t) in d_pred.iter_mut().zip(raw.iter()).zip(s.y.iter()) {
                if *t != cfg.mask_value {
                    let e = p - t;
                    sum += e.abs();
                    // subgradient 0 at e == 0
                    *d = if e > 0.0 {
                        scale.std * inv
                    } else if e < 0.0 {
                        -scale.std * inv
                    } else {
                        0.0
                    };
                }
            }
            prepared.backward(&tape, &d_pred, &mut acc);
        }
        Ok((sum, acc))
    });
    let mut total = 0.0;
    let mut acc: Option<GradAccumulator> = None;
    for part in partials {
        let (sum, a) = part?;
        total += sum;
        match &mut acc {
            Some(acc) => acc.add_assign(&a),
            None => acc = Some(a),
        }
    }
    let acc = acc.unwrap_or_else(|| prepared.zero_grad());
    let grad = prepared.finish(&acc, cfg.frobenius_weight)?;
    let loss = total * inv + frobenius_term(&net.shifts(), cfg.frobenius_weight);
    Ok((loss, grad))
}

/// Raw-unit predictions for every sample, in dataset order.
pub fn predict(
    net: &AgcNet,
    dataset: &SlidingWindowDataset,
    scale: TargetScale,
    mode: Parallelism,
) -> Result<Vec<Array2<f64>>> {
    let prepared = net.prepare()?;
    let chunks = map_chunks(&dataset.samples, CHUNK, mode, |chunk| {
        chunk
            .iter()
            .map(|s| prepared.forward(s.x.view()).map(|p| scale.denormalize(&p)))
            .collect::<Result<Vec<_>>>()
    });
    let mut out = Vec::with_capacity(dataset.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn evaluate(
    net: &AgcNet,
    dataset: &SlidingWindowDataset,
    scale: TargetScale,
    horizons: &[usize],
    interval_minutes: u32,
    mode: Parallelism,
) -> Result<HorizonReport> {
    let preds = predict(net, dataset, scale, mode)?;
    horizon_eval(&preds, dataset, horizons, interval_minutes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments laid out like the parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. A non-finite gradient aborts before
    /// anything is modified and names the offending parameter.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], registry: &ParamRegistry, lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape("adam", self.m.len(), (params.len(), grads.len())));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let name = registry
                .entries()
                .iter()
                .find(|e| e.range().contains(&i))
                .map_or_else(|| format!("index {i}"), |e| format!("{} (index {i})", e.name));
            return Err(Error::NonFiniteGradient(name));
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * params[i]);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index with the largest error.
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub step: f64,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.threshold)
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_error >= self.threshold).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let status = if e.max_rel_error < self.threshold { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{:<28} {:>4} checked  max rel err {:.3e}  {status}\n",
                e.name, e.checked, e.max_rel_error
            ));
        }
        out
    }
}

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
/// Default central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-6;
/// Coordinates checked per tensor (all of them for smaller tensors).
pub const GRADCHECK_PER_TENSOR: usize = 20;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn checked_indices(len: usize) -> Vec<usize> {
    if len <= GRADCHECK_PER_TENSOR {
        (0..len).collect()
    } else {
        (0..GRADCHECK_PER_TENSOR)
            .map(|j| j * (len - 1) / (GRADCHECK_PER_TENSOR - 1))
            .collect()
    }
}

/// Compare `analytic` against central differences of [`batch_loss`] with step `h`.
pub fn compare_gradients(
    net: &AgcNet,
    samples: &[&Sample],
    scale: TargetScale,
    cfg: &LossConfig,
    analytic: &[f64],
    h: f64,
) -> Result<GradCheckReport> {
    if analytic.len() != net.params().len() {
        return Err(Error::shape("gradient", net.params().len(), analytic.len()));
    }
    let mut probe = net.clone();
    let base = net.params().to_vec();
    let mut entries = Vec::new();
    for entry in net.registry().entries() {
        let mut worst = (0.0, entry.offset);
        let idx = checked_indices(entry.len());
        for &j in &idx {
            let i = entry.offset + j;
            probe.params_mut()[i] = base[i] + h;
            let up = batch_loss(&probe, samples, scale, cfg)?;
            probe.params_mut()[i] = base[i] - h;
            let down = batch_loss(&probe, samples, scale, cfg)?;
            probe.params_mut()[i] = base[i];
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            if err > worst.0 || !err.is_finite() {
                worst = (if err.is_finite() { err } else { f64::INFINITY }, i);
            }
        }
        entries.push(GradCheckEntry {
            name: entry.name.clone(),
            checked: idx.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport {
        entries,
        step: h,
        threshold: GRADCHECK_THRESHOLD,
    })
}

/// Analytic gradient of the batch loss checked against central differences.
pub fn finite_difference_check(
    net: &AgcNet,
    samples: &[&Sample],
    scale: TargetScale,
    cfg: &LossConfig,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, grad) = batch_loss_and_grad(net, samples, scale, cfg, Parallelism::Sequential)?;
    compare_gradients(net, samples, scale, cfg, &grad, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub every_epochs: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    /// Seeds the shuffling stream.
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub lr_decay: Option<LrDecay>,
    pub parallelism: Parallelism,
    pub horizons: Vec<usize>,
    pub interval_minutes: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            grad_clip: None,
            lr_decay: None,
            parallelism: Parallelism::default(),
            horizons: vec![3, 6, 12],
            interval_minutes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the batch losses.
    pub train_loss: f64,
    pub val: HorizonReport,
    /// Wall-clock time; the only field that varies between identical runs.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
}

impl History {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut history = History::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let record: EpochRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            history.observe(record);
        }
        Ok(history)
    }

    fn observe(&mut self, record: EpochRecord) -> bool {
        let improved = match (record.val.overall.mae, self.best_val_mae) {
            (Some(v), Some(best)) => v < best,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            self.best_epoch = Some(record.epoch);
            self.best_val_mae = record.val.overall.mae;
        }
        self.records.push(record);
        improved
    }

    /// Records with wall-clock timings zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> History {
        let mut h = self.clone();
        for r in &mut h.records {
            r.seconds = 0.0;
        }
        h
    }
}

fn clip_global_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Train with Adam on shuffled minibatches, evaluating on `val` after every
/// epoch. The parameters with the lowest validation MAE are restored at the
/// end. A non-finite training loss aborts with [`Error::Divergence`].
pub fn fit(
    net: &mut AgcNet,
    train: &SlidingWindowDataset,
    val: &SlidingWindowDataset,
    scale: TargetScale,
    cfg: &TrainConfig,
) -> Result<History> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("training set has no windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, net.params().len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    let mut best = net.params().to_vec();
    let mut lr = cfg.adam.lr;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let (loss, mut grad) = batch_loss_and_grad(net, &batch, scale, &cfg.loss, cfg.parallelism)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, value: loss });
            }
            if let Some(max) = cfg.grad_clip {
                clip_global_norm(&mut grad, max);
            }
            let registry = net.registry().clone();
            adam.step(net.params_mut(), &grad, &registry, lr)?;
            loss_sum += loss;
            batches += 1;
        }
        let val_report = if val.is_empty() {
            horizon_eval(&[], val, &[], cfg.interval_minutes)?
        } else {
            let horizons: Vec<usize> = cfg.horizons.iter().copied().filter(|&h| h <= val.horizon).collect();
            evaluate(net, val, scale, &horizons, cfg.interval_minutes, cfg.parallelism)?
        };
        if let Some(v) = val_report.overall.mae.filter(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch, value: v });
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val: val_report,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5} val MAE {}",
            record.train_loss,
            record.val.overall.mae.map_or("n/a".into(), |v| format!("{v:.5}"))
        );
        if history.observe(record) {
            best.copy_from_slice(net.params());
        }
        if let Some(decay) = cfg.lr_decay {
            if decay.every_epochs > 0 && epoch % decay.every_epochs == 0 {
                lr *= decay.factor;
            }
        }
    }
    if history.best_epoch.is_some() {
        net.set_params(&best)?;
    }
    Ok(history)
}

/// The small gradient-check instance: N=5, H=4, P=2, K=2, d_h=3, three samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TinyInstance {
    pub mixing: MixingMode,
    pub shift: bool,
    pub kernel: KernelKind,
    pub layers: usize,
    pub seed: u64,
}

impl Default for TinyInstance {
    fn default() -> Self {
        Self {
            mixing: MixingMode::Attention,
            shift: true,
            kernel: KernelKind::Wavelet,
            layers: 1,
            seed: 11,
        }
    }
}

pub fn tiny_model_config(spec: &TinyInstance) -> ModelConfig {
    ModelConfig {
        nodes: 5,
        in_channels: 1,
        horizon: 2,
        scales: 2,
        layers: spec.layers,
        enc_channels: 3,
        hidden: 3,
        attn_dim: 4,
        mixing: spec.mixing,
        kernel: spec.kernel,
        shift_rank: spec.shift.then_some(2),
        alpha: 0.5,
        scale_init: (0.3, 1.5),
    }
}

/// Random graph, random inputs and targets, and parameters redrawn at O(1)
/// scale so that every gradient entry is well above finite-difference noise.
/// Pair with [`tiny_loss_config`] and [`tiny_target_scale`].
pub fn tiny_instance(spec: &TinyInstance) -> Result<(AgcNet, Vec<Sample>)> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let graph = crate::graph::generators::random_connected(5, 0.4, &mut rng);
    let ctx = std::sync::Arc::new(GraphContext::new(graph)?);
    let mut net = AgcNet::new(tiny_model_config(spec), ctx, &mut rng)?;
    let registry = net.registry().clone();
    let p = net.params_mut();
    for e in registry.entries() {
        let bound = if e.name == "scales.raw" { 0.5 } else { 0.8 };
        for v in &mut p[e.range()] {
            *v = rng.random_range(-bound..bound);
        }
    }
    let samples = (0..3)
        .map(|_| Sample {
            x: ndarray::Array3::from_shape_fn((4, 5, 1), |_| rng.random_range(-1.0..1.0)),
            y: Array2::from_shape_fn((5, 2), |_| rng.random_range(-2.0..2.0)),
            last: ndarray::Array1::zeros(5),
            target_start: 0,
        })
        .collect();
    Ok((net, samples))
}

/// Loss settings for the tiny instance: a penalty weight large enough that
/// its gradient is visible.
pub fn tiny_loss_config() -> LossConfig {
    LossConfig {
        frobenius_weight: 0.1,
        mask_value: MASK_VALUE,
    }
}

pub fn tiny_target_scale() -> TargetScale {
    TargetScale { mean: 0.3, std: 1.7 }
}
