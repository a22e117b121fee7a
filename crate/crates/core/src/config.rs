//! Run configuration: every hyperparameter under a flat set of TOML keys.
//! Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PeriodicConfig;
use crate::error::{Error, Result};
use crate::model::{KernelKind, MixingMode, ModelConfig};
use crate::par::Parallelism;
use crate::training::{AdamConfig, LossConfig, LrDecay, TrainConfig};

/// Graph family used by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthGraph {
    #[default]
    Random,
    Cycle,
    Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    // model
    pub scales: usize,
    pub layers: usize,
    pub enc_channels: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub mode: MixingMode,
    pub kernel: KernelKind,
    pub shift: bool,
    pub shift_rank: usize,
    pub alpha: f64,
    pub scale_init_min: f64,
    pub scale_init_max: f64,

    // data
    pub history: usize,
    pub horizon: usize,
    pub periodic: bool,
    pub daily_period_steps: usize,
    pub weekly_period_steps: usize,
    pub split: [f64; 3],
    pub eval_horizons: Vec<usize>,

    // training
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub frobenius_weight: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: Option<f64>,
    pub lr_decay_every: Option<usize>,
    pub lr_decay_factor: f64,
    pub parallelism: Parallelism,

    // synthetic data
    pub synth_nodes: usize,
    pub synth_steps: usize,
    pub synth_graph: SynthGraph,
    pub synth_edge_prob: f64,
    pub synth_interval_minutes: u32,
    /// Seeds graph and signal generation independently of `seed`.
    pub synth_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scales: 8,
            layers: 2,
            enc_channels: 32,
            hidden: 64,
            attn_dim: 16,
            mode: MixingMode::Attention,
            kernel: KernelKind::Wavelet,
            shift: true,
            shift_rank: 30,
            alpha: 0.01,
            scale_init_min: 0.1,
            scale_init_max: 2.0,
            history: 12,
            horizon: 12,
            periodic: false,
            daily_period_steps: 288,
            weekly_period_steps: 2016,
            split: [0.7, 0.1, 0.2],
            eval_horizons: vec![3, 6, 12],
            lr: 0.002,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            frobenius_weight: 1e-4,
            batch_size: 128,
            epochs: 200,
            grad_clip: None,
            lr_decay_every: None,
            lr_decay_factor: 0.5,
            parallelism: Parallelism::default(),
            synth_nodes: 15,
            synth_steps: 2000,
            synth_graph: SynthGraph::Random,
            synth_edge_prob: 0.15,
            synth_interval_minutes: 5,
            synth_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("scales", self.scales),
            ("layers", self.layers),
            ("enc_channels", self.enc_channels),
            ("hidden", self.hidden),
            ("attn_dim", self.attn_dim),
            ("shift_rank", self.shift_rank),
            ("history", self.history),
            ("horizon", self.horizon),
            ("batch_size", self.batch_size),
            ("synth_nodes", self.synth_nodes),
            ("synth_steps", self.synth_steps),
            ("synth_interval_minutes", self.synth_interval_minutes as usize),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.periodic && (self.daily_period_steps == 0 || self.weekly_period_steps == 0) {
            return Err(Error::Config("periodic lags must be positive".into()));
        }
        let nonneg = [
            ("alpha", self.alpha),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("frobenius_weight", self.frobenius_weight),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps must be positive".into()));
        }
        if !(self.scale_init_min > 0.0 && self.scale_init_max >= self.scale_init_min) {
            return Err(Error::Config("scale_init_min must be positive and not above scale_init_max".into()));
        }
        if self.split.iter().any(|f| !(*f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split {:?} must be nonnegative and sum to 1", self.split)));
        }
        if let Some(&h) = self.eval_horizons.iter().find(|&&h| h == 0 || h > self.horizon) {
            return Err(Error::Config(format!("eval horizon {h} outside 1..={}", self.horizon)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if self.lr_decay_every == Some(0) || !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("lr decay needs a positive period and factor".into()));
        }
        if !(0.0..=1.0).contains(&self.synth_edge_prob) {
            return Err(Error::Config("synth_edge_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn periodic_config(&self) -> PeriodicConfig {
        PeriodicConfig {
            enabled: self.periodic,
            daily_period_steps: self.daily_period_steps,
            weekly_period_steps: self.weekly_period_steps,
        }
    }

    /// Model configuration for a graph with `nodes` nodes and `in_channels`
    /// input channels. The shift rank must not exceed `nodes`.
    pub fn model_config(&self, nodes: usize, in_channels: usize) -> Result<ModelConfig> {
        if self.shift && self.shift_rank > nodes {
            return Err(Error::Config(format!(
                "shift_rank {} exceeds node count {nodes}",
                self.shift_rank
            )));
        }
        let cfg = ModelConfig {
            nodes,
            in_channels,
            horizon: self.horizon,
            scales: self.scales,
            layers: self.layers,
            enc_channels: self.enc_channels,
            hidden: self.hidden,
            attn_dim: self.attn_dim,
            mixing: self.mode,
            kernel: self.kernel,
            shift_rank: self.shift.then_some(self.shift_rank),
            alpha: self.alpha,
            scale_init: (self.scale_init_min, self.scale_init_max),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            // the penalty only exists alongside the shifted kernel
            frobenius_weight: if self.shift { self.frobenius_weight } else { 0.0 },
            ..LossConfig::default()
        }
    }

    pub fn train_config(&self, interval_minutes: u32) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            loss: self.loss_config(),
            seed: self.seed,
            grad_clip: self.grad_clip,
            lr_decay: self.lr_decay_every.map(|every| LrDecay {
                every_epochs: every,
                factor: self.lr_decay_factor,
            }),
            parallelism: self.parallelism,
            horizons: self.eval_horizons.clone(),
            interval_minutes,
        }
    }

    /// Fields that must agree for a checkpoint to be reused by this run.
    pub fn architecture_matches(&self, other: &RunConfig) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        // training-only knobs may differ
        for c in [&mut a, &mut b] {
            c.epochs = 0;
            c.lr = 0.0;
            c.lr_decay_every = None;
            c.lr_decay_factor = 0.5;
            c.grad_clip = None;
            c.parallelism = Parallelism::Sequential;
            c.eval_horizons.clear();
        }
        a == b
    }
}
