//! End-to-end runs: data preparation, model construction, training,
//! evaluation against persistence, and ablation sweeps.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SynthGraph};
use crate::data::{
    chronological_split, make_windows, synth_diffusion, zscore_fit, DataDir, Metadata, NormalizationStats,
    SignalTable, SlidingWindowDataset, Split, ADJACENCY_FILE, METADATA_FILE, SIGNALS_FILE,
};
use crate::error::{Error, Result};
use crate::graph::{generators, RoadGraph};
use crate::metrics::{persistence_baseline, HorizonReport};
use crate::model::{AgcNet, GraphContext, KernelKind, MixingMode};
use crate::training::{evaluate, fit, History, TargetScale};

/// Graph and signals of the synthetic benchmark described by `cfg`.
pub fn synth_data(cfg: &RunConfig) -> Result<DataDir> {
    let n = cfg.synth_nodes;
    let graph = match cfg.synth_graph {
        SynthGraph::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.synth_seed);
            generators::random_connected(n, cfg.synth_edge_prob, &mut rng)
        }
        SynthGraph::Cycle if n >= 3 => generators::cycle(n),
        SynthGraph::Path if n >= 2 => generators::path(n),
        _ => return Err(Error::Config(format!("synth graph {:?} needs more than {n} nodes", cfg.synth_graph))),
    };
    let mut table = synth_diffusion(&graph, cfg.synth_steps, cfg.synth_seed);
    table.interval_minutes = cfg.synth_interval_minutes;
    let metadata = Metadata {
        interval_minutes: cfg.synth_interval_minutes,
        start_timestamp: table.start_timestamp.clone(),
        target_condition: table.condition.clone(),
        conditions: vec![table.condition.clone()],
    };
    Ok(DataDir {
        graph,
        table,
        metadata,
    })
}

/// Write a data directory readable by [`crate::data::load_data_dir`].
pub fn write_data_dir(dir: &Path, data: &DataDir) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    data.graph.write_edge_list(&dir.join(ADJACENCY_FILE))?;
    data.table.write_csv(&dir.join(SIGNALS_FILE))?;
    let meta = dir.join(METADATA_FILE);
    fs::write(&meta, data.metadata.to_text()).map_err(|e| Error::io(meta, e))
}

/// Normalized splits and the graph context for one run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub context: Arc<GraphContext>,
    pub train: SlidingWindowDataset,
    pub val: SlidingWindowDataset,
    pub test: SlidingWindowDataset,
    pub stats: NormalizationStats,
    pub interval_minutes: u32,
}

impl PreparedData {
    pub fn scale(&self) -> TargetScale {
        TargetScale::from_stats(&self.stats)
    }

    pub fn channels(&self) -> usize {
        self.train.channels()
    }
}

pub fn prepare_data(graph: RoadGraph, table: &SignalTable, cfg: &RunConfig) -> Result<PreparedData> {
    prepare_data_with(graph, table, cfg, None)
}

/// As [`prepare_data`], normalizing with `stats` when given (e.g. the
/// statistics stored in a checkpoint) instead of refitting on the train split.
pub fn prepare_data_with(
    graph: RoadGraph,
    table: &SignalTable,
    cfg: &RunConfig,
    stats: Option<&NormalizationStats>,
) -> Result<PreparedData> {
    if graph.node_count() != table.node_count() {
        return Err(Error::Data(format!(
            "adjacency has {} nodes, signals have {} sensors",
            graph.node_count(),
            table.node_count()
        )));
    }
    let periodic = cfg.periodic_config();
    let min_len = cfg.history + cfg.horizon + periodic.max_lag();
    let [tr, va, te] = chronological_split(table, cfg.split, min_len)?;
    let stats = match stats {
        Some(s) if s.mean.len() != tr.condition_count() => {
            return Err(Error::shape("normalization stats", tr.condition_count(), s.mean.len()))
        }
        Some(s) => s.clone(),
        None => zscore_fit(&tr),
    };
    let mut train = make_windows(&tr, cfg.history, cfg.horizon, &periodic, Split::Train)?;
    let mut val = make_windows(&va, cfg.history, cfg.horizon, &periodic, Split::Val)?;
    let mut test = make_windows(&te, cfg.history, cfg.horizon, &periodic, Split::Test)?;
    for ds in [&mut train, &mut val, &mut test] {
        ds.normalize(&stats)?;
    }
    Ok(PreparedData {
        context: Arc::new(GraphContext::new(graph)?),
        train,
        val,
        test,
        stats,
        interval_minutes: table.interval_minutes,
    })
}

/// Fresh network with parameters drawn from a stream derived from `cfg.seed`.
pub fn build_net(cfg: &RunConfig, data: &PreparedData) -> Result<AgcNet> {
    let model_cfg = cfg.model_config(data.context.node_count(), data.channels())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // keep initialization apart from the shuffling stream, which uses stream 0
    rng.set_stream(1);
    AgcNet::new(model_cfg, data.context.clone(), &mut rng)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub net: AgcNet,
    pub initial_params: Vec<f64>,
    pub history: History,
    pub test: HorizonReport,
    pub persistence: HorizonReport,
}

impl RunOutcome {
    /// Pooled test MAE of the model, or infinity when every target is masked.
    pub fn test_mae(&self) -> f64 {
        self.test.overall.mae.unwrap_or(f64::INFINITY)
    }
}

/// Train on the prepared data and score the selected parameters on the test split.
pub fn run_experiment(cfg: &RunConfig, data: &PreparedData) -> Result<RunOutcome> {
    run_experiment_from(cfg, data, None)
}

/// As [`run_experiment`], optionally starting from stored parameters.
pub fn run_experiment_from(cfg: &RunConfig, data: &PreparedData, start: Option<&Checkpoint>) -> Result<RunOutcome> {
    let mut net = build_net(cfg, data)?;
    if let Some(ck) = start {
        if !ck.config()?.architecture_matches(cfg) {
            return Err(Error::Checkpoint("checkpoint configuration differs from this run".into()));
        }
        ck.restore_into(&mut net)?;
    }
    let initial_params = net.params().to_vec();
    let train_cfg = cfg.train_config(data.interval_minutes);
    let history = fit(&mut net, &data.train, &data.val, data.scale(), &train_cfg)?;
    let horizons: Vec<usize> = cfg.eval_horizons.clone();
    let test = evaluate(&net, &data.test, data.scale(), &horizons, data.interval_minutes, cfg.parallelism)?;
    let persistence = persistence_baseline(&data.test, &horizons, data.interval_minutes)?;
    Ok(RunOutcome {
        net,
        initial_params,
        history,
        test,
        persistence,
    })
}

/// One row of an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub label: String,
    pub mode: MixingMode,
    pub shift: bool,
    pub periodic: bool,
    pub kernel: KernelKind,
}

impl AblationSetting {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            mode: self.mode,
            shift: self.shift,
            periodic: self.periodic,
            kernel: self.kernel,
            ..base.clone()
        }
    }
}

/// Settings (c) weighted, (d) attention, (e) attention with the shifted
/// kernel; optionally the adjacency-kernel variants and periodic channels.
pub fn ablation_settings(with_adjacency: bool, with_periodic: bool) -> Vec<AblationSetting> {
    let mut rows = Vec::new();
    let wavelet = |label: &str, mode, shift| AblationSetting {
        label: label.into(),
        mode,
        shift,
        periodic: false,
        kernel: KernelKind::Wavelet,
    };
    if with_adjacency {
        rows.push(AblationSetting {
            label: "(a) adjacency kernel".into(),
            mode: MixingMode::Weighted,
            shift: false,
            periodic: false,
            kernel: KernelKind::Adjacency,
        });
        if with_periodic {
            rows.push(AblationSetting {
                label: "(b) adjacency kernel + periodic".into(),
                mode: MixingMode::Weighted,
                shift: false,
                periodic: true,
                kernel: KernelKind::Adjacency,
            });
        }
    }
    rows.push(wavelet("(c) wavelets, weighted", MixingMode::Weighted, false));
    rows.push(wavelet("(d) wavelets, attention", MixingMode::Attention, false));
    rows.push(wavelet("(e) attention + shifted kernel", MixingMode::Attention, true));
    if with_periodic {
        let mut p = wavelet("(e) + periodic", MixingMode::Attention, true);
        p.periodic = true;
        rows.push(p);
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: AblationSetting,
    /// One entry per seed, in seed order.
    pub seeds: Vec<u64>,
    pub test_mae: Vec<f64>,
    pub reports: Vec<HorizonReport>,
}

impl AblationRow {
    pub fn mean_mae(&self) -> f64 {
        self.test_mae.iter().sum::<f64>() / self.test_mae.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub persistence: HorizonReport,
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<36} {:>6} {:>10} {:>10}\n", "setting", "runs", "mean MAE", "std");
        for row in &self.rows {
            let m = row.mean_mae();
            let sd = if row.test_mae.len() > 1 {
                (row.test_mae.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (row.test_mae.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            out.push_str(&format!(
                "{:<36} {:>6} {:>10.5} {:>10.5}\n",
                row.setting.label,
                row.test_mae.len(),
                m,
                sd
            ));
        }
        if let Some(p) = self.persistence.overall.mae {
            out.push_str(&format!("{:<36} {:>6} {:>10.5}\n", "persistence", "-", p));
        }
        out
    }
}

/// Run every setting for every seed on shared data. `prepare` is called once
/// per distinct periodic flag since periodic channels change the windows.
pub fn run_ablation(
    base: &RunConfig,
    table: &SignalTable,
    graph: &RoadGraph,
    settings: &[AblationSetting],
    seeds: &[u64],
) -> Result<AblationReport> {
    let plain = prepare_data(graph.clone(), table, &RunConfig { periodic: false, ..base.clone() })?;
    let periodic = if settings.iter().any(|s| s.periodic) {
        Some(prepare_data(graph.clone(), table, &RunConfig { periodic: true, ..base.clone() })?)
    } else {
        None
    };
    let persistence = persistence_baseline(&plain.test, &base.eval_horizons, plain.interval_minutes)?;
    let mut rows = Vec::new();
    for setting in settings {
        let data = if setting.periodic { periodic.as_ref().expect("prepared") } else { &plain };
        let mut row = AblationRow {
            setting: setting.clone(),
            seeds: Vec::new(),
            test_mae: Vec::new(),
            reports: Vec::new(),
        };
        for &seed in seeds {
            let cfg = RunConfig { seed, ..setting.apply(base) };
            let outcome = run_experiment(&cfg, data)?;
            log::info!("{} seed {seed}: test MAE {:.5}", setting.label, outcome.test_mae());
            row.seeds.push(seed);
            row.test_mae.push(outcome.test_mae());
            row.reports.push(outcome.test);
        }
        rows.push(row);
    }
    Ok(AblationReport { rows, persistence })
}
