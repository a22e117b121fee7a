//! Sensor signal ingest, chronological splits, z-score normalization,
//! sliding windows and the synthetic diffusion benchmark.
//!
//! Raw values of exactly `0.0` mark missing readings. They are skipped when
//! fitting normalization statistics, left untouched by normalization and
//! excluded from every masked metric.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand_mt::Mt64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalized_laplacian, RoadGraph};

/// Missing-value sentinel in raw units.
pub const MASK_VALUE: f64 = 0.0;

pub const SIGNALS_FILE: &str = "signals.csv";
pub const METADATA_FILE: &str = "metadata.txt";
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const NODE_IDS_FILE: &str = "node_ids.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct SignalTable {
    /// `T × N` readings of the target condition.
    pub values: Array2<f64>,
    /// Additional conditions, each `T × N`, in file order.
    pub covariates: Vec<(String, Array2<f64>)>,
    pub interval_minutes: u32,
    pub start_timestamp: String,
    pub sensor_ids: Vec<String>,
    pub condition: String,
}

impl SignalTable {
    pub fn new(values: Array2<f64>, sensor_ids: Vec<String>) -> Result<Self> {
        if values.ncols() != sensor_ids.len() {
            return Err(Error::shape("sensor ids", values.ncols(), sensor_ids.len()));
        }
        Ok(Self {
            values,
            covariates: Vec::new(),
            interval_minutes: 5,
            start_timestamp: String::new(),
            sensor_ids,
            condition: "flow".into(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn node_count(&self) -> usize {
        self.values.ncols()
    }

    /// Number of conditions (target plus covariates).
    pub fn condition_count(&self) -> usize {
        1 + self.covariates.len()
    }

    fn condition(&self, c: usize) -> &Array2<f64> {
        if c == 0 {
            &self.values
        } else {
            &self.covariates[c - 1].1
        }
    }

    fn rows(&self, start: usize, end: usize) -> SignalTable {
        SignalTable {
            values: self.values.slice(s![start..end, ..]).to_owned(),
            covariates: self
                .covariates
                .iter()
                .map(|(n, m)| (n.clone(), m.slice(s![start..end, ..]).to_owned()))
                .collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> SignalTable {
        SignalTable {
            values: Array2::zeros((0, 0)),
            covariates: Vec::new(),
            interval_minutes: self.interval_minutes,
            start_timestamp: self.start_timestamp.clone(),
            sensor_ids: self.sensor_ids.clone(),
            condition: self.condition.clone(),
        }
    }

    /// Reorder columns so column `i` holds sensor `order[i]`.
    pub fn reorder_to(&self, order: &[String]) -> Result<SignalTable> {
        if order.len() != self.node_count() {
            return Err(Error::Data(format!(
                "node id list has {} entries, signals have {} sensors",
                order.len(),
                self.node_count()
            )));
        }
        let lookup: HashMap<&str, usize> = self
            .sensor_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let cols = order
            .iter()
            .map(|id| {
                lookup
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("sensor `{id}` not present in signals")))
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok(SignalTable {
            values: self.values.select(Axis(1), &cols),
            covariates: self
                .covariates
                .iter()
                .map(|(n, m)| (n.clone(), m.select(Axis(1), &cols)))
                .collect(),
            sensor_ids: order.to_vec(),
            ..self.clone_meta()
        })
    }

    /// Write the signals CSV (header of sensor ids, repeated per condition).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let mut header: Vec<&str> = Vec::new();
        for _ in 0..self.condition_count() {
            header.extend(self.sensor_ids.iter().map(String::as_str));
        }
        out.push_str(&header.join(","));
        out.push('\n');
        for t in 0..self.len() {
            let mut cells: Vec<String> = Vec::with_capacity(header.len());
            for c in 0..self.condition_count() {
                cells.extend(self.condition(c).row(t).iter().map(|v| format!("{v:?}")));
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Contents of the `key: value` metadata file.
#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub interval_minutes: u32,
    pub start_timestamp: String,
    pub target_condition: String,
    /// Condition names in column-block order; defaults to the target alone.
    pub conditions: Vec<String>,
}

impl Default for Metadata {
    fn default() -> Self {
        Self {
            interval_minutes: 5,
            start_timestamp: String::new(),
            target_condition: "flow".into(),
            conditions: vec!["flow".into()],
        }
    }
}

impl Metadata {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut meta = Metadata::default();
        let mut conditions: Option<Vec<String>> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| err(format!("expected `key: value`, got `{line}`")))?;
            let value = value.trim();
            match key.trim() {
                "interval_minutes" => {
                    meta.interval_minutes = value
                        .parse()
                        .map_err(|e| err(format!("interval_minutes: {e}")))?;
                    if meta.interval_minutes == 0 {
                        return Err(err("interval_minutes must be positive".into()));
                    }
                }
                "start_timestamp" => meta.start_timestamp = value.to_string(),
                "target_condition" => meta.target_condition = value.to_string(),
                "conditions" => {
                    conditions = Some(value.split(',').map(|c| c.trim().to_string()).collect())
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        meta.conditions = conditions.unwrap_or_else(|| vec![meta.target_condition.clone()]);
        if !meta.conditions.contains(&meta.target_condition) {
            return Err(Error::Data(format!(
                "target condition `{}` not among conditions {:?}",
                meta.target_condition, meta.conditions
            )));
        }
        Ok(meta)
    }

    pub fn to_text(&self) -> String {
        format!(
            "interval_minutes: {}\nstart_timestamp: {}\ntarget_condition: {}\nconditions: {}\n",
            self.interval_minutes,
            self.start_timestamp,
            self.target_condition,
            self.conditions.join(",")
        )
    }
}

/// Parse a signals CSV. A sensor id that appears `c` times in the header
/// contributes one column to each of `c` conditions, in order of appearance.
pub fn load_signals(path: &Path) -> Result<SignalTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_signals(&text, path)
}

pub(crate) fn parse_signals(text: &str, path: &Path) -> Result<SignalTable> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty signals file", path.display())))?;
    let header: Vec<String> = header.split(',').map(|h| h.trim().to_string()).collect();

    // block index of every column
    let mut occurrences: HashMap<&str, usize> = HashMap::new();
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    for (col, id) in header.iter().enumerate() {
        let occ = occurrences.entry(id.as_str()).or_insert(0);
        if *occ == 0 {
            ids.push(id.clone());
        }
        if blocks.len() <= *occ {
            blocks.push(Vec::new());
        }
        blocks[*occ].push(col);
        *occ += 1;
    }
    for (b, cols) in blocks.iter().enumerate() {
        let names: Vec<&str> = cols.iter().map(|&c| header[c].as_str()).collect();
        if names != ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Data(format!(
                "{}: condition block {b} does not list every sensor once in header order",
                path.display()
            )));
        }
    }

    let mut rows: Vec<f64> = Vec::new();
    let mut t = 0usize;
    for (lineno, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("ragged row: {} cells, header has {}", cells.len(), header.len()),
            });
        }
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("column {} (`{}`): non-numeric cell `{}`", col + 1, header[col], cell.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("column {} (`{}`): non-finite value `{}`", col + 1, header[col], cell.trim()),
                });
            }
            rows.push(v);
        }
        t += 1;
    }
    if t == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let full = Array2::from_shape_vec((t, header.len()), rows).expect("rectangular rows");
    let mut conditions: Vec<Array2<f64>> = blocks.iter().map(|cols| full.select(Axis(1), cols)).collect();
    let values = conditions.remove(0);
    let mut table = SignalTable::new(values, ids)?;
    table.covariates = conditions
        .into_iter()
        .enumerate()
        .map(|(i, m)| (format!("condition{}", i + 1), m))
        .collect();
    Ok(table)
}

/// A prepared data directory: graph, metadata-annotated signals aligned to
/// graph node order.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub graph: RoadGraph,
    pub table: SignalTable,
    pub metadata: Metadata,
}

/// Load `adjacency.csv`, `signals.csv`, `metadata.txt` and the optional
/// `node_ids.txt` (line `i` names the sensor of graph node `i`).
pub fn load_data_dir(dir: &Path) -> Result<DataDir> {
    let meta_path = dir.join(METADATA_FILE);
    let metadata = match fs::read_to_string(&meta_path) {
        Ok(text) => Metadata::parse(&text, &meta_path)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Metadata::default(),
        Err(e) => return Err(Error::io(meta_path, e)),
    };
    let mut table = load_signals(&dir.join(SIGNALS_FILE))?;
    if table.condition_count() != metadata.conditions.len() {
        return Err(Error::Data(format!(
            "signals carry {} condition blocks, metadata lists {}",
            table.condition_count(),
            metadata.conditions.len()
        )));
    }
    // name the blocks and move the target to the front
    let mut blocks: Vec<(String, Array2<f64>)> = std::iter::once(table.values.clone())
        .chain(table.covariates.drain(..).map(|(_, m)| m))
        .zip(metadata.conditions.iter().cloned())
        .map(|(m, n)| (n, m))
        .collect();
    let target = blocks
        .iter()
        .position(|(n, _)| *n == metadata.target_condition)
        .expect("validated target condition");
    let (name, values) = blocks.remove(target);
    table.values = values;
    table.condition = name;
    table.covariates = blocks;
    table.interval_minutes = metadata.interval_minutes;
    table.start_timestamp = metadata.start_timestamp.clone();

    let ids_path = dir.join(NODE_IDS_FILE);
    if ids_path.exists() {
        let text = fs::read_to_string(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let order: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        table = table.reorder_to(&order)?;
    }
    let graph = crate::graph::load_edge_list(&dir.join(ADJACENCY_FILE), Some(table.node_count()))?;
    if graph.node_count() != table.node_count() {
        return Err(Error::Data(format!(
            "adjacency has {} nodes, signals have {} sensors",
            graph.node_count(),
            table.node_count()
        )));
    }
    Ok(DataDir {
        graph,
        table,
        metadata,
    })
}

/// Contiguous split with lengths `⌊f0·T⌋`, `⌊f1·T⌋` and the remainder. Every
/// part must hold at least `min_len` steps.
pub fn chronological_split(
    table: &SignalTable,
    fractions: [f64; 3],
    min_len: usize,
) -> Result<[SignalTable; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let t = table.len();
    let n_train = (fractions[0] * t as f64 + 1e-9).floor() as usize;
    let n_val = (fractions[1] * t as f64 + 1e-9).floor() as usize;
    let n_test = t - n_train - n_val;
    for (name, len) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if len < min_len {
            return Err(Error::Data(format!(
                "{name} split has {len} steps, need at least {min_len}"
            )));
        }
    }
    Ok([
        table.rows(0, n_train),
        table.rows(n_train, n_train + n_val),
        table.rows(n_train + n_val, t),
    ])
}

/// Per-condition mean and standard deviation over unmasked entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

fn fit_column(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let kept: Vec<f64> = values.filter(|&v| v != MASK_VALUE).collect();
    if kept.is_empty() {
        log::warn!("condition has no unmasked entries; using mean 0, std 1");
        return (0.0, 1.0);
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 0.0 {
        (mean, std)
    } else {
        log::warn!("constant condition (mean {mean}); falling back to std 1");
        (mean, 1.0)
    }
}

/// Fit statistics on a (training) table, one entry per condition.
pub fn zscore_fit(train: &SignalTable) -> NormalizationStats {
    let (mean, std) = (0..train.condition_count())
        .map(|c| fit_column(train.condition(c).iter().copied()))
        .unzip();
    NormalizationStats { mean, std }
}

/// `(x - μ)/σ` for unmasked entries; masked entries stay at the sentinel.
pub fn zscore_apply(x: f64, mean: f64, std: f64) -> f64 {
    if x == MASK_VALUE {
        x
    } else {
        (x - mean) / std
    }
}

pub fn zscore_invert(z: f64, mean: f64, std: f64) -> f64 {
    z * std + mean
}

/// Apply to a whole matrix of one condition.
pub fn zscore_apply_matrix(x: ArrayView2<f64>, mean: f64, std: f64) -> Array2<f64> {
    x.mapv(|v| zscore_apply(v, mean, std))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Lagged copies of the target appended as extra channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodicConfig {
    pub enabled: bool,
    pub daily_period_steps: usize,
    pub weekly_period_steps: usize,
}

impl Default for PeriodicConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            daily_period_steps: 288,
            weekly_period_steps: 2016,
        }
    }
}

impl PeriodicConfig {
    pub fn lags(&self) -> Vec<usize> {
        if self.enabled {
            vec![self.daily_period_steps, self.weekly_period_steps]
        } else {
            Vec::new()
        }
    }

    pub fn max_lag(&self) -> usize {
        self.lags().into_iter().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `H × N × C` inputs (normalized once [`SlidingWindowDataset::normalize`] ran).
    pub x: Array3<f64>,
    /// `N × P` raw targets.
    pub y: Array2<f64>,
    /// Raw last observation of the target per node.
    pub last: Array1<f64>,
    /// Row of the first forecast step within the split.
    pub target_start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidingWindowDataset {
    pub samples: Vec<Sample>,
    pub history: usize,
    pub horizon: usize,
    pub split: Split,
    /// Condition whose statistics normalize each channel.
    pub channel_condition: Vec<usize>,
    pub normalized: bool,
}

impl SlidingWindowDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_condition.len()
    }

    pub fn node_count(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.shape()[1])
    }

    /// Normalize inputs in place with training statistics.
    pub fn normalize(&mut self, stats: &NormalizationStats) -> Result<()> {
        if self.normalized {
            return Err(Error::Data("dataset already normalized".into()));
        }
        for (c, &cond) in self.channel_condition.iter().enumerate() {
            if cond >= stats.mean.len() {
                return Err(Error::shape("normalization stats", cond + 1, stats.mean.len()));
            }
            let (m, sd) = (stats.mean[cond], stats.std[cond]);
            for sample in &mut self.samples {
                sample
                    .x
                    .index_axis_mut(Axis(2), c)
                    .mapv_inplace(|v| zscore_apply(v, m, sd));
            }
        }
        self.normalized = true;
        Ok(())
    }
}

/// Cut `(H past, P future)` windows. Sample `i` reads inputs from rows
/// `i..i+H` and targets from rows `i+H..i+H+P`. With periodic channels
/// enabled, channel entries at window step `j` hold the target at row
/// `i + j - lag`, and windows whose earliest lagged row precedes the split are
/// dropped.
pub fn make_windows(
    table: &SignalTable,
    history: usize,
    horizon: usize,
    periodic: &PeriodicConfig,
    split: Split,
) -> Result<SlidingWindowDataset> {
    if history == 0 || horizon == 0 {
        return Err(Error::Config("history and horizon must be positive".into()));
    }
    let lags = periodic.lags();
    if lags.contains(&0) {
        return Err(Error::Config("periodic lags must be positive".into()));
    }
    let max_lag = periodic.max_lag();
    let t = table.len();
    if t < history + horizon + max_lag {
        return Err(Error::Data(format!(
            "split of {t} steps too short for H={history}, P={horizon} and lookback {max_lag}"
        )));
    }
    let n = table.node_count();
    let mut channel_condition: Vec<usize> = (0..table.condition_count()).collect();
    channel_condition.extend(lags.iter().map(|_| 0));
    let c = channel_condition.len();

    let samples = (max_lag..=t - history - horizon)
        .map(|i| {
            let mut x = Array3::<f64>::zeros((history, n, c));
            for cond in 0..table.condition_count() {
                x.slice_mut(s![.., .., cond])
                    .assign(&table.condition(cond).slice(s![i..i + history, ..]));
            }
            for (li, &lag) in lags.iter().enumerate() {
                x.slice_mut(s![.., .., table.condition_count() + li])
                    .assign(&table.values.slice(s![i - lag..i - lag + history, ..]));
            }
            let y = table
                .values
                .slice(s![i + history..i + history + horizon, ..])
                .t()
                .to_owned();
            let last = table.values.row(i + history - 1).to_owned();
            Sample {
                x,
                y,
                last,
                target_start: i + history,
            }
        })
        .collect();

    Ok(SlidingWindowDataset {
        samples,
        history,
        horizon,
        split,
        channel_condition,
        normalized: false,
    })
}

/// Knobs of the synthetic diffusion generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub diffusion_rate: f64,
    pub forcing_amplitude: f64,
    pub forcing_period: f64,
    pub noise_std: f64,
    /// `None` draws `x_0` uniform on `[0, 1)`; `Some(v)` starts every node at `v`.
    pub initial_value: Option<f64>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            diffusion_rate: 0.1,
            forcing_amplitude: 0.05,
            forcing_period: 24.0,
            noise_std: 0.01,
            initial_value: None,
        }
    }
}

/// Uniform `[0, 1)` with 53 bits: `(next_u64 >> 11) * 2^-53`.
fn mt_unit(rng: &mut Mt64) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Box-Muller pairs from a 64-bit Mersenne Twister stream.
struct GaussianStream {
    rng: Mt64,
    spare: Option<f64>,
}

impl GaussianStream {
    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - mt_unit(&mut self.rng);
        let u2 = mt_unit(&mut self.rng);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Synthetic diffusion series on `graph`:
/// `x_{t+1} = x_t - 0.1 L' x_t + 0.05 sin(2πt/24) 1 + ε_t`, `ε ~ N(0, 0.01²)`.
pub fn synth_diffusion(graph: &RoadGraph, steps: usize, seed: u64) -> SignalTable {
    synth_diffusion_with(graph, steps, seed, &SynthParams::default())
}

/// The generator with explicit parameters. The random stream is MT19937-64
/// seeded with `seed`: first `N` uniforms give `x_0` (when random), then
/// each step draws `N` standard normals, node by node, via Box-Muller
/// (`cos` branch first, `sin` branch kept for the next draw).
pub fn synth_diffusion_with(
    graph: &RoadGraph,
    steps: usize,
    seed: u64,
    params: &SynthParams,
) -> SignalTable {
    let n = graph.node_count();
    let lap = normalized_laplacian(graph);
    let mut rng = Mt64::new(seed);
    let mut x: Vec<f64> = match params.initial_value {
        Some(v) => vec![v; n],
        None => (0..n).map(|_| mt_unit(&mut rng)).collect(),
    };
    let mut noise = GaussianStream { rng, spare: None };
    let mut values = Array2::<f64>::zeros((steps, n));
    for t in 0..steps {
        values.row_mut(t).assign(&Array1::from(x.clone()));
        if t + 1 == steps {
            break;
        }
        let forcing = params.forcing_amplitude * (2.0 * PI * t as f64 / params.forcing_period).sin();
        let mut next = vec![0.0; n];
        for i in 0..n {
            let mut lx = 0.0;
            for j in 0..n {
                lx += lap[[i, j]] * x[j];
            }
            next[i] = x[i] - params.diffusion_rate * lx + forcing + params.noise_std * noise.next();
        }
        x = next;
    }
    let ids = (0..n).map(|i| format!("s{i}")).collect();
    let mut table = SignalTable::new(values, ids).expect("ids match columns");
    table.start_timestamp = "2012-03-01T00:00:00".into();
    table
}
