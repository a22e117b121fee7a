//! Masked error metrics, per-horizon reports, the persistence baseline and
//! Welch's t-test.

use std::fmt::Write as _;

use ndarray::{ArrayView, Dimension};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{SlidingWindowDataset, MASK_VALUE};
use crate::error::{Error, Result};

/// Targets with magnitude below this are left out of MAPE.
pub const MAPE_EPS: f64 = 1e-4;

/// Running sums for masked MAE / RMSE / MAPE.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricAccumulator {
    abs_sum: f64,
    sq_sum: f64,
    ape_sum: f64,
    count: usize,
    mape_count: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, pred: f64, target: f64) {
        if target == MASK_VALUE {
            return;
        }
        let e = pred - target;
        self.abs_sum += e.abs();
        self.sq_sum += e * e;
        self.count += 1;
        if target.abs() >= MAPE_EPS {
            self.ape_sum += (e / target).abs();
            self.mape_count += 1;
        }
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.abs_sum += other.abs_sum;
        self.sq_sum += other.sq_sum;
        self.ape_sum += other.ape_sum;
        self.count += other.count;
        self.mape_count += other.mape_count;
    }

    pub fn finish(&self) -> Metrics {
        let n = self.count as f64;
        Metrics {
            mae: (self.count > 0).then(|| self.abs_sum / n),
            rmse: (self.count > 0).then(|| (self.sq_sum / n).sqrt()),
            mape: (self.mape_count > 0).then(|| 100.0 * self.ape_sum / self.mape_count as f64),
            count: self.count,
            mape_count: self.mape_count,
        }
    }
}

/// MAE and RMSE in target units, MAPE in percent. A metric with no
/// contributing entries is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub mape: Option<f64>,
    pub count: usize,
    pub mape_count: usize,
}

pub fn masked_metrics<D: Dimension>(pred: ArrayView<f64, D>, target: ArrayView<f64, D>) -> Result<Metrics> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("metrics", target.shape(), pred.shape()));
    }
    let mut acc = MetricAccumulator::default();
    for (p, t) in pred.iter().zip(target.iter()) {
        acc.push(*p, *t);
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based forecast step.
    pub step: usize,
    pub label: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub horizons: Vec<HorizonMetrics>,
    /// Pooled over every forecast step.
    pub overall: Metrics,
}

/// Steps 3, 6 and 12 restricted to `1..=horizon`.
pub fn default_horizons(horizon: usize) -> Vec<usize> {
    [3, 6, 12].into_iter().filter(|&h| h <= horizon).collect()
}

pub fn horizon_label(step: usize, interval_minutes: u32) -> String {
    format!("{}min", step as u64 * interval_minutes as u64)
}

impl HorizonReport {
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>10} {:>10} {:>10}", "horizon", "MAE", "RMSE", "MAPE%");
        for h in &self.horizons {
            let _ = writeln!(
                out,
                "{:<10} {:>10} {:>10} {:>10}",
                h.label,
                fmt(h.metrics.mae),
                fmt(h.metrics.rmse),
                fmt(h.metrics.mape)
            );
        }
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>10} {:>10}",
            "overall",
            fmt(self.overall.mae),
            fmt(self.overall.rmse),
            fmt(self.overall.mape)
        );
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn at_step(&self, step: usize) -> Option<&Metrics> {
        self.horizons.iter().find(|h| h.step == step).map(|h| &h.metrics)
    }
}

/// Score raw-unit predictions (`N × P` per sample, aligned with
/// `dataset.samples`) against the dataset targets.
pub fn horizon_eval(
    predictions: &[ndarray::Array2<f64>],
    dataset: &SlidingWindowDataset,
    horizons: &[usize],
    interval_minutes: u32,
) -> Result<HorizonReport> {
    if predictions.len() != dataset.len() {
        return Err(Error::shape("predictions", dataset.len(), predictions.len()));
    }
    let p = dataset.horizon;
    if let Some(&bad) = horizons.iter().find(|&&h| h == 0 || h > p) {
        return Err(Error::Config(format!("horizon step {bad} outside 1..={p}")));
    }
    let mut per_step = vec![MetricAccumulator::default(); p];
    for (pred, sample) in predictions.iter().zip(&dataset.samples) {
        if pred.dim() != sample.y.dim() {
            return Err(Error::shape("prediction", sample.y.dim(), pred.dim()));
        }
        for ((node, step), &t) in sample.y.indexed_iter() {
            per_step[step].push(pred[[node, step]], t);
        }
    }
    let mut overall = MetricAccumulator::default();
    for acc in &per_step {
        overall.merge(acc);
    }
    Ok(HorizonReport {
        horizons: horizons
            .iter()
            .map(|&h| HorizonMetrics {
                step: h,
                label: horizon_label(h, interval_minutes),
                metrics: per_step[h - 1].finish(),
            })
            .collect(),
        overall: overall.finish(),
    })
}

/// Repeat the last observed value over the whole horizon.
pub fn persistence_predictions(dataset: &SlidingWindowDataset) -> Vec<ndarray::Array2<f64>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let (n, p) = s.y.dim();
            ndarray::Array2::from_shape_fn((n, p), |(i, _)| s.last[i])
        })
        .collect()
}

pub fn persistence_baseline(
    dataset: &SlidingWindowDataset,
    horizons: &[usize],
    interval_minutes: u32,
) -> Result<HorizonReport> {
    horizon_eval(&persistence_predictions(dataset), dataset, horizons, interval_minutes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub std_a: f64,
    pub std_b: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch t-test with sample variances. Two zero-variance groups
/// give `p = 1` when the means agree and `p = 0` otherwise.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::TTest(format!(
            "need at least 2 observations per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::TTest("non-finite observation".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    let base = WelchResult {
        t: 0.0,
        df: na + nb - 2.0,
        p_value: 1.0,
        mean_a: ma,
        mean_b: mb,
        std_a: va.sqrt(),
        std_b: vb.sqrt(),
    };
    if se2 == 0.0 {
        log::warn!("both groups have zero variance; t-test is degenerate");
        return Ok(if ma == mb {
            base
        } else {
            WelchResult {
                t: if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY },
                p_value: 0.0,
                ..base
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::TTest(e.to_string()))?;
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchResult { t, df, p_value, ..base })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, PeriodicConfig, SignalTable, Split};
    use ndarray::{array, Array2};

    #[test]
    fn metric_examples() {
        let m = masked_metrics(array![2.0, 4.0].view(), array![1.0, 2.0].view()).unwrap();
        assert!((m.mae.unwrap() - 1.5).abs() < 1e-12);
        assert!((m.rmse.unwrap() - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((m.mape.unwrap() - 100.0).abs() < 1e-12);

        let m = masked_metrics(array![1.5, -2.0].view(), array![1.5, -2.0].view()).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape), (Some(0.0), Some(0.0), Some(0.0)));

        let m = masked_metrics(array![5.0, 3.0].view(), array![0.0, 2.0].view()).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape, m.count), (Some(1.0), Some(1.0), Some(50.0), 1));

        let m = masked_metrics(array![5.0, 2.0].view(), array![0.0, 0.0].view()).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape, m.count), (None, None, None, 0));
    }

    #[test]
    fn metrics_permutation_invariant_and_rmse_dominates() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let pred = Array2::from_shape_fn((6, 3), |_| rng.random_range(-5.0..5.0));
            let target = Array2::from_shape_fn((6, 3), |_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(-5.0..5.0) });
            let m = masked_metrics(pred.view(), target.view()).unwrap();
            if let (Some(mae), Some(rmse)) = (m.mae, m.rmse) {
                assert!(rmse >= mae - 1e-12);
            }
            let perm = [4, 2, 0, 5, 1, 3];
            let pp = pred.select(ndarray::Axis(0), &perm);
            let tp = target.select(ndarray::Axis(0), &perm);
            let mp = masked_metrics(pp.view(), tp.view()).unwrap();
            assert!((m.mae.unwrap_or(0.0) - mp.mae.unwrap_or(0.0)).abs() < 1e-12);
            assert!((m.rmse.unwrap_or(0.0) - mp.rmse.unwrap_or(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn denormalization_scales_mae_and_rmse() {
        // with no zeros in either scale the raw errors are σ times the normalized ones
        let (mu, sigma) = (50.0, 7.5);
        let pred_z = array![[0.3, -1.2], [0.8, 2.0]];
        let tgt_z = array![[0.1, -1.0], [1.4, 1.1]];
        let pred_raw = pred_z.mapv(|v| v * sigma + mu);
        let tgt_raw = tgt_z.mapv(|v| v * sigma + mu);
        let z = masked_metrics(pred_z.view(), tgt_z.view()).unwrap();
        let r = masked_metrics(pred_raw.view(), tgt_raw.view()).unwrap();
        assert!((r.mae.unwrap() - sigma * z.mae.unwrap()).abs() < 1e-10);
        assert!((r.rmse.unwrap() - sigma * z.rmse.unwrap()).abs() < 1e-10);
    }

    #[test]
    fn mape_skips_tiny_targets() {
        let m = masked_metrics(array![1.0, 2.0].view(), array![1e-6, 1.0].view()).unwrap();
        assert_eq!(m.count, 2);
        assert_eq!(m.mape_count, 1);
        assert!((m.mape.unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_error() {
        assert!(masked_metrics(array![1.0].view(), array![1.0, 2.0].view()).is_err());
    }

    #[test]
    fn welch_against_reference() {
        // values from scipy.stats.ttest_ind(equal_var=False)
        let cases: [(&[f64], &[f64], f64, f64, f64); 3] = [
            (&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0], -2.3763541031440183, 0.04928433820673049, 6.972255729794934),
            (&[0.51, 0.49, 0.50, 0.52, 0.48], &[0.61, 0.58, 0.60, 0.63, 0.59], -9.15987040336551, 2.0666121046475813e-05, 7.711133400200602),
            (&[3.1, 2.9, 3.0], &[3.05, 2.95, 3.2, 2.8], 0.0, 1.0, 4.870129870129872),
        ];
        for (a, b, t, p, df) in cases {
            let r = welch_ttest(a, b).unwrap();
            assert!((r.t - t).abs() < 1e-9, "t {} vs {t}", r.t);
            assert!((r.df - df).abs() < 1e-9, "df {} vs {df}", r.df);
            assert!((r.p_value - p).abs() <= 1e-9 * p.max(1e-3), "p {} vs {p}", r.p_value);
        }
    }

    #[test]
    fn welch_degenerate() {
        let r = welch_ttest(&[1.0, 1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(r.p_value, 1.0);
        let r = welch_ttest(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        assert_eq!(r.p_value, 0.0);
        assert!(welch_ttest(&[1.0], &[1.0, 2.0]).is_err());
        let a = [0.2, 0.5, 0.1, 0.9];
        let r = welch_ttest(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn welch_separated_groups_and_antisymmetry() {
        let a: Vec<f64> = (0..10).map(|i| 3.70 + 0.01 * ((i as f64) * 0.7).sin()).collect();
        let b: Vec<f64> = (0..10).map(|i| 3.36 + 0.01 * ((i as f64) * 1.3).cos()).collect();
        let ab = welch_ttest(&a, &b).unwrap();
        let ba = welch_ttest(&b, &a).unwrap();
        assert!(ab.p_value < 0.001);
        assert_eq!(ab.t, -ba.t);
        assert_eq!(ab.p_value, ba.p_value);
    }

    #[test]
    fn persistence_on_linear_series() {
        let table = SignalTable::new(Array2::from_shape_fn((40, 2), |(t, _)| t as f64 + 1.0), vec!["a".into(), "b".into()]).unwrap();
        let ds = make_windows(&table, 12, 12, &PeriodicConfig::default(), Split::Test).unwrap();
        let r = persistence_baseline(&ds, &[1, 3, 6, 12], 5).unwrap();
        for h in &r.horizons {
            assert!((h.metrics.mae.unwrap() - h.step as f64).abs() < 1e-12);
        }
        let preds = persistence_predictions(&ds);
        assert_eq!(preds[0].dim(), (2, 12));
    }

    #[test]
    fn horizon_beyond_forecast_length_is_error() {
        let table = SignalTable::new(Array2::from_elem((30, 1), 1.0), vec!["a".into()]).unwrap();
        let ds = make_windows(&table, 12, 3, &PeriodicConfig::default(), Split::Test).unwrap();
        assert!(persistence_baseline(&ds, &[12], 5).is_err());
        assert!(persistence_baseline(&ds, &default_horizons(3), 5).is_ok());
    }

    #[test]
    fn persistence_on_constant_series_is_exact() {
        let table = SignalTable::new(Array2::from_elem((40, 3), 4.0), vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let ds = make_windows(&table, 12, 12, &PeriodicConfig::default(), Split::Test).unwrap();
        let r = persistence_baseline(&ds, &default_horizons(12), 5).unwrap();
        assert_eq!(r.overall.mae, Some(0.0));
        assert_eq!(r.horizons.len(), 3);
        assert_eq!(r.horizons[2].label, "60min");
        assert!(r.to_text().contains("overall"));
        let back: HorizonReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn horizons_clamped_to_forecast_length() {
        assert_eq!(default_horizons(12), vec![3, 6, 12]);
        assert_eq!(default_horizons(4), vec![3]);
        assert!(default_horizons(2).is_empty());
    }
}
