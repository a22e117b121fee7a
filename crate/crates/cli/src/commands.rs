use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use agcnet::checkpoint::Checkpoint;
use agcnet::config::RunConfig;
use agcnet::data::load_data_dir;
use agcnet::experiment::{
    ablation_settings, prepare_data, prepare_data_with, run_ablation, run_experiment_from, synth_data, write_data_dir,
};
use agcnet::metrics::{persistence_baseline, welch_ttest, HorizonReport};
use agcnet::model::MixingMode;
use agcnet::par::Parallelism;
use agcnet::training::{
    batch_loss_and_grad, compare_gradients, evaluate, tiny_instance, tiny_loss_config, tiny_target_scale,
    TinyInstance,
};

use crate::Common;

pub const CONFIG_ECHO: &str = "config.toml";
pub const INIT_CHECKPOINT: &str = "init.ckpt";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const HISTORY: &str = "history.jsonl";
pub const SUMMARY: &str = "summary.json";

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn side_by_side(model: &HorizonReport, baseline: &HorizonReport) -> String {
    format!("model\n{}\npersistence\n{}", model.to_text(), baseline.to_text())
}

pub fn synth(common: &Common, out: &Path) -> Result<bool> {
    let cfg = load_config(common)?;
    let data = synth_data(&cfg)?;
    write_data_dir(out, &data)?;
    cfg.save(&out.join(CONFIG_ECHO))?;
    println!(
        "wrote {} steps x {} sensors to {}",
        data.table.len(),
        data.table.node_count(),
        out.display()
    );
    Ok(true)
}

pub fn train(common: &Common, data_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<bool> {
    let cfg = load_config(common)?;
    let dir = load_data_dir(data_dir)?;
    let data = prepare_data(dir.graph, &dir.table, &cfg)?;
    let start = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if !ck.config()?.architecture_matches(&cfg) {
                bail!("refusing to resume: {} was written with a different configuration", path.display());
            }
            Some(ck)
        }
        None => None,
    };
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_ECHO))?;
    let outcome = run_experiment_from(&cfg, &data, start.as_ref())?;

    let mut init = outcome.net.clone();
    init.set_params(&outcome.initial_params)?;
    Checkpoint::from_net(&init, &cfg, &data.stats).save(&out.join(INIT_CHECKPOINT))?;
    Checkpoint::from_net(&outcome.net, &cfg, &data.stats).save(&out.join(MODEL_CHECKPOINT))?;
    outcome.history.write_jsonl(&out.join(HISTORY))?;

    let text = side_by_side(&outcome.test, &outcome.persistence);
    write(&out.join("report.txt"), &text)?;
    let summary = json!({
        "seed": cfg.seed,
        "best_epoch": outcome.history.best_epoch,
        "test_mae": outcome.test.overall.mae,
        "persistence_mae": outcome.persistence.overall.mae,
        "test": outcome.test,
        "persistence": outcome.persistence,
    });
    write(&out.join(SUMMARY), serde_json::to_string_pretty(&summary)?)?;
    println!("{text}");
    Ok(true)
}

pub fn eval(checkpoint: &Path, data_dir: &Path, out: Option<&Path>, horizons: Option<Vec<usize>>) -> Result<bool> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = ck.config()?;
    let horizons = horizons.unwrap_or_else(|| cfg.eval_horizons.clone());
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > cfg.horizon) {
        bail!("horizon {h} outside the model's forecast length 1..={}", cfg.horizon);
    }
    let dir = load_data_dir(data_dir)?;
    let data = prepare_data_with(dir.graph, &dir.table, &cfg, Some(&ck.stats))?;
    let mut net = agcnet::experiment::build_net(&cfg, &data)?;
    ck.restore_into(&mut net)?;
    let model = evaluate(&net, &data.test, data.scale(), &horizons, data.interval_minutes, cfg.parallelism)?;
    let baseline = persistence_baseline(&data.test, &horizons, data.interval_minutes)?;
    let text = side_by_side(&model, &baseline);
    println!("{text}");
    if let Some(out) = out {
        create_dir(out)?;
        write(&out.join("eval.txt"), &text)?;
        let report = json!({ "model": model, "persistence": baseline });
        write(&out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(true)
}

pub fn gradcheck(common: &Common, out: Option<&Path>, step: f64, corrupt: Option<&str>) -> Result<bool> {
    let cfg = load_config(common)?;
    let spec = TinyInstance {
        mixing: cfg.mode,
        shift: cfg.shift,
        kernel: cfg.kernel,
        layers: 1,
        seed: common.seed.unwrap_or(TinyInstance::default().seed),
    };
    let (net, samples) = tiny_instance(&spec)?;
    let batch: Vec<_> = samples.iter().collect();
    let (loss_cfg, scale) = (tiny_loss_config(), tiny_target_scale());
    let (_, mut grad) = batch_loss_and_grad(&net, &batch, scale, &loss_cfg, Parallelism::Sequential)?;
    if let Some(name) = corrupt {
        let id = net
            .registry()
            .find(name)
            .with_context(|| format!("no parameter named `{name}`"))?;
        for g in net.registry().slice_mut(&mut grad, id) {
            *g *= 2.0;
        }
    }
    let report = compare_gradients(&net, &batch, scale, &loss_cfg, &grad, step)?;
    print!("{}", report.to_text());
    let passed = report.passed();
    println!(
        "{}: max relative error {:.3e} (threshold {:.0e})",
        if passed { "PASS" } else { "FAIL" },
        report.max_rel_error(),
        report.threshold
    );
    if let Some(out) = out {
        create_dir(out)?;
        write(&out.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(passed)
}

pub fn ablate(
    common: &Common,
    data_dir: Option<&Path>,
    out: &Path,
    seeds: u64,
    adjacency: bool,
    periodic: bool,
) -> Result<bool> {
    let cfg = load_config(common)?;
    let (graph, table) = match data_dir {
        Some(d) => {
            let dir = load_data_dir(d)?;
            (dir.graph, dir.table)
        }
        None => {
            let d = synth_data(&cfg)?;
            (d.graph, d.table)
        }
    };
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
    let settings = ablation_settings(adjacency, periodic);
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_ECHO))?;
    let report = run_ablation(&cfg, &table, &graph, &settings, &seeds)?;
    let mut text = report.to_text();

    // weighted mixing against the full model
    let find = |mode: MixingMode, shift: bool| {
        report.rows.iter().find(|r| {
            r.setting.mode == mode && r.setting.shift == shift && !r.setting.periodic
                && r.setting.kernel == agcnet::model::KernelKind::Wavelet
        })
    };
    if let (Some(w), Some(full)) = (find(MixingMode::Weighted, false), find(MixingMode::Attention, true)) {
        if seeds.len() >= 2 {
            let t = welch_ttest(&w.test_mae, &full.test_mae)?;
            text.push_str(&format!(
                "\nweighted vs attention+shift: t = {:.4}, df = {:.2}, p = {:.3e}\n",
                t.t, t.df, t.p_value
            ));
        }
    }
    write(&out.join("ablation.txt"), &text)?;
    write(&out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    print!("{text}");
    Ok(true)
}

/// Run directories under `dir` (or `dir` itself), in name order.
fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(SUMMARY).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SUMMARY).is_file())
        .collect();
    runs.sort();
    Ok(runs)
}

fn collect_mae(dir: &Path) -> Result<Vec<(String, f64)>> {
    run_dirs(dir)?
        .into_iter()
        .map(|run| {
            let path = run.join(SUMMARY);
            let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let mae = v["test_mae"]
                .as_f64()
                .with_context(|| format!("{} has no test_mae", path.display()))?;
            Ok((run.display().to_string(), mae))
        })
        .collect()
}

pub fn ttest(group_a: &Path, group_b: &Path, out: Option<&Path>) -> Result<bool> {
    let a = collect_mae(group_a)?;
    let b = collect_mae(group_b)?;
    if a.len() < 2 || b.len() < 2 {
        bail!("need at least 2 completed runs per group, found {} and {}", a.len(), b.len());
    }
    let va: Vec<f64> = a.iter().map(|(_, v)| *v).collect();
    let vb: Vec<f64> = b.iter().map(|(_, v)| *v).collect();
    let r = welch_ttest(&va, &vb)?;
    let mut text = String::new();
    for (label, runs) in [("A", &a), ("B", &b)] {
        for (run, mae) in runs.iter() {
            text.push_str(&format!("{label} {run}: {mae:.6}\n"));
        }
    }
    text.push_str(&format!(
        "A: mean {:.6} std {:.6} (n = {})\nB: mean {:.6} std {:.6} (n = {})\nt = {:.4}, df = {:.2}, p = {:.3e}\n",
        r.mean_a,
        r.std_a,
        a.len(),
        r.mean_b,
        r.std_b,
        b.len(),
        r.t,
        r.df,
        r.p_value
    ));
    print!("{text}");
    if let Some(out) = out {
        create_dir(out)?;
        write(&out.join("ttest.txt"), &text)?;
        let report = json!({
            "group_a": a.iter().map(|(run, mae)| json!({"run": run, "test_mae": mae})).collect::<Vec<_>>(),
            "group_b": b.iter().map(|(run, mae)| json!({"run": run, "test_mae": mae})).collect::<Vec<_>>(),
            "result": r,
        });
        write(&out.join("ttest.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(true)
}
