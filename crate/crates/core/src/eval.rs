//! Top-K accuracy, per-step curves, the ablation grid, latency
//! benchmarking, and report files.

use crate::baselines::RecurrentModel;
use crate::data::{split_sequences, DatasetSplit, Sequence, SplitManifest, WindowConfig, WindowSample};
use crate::error::{Error, Result};
use crate::flow::{
    infer_batch, predict_topk, train_model, LossWeights, Prediction, TrainConfig,
};
use crate::model::recurrent::CellKind;
use crate::model::{match_recurrent_hidden, CondEncoder, FlowModel, ModelConfig};
use crate::numerics::adam::AdamState;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;
use crate::simulator::dataset::config_hash;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

/// Anything that maps a box history to per-step beam probabilities.
pub trait BeamPredictor {
    fn name(&self) -> String;
    fn param_count(&self) -> usize;
    fn predict_batch(&self, histories: &[&Tensor], wcfg: &WindowConfig) -> Result<Vec<Prediction>>;

    fn predict(&self, x_hist: &Tensor, wcfg: &WindowConfig) -> Result<Prediction> {
        Ok(self.predict_batch(&[x_hist], wcfg)?.remove(0))
    }
}

impl BeamPredictor for FlowModel {
    fn name(&self) -> String {
        "fm".to_string()
    }

    fn param_count(&self) -> usize {
        self.param_count()
    }

    fn predict_batch(&self, histories: &[&Tensor], wcfg: &WindowConfig) -> Result<Vec<Prediction>> {
        infer_batch(self, histories, wcfg)
    }
}

impl BeamPredictor for RecurrentModel {
    fn name(&self) -> String {
        match self.cfg().cell {
            CellKind::Elman => "rnn".to_string(),
            CellKind::Lstm => "lstm".to_string(),
        }
    }

    fn param_count(&self) -> usize {
        self.param_count()
    }

    fn predict_batch(&self, histories: &[&Tensor], wcfg: &WindowConfig) -> Result<Vec<Prediction>> {
        self.predict_batch(histories, wcfg)
    }
}

/// Predictions plus ground truth for a whole test set.
pub struct PredictionSet {
    pub preds: Vec<Prediction>,
    /// Per window: the t_pred prediction-step labels.
    pub labels: Vec<Vec<usize>>,
}

/// Fraction of test samples whose true beam at prediction step `step`
/// lies in the top-K prediction set.
pub fn acc_k(set: &PredictionSet, k: usize, step: usize) -> Result<f64> {
    if set.preds.is_empty() {
        return Err(Error::data("empty prediction set"));
    }
    let m = set.preds[0].probs.cols();
    if k == 0 || k > m {
        return Err(Error::config(format!("k {k} outside [1, {m}]")));
    }
    let mut hits = 0usize;
    for (pred, labels) in set.preds.iter().zip(&set.labels) {
        if step >= pred.probs.rows() || step >= labels.len() {
            return Err(Error::shape(format!(
                "step {step} outside the {}-step horizon",
                pred.probs.rows()
            )));
        }
        let top = predict_topk(pred.probs.row(step), k)?;
        if top.contains(&labels[step]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.preds.len() as f64)
}

/// Per-step and average top-K accuracies for one model on one test set.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    /// Window-configuration label, e.g. "A" or "B".
    pub config: String,
    pub config_fingerprint: String,
    pub n_test: usize,
    pub param_count: usize,
    /// k -> acc per prediction step.
    pub per_step: BTreeMap<usize, Vec<f64>>,
    /// k -> mean over steps.
    pub averages: BTreeMap<usize, f64>,
}

const EVAL_CHUNK: usize = 64;

/// Run a predictor over every test window.
pub fn predict_set(
    model: &dyn BeamPredictor,
    test: &[WindowSample],
    wcfg: &WindowConfig,
) -> Result<PredictionSet> {
    if test.is_empty() {
        return Err(Error::data("empty test set"));
    }
    let mut preds = Vec::with_capacity(test.len());
    for chunk in test.chunks(EVAL_CHUNK) {
        let histories: Vec<&Tensor> = chunk.iter().map(|w| &w.x).collect();
        preds.extend(model.predict_batch(&histories, wcfg)?);
    }
    let labels = test
        .iter()
        .map(|w| w.labels[wcfg.t_hist..].to_vec())
        .collect();
    Ok(PredictionSet { preds, labels })
}

pub fn evaluate(
    model: &dyn BeamPredictor,
    test: &[WindowSample],
    wcfg: &WindowConfig,
    k_values: &[usize],
    config_label: &str,
    config_fingerprint: &str,
) -> Result<MetricsReport> {
    let set = predict_set(model, test, wcfg)?;
    let mut per_step = BTreeMap::new();
    let mut averages = BTreeMap::new();
    for &k in k_values {
        let accs: Vec<f64> = (0..wcfg.t_pred)
            .map(|step| acc_k(&set, k, step))
            .collect::<Result<_>>()?;
        let avg = accs.iter().sum::<f64>() / accs.len() as f64;
        per_step.insert(k, accs);
        averages.insert(k, avg);
    }
    Ok(MetricsReport {
        model: model.name(),
        config: config_label.to_string(),
        config_fingerprint: config_fingerprint.to_string(),
        n_test: test.len(),
        param_count: model.param_count(),
        per_step,
        averages,
    })
}

// ── Ablation ─────────────────────────────────────────────────────────

/// The five ablation variants, in grid row order.
pub const ABLATION_VARIANTS: [&str; 5] =
    ["Base", "w/o L_FM", "w/o L_Term", "LSTM cond.", "RNN cond."];

/// Everything one ablation run needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub test_fraction: f64,
    pub k_values: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AblationCell {
    pub variant: String,
    /// "A" or "B".
    pub config: String,
    pub k: usize,
    pub acc: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
    /// Window-config label -> shared split fingerprint.
    pub split_fingerprints: BTreeMap<String, String>,
}

impl AblationGrid {
    pub fn get(&self, variant: &str, config: &str, k: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.config == config && c.k == k)
            .map(|c| c.acc)
    }

    pub fn is_complete(&self, k_values: &[usize]) -> bool {
        ABLATION_VARIANTS.iter().all(|v| {
            ["A", "B"]
                .iter()
                .all(|cfg| k_values.iter().all(|&k| self.get(v, cfg, k).is_some()))
        })
    }
}

/// A cell failed; everything finished so far rides along.
#[derive(Debug)]
pub struct AblationFailure {
    pub cell: String,
    pub error: Error,
    pub partial: AblationGrid,
}

impl std::fmt::Display for AblationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ablation cell {} failed: {}", self.cell, self.error)
    }
}

impl std::error::Error for AblationFailure {}

fn variant_model_cfg(base: &ModelConfig, variant: &str) -> ModelConfig {
    let mut cfg = base.clone();
    match variant {
        "LSTM cond." | "RNN cond." => {
            // match the transformer encoder's capacity
            let target = {
                let probe = FlowModel::init(base.clone(), &mut Rng::new(0)).expect("base config");
                probe.param_count_of("cond")
            };
            let kind = if variant.starts_with("LSTM") {
                CellKind::Lstm
            } else {
                CellKind::Elman
            };
            let hidden = match_recurrent_hidden(kind, base.m, base.cond_dim(), target);
            cfg.cond = match kind {
                CellKind::Lstm => CondEncoder::Lstm { hidden },
                CellKind::Elman => CondEncoder::Rnn { hidden },
            };
        }
        _ => {}
    }
    cfg
}

fn variant_weights(base: &LossWeights, variant: &str) -> LossWeights {
    let mut w = *base;
    match variant {
        "w/o L_FM" => w.fm = 0.0,
        "w/o L_Term" => w.term = 0.0,
        _ => {}
    }
    w
}

/// Train and evaluate all five variants under both window configurations,
/// sharing the split and the seed across every cell.
pub fn run_ablation(
    seqs: &[Sequence],
    spec: &AblationSpec,
) -> std::result::Result<AblationGrid, Box<AblationFailure>> {
    let mut grid = AblationGrid::default();
    let root = Rng::new(spec.seed);

    for (label, wcfg) in [("A", WindowConfig::variant_a()), ("B", WindowConfig::variant_b())] {
        let wcfg = WindowConfig {
            stride: spec.train_stride(),
            ..wcfg
        };
        let run = || -> Result<(DatasetSplit, String)> {
            let mut split_rng = root.child("split");
            let split = split_sequences(seqs, &wcfg, spec.test_fraction, &mut split_rng)?;
            let manifest = SplitManifest::from_split(&split, spec.seed, spec.test_fraction);
            Ok((split, manifest.fingerprint))
        };
        let (split, fingerprint) = match run() {
            Ok(v) => v,
            Err(error) => {
                return Err(Box::new(AblationFailure {
                    cell: format!("split/{label}"),
                    error,
                    partial: grid,
                }))
            }
        };
        grid.split_fingerprints
            .insert(label.to_string(), fingerprint.clone());

        for variant in ABLATION_VARIANTS {
            let cell_name = format!("{variant}/{label}");
            let outcome = (|| -> Result<Vec<AblationCell>> {
                let model_cfg = variant_model_cfg(&spec.model, variant);
                let tcfg = TrainConfig {
                    weights: variant_weights(&spec.train.weights, variant),
                    ..spec.train.clone()
                };
                let mut model = FlowModel::init(model_cfg, &mut root.child("init"))?;
                let mut state = AdamState::new(&model.params);
                train_model(
                    &mut model,
                    &mut state,
                    0,
                    &split.train,
                    &wcfg,
                    &tcfg,
                    &root.child("train"),
                    |_, _, _| Ok(()),
                )?;
                let report = evaluate(
                    &model,
                    &split.test,
                    &wcfg,
                    &spec.k_values,
                    label,
                    &fingerprint,
                )?;
                Ok(spec
                    .k_values
                    .iter()
                    .map(|&k| AblationCell {
                        variant: variant.to_string(),
                        config: label.to_string(),
                        k,
                        acc: report.averages[&k],
                    })
                    .collect())
            })();
            match outcome {
                Ok(cells) => grid.cells.extend(cells),
                Err(error) => {
                    return Err(Box::new(AblationFailure {
                        cell: cell_name,
                        error,
                        partial: grid,
                    }))
                }
            }
        }
    }
    Ok(grid)
}

impl AblationSpec {
    fn train_stride(&self) -> usize {
        1
    }
}

// ── Latency benchmarking ─────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BenchResult {
    pub model: String,
    pub param_count: usize,
    pub samples: usize,
    pub mean_s: f64,
    pub median_s: f64,
    pub p95_s: f64,
    pub hardware: String,
}

fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|raw| {
            raw.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    format!(
        "{cpu} ({}-{}), single thread, batch size 1",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

/// Smallest measurable wall-clock increment.
fn clock_resolution() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b.duration_since(a).as_secs_f64());
    }
    best
}

/// Wall-time per single-sample inference, single-threaded.
///
/// Needs at least 1000 timed samples after at least 100 warmup calls.
pub fn bench_inference(
    model: &dyn BeamPredictor,
    wcfg: &WindowConfig,
    n_samples: usize,
    warmup: usize,
    rng: &mut Rng,
) -> Result<BenchResult> {
    if n_samples < 1000 {
        return Err(Error::config(format!(
            "benchmark needs >= 1000 timed samples, got {n_samples}"
        )));
    }
    if warmup < 100 {
        return Err(Error::config(format!(
            "benchmark needs >= 100 warmup samples, got {warmup}"
        )));
    }
    // a small pool of distinct histories, cycled through
    let pool: Vec<Tensor> = (0..64)
        .map(|_| {
            Tensor::from_vec(
                wcfg.t_hist,
                4,
                (0..wcfg.t_hist * 4).map(|_| rng.uniform()).collect(),
            )
            .expect("pool shape")
        })
        .collect();

    for i in 0..warmup {
        let _ = model.predict(&pool[i % pool.len()], wcfg)?;
    }
    let mut times = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let x = &pool[i % pool.len()];
        let start = Instant::now();
        let pred = model.predict(x, wcfg)?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(pred);
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let median = times[times.len() / 2];
    let resolution = clock_resolution();
    if median < 10.0 * resolution {
        return Err(Error::config(format!(
            "clock resolution too coarse (median {median:.3e}s < 10 ticks of {resolution:.3e}s); time batched inference instead"
        )));
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let p95 = times[((times.len() as f64 * 0.95).ceil() as usize - 1).min(times.len() - 1)];
    Ok(BenchResult {
        model: model.name(),
        param_count: model.param_count(),
        samples: n_samples,
        mean_s: mean,
        median_s: median,
        p95_s: p95,
        hardware: hardware_descriptor(),
    })
}

// ── Report files ─────────────────────────────────────────────────────

pub const METRICS_CSV_HEADER: &str = "model,config,step,K,acc";

pub fn write_metrics_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut out = String::new();
    out.push_str(METRICS_CSV_HEADER);
    out.push('\n');
    for r in reports {
        for (&k, accs) in &r.per_step {
            for (step, acc) in accs.iter().enumerate() {
                out.push_str(&format!("{},{},{},{},{}\n", r.model, r.config, step, k, acc));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a metrics.csv back into (model, config, step, k, acc) rows.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, String, usize, usize, f64)>> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if i == 0 {
            if line != METRICS_CSV_HEADER {
                return Err(Error::data(format!("unexpected metrics.csv header `{line}`")));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::data(format!("metrics.csv line {}: bad field count", i + 1)));
        }
        rows.push((
            parts[0].to_string(),
            parts[1].to_string(),
            parts[2]
                .parse()
                .map_err(|_| Error::data(format!("metrics.csv line {}: bad step", i + 1)))?,
            parts[3]
                .parse()
                .map_err(|_| Error::data(format!("metrics.csv line {}: bad K", i + 1)))?,
            parts[4]
                .parse()
                .map_err(|_| Error::data(format!("metrics.csv line {}: bad acc", i + 1)))?,
        ));
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Summary {
    pub reports: Vec<MetricsReport>,
    pub bench: Vec<BenchResult>,
}

/// Write metrics.csv and summary.json under `dir`.
pub fn emit_report(reports: &[MetricsReport], bench: &[BenchResult], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_metrics_csv(&dir.join("metrics.csv"), reports)?;
    let summary = Summary {
        reports: reports.to_vec(),
        bench: bench.to_vec(),
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::data(format!("summary encode: {e}")))?;
    std::fs::write(dir.join("summary.json"), json)?;
    Ok(())
}

pub const ABLATION_CSV_HEADER: &str = "variant,config,K,acc";

pub fn write_ablation_csv(path: &Path, grid: &AblationGrid) -> Result<()> {
    let mut out = String::new();
    out.push_str(ABLATION_CSV_HEADER);
    out.push('\n');
    for c in &grid.cells {
        out.push_str(&format!("{},{},{},{}\n", c.variant, c.config, c.k, c.acc));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Fingerprint helper re-exported for CLI use.
pub fn fingerprint(value: &impl Serialize) -> String {
    config_hash(value)
}
