//! The five subcommands, built on the library crate.

use crate::config::{CheckpointConfig, ModelKind, RunConfig};
use beamflow::baselines::RecurrentModel;
use beamflow::data::{
    load_frames_with, split_sequences, LoadOptions, SplitManifest, WindowConfig,
};
use beamflow::error::{Error, Result};
use beamflow::eval::{
    bench_inference, emit_report, evaluate, run_ablation, write_ablation_csv, AblationSpec,
    BeamPredictor, BenchResult,
};
use beamflow::flow::{train_model, write_losses_csv, EpochRecord, TrainableModel};
use beamflow::model::recurrent::CellKind;
use beamflow::model::FlowModel;
use beamflow::numerics::adam::AdamState;
use beamflow::numerics::checkpoint::{self, Checkpoint, CheckpointMeta, OptState};
use beamflow::numerics::rng::Rng;
use beamflow::simulator::generate_dataset;
use std::path::{Path, PathBuf};

/// Relative output paths land under this env var when it is set.
pub const OUT_DIR_ENV: &str = "BEAMFLOW_OUT_DIR";

pub fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(base) => PathBuf::from(base).join(path),
        None => path.to_path_buf(),
    }
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let out = resolve_out(out);
    let rng = Rng::new(cfg.seed).child("sim");
    let summary = generate_dataset(&cfg.simulator, &rng, &out)?;
    println!(
        "wrote {}: {} sequences, {} frames (m={}, fps={}, config {})",
        out.display(),
        summary.sequences,
        summary.frames,
        summary.header.codebook_size,
        summary.header.fps,
        summary.header.config_hash
    );
    Ok(())
}

struct TrainDirs {
    checkpoint: PathBuf,
    losses: PathBuf,
    split: PathBuf,
    run: PathBuf,
}

fn train_dirs(out: &Path) -> Result<TrainDirs> {
    std::fs::create_dir_all(out)?;
    Ok(TrainDirs {
        checkpoint: out.join("checkpoint.bfc"),
        losses: out.join("losses.csv"),
        split: out.join("split.json"),
        run: out.join("run.json"),
    })
}

fn save_checkpoint(
    path: &Path,
    ckpt_cfg: &CheckpointConfig,
    params: &beamflow::numerics::params::ParamStore,
    state: &AdamState,
    epochs_done: usize,
) -> Result<()> {
    let (m, v, step) = state.parts();
    checkpoint::save(
        path,
        &Checkpoint {
            config_json: ckpt_cfg.to_json()?,
            meta: CheckpointMeta {
                epochs_done: Some(epochs_done),
                adam_step: Some(step),
            },
            params: params.clone(),
            opt: Some(OptState {
                m: m.to_vec(),
                v: v.to_vec(),
            }),
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn run_training<M: TrainableModel>(
    model: &mut M,
    state: &mut AdamState,
    start_epoch: usize,
    mut history: Vec<EpochRecord>,
    cfg: &RunConfig,
    ckpt_cfg: &CheckpointConfig,
    dirs: &TrainDirs,
    windows: &[beamflow::data::WindowSample],
    wcfg: &WindowConfig,
) -> Result<()> {
    let rng = Rng::new(cfg.seed).child("train");
    let every = cfg.training.checkpoint_every;
    let tail = train_model(
        model,
        state,
        start_epoch,
        windows,
        wcfg,
        &cfg.training,
        &rng,
        |record, model, state| {
            if let Some(every) = every {
                if every > 0 && (record.epoch + 1) % every == 0 {
                    save_checkpoint(
                        &dirs.checkpoint,
                        ckpt_cfg,
                        model.params(),
                        state,
                        record.epoch + 1,
                    )?;
                }
            }
            Ok(())
        },
    )?;
    history.extend(tail);
    save_checkpoint(
        &dirs.checkpoint,
        ckpt_cfg,
        model.params(),
        state,
        cfg.training.epochs,
    )?;
    write_losses_csv(&dirs.losses, &history)?;
    let last = history.last().map(|r| r.losses.total).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs ({} windows/epoch); final loss {last:.6}",
        cfg.training.epochs,
        windows.len()
    );
    println!("checkpoint: {}", dirs.checkpoint.display());
    println!("losses:     {}", dirs.losses.display());
    Ok(())
}

pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    kind: ModelKind,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let out = resolve_out(out);
    let dirs = train_dirs(&out)?;
    let loaded = load_frames_with(
        data,
        LoadOptions {
            beam_base: cfg.data.beam_base,
        },
    )?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    if loaded.header.codebook_size != cfg.model.m {
        return Err(Error::config(format!(
            "dataset codebook size {} differs from model.m {}",
            loaded.header.codebook_size, cfg.model.m
        )));
    }
    let wcfg = cfg.data.window;
    let mut split_rng = Rng::new(cfg.seed).child("split");
    let split = split_sequences(&loaded.sequences, &wcfg, cfg.data.test_fraction, &mut split_rng)?;
    let manifest = SplitManifest::from_split(&split, cfg.seed, cfg.data.test_fraction);
    manifest.save(&dirs.split)?;
    println!(
        "split: {} train / {} test windows ({} / {} sequences), fingerprint {}",
        split.train.len(),
        split.test.len(),
        split.train_seq_ids.len(),
        split.test_seq_ids.len(),
        manifest.fingerprint
    );

    let run_json = serde_json::json!({
        "config": cfg,
        "fingerprint": cfg.fingerprint(),
        "dataset_header": loaded.header.to_line(),
        "model": kind.to_string(),
    });
    std::fs::write(&dirs.run, serde_json::to_string_pretty(&run_json).expect("json"))?;

    let ckpt_cfg = CheckpointConfig {
        kind,
        m: cfg.model.m,
        seed: cfg.seed,
        window: wcfg,
        model: (kind == ModelKind::Fm).then(|| cfg.model.clone()),
        baseline: match kind {
            ModelKind::Fm => None,
            ModelKind::Rnn => Some(cfg.recurrent_config(CellKind::Elman)),
            ModelKind::Lstm => Some(cfg.recurrent_config(CellKind::Lstm)),
        },
        training: cfg.training.clone(),
        run_fingerprint: cfg.fingerprint(),
    };

    // resume support: reload params, optimizer moments, and epoch cursor
    let resumed = match resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            let stored = CheckpointConfig::from_json(&ckpt.config_json)?;
            if stored.kind != kind {
                return Err(Error::config(format!(
                    "checkpoint holds a {} model, asked to resume {kind}",
                    stored.kind
                )));
            }
            let epochs_done = ckpt.meta.epochs_done.unwrap_or(0);
            let step = ckpt.meta.adam_step.unwrap_or(0);
            let opt = ckpt
                .opt
                .ok_or_else(|| Error::data("checkpoint lacks optimizer state; cannot resume"))?;
            Some((ckpt.params, AdamState::from_parts(opt.m, opt.v, step), epochs_done))
        }
        None => None,
    };
    let history: Vec<EpochRecord> = Vec::new();

    match kind {
        ModelKind::Fm => {
            let (mut model, mut state, start) = match resumed {
                Some((params, state, start)) => {
                    (FlowModel::from_parts(cfg.model.clone(), params)?, state, start)
                }
                None => {
                    let model =
                        FlowModel::init(cfg.model.clone(), &mut Rng::new(cfg.seed).child("init"))?;
                    let state = AdamState::new(&model.params);
                    (model, state, 0)
                }
            };
            println!("fm model: {} parameters", model.param_count());
            run_training(
                &mut model, &mut state, start, history, cfg, &ckpt_cfg, &dirs, &split.train, &wcfg,
            )
        }
        ModelKind::Rnn | ModelKind::Lstm => {
            let cell = if kind == ModelKind::Rnn {
                CellKind::Elman
            } else {
                CellKind::Lstm
            };
            let rcfg = cfg.recurrent_config(cell);
            let (mut model, mut state, start) = match resumed {
                Some((params, state, start)) => {
                    (RecurrentModel::from_parts(rcfg, params)?, state, start)
                }
                None => {
                    let model = RecurrentModel::init(rcfg, &mut Rng::new(cfg.seed).child("init"))?;
                    let state = AdamState::new(&model.params);
                    (model, state, 0)
                }
            };
            println!("{kind} model: {} parameters", model.param_count());
            run_training(
                &mut model, &mut state, start, history, cfg, &ckpt_cfg, &dirs, &split.train, &wcfg,
            )
        }
    }
}

/// A checkpoint plus its parsed config, rebuilt into a predictor.
pub struct LoadedModel {
    pub kind: ModelKind,
    pub config: CheckpointConfig,
    pub predictor: Box<dyn BeamPredictor>,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ckpt = checkpoint::load(path)?;
    let config = CheckpointConfig::from_json(&ckpt.config_json)?;
    let predictor: Box<dyn BeamPredictor> = match config.kind {
        ModelKind::Fm => {
            let mcfg = config
                .model
                .clone()
                .ok_or_else(|| Error::data("fm checkpoint without a model config"))?;
            Box::new(FlowModel::from_parts(mcfg, ckpt.params)?)
        }
        ModelKind::Rnn | ModelKind::Lstm => {
            let rcfg = config
                .baseline
                .ok_or_else(|| Error::data("baseline checkpoint without a baseline config"))?;
            Box::new(RecurrentModel::from_parts(rcfg, ckpt.params)?)
        }
    };
    Ok(LoadedModel {
        kind: config.kind,
        config,
        predictor,
    })
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    data: &Path,
    split_path: &Path,
    out: &Path,
    k_override: Option<Vec<usize>>,
) -> Result<()> {
    let out = resolve_out(out);
    let loaded_model = load_model(checkpoint_path)?;
    println!(
        "evaluating {} checkpoint ({} parameters)",
        loaded_model.kind,
        loaded_model.predictor.param_count()
    );
    let dataset = load_frames_with(
        data,
        LoadOptions {
            beam_base: cfg.data.beam_base,
        },
    )?;
    if dataset.header.codebook_size != loaded_model.config.m {
        return Err(Error::data(format!(
            "checkpoint/config mismatch: checkpoint was trained with m={}, dataset has m={}",
            loaded_model.config.m, dataset.header.codebook_size
        )));
    }
    let wcfg = loaded_model.config.window;
    let manifest = SplitManifest::load(split_path)?;
    let split = manifest.apply(&dataset.sequences, &wcfg)?;
    if split.test.is_empty() {
        return Err(Error::data("split manifest yields an empty test set"));
    }
    let k_values = k_override.unwrap_or_else(|| cfg.eval.k.clone());
    let label = variant_label(&wcfg);
    let report = evaluate(
        loaded_model.predictor.as_ref(),
        &split.test,
        &wcfg,
        &k_values,
        &label,
        &manifest.fingerprint,
    )?;
    for (&k, accs) in &report.per_step {
        println!(
            "{} ACC_{k} per step: {:?} (avg {:.4})",
            report.model, accs, report.averages[&k]
        );
    }
    emit_report(&[report], &[], &out)?;
    println!("metrics: {}", out.join("metrics.csv").display());
    println!("summary: {}", out.join("summary.json").display());
    Ok(())
}

fn variant_label(wcfg: &WindowConfig) -> String {
    if *wcfg == WindowConfig::variant_a() {
        "A".to_string()
    } else if *wcfg == WindowConfig::variant_b() {
        "B".to_string()
    } else {
        format!("{}/{}", wcfg.t_hist, wcfg.t_pred)
    }
}

pub fn cmd_ablate(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let out = resolve_out(out);
    std::fs::create_dir_all(&out)?;
    let dataset = load_frames_with(
        data,
        LoadOptions {
            beam_base: cfg.data.beam_base,
        },
    )?;
    let spec = AblationSpec {
        model: cfg.model.clone(),
        train: cfg.training.clone(),
        test_fraction: cfg.data.test_fraction,
        k_values: cfg.eval.k.clone(),
        seed: cfg.seed,
    };
    let grid = match run_ablation(&dataset.sequences, &spec) {
        Ok(grid) => grid,
        Err(failure) => {
            // keep whatever finished, then surface the failure
            write_ablation_csv(&out.join("ablation.partial.csv"), &failure.partial)?;
            return Err(Error::data(failure.to_string()));
        }
    };
    write_ablation_csv(&out.join("ablation.csv"), &grid)?;
    let json = serde_json::to_string_pretty(&grid).expect("grid json");
    std::fs::write(out.join("ablation.json"), json)?;
    println!("ablation grid: {} cells", grid.cells.len());
    for c in &grid.cells {
        println!("  {:<12} cfg {} K={} acc {:.4}", c.variant, c.config, c.k, c.acc);
    }
    println!("files: {}", out.join("ablation.csv").display());
    Ok(())
}

pub fn cmd_bench(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    samples: Option<usize>,
    warmup: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let samples = samples.unwrap_or(cfg.bench.samples);
    let warmup = warmup.unwrap_or(cfg.bench.warmup);
    let mut results: Vec<BenchResult> = Vec::new();
    println!("single-threaded, batch size 1, {samples} timed samples after {warmup} warmup");
    for path in checkpoints {
        let loaded = load_model(path)?;
        let mut rng = Rng::new(cfg.seed).child("bench");
        let result = bench_inference(
            loaded.predictor.as_ref(),
            &loaded.config.window,
            samples,
            warmup,
            &mut rng,
        )?;
        println!(
            "{:<6} params {:>9}  mean {:.3e}s  median {:.3e}s  p95 {:.3e}s",
            result.model, result.param_count, result.mean_s, result.median_s, result.p95_s
        );
        results.push(result);
    }
    if let Some(out) = out {
        let out = resolve_out(out);
        let json = serde_json::to_string_pretty(&results).expect("bench json");
        std::fs::write(&out, json)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
