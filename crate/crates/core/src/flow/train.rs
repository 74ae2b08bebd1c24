//! The shared training harness.
//!
//! The flow model and the recurrent baselines train through this exact
//! loop; only `TrainableModel::batch_loss` differs. Epoch randomness is
//! derived from (root seed, epoch index), so resuming from a checkpoint
//! replays the remaining epochs bit-identically.

use crate::data::{WindowConfig, WindowSample};
use crate::error::{Error, Result};
use crate::flow::LossBreakdown;
use crate::model::TapeBinding;
use crate::numerics::adam::{adam_step, AdamConfig, AdamState};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, TensorId};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub weights: crate::flow::LossWeights,
    /// Write a checkpoint every N epochs (the final one is always written).
    pub checkpoint_every: Option<usize>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 100,
            optimizer: AdamConfig::default(),
            weights: crate::flow::LossWeights::default(),
            checkpoint_every: None,
            shuffle: true,
        }
    }
}

/// Anything the harness can train.
pub trait TrainableModel {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Build the minibatch objective on the tape and report its terms.
    fn batch_loss(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        windows: &[WindowSample],
        wcfg: &WindowConfig,
        weights: &crate::flow::LossWeights,
        rng: &mut Rng,
    ) -> Result<(TensorId, LossBreakdown)>;
}

/// Epoch-averaged losses, one row of losses.csv.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
}

/// One pass over the training windows at a given epoch index.
pub fn train_epoch<M: TrainableModel>(
    model: &mut M,
    state: &mut AdamState,
    windows: &[WindowSample],
    wcfg: &WindowConfig,
    tcfg: &TrainConfig,
    epoch: usize,
    root_rng: &Rng,
) -> Result<EpochRecord> {
    if windows.is_empty() {
        return Err(Error::data("cannot train on an empty split"));
    }
    if tcfg.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut rng = root_rng.child_indexed("epoch", epoch as u64);

    let mut order: Vec<usize> = (0..windows.len()).collect();
    if tcfg.shuffle {
        rng.shuffle(&mut order);
    }

    let mut sum = LossBreakdown::default();
    let mut batches = 0usize;
    for chunk in order.chunks(tcfg.batch_size) {
        let batch: Vec<WindowSample> = chunk.iter().map(|&i| windows[i].clone()).collect();
        let mut tape = Tape::new();
        let bind = TapeBinding::bind(&mut tape, model.params());
        let (loss_id, losses) =
            model.batch_loss(&mut tape, &bind, &batch, wcfg, &tcfg.weights, &mut rng)?;
        if !losses.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss at epoch {epoch} (total {})",
                losses.total
            )));
        }
        tape.backward(loss_id)?;
        bind.harvest_grads(&tape, model.params_mut())?;
        adam_step(model.params_mut(), state, &tcfg.optimizer, epoch)?;

        sum.fm += losses.fm;
        sum.term += losses.term;
        sum.ce += losses.ce;
        sum.total += losses.total;
        batches += 1;
    }
    let n = batches as f64;
    Ok(EpochRecord {
        epoch,
        losses: LossBreakdown {
            fm: sum.fm / n,
            term: sum.term / n,
            ce: sum.ce / n,
            total: sum.total / n,
        },
    })
}

/// Full training run from `start_epoch` to `tcfg.epochs`. The callback
/// fires after every epoch (checkpointing, logging).
pub fn train_model<M: TrainableModel>(
    model: &mut M,
    state: &mut AdamState,
    start_epoch: usize,
    windows: &[WindowSample],
    wcfg: &WindowConfig,
    tcfg: &TrainConfig,
    root_rng: &Rng,
    mut on_epoch: impl FnMut(&EpochRecord, &M, &AdamState) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let mut history = Vec::with_capacity(tcfg.epochs.saturating_sub(start_epoch));
    for epoch in start_epoch..tcfg.epochs {
        let record = train_epoch(model, state, windows, wcfg, tcfg, epoch, root_rng)?;
        on_epoch(&record, model, state)?;
        history.push(record);
    }
    Ok(history)
}

/// losses.csv schema: epoch, L_FM, L_Term, L_CE, L_total.
pub const LOSSES_CSV_HEADER: &str = "epoch,L_FM,L_Term,L_CE,L_total";

pub fn write_losses_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::with_capacity(history.len() * 64);
    out.push_str(LOSSES_CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.losses.fm, r.losses.term, r.losses.ce, r.losses.total
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_losses_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if i == 0 {
            if line != LOSSES_CSV_HEADER {
                return Err(Error::data(format!("unexpected losses.csv header `{line}`")));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::data(format!("losses.csv line {}: bad field count", i + 1)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::data(format!("losses.csv line {}: bad number `{s}`", i + 1)))
        };
        out.push(EpochRecord {
            epoch: parts[0]
                .parse()
                .map_err(|_| Error::data(format!("losses.csv line {}: bad epoch", i + 1)))?,
            losses: LossBreakdown {
                fm: parse(parts[1])?,
                term: parse(parts[2])?,
                ce: parse(parts[3])?,
                total: parse(parts[4])?,
            },
        });
    }
    Ok(out)
}

/// The flow model trains against the full three-term objective.
impl TrainableModel for crate::model::FlowModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        windows: &[WindowSample],
        wcfg: &WindowConfig,
        weights: &crate::flow::LossWeights,
        rng: &mut Rng,
    ) -> Result<(TensorId, LossBreakdown)> {
        let fb = crate::flow::FlowBatch::new(windows, wcfg, self.cfg().m)?;
        let taus: Vec<f64> = (0..fb.batch).map(|_| rng.uniform()).collect();
        crate::flow::batch_loss_tape(self, tape, bind, &fb, wcfg, weights, &taus)
    }
}
