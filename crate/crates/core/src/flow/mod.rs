//! Rectified-flow beam prediction: the linear interpolant, the flow and
//! terminal objectives, Euler-solver rollouts, decoding, and inference.
//!
//! The latent state is an M-vector evolving over the normalized window
//! time tau in [0, 1]. Training supervises three things at once: the
//! field against the constant interpolant velocity e1 - e0, the rolled-
//! out endpoint against e1, and the decoded probabilities against the
//! prediction-frame labels.

pub mod train;

use crate::data::{WindowConfig, WindowSample};
use crate::error::{Error, Result};
use crate::model::{FlowModel, TapeBinding};
use crate::numerics::kernels::softmax_row;
use crate::numerics::tape::{Tape, TensorId};
use crate::numerics::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub use train::{
    read_losses_csv, train_epoch, train_model, write_losses_csv, EpochRecord, TrainConfig,
    TrainableModel,
};

/// Probabilities are clamped here before any log.
pub const PROB_CLAMP: f64 = 1e-12;

/// Multipliers on the three objective terms. The "w/o" ablations set one
/// of them to zero; the reported per-term losses carry the weight, so the
/// total always equals their plain sum.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub fm: f64,
    pub term: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            fm: 1.0,
            term: 1.0,
            ce: 1.0,
        }
    }
}

/// Weighted values of the three terms for one batch or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub fm: f64,
    pub term: f64,
    pub ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.fm.is_finite() && self.term.is_finite() && self.ce.is_finite() && self.total.is_finite()
    }
}

/// Straight-line interpolant (1 - tau) e0 + tau e1.
pub fn interpolate(e0: &[f64], e1: &[f64], tau: f64) -> Result<Vec<f64>> {
    if e0.len() != e1.len() {
        return Err(Error::shape(format!(
            "interpolate endpoints of lengths {} and {}",
            e0.len(),
            e1.len()
        )));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::config(format!("tau {tau} outside [0, 1]")));
    }
    Ok(e0
        .iter()
        .zip(e1)
        .map(|(a, b)| (1.0 - tau) * a + tau * b)
        .collect())
}

/// One-hot row of width `m`.
pub fn one_hot(index: usize, m: usize) -> Vec<f64> {
    let mut v = vec![0.0; m];
    v[index] = 1.0;
    v
}

/// A supervised minibatch in tape-ready layout.
///
/// History boxes are sample-major ((b * t_hist + t) rows); prediction
/// labels are step-major (j * batch + b), matching the stacked rollout
/// grid.
#[derive(Clone, Debug)]
pub struct FlowBatch {
    pub batch: usize,
    pub x_hist: Tensor,
    pub x_first: Tensor,
    pub e0: Tensor,
    pub e1: Tensor,
    /// e1 - e0, the interpolant velocity.
    pub fm_target: Tensor,
    pub labels_pred: Vec<usize>,
}

impl FlowBatch {
    pub fn new(windows: &[WindowSample], wcfg: &WindowConfig, m: usize) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::data("empty batch"));
        }
        let b = windows.len();
        let t_hist = wcfg.t_hist;
        let mut x_hist = Tensor::zeros(b * t_hist, 4);
        let mut x_first = Tensor::zeros(b, 4);
        let mut e0 = Tensor::zeros(b, m);
        let mut e1 = Tensor::zeros(b, m);
        for (i, w) in windows.iter().enumerate() {
            if w.x.rows() != t_hist || w.labels.len() != wcfg.total() {
                return Err(Error::shape(format!(
                    "window {} has {} history rows and {} labels for a {}/{} config",
                    w.seq_id,
                    w.x.rows(),
                    w.labels.len(),
                    t_hist,
                    wcfg.t_pred
                )));
            }
            if let Some(&bad) = w.labels.iter().find(|&&l| l >= m) {
                return Err(Error::data(format!(
                    "window {} labels beam {bad} outside codebook of size {m}",
                    w.seq_id
                )));
            }
            for t in 0..t_hist {
                x_hist.row_mut(i * t_hist + t).copy_from_slice(w.x.row(t));
            }
            x_first.row_mut(i).copy_from_slice(w.x.row(0));
            e0.set(i, w.labels[0], 1.0);
            e1.set(i, *w.labels.last().expect("labels"), 1.0);
        }
        let fm_target = Tensor::from_vec(
            b,
            m,
            e1.values()
                .iter()
                .zip(e0.values())
                .map(|(a, b)| a - b)
                .collect(),
        )?;
        let mut labels_pred = Vec::with_capacity(b * wcfg.t_pred);
        for j in 0..wcfg.t_pred {
            for w in windows {
                labels_pred.push(w.labels[t_hist + j]);
            }
        }
        Ok(FlowBatch {
            batch: b,
            x_hist,
            x_first,
            e0,
            e1,
            fm_target,
            labels_pred,
        })
    }
}

/// A rolled-out latent grid on the tape: `grid[i]` is the batch of
/// latents at tau_i, with `grid.len() == t_total`.
pub struct TapeRollout {
    pub grid: Vec<TensorId>,
    pub field_evals: usize,
}

/// Euler integration over the window grid: exactly `t_total - 1` field
/// evaluations, z_{i+1} = z_i + dtau * u(z_i, tau_i, c).
pub fn euler_rollout_tape(
    model: &FlowModel,
    tape: &mut Tape,
    bind: &TapeBinding,
    z0: TensorId,
    c: TensorId,
    wcfg: &WindowConfig,
) -> Result<TapeRollout> {
    let t_total = wcfg.total();
    if t_total < 2 {
        return Err(Error::config(format!(
            "rollout needs a grid of at least 2 points, got {t_total}"
        )));
    }
    let batch = tape.shape(z0).rows;
    let dtau = wcfg.delta_tau();
    let mut grid = Vec::with_capacity(t_total);
    grid.push(z0);
    let mut z = z0;
    for i in 0..t_total - 1 {
        let taus = vec![wcfg.tau(i); batch];
        let u = model.u_theta(tape, bind, z, &taus, c)?;
        let step = tape.scale(u, dtau);
        z = tape.add(z, step)?;
        grid.push(z);
    }
    Ok(TapeRollout {
        grid,
        field_evals: t_total - 1,
    })
}

/// A rolled-out latent trajectory as plain tensors (each t_total rows of
/// batch x M latents collapsed to one tensor per grid point).
#[derive(Clone, Debug)]
pub struct LatentTrajectory {
    pub grid: Vec<Tensor>,
    pub field_evals: usize,
}

/// Value-level Euler rollout from `z0` (batch x M) under context `c`.
pub fn euler_rollout(
    model: &FlowModel,
    z0: &Tensor,
    c: &Tensor,
    wcfg: &WindowConfig,
) -> Result<LatentTrajectory> {
    let mut tape = Tape::new();
    let bind = TapeBinding::bind_frozen(&mut tape, &model.params);
    let z0_id = tape.input(z0.rows(), z0.cols(), z0.values().to_vec())?;
    let c_id = tape.input(c.rows(), c.cols(), c.values().to_vec())?;
    let rollout = euler_rollout_tape(model, &mut tape, &bind, z0_id, c_id, wcfg)?;
    Ok(LatentTrajectory {
        grid: rollout.grid.iter().map(|&id| tape.tensor(id)).collect(),
        field_evals: rollout.field_evals,
    })
}

/// Endpoint deviation ||z_1 - e1||^2, averaged over the batch.
pub fn terminal_loss(traj: &LatentTrajectory, e1: &Tensor) -> Result<f64> {
    let last = traj.grid.last().ok_or_else(|| Error::shape("empty trajectory"))?;
    if last.shape() != e1.shape() {
        return Err(Error::shape(format!(
            "terminal loss between {} and {}",
            last.shape(),
            e1.shape()
        )));
    }
    let total: f64 = last
        .values()
        .iter()
        .zip(e1.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / last.rows() as f64)
}

/// Softmax-decode the prediction-step latents of a trajectory.
///
/// Returns one t_pred x M probability matrix per batch row.
pub fn decode_beams(traj: &LatentTrajectory, wcfg: &WindowConfig) -> Result<Vec<Tensor>> {
    if traj.grid.len() != wcfg.total() {
        return Err(Error::shape(format!(
            "trajectory of {} points for a {}-frame window",
            traj.grid.len(),
            wcfg.total()
        )));
    }
    let batch = traj.grid[0].rows();
    let m = traj.grid[0].cols();
    let mut out = vec![Tensor::zeros(wcfg.t_pred, m); batch];
    for j in 0..wcfg.t_pred {
        let z = &traj.grid[wcfg.t_hist + j];
        for b in 0..batch {
            softmax_row(z.row(b), out[b].row_mut(j));
        }
    }
    Ok(out)
}

/// Mean cross-entropy of prediction-step probabilities against labels,
/// normalized by the number of prediction steps (probabilities clamped
/// at `PROB_CLAMP` before the log).
pub fn ce_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.rows() {
        return Err(Error::shape(format!(
            "{} labels for {} probability rows",
            labels.len(),
            probs.rows()
        )));
    }
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        if l >= probs.cols() {
            return Err(Error::shape(format!("label {l} outside {} classes", probs.cols())));
        }
        total -= probs.row(r)[l].max(PROB_CLAMP).ln();
    }
    Ok(total / probs.rows() as f64)
}

/// Indices of the K largest probabilities, ties toward the lower index,
/// ordered by descending probability.
pub fn predict_topk(probs: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > probs.len() {
        return Err(Error::config(format!(
            "top-k of {k} from {} probabilities",
            probs.len()
        )));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Build the full training objective for one minibatch on the tape.
///
/// Draws nothing itself: the per-sample flow times come in as `taus`.
pub fn batch_loss_tape(
    model: &FlowModel,
    tape: &mut Tape,
    bind: &TapeBinding,
    fb: &FlowBatch,
    wcfg: &WindowConfig,
    weights: &LossWeights,
    taus: &[f64],
) -> Result<(TensorId, LossBreakdown)> {
    let m = model.cfg().m;
    if taus.len() != fb.batch {
        return Err(Error::shape(format!(
            "{} flow times for a batch of {}",
            taus.len(),
            fb.batch
        )));
    }

    // condition vector from the history
    let x_hist = tape.input(fb.x_hist.rows(), 4, fb.x_hist.values().to_vec())?;
    let z_hist = model.g_box(tape, bind, x_hist)?;
    let c = model.f_cond(tape, bind, z_hist, fb.batch, wcfg.t_hist)?;

    // flow-matching term on the interpolant
    let mut z_tau = Vec::with_capacity(fb.batch * m);
    for (i, &tau) in taus.iter().enumerate() {
        z_tau.extend(interpolate(fb.e0.row(i), fb.e1.row(i), tau)?);
    }
    let z_tau = tape.input(fb.batch, m, z_tau)?;
    let u = model.u_theta(tape, bind, z_tau, taus, c)?;
    let target = tape.input(fb.batch, m, fb.fm_target.values().to_vec())?;
    let residual = tape.sub(u, target)?;
    let fm_raw = tape.mean_row_sum_sq(residual);

    // terminal term: roll the training branch from e0
    let e0 = tape.input(fb.batch, m, fb.e0.values().to_vec())?;
    let rollout = euler_rollout_tape(model, tape, bind, e0, c, wcfg)?;
    let e1 = tape.input(fb.batch, m, fb.e1.values().to_vec())?;
    let z_end = *rollout.grid.last().expect("grid");
    let term_residual = tape.sub(z_end, e1)?;
    let term_raw = tape.mean_row_sum_sq(term_residual);

    // classification term: roll from the earliest-frame embedding
    let x_first = tape.input(fb.batch, 4, fb.x_first.values().to_vec())?;
    let z0_hat = model.g_box(tape, bind, x_first)?;
    let class_rollout = euler_rollout_tape(model, tape, bind, z0_hat, c, wcfg)?;
    let pred_grid: Vec<TensorId> = class_rollout.grid[wcfg.t_hist..].to_vec();
    let stacked = tape.concat_rows(&pred_grid)?;
    let probs = tape.softmax_rows(stacked);
    let ce_raw = tape.nll_mean_rows(probs, &fb.labels_pred, PROB_CLAMP)?;

    let fm = tape.scale(fm_raw, weights.fm);
    let term = tape.scale(term_raw, weights.term);
    let ce = tape.scale(ce_raw, weights.ce);
    let partial = tape.add(fm, term)?;
    let total = tape.add(partial, ce)?;

    let breakdown = LossBreakdown {
        fm: tape.scalar_value(fm),
        term: tape.scalar_value(term),
        ce: tape.scalar_value(ce),
        total: tape.scalar_value(total),
    };
    Ok((total, breakdown))
}

/// One prediction: per-step beam probabilities, the argmax beams, and
/// how many field evaluations inference spent.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// t_pred x M probabilities.
    pub probs: Tensor,
    /// Argmax beam per prediction step (lowest index wins ties).
    pub beams: Vec<usize>,
    pub field_evals: usize,
}

/// Run flow inference over a batch of histories, each t_hist x 4.
pub fn infer_batch(
    model: &FlowModel,
    histories: &[&Tensor],
    wcfg: &WindowConfig,
) -> Result<Vec<Prediction>> {
    if histories.is_empty() {
        return Err(Error::data("empty inference batch"));
    }
    let m = model.cfg().m;
    let b = histories.len();
    let t_hist = wcfg.t_hist;
    let mut x_hist = Vec::with_capacity(b * t_hist * 4);
    let mut x_first = Vec::with_capacity(b * 4);
    for h in histories {
        if h.rows() != t_hist || h.cols() != 4 {
            return Err(Error::shape(format!(
                "history {} for a {t_hist}-frame window",
                h.shape()
            )));
        }
        x_hist.extend_from_slice(h.values());
        x_first.extend_from_slice(h.row(0));
    }

    let mut tape = Tape::new();
    let bind = TapeBinding::bind_frozen(&mut tape, &model.params);
    let x_hist = tape.input(b * t_hist, 4, x_hist)?;
    let z_hist = model.g_box(&mut tape, &bind, x_hist)?;
    let c = model.f_cond(&mut tape, &bind, z_hist, b, t_hist)?;
    let x_first = tape.input(b, 4, x_first)?;
    let z0 = model.g_box(&mut tape, &bind, x_first)?;
    let rollout = euler_rollout_tape(model, &mut tape, &bind, z0, c, wcfg)?;

    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut probs = Tensor::zeros(wcfg.t_pred, m);
        for j in 0..wcfg.t_pred {
            let z = tape.values(rollout.grid[t_hist + j]);
            softmax_row(&z[i * m..(i + 1) * m], probs.row_mut(j));
        }
        probs.ensure_finite("inference probabilities")?;
        let beams = argmax_rows(&probs);
        out.push(Prediction {
            probs,
            beams,
            field_evals: rollout.field_evals,
        });
    }
    Ok(out)
}

/// Single-history inference (a batch of one).
pub fn infer(model: &FlowModel, x_hist: &Tensor, wcfg: &WindowConfig) -> Result<Prediction> {
    Ok(infer_batch(model, &[x_hist], wcfg)?.remove(0))
}

pub(crate) fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
