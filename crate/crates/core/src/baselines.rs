//! RNN and LSTM sequence predictors over the same visual inputs.
//!
//! The recurrent net encodes the box history step by step, then decodes
//! the prediction horizon autoregressively: each step's probability
//! distribution is embedded back to a box-sized input and fed to the
//! next step. A direct multi-head decode is available behind a config
//! switch.

use crate::data::{WindowConfig, WindowSample};
use crate::error::{Error, Result};
use crate::flow::{argmax_rows, LossBreakdown, Prediction};
use crate::model::recurrent::{cell_step, init_cell, zero_state, CellKind, CellSpec};
use crate::model::TapeBinding;
use crate::numerics::params::{init_params, InitScheme, ParamStore};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, TensorId};
use crate::numerics::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum DecodeMode {
    /// Feed each step's output distribution back as the next input.
    Autoregressive,
    /// One linear head emits every horizon step from the final state.
    Direct { t_pred: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecurrentConfig {
    pub cell: CellKind,
    pub hidden: usize,
    /// Codebook size.
    pub m: usize,
    pub decode: DecodeMode,
}

impl Default for RecurrentConfig {
    fn default() -> Self {
        RecurrentConfig {
            cell: CellKind::Lstm,
            hidden: 155,
            m: 32,
            decode: DecodeMode::Autoregressive,
        }
    }
}

impl RecurrentConfig {
    fn cell_spec(&self) -> CellSpec {
        CellSpec {
            kind: self.cell,
            input: 4,
            hidden: self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.m == 0 {
            return Err(Error::config("hidden and m must be >= 1"));
        }
        if let DecodeMode::Direct { t_pred } = self.decode {
            if t_pred == 0 {
                return Err(Error::config("direct decode needs t_pred >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RecurrentModel {
    cfg: RecurrentConfig,
    pub params: ParamStore,
}

impl RecurrentModel {
    pub fn init(cfg: RecurrentConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng.child("baseline");
        init_cell(&mut params, "cell", &cfg.cell_spec(), &mut r);
        params.insert(
            "out.w",
            init_params(cfg.hidden, cfg.m, InitScheme::UniformFanIn, &mut r),
        );
        params.insert("out.b", Tensor::zeros(1, cfg.m));
        match cfg.decode {
            DecodeMode::Autoregressive => {
                params.insert(
                    "fb.w",
                    init_params(cfg.m, 4, InitScheme::UniformFanIn, &mut r),
                );
                params.insert("fb.b", Tensor::zeros(1, 4));
            }
            DecodeMode::Direct { t_pred } => {
                params.insert(
                    "direct.w",
                    init_params(cfg.hidden, t_pred * cfg.m, InitScheme::UniformFanIn, &mut r),
                );
                params.insert("direct.b", Tensor::zeros(1, t_pred * cfg.m));
            }
        }
        Ok(RecurrentModel { cfg, params })
    }

    pub fn from_parts(cfg: RecurrentConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expected = RecurrentModel::init(cfg, &mut Rng::new(0))?;
        let expected_names: Vec<&str> = expected.params.names().collect();
        let got_names: Vec<&str> = params.names().collect();
        if expected_names != got_names {
            return Err(Error::config(
                "checkpoint parameters do not match the baseline config",
            ));
        }
        Ok(RecurrentModel { cfg, params })
    }

    pub fn cfg(&self) -> &RecurrentConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Forward a batch of histories into per-step probability rows.
    ///
    /// `x_hist` is (batch * t_hist) x 4, sample-major. Returns one
    /// batch x M probability node per prediction step.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        x_hist: TensorId,
        batch: usize,
        t_hist: usize,
        t_pred: usize,
    ) -> Result<Vec<TensorId>> {
        let shape = tape.shape(x_hist);
        if shape.rows != batch * t_hist || shape.cols != 4 {
            return Err(Error::shape(format!(
                "recurrent input {shape} for batch {batch} x t_hist {t_hist} x 4"
            )));
        }
        if let DecodeMode::Direct { t_pred: fixed } = self.cfg.decode {
            if fixed != t_pred {
                return Err(Error::shape(format!(
                    "direct head decodes {fixed} steps, asked for {t_pred}"
                )));
            }
        }
        let spec = self.cfg.cell_spec();
        let mut state = zero_state(tape, &spec, batch)?;
        for t in 0..t_hist {
            let rows: Vec<usize> = (0..batch).map(|b| b * t_hist + t).collect();
            let x_t = tape.gather_rows(x_hist, &rows)?;
            state = cell_step(tape, bind, "cell", &spec, x_t, state)?;
        }

        let w_out = bind.id("out.w")?;
        let b_out = bind.id("out.b")?;
        let mut probs = Vec::with_capacity(t_pred);
        match self.cfg.decode {
            DecodeMode::Autoregressive => {
                let w_fb = bind.id("fb.w")?;
                let b_fb = bind.id("fb.b")?;
                for j in 0..t_pred {
                    let logits = tape.matmul(state.h, w_out)?;
                    let logits = tape.add_row(logits, b_out)?;
                    let y = tape.softmax_rows(logits);
                    probs.push(y);
                    if j + 1 < t_pred {
                        let fb = tape.matmul(y, w_fb)?;
                        let fb = tape.add_row(fb, b_fb)?;
                        state = cell_step(tape, bind, "cell", &spec, fb, state)?;
                    }
                }
            }
            DecodeMode::Direct { .. } => {
                let w_d = bind.id("direct.w")?;
                let b_d = bind.id("direct.b")?;
                let all = tape.matmul(state.h, w_d)?;
                let all = tape.add_row(all, b_d)?;
                for j in 0..t_pred {
                    let logits = tape.slice_cols(all, j * self.cfg.m, self.cfg.m)?;
                    probs.push(tape.softmax_rows(logits));
                }
            }
        }
        Ok(probs)
    }

    /// Inference over a batch of histories (frozen tape).
    pub fn predict_batch(
        &self,
        histories: &[&Tensor],
        wcfg: &WindowConfig,
    ) -> Result<Vec<Prediction>> {
        if histories.is_empty() {
            return Err(Error::data("empty inference batch"));
        }
        let b = histories.len();
        let t_hist = wcfg.t_hist;
        let mut values = Vec::with_capacity(b * t_hist * 4);
        for h in histories {
            if h.rows() != t_hist || h.cols() != 4 {
                return Err(Error::shape(format!(
                    "history {} for a {t_hist}-frame window",
                    h.shape()
                )));
            }
            values.extend_from_slice(h.values());
        }
        let mut tape = Tape::new();
        let bind = TapeBinding::bind_frozen(&mut tape, &self.params);
        let x = tape.input(b * t_hist, 4, values)?;
        let steps = self.forward(&mut tape, &bind, x, b, t_hist, wcfg.t_pred)?;

        let m = self.cfg.m;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let mut probs = Tensor::zeros(wcfg.t_pred, m);
            for (j, &step) in steps.iter().enumerate() {
                probs
                    .row_mut(j)
                    .copy_from_slice(&tape.values(step)[i * m..(i + 1) * m]);
            }
            probs.ensure_finite("baseline probabilities")?;
            let beams = argmax_rows(&probs);
            out.push(Prediction {
                probs,
                beams,
                field_evals: 0,
            });
        }
        Ok(out)
    }

    pub fn predict(&self, x_hist: &Tensor, wcfg: &WindowConfig) -> Result<Prediction> {
        Ok(self.predict_batch(&[x_hist], wcfg)?.remove(0))
    }
}

/// CE-only objective through the shared harness.
impl crate::flow::TrainableModel for RecurrentModel {
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
        _rng: &mut Rng,
    ) -> Result<(TensorId, LossBreakdown)> {
        let fb = crate::flow::FlowBatch::new(windows, wcfg, self.cfg.m)?;
        let x = tape.input(fb.x_hist.rows(), 4, fb.x_hist.values().to_vec())?;
        let steps = self.forward(tape, bind, x, fb.batch, wcfg.t_hist, wcfg.t_pred)?;
        let stacked = tape.concat_rows(&steps)?;
        let ce_raw = tape.nll_mean_rows(stacked, &fb.labels_pred, crate::flow::PROB_CLAMP)?;
        let ce = tape.scale(ce_raw, weights.ce);
        let value = tape.scalar_value(ce);
        Ok((
            ce,
            LossBreakdown {
                fm: 0.0,
                term: 0.0,
                ce: value,
                total: value,
            },
        ))
    }
}
