//! Elman and LSTM cells as tape builders, shared by the sequence
//! baselines and the recurrent condition encoders.

use crate::error::Result;
use crate::model::TapeBinding;
use crate::numerics::params::{init_params, InitScheme, ParamStore};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, TensorId};
use crate::numerics::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Elman,
    Lstm,
}

#[derive(Clone, Copy, Debug)]
pub struct CellSpec {
    pub kind: CellKind,
    pub input: usize,
    pub hidden: usize,
}

impl CellSpec {
    pub fn param_count(&self) -> usize {
        match self.kind {
            CellKind::Elman => self.input * self.hidden + self.hidden * self.hidden + self.hidden,
            CellKind::Lstm => {
                4 * (self.input * self.hidden + self.hidden * self.hidden + self.hidden)
            }
        }
    }

    fn gate_width(&self) -> usize {
        match self.kind {
            CellKind::Elman => self.hidden,
            CellKind::Lstm => 4 * self.hidden,
        }
    }
}

/// Hidden state carried between steps; `cell` is present for LSTM only.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: TensorId,
    pub cell: Option<TensorId>,
}

pub fn init_cell(params: &mut ParamStore, prefix: &str, spec: &CellSpec, rng: &mut Rng) {
    let g = spec.gate_width();
    params.insert(
        format!("{prefix}.w_ih"),
        init_params(spec.input, g, InitScheme::UniformFanIn, rng),
    );
    params.insert(
        format!("{prefix}.w_hh"),
        init_params(spec.hidden, g, InitScheme::UniformFanIn, rng),
    );
    params.insert(format!("{prefix}.b"), Tensor::zeros(1, g));
}

/// Zeroed state for a batch.
pub fn zero_state(tape: &mut Tape, spec: &CellSpec, batch: usize) -> Result<CellState> {
    let h = tape.input(batch, spec.hidden, vec![0.0; batch * spec.hidden])?;
    let cell = match spec.kind {
        CellKind::Elman => None,
        CellKind::Lstm => Some(tape.input(batch, spec.hidden, vec![0.0; batch * spec.hidden])?),
    };
    Ok(CellState { h, cell })
}

/// One recurrent step over a batch: x is batch x input.
pub fn cell_step(
    tape: &mut Tape,
    bind: &TapeBinding,
    prefix: &str,
    spec: &CellSpec,
    x: TensorId,
    state: CellState,
) -> Result<CellState> {
    let w_ih = bind.id(&format!("{prefix}.w_ih"))?;
    let w_hh = bind.id(&format!("{prefix}.w_hh"))?;
    let b = bind.id(&format!("{prefix}.b"))?;
    let xi = tape.matmul(x, w_ih)?;
    let hh = tape.matmul(state.h, w_hh)?;
    let pre = tape.add(xi, hh)?;
    let pre = tape.add_row(pre, b)?;

    match spec.kind {
        CellKind::Elman => Ok(CellState {
            h: tape.tanh(pre),
            cell: None,
        }),
        CellKind::Lstm => {
            let hdim = spec.hidden;
            let i_raw = tape.slice_cols(pre, 0, hdim)?;
            let f_raw = tape.slice_cols(pre, hdim, hdim)?;
            let g_raw = tape.slice_cols(pre, 2 * hdim, hdim)?;
            let o_raw = tape.slice_cols(pre, 3 * hdim, hdim)?;
            let i = tape.sigmoid(i_raw);
            let f = tape.sigmoid(f_raw);
            let g = tape.tanh(g_raw);
            let o = tape.sigmoid(o_raw);
            let c_prev = state.cell.expect("lstm state carries a cell");
            let fc = tape.mul_elem(f, c_prev)?;
            let ig = tape.mul_elem(i, g)?;
            let c = tape.add(fc, ig)?;
            let ct = tape.tanh(c);
            Ok(CellState {
                h: tape.mul_elem(o, ct)?,
                cell: Some(c),
            })
        }
    }
}
