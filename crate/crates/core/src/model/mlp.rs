//! Plain fully connected stacks.

use crate::error::Result;
use crate::model::{Activation, TapeBinding};
use crate::numerics::params::{init_params, InitScheme, ParamStore};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, TensorId};
use crate::numerics::tensor::Tensor;

/// Layer widths of an MLP, input to output.
#[derive(Clone, Debug)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        MlpSpec { dims, activation }
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Insert freshly initialized weights `{prefix}.w{i}` / biases `{prefix}.b{i}`.
pub fn init_mlp(params: &mut ParamStore, prefix: &str, spec: &MlpSpec, rng: &mut Rng) {
    for (i, w) in spec.dims.windows(2).enumerate() {
        params.insert(
            format!("{prefix}.w{i}"),
            init_params(w[0], w[1], InitScheme::UniformFanIn, rng),
        );
        params.insert(format!("{prefix}.b{i}"), Tensor::zeros(1, w[1]));
    }
}

/// Forward an R x input batch through the stack. Hidden layers use the
/// configured activation; the final layer is linear.
pub fn mlp_forward(
    tape: &mut Tape,
    bind: &TapeBinding,
    prefix: &str,
    spec: &MlpSpec,
    x: TensorId,
) -> Result<TensorId> {
    let mut h = x;
    for i in 0..spec.layers() {
        let w = bind.id(&format!("{prefix}.w{i}"))?;
        let b = bind.id(&format!("{prefix}.b{i}"))?;
        let lin = tape.matmul(h, w)?;
        h = tape.add_row(lin, b)?;
        if i + 1 < spec.layers() {
            h = spec.activation.apply(tape, h);
        }
    }
    Ok(h)
}
