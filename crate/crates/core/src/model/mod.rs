//! The trainable networks: box embedding, condition encoder, and the
//! conditional vector field.

pub mod mlp;
pub mod recurrent;
pub mod transformer;

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, TensorId};
use crate::numerics::tensor::Tensor;
use mlp::{init_mlp, mlp_forward, MlpSpec};
use recurrent::{cell_step, init_cell, zero_state, CellKind, CellSpec};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use transformer::{init_transformer, transformer_forward, TransformerSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(&self, tape: &mut Tape, x: TensorId) -> TensorId {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// How the scalar flow time enters the vector field input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TauEmbed {
    /// Raw scalar concatenation.
    Scalar,
    /// Sinusoidal features of the given width.
    Sinusoidal { dim: usize },
}

impl TauEmbed {
    pub fn width(&self) -> usize {
        match self {
            TauEmbed::Scalar => 1,
            TauEmbed::Sinusoidal { dim } => *dim,
        }
    }

    pub fn features(&self, tau: f64) -> Vec<f64> {
        match self {
            TauEmbed::Scalar => vec![tau],
            TauEmbed::Sinusoidal { dim } => (0..*dim)
                .map(|i| {
                    let freq = 10_000f64.powf((2 * (i / 2)) as f64 / *dim as f64);
                    let angle = tau * freq;
                    if i % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
                .collect(),
        }
    }
}

/// Condition encoder choice. The transformer is the default; the
/// recurrent variants exist for the encoder-swap ablations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "encoder")]
pub enum CondEncoder {
    Transformer {
        layers: usize,
        heads: usize,
        /// Feed-forward width; defaults to the model width.
        ff_dim: Option<usize>,
    },
    Lstm {
        hidden: usize,
    },
    Rnn {
        hidden: usize,
    },
}

impl Default for CondEncoder {
    fn default() -> Self {
        CondEncoder::Transformer {
            layers: 2,
            heads: 4,
            ff_dim: None,
        }
    }
}

/// Architecture of the flow predictor.
///
/// The context width is pinned to `4 * m`; everything else is a knob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Codebook size; also the latent dimension.
    pub m: usize,
    pub g_box_hidden: Vec<usize>,
    pub u_hidden: Vec<usize>,
    pub activation: Activation,
    pub cond: CondEncoder,
    pub tau_embed: TauEmbed,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m: 32,
            g_box_hidden: vec![16, 64, 128],
            u_hidden: vec![128, 128],
            activation: Activation::Relu,
            cond: CondEncoder::default(),
            tau_embed: TauEmbed::Scalar,
        }
    }
}

impl ModelConfig {
    pub fn cond_dim(&self) -> usize {
        4 * self.m
    }

    pub fn g_box_spec(&self) -> MlpSpec {
        MlpSpec::new(4, &self.g_box_hidden, self.m, self.activation)
    }

    pub fn u_theta_spec(&self) -> MlpSpec {
        let input = self.m + self.tau_embed.width() + self.cond_dim();
        MlpSpec::new(input, &self.u_hidden, self.m, self.activation)
    }

    pub fn transformer_spec(&self) -> Option<TransformerSpec> {
        match self.cond {
            CondEncoder::Transformer {
                layers,
                heads,
                ff_dim,
            } => Some(TransformerSpec {
                input: self.m,
                model_dim: self.cond_dim(),
                layers,
                heads,
                ff_dim: ff_dim.unwrap_or_else(|| self.cond_dim()),
            }),
            _ => None,
        }
    }

    fn cond_cell_spec(&self) -> Option<CellSpec> {
        match self.cond {
            CondEncoder::Lstm { hidden } => Some(CellSpec {
                kind: CellKind::Lstm,
                input: self.m,
                hidden,
            }),
            CondEncoder::Rnn { hidden } => Some(CellSpec {
                kind: CellKind::Elman,
                input: self.m,
                hidden,
            }),
            CondEncoder::Transformer { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("m must be >= 1"));
        }
        if let Some(spec) = self.transformer_spec() {
            spec.validate()?;
        }
        if let Some(cell) = self.cond_cell_spec() {
            if cell.hidden == 0 {
                return Err(Error::config("condition encoder hidden must be >= 1"));
            }
        }
        if self.tau_embed.width() == 0 {
            return Err(Error::config("tau embedding width must be >= 1"));
        }
        Ok(())
    }
}

/// Mapping from parameter names to their node ids on one tape.
pub struct TapeBinding {
    ids: HashMap<String, TensorId>,
}

impl TapeBinding {
    /// Register every parameter as a grad-tracked leaf (training).
    pub fn bind(tape: &mut Tape, params: &ParamStore) -> Self {
        let ids = params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.param(t)))
            .collect();
        TapeBinding { ids }
    }

    /// Register every parameter as a constant (inference: backward never
    /// touches them, so the same forward builders run grad-free).
    pub fn bind_frozen(tape: &mut Tape, params: &ParamStore) -> Self {
        let ids = params
            .iter()
            .map(|(name, t)| {
                let id = tape
                    .input(t.rows(), t.cols(), t.values().to_vec())
                    .expect("param shape");
                (name.to_string(), id)
            })
            .collect();
        TapeBinding { ids }
    }

    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("unbound parameter {name}")))
    }

    /// Copy accumulated leaf gradients back into the store.
    pub fn harvest_grads(&self, tape: &Tape, params: &mut ParamStore) -> Result<()> {
        for (name, t) in params.iter_mut() {
            let id = self
                .ids
                .get(name)
                .ok_or_else(|| Error::config(format!("unbound parameter {name}")))?;
            match tape.grad(*id) {
                Some(g) => t.set_grad(g)?,
                None => {
                    t.enable_grad();
                    t.zero_grad();
                }
            }
        }
        Ok(())
    }
}

/// The flow predictor: box embedding, condition encoder, vector field.
#[derive(Clone, Debug)]
pub struct FlowModel {
    cfg: ModelConfig,
    pub params: ParamStore,
}

impl FlowModel {
    pub fn init(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        init_mlp(&mut params, "g_box", &cfg.g_box_spec(), &mut rng.child("g_box"));
        if let Some(spec) = cfg.transformer_spec() {
            init_transformer(&mut params, "cond", &spec, &mut rng.child("cond"));
        } else if let Some(cell) = cfg.cond_cell_spec() {
            let mut crng = rng.child("cond");
            init_cell(&mut params, "cond.cell", &cell, &mut crng);
            params.insert(
                "cond.out.w",
                crate::numerics::params::init_params(
                    cell.hidden,
                    cfg.cond_dim(),
                    crate::numerics::params::InitScheme::UniformFanIn,
                    &mut crng,
                ),
            );
            params.insert("cond.out.b", Tensor::zeros(1, cfg.cond_dim()));
        }
        init_mlp(
            &mut params,
            "u_theta",
            &cfg.u_theta_spec(),
            &mut rng.child("u_theta"),
        );
        Ok(FlowModel { cfg, params })
    }

    /// Rebuild from a checkpointed config + parameter store.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expected = FlowModel::init(cfg.clone(), &mut Rng::new(0))?;
        let expected_names: Vec<&str> = expected.params.names().collect();
        let got_names: Vec<&str> = params.names().collect();
        if expected_names != got_names {
            return Err(Error::config(
                "checkpoint parameters do not match the model config",
            ));
        }
        for (name, t) in params.iter() {
            let e = expected.params.require(name)?;
            if e.shape() != t.shape() {
                return Err(Error::config(format!(
                    "checkpoint parameter {name} has shape {}, expected {}",
                    t.shape(),
                    e.shape()
                )));
            }
        }
        Ok(FlowModel { cfg, params })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Parameter count of one subnet by name prefix.
    pub fn param_count_of(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    // ── Tape builders (batched) ──────────────────────────────────────

    /// Embed rows of boxes: R x 4 -> R x M.
    pub fn g_box(&self, tape: &mut Tape, bind: &TapeBinding, x: TensorId) -> Result<TensorId> {
        let shape = tape.shape(x);
        if shape.cols != 4 {
            return Err(Error::shape(format!("g_box input {shape}, want R x 4")));
        }
        mlp_forward(tape, bind, "g_box", &self.cfg.g_box_spec(), x)
    }

    /// Encode per-frame embeddings into contexts: (B * t_hist) x M,
    /// sample-major -> B x 4M.
    pub fn f_cond(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        z_hist: TensorId,
        batch: usize,
        t_hist: usize,
    ) -> Result<TensorId> {
        if t_hist == 0 || batch == 0 {
            return Err(Error::shape("empty history"));
        }
        if let Some(spec) = self.cfg.transformer_spec() {
            return transformer_forward(tape, bind, "cond", &spec, z_hist, batch, t_hist);
        }
        let cell = self.cfg.cond_cell_spec().expect("recurrent cond");
        // regroup sample-major rows into per-step batches
        let mut state = zero_state(tape, &cell, batch)?;
        for t in 0..t_hist {
            let rows: Vec<usize> = (0..batch).map(|b| b * t_hist + t).collect();
            let x_t = tape.gather_rows(z_hist, &rows)?;
            state = cell_step(tape, bind, "cond.cell", &cell, x_t, state)?;
        }
        let w = bind.id("cond.out.w")?;
        let b = bind.id("cond.out.b")?;
        let proj = tape.matmul(state.h, w)?;
        tape.add_row(proj, b)
    }

    /// Evaluate the vector field: z (B x M), per-sample tau, context
    /// (B x 4M) -> velocity (B x M).
    pub fn u_theta(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        z: TensorId,
        taus: &[f64],
        c: TensorId,
    ) -> Result<TensorId> {
        let (sz, sc) = (tape.shape(z), tape.shape(c));
        if sz.cols != self.cfg.m || sc.cols != self.cfg.cond_dim() || sz.rows != sc.rows {
            return Err(Error::shape(format!(
                "u_theta inputs z {sz}, c {sc} for m = {}",
                self.cfg.m
            )));
        }
        if taus.len() != sz.rows {
            return Err(Error::shape(format!(
                "{} tau values for batch of {}",
                taus.len(),
                sz.rows
            )));
        }
        let width = self.cfg.tau_embed.width();
        let mut tau_values = Vec::with_capacity(sz.rows * width);
        for &tau in taus {
            tau_values.extend(self.cfg.tau_embed.features(tau));
        }
        let tau_col = tape.input(sz.rows, width, tau_values)?;
        let joint = tape.concat_cols(&[z, tau_col, c])?;
        mlp_forward(tape, bind, "u_theta", &self.cfg.u_theta_spec(), joint)
    }

    // ── Single-sample conveniences (frozen tape) ─────────────────────

    /// R x 4 boxes -> R x M embeddings, no gradients recorded.
    pub fn g_box_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = TapeBinding::bind_frozen(&mut tape, &self.params);
        let xid = tape.input(x.rows(), x.cols(), x.values().to_vec())?;
        let out = self.g_box(&mut tape, &bind, xid)?;
        Ok(tape.tensor(out))
    }

    /// One history (t_hist x M embeddings) -> context (1 x 4M).
    pub fn f_cond_eval(&self, z_hist: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = TapeBinding::bind_frozen(&mut tape, &self.params);
        let zid = tape.input(z_hist.rows(), z_hist.cols(), z_hist.values().to_vec())?;
        let out = self.f_cond(&mut tape, &bind, zid, 1, z_hist.rows())?;
        Ok(tape.tensor(out))
    }

    /// One field evaluation: z (1 x M), tau, c (1 x 4M) -> velocity (1 x M).
    pub fn u_theta_eval(&self, z: &Tensor, tau: f64, c: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = TapeBinding::bind_frozen(&mut tape, &self.params);
        let zid = tape.input(z.rows(), z.cols(), z.values().to_vec())?;
        let cid = tape.input(c.rows(), c.cols(), c.values().to_vec())?;
        let out = self.u_theta(&mut tape, &bind, zid, &[tau], cid)?;
        Ok(tape.tensor(out))
    }
}

/// Pick the recurrent hidden width whose encoder parameter count lands
/// closest to `target_params` (used for the same-capacity encoder swaps).
pub fn match_recurrent_hidden(
    kind: CellKind,
    input: usize,
    out_dim: usize,
    target_params: usize,
) -> usize {
    let count = |h: usize| -> usize {
        let cell = CellSpec {
            kind,
            input,
            hidden: h,
        };
        cell.param_count() + h * out_dim + out_dim
    };
    let mut best = 1;
    let mut best_diff = usize::MAX;
    for h in 1..=2048 {
        let diff = count(h).abs_diff(target_params);
        if diff < best_diff {
            best = h;
            best_diff = diff;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            m: 4,
            g_box_hidden: vec![6, 8],
            u_hidden: vec![10],
            activation: Activation::Relu,
            cond: CondEncoder::Transformer {
                layers: 2,
                heads: 4,
                ff_dim: None,
            },
            tau_embed: TauEmbed::Scalar,
        }
    }

    #[test]
    fn g_box_default_count_and_shape() {
        let model = FlowModel::init(ModelConfig::default(), &mut Rng::new(1)).unwrap();
        assert_eq!(model.param_count_of("g_box"), 13_616);
        let x = Tensor::from_vec(3, 4, vec![0.1; 12]).unwrap();
        let y = model.g_box_eval(&x).unwrap();
        assert_eq!(y.shape().dims(), [3, 32]);
    }

    #[test]
    fn g_box_batch_matches_per_row() {
        let model = FlowModel::init(tiny_cfg(), &mut Rng::new(2)).unwrap();
        let x = Tensor::from_vec(
            3,
            4,
            vec![0.3, 0.1, -0.4, 0.9, 0.0, 0.2, 0.5, -0.1, 1.0, 0.8, 0.6, 0.4],
        )
        .unwrap();
        let batch = model.g_box_eval(&x).unwrap();
        for r in 0..3 {
            let row = Tensor::from_vec(1, 4, x.row(r).to_vec()).unwrap();
            let single = model.g_box_eval(&row).unwrap();
            assert_eq!(single.values(), batch.row(r));
        }
    }

    #[test]
    fn zeroed_g_box_outputs_zero() {
        let mut model = FlowModel::init(tiny_cfg(), &mut Rng::new(3)).unwrap();
        for (name, t) in model.params.iter_mut() {
            if name.starts_with("g_box") {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = Tensor::from_vec(2, 4, vec![0.5; 8]).unwrap();
        let y = model.g_box_eval(&x).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cond_output_width_is_4m() {
        let model = FlowModel::init(ModelConfig::default(), &mut Rng::new(4)).unwrap();
        let z = Tensor::from_vec(8, 32, vec![0.01; 8 * 32]).unwrap();
        let c = model.f_cond_eval(&z).unwrap();
        assert_eq!(c.shape().dims(), [1, 128]);
    }

    #[test]
    fn single_token_history_works() {
        let model = FlowModel::init(tiny_cfg(), &mut Rng::new(5)).unwrap();
        let z = Tensor::from_vec(1, 4, vec![0.2, -0.7, 0.3, 0.9]).unwrap();
        let c = model.f_cond_eval(&z).unwrap();
        assert_eq!(c.shape().dims(), [1, 16]);
        assert!(c.is_finite());
    }

    #[test]
    fn permuting_history_changes_the_context() {
        let model = FlowModel::init(tiny_cfg(), &mut Rng::new(6)).unwrap();
        let mut rng = Rng::new(7);
        let values: Vec<f64> = (0..3 * 4).map(|_| rng.range(-1.0, 1.0)).collect();
        let z = Tensor::from_vec(3, 4, values.clone()).unwrap();
        let mut swapped = values;
        for c in 0..4 {
            swapped.swap(c, 4 + c); // swap frames 0 and 1
        }
        let z_swapped = Tensor::from_vec(3, 4, swapped).unwrap();
        let a = model.f_cond_eval(&z).unwrap();
        let b = model.f_cond_eval(&z_swapped).unwrap();
        let max_diff = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 1e-9, "positional encoding inactive");
    }

    #[test]
    fn u_theta_concat_width() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.u_theta_spec().dims[0], 161); // 32 + 1 + 128
        let model = FlowModel::init(cfg, &mut Rng::new(8)).unwrap();
        let z = Tensor::from_vec(1, 32, vec![0.1; 32]).unwrap();
        let c = Tensor::from_vec(1, 128, vec![0.05; 128]).unwrap();
        let v = model.u_theta_eval(&z, 0.5, &c).unwrap();
        assert_eq!(v.shape().dims(), [1, 32]);
    }

    #[test]
    fn zero_final_layer_means_zero_velocity() {
        let mut model = FlowModel::init(tiny_cfg(), &mut Rng::new(9)).unwrap();
        let last = model.cfg().u_theta_spec().layers() - 1;
        for part in ["w", "b"] {
            let t = model
                .params
                .get_mut(&format!("u_theta.{part}{last}"))
                .unwrap();
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let z = Tensor::from_vec(1, 4, vec![0.3; 4]).unwrap();
        let c = Tensor::from_vec(1, 16, vec![-0.2; 16]).unwrap();
        let v = model.u_theta_eval(&z, 0.25, &c).unwrap();
        assert!(v.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn default_param_count_in_expected_band() {
        let model = FlowModel::init(ModelConfig::default(), &mut Rng::new(10)).unwrap();
        let n = model.param_count() as f64;
        // order-of-magnitude target from the reference architecture table
        assert!(n >= 0.5 * 133_904.0 && n <= 2.0 * 133_904.0, "count {n}");
        // the subnet counts add up
        assert_eq!(
            model.param_count(),
            model.param_count_of("g_box")
                + model.param_count_of("cond")
                + model.param_count_of("u_theta")
        );
    }

    #[test]
    fn recurrent_cond_encoders_work() {
        for cond in [CondEncoder::Lstm { hidden: 12 }, CondEncoder::Rnn { hidden: 12 }] {
            let cfg = ModelConfig { cond, ..tiny_cfg() };
            let model = FlowModel::init(cfg, &mut Rng::new(11)).unwrap();
            let z = Tensor::from_vec(3, 4, vec![0.1; 12]).unwrap();
            let c = model.f_cond_eval(&z).unwrap();
            assert_eq!(c.shape().dims(), [1, 16]);
            assert!(c.is_finite());
        }
    }

    #[test]
    fn matched_hidden_hits_the_target_closely() {
        let cfg = ModelConfig::default();
        let model = FlowModel::init(cfg.clone(), &mut Rng::new(12)).unwrap();
        let target = model.param_count_of("cond");
        for kind in [CellKind::Lstm, CellKind::Elman] {
            let h = match_recurrent_hidden(kind, cfg.m, cfg.cond_dim(), target);
            let got = CellSpec {
                kind,
                input: cfg.m,
                hidden: h,
            }
            .param_count()
                + h * cfg.cond_dim()
                + cfg.cond_dim();
            let rel = (got as f64 - target as f64).abs() / target as f64;
            assert!(rel < 0.05, "{kind:?}: hidden {h} gives {got} vs {target}");
        }
    }

    #[test]
    fn from_parts_rejects_mismatched_stores() {
        let model = FlowModel::init(tiny_cfg(), &mut Rng::new(13)).unwrap();
        let mut other = ModelConfig::default();
        other.m = 8;
        assert!(FlowModel::from_parts(other, model.params.clone()).is_err());
        assert!(FlowModel::from_parts(tiny_cfg(), model.params).is_ok());
    }
}
