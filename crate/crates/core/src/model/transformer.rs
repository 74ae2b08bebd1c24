//! Pre-norm transformer encoder over the box-embedding history.
//!
//! Per-frame embeddings are projected to the model width, tagged with
//! sinusoidal positions, passed through self-attention layers over the
//! time axis, and mean-pooled into a single context vector per sample.

use crate::error::{Error, Result};
use crate::model::TapeBinding;
use crate::numerics::params::{init_params, InitScheme, ParamStore};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, TensorId};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct TransformerSpec {
    /// Per-frame input width (the latent dimension M).
    pub input: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl TransformerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.layers == 0 || self.input == 0 || self.ff_dim == 0 {
            return Err(Error::config("transformer dims must be >= 1"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.model_dim;
        let in_proj = self.input * d + d;
        let per_layer = 2 * (2 * d)                 // two layer norms
            + 4 * (d * d + d)                        // q, k, v, o
            + (d * self.ff_dim + self.ff_dim)        // ff in
            + (self.ff_dim * d + d); // ff out
        in_proj + self.layers * per_layer + 2 * d // final norm
    }
}

fn ones(cols: usize) -> Tensor {
    Tensor::from_vec(1, cols, vec![1.0; cols]).expect("ones")
}

pub fn init_transformer(
    params: &mut ParamStore,
    prefix: &str,
    spec: &TransformerSpec,
    rng: &mut Rng,
) {
    let d = spec.model_dim;
    params.insert(
        format!("{prefix}.in_proj.w"),
        init_params(spec.input, d, InitScheme::UniformFanIn, rng),
    );
    params.insert(format!("{prefix}.in_proj.b"), Tensor::zeros(1, d));
    for l in 0..spec.layers {
        for norm in ["ln1", "ln2"] {
            params.insert(format!("{prefix}.l{l}.{norm}.g"), ones(d));
            params.insert(format!("{prefix}.l{l}.{norm}.b"), Tensor::zeros(1, d));
        }
        for proj in ["wq", "wk", "wv", "wo"] {
            params.insert(
                format!("{prefix}.l{l}.attn.{proj}"),
                init_params(d, d, InitScheme::UniformFanIn, rng),
            );
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            params.insert(format!("{prefix}.l{l}.attn.{bias}"), Tensor::zeros(1, d));
        }
        params.insert(
            format!("{prefix}.l{l}.ff.w1"),
            init_params(d, spec.ff_dim, InitScheme::UniformFanIn, rng),
        );
        params.insert(format!("{prefix}.l{l}.ff.b1"), Tensor::zeros(1, spec.ff_dim));
        params.insert(
            format!("{prefix}.l{l}.ff.w2"),
            init_params(spec.ff_dim, d, InitScheme::UniformFanIn, rng),
        );
        params.insert(format!("{prefix}.l{l}.ff.b2"), Tensor::zeros(1, d));
    }
    params.insert(format!("{prefix}.final_ln.g"), ones(d));
    params.insert(format!("{prefix}.final_ln.b"), Tensor::zeros(1, d));
}

/// Classic sinusoidal positional table, `positions x dim`.
pub fn sinusoidal_positions(positions: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; positions * dim];
    for pos in 0..positions {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Encode a batch of histories into one context vector per sample.
///
/// `z_hist` is (batch * t_hist) x input, sample-major (sample b's frames
/// occupy rows b*t_hist..(b+1)*t_hist). Returns batch x model_dim.
pub fn transformer_forward(
    tape: &mut Tape,
    bind: &TapeBinding,
    prefix: &str,
    spec: &TransformerSpec,
    z_hist: TensorId,
    batch: usize,
    t_hist: usize,
) -> Result<TensorId> {
    spec.validate()?;
    let shape = tape.shape(z_hist);
    if shape.rows != batch * t_hist || shape.cols != spec.input {
        return Err(Error::shape(format!(
            "transformer input {shape} for batch {batch} x t_hist {t_hist} x {}",
            spec.input
        )));
    }
    if t_hist == 0 {
        return Err(Error::shape("empty history"));
    }
    let d = spec.model_dim;
    let head_dim = d / spec.heads;

    let w_in = bind.id(&format!("{prefix}.in_proj.w"))?;
    let b_in = bind.id(&format!("{prefix}.in_proj.b"))?;
    let proj = tape.matmul(z_hist, w_in)?;
    let mut x = tape.add_row(proj, b_in)?;

    // tile the positional table over the batch
    let pe_one = sinusoidal_positions(t_hist, d);
    let mut pe = Vec::with_capacity(batch * t_hist * d);
    for _ in 0..batch {
        pe.extend_from_slice(&pe_one);
    }
    let pe = tape.input(batch * t_hist, d, pe)?;
    x = tape.add(x, pe)?;

    let scale = 1.0 / (head_dim as f64).sqrt();
    for l in 0..spec.layers {
        let g1 = bind.id(&format!("{prefix}.l{l}.ln1.g"))?;
        let b1 = bind.id(&format!("{prefix}.l{l}.ln1.b"))?;
        let xn = tape.layer_norm_rows(x, g1, b1)?;

        let wq = bind.id(&format!("{prefix}.l{l}.attn.wq"))?;
        let wk = bind.id(&format!("{prefix}.l{l}.attn.wk"))?;
        let wv = bind.id(&format!("{prefix}.l{l}.attn.wv"))?;
        let wo = bind.id(&format!("{prefix}.l{l}.attn.wo"))?;
        let bq = bind.id(&format!("{prefix}.l{l}.attn.bq"))?;
        let bk = bind.id(&format!("{prefix}.l{l}.attn.bk"))?;
        let bv = bind.id(&format!("{prefix}.l{l}.attn.bv"))?;
        let bo = bind.id(&format!("{prefix}.l{l}.attn.bo"))?;

        let q = tape.matmul(xn, wq)?;
        let q = tape.add_row(q, bq)?;
        let k = tape.matmul(xn, wk)?;
        let k = tape.add_row(k, bk)?;
        let v = tape.matmul(xn, wv)?;
        let v = tape.add_row(v, bv)?;

        let mut ctx_parts = Vec::with_capacity(batch);
        for b in 0..batch {
            let qb = tape.slice_rows(q, b * t_hist, t_hist)?;
            let kb = tape.slice_rows(k, b * t_hist, t_hist)?;
            let vb = tape.slice_rows(v, b * t_hist, t_hist)?;
            let mut heads = Vec::with_capacity(spec.heads);
            for h in 0..spec.heads {
                let qh = tape.slice_cols(qb, h * head_dim, head_dim)?;
                let kh = tape.slice_cols(kb, h * head_dim, head_dim)?;
                let vh = tape.slice_cols(vb, h * head_dim, head_dim)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores);
                heads.push(tape.matmul(attn, vh)?);
            }
            ctx_parts.push(tape.concat_cols(&heads)?);
        }
        let ctx = tape.concat_rows(&ctx_parts)?;
        let out = tape.matmul(ctx, wo)?;
        let out = tape.add_row(out, bo)?;
        x = tape.add(x, out)?;

        let g2 = bind.id(&format!("{prefix}.l{l}.ln2.g"))?;
        let b2 = bind.id(&format!("{prefix}.l{l}.ln2.b"))?;
        let xn2 = tape.layer_norm_rows(x, g2, b2)?;
        let w1 = bind.id(&format!("{prefix}.l{l}.ff.w1"))?;
        let bf1 = bind.id(&format!("{prefix}.l{l}.ff.b1"))?;
        let w2 = bind.id(&format!("{prefix}.l{l}.ff.w2"))?;
        let bf2 = bind.id(&format!("{prefix}.l{l}.ff.b2"))?;
        let h1 = tape.matmul(xn2, w1)?;
        let h1 = tape.add_row(h1, bf1)?;
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(h1, w2)?;
        let h2 = tape.add_row(h2, bf2)?;
        x = tape.add(x, h2)?;
    }

    let gf = bind.id(&format!("{prefix}.final_ln.g"))?;
    let bf = bind.id(&format!("{prefix}.final_ln.b"))?;
    let x = tape.layer_norm_rows(x, gf, bf)?;

    // mean-pool over time, one row per sample
    let mut pooled = Vec::with_capacity(batch);
    for b in 0..batch {
        let xb = tape.slice_rows(x, b * t_hist, t_hist)?;
        pooled.push(tape.mean_rows(xb));
    }
    tape.concat_rows(&pooled)
}
