//! Multi-head self-attention with a Transformer-style sub-layer connection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Sinusoidal position table, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding<F> {
    /// `[len, D]`: row `s` holds `sin(s / 10000^(2i/D))` at column `2i`
    /// and `cos(s / 10000^(2i/D))` at column `2i + 1`.
    pub table: Tensor<F>,
}

impl<F: Real> PositionalEncoding<F> {
    pub fn new(dim: usize, len: usize) -> Self {
        let mut data = vec![F::zero(); len * dim];
        for s in 0..len {
            for c in 0..dim {
                let pair = (c / 2) * 2;
                let angle = s as f64 / 10000f64.powf(pair as f64 / dim as f64);
                let v = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                data[s * dim + c] = F::c(v);
            }
        }
        PositionalEncoding {
            table: Tensor::new([len, dim], data).expect("table shape"),
        }
    }

    /// First `len` positions.
    pub fn slice(&self, len: usize) -> Result<Tensor<F>> {
        let dim = self.table.shape()[1];
        if len > self.table.shape()[0] {
            return Err(Error::Usage(format!(
                "positional table holds {} positions, {len} requested",
                self.table.shape()[0]
            )));
        }
        Tensor::new([len, dim], self.table.data()[..len * dim].to_vec())
    }
}

/// Parameters of one attentive layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Feature-axis normalization applied before the positional encoding.
    pub ln_in_gain: ParamId,
    pub ln_in_bias: ParamId,
    /// Shared `[D, D]` maps with `[D]` biases.
    pub w_query: ParamId,
    pub b_query: ParamId,
    pub w_key: ParamId,
    pub b_key: ParamId,
    pub w_value: ParamId,
    pub b_value: ParamId,
    /// Per-head maps stacked as `[J, D/J, D]`.
    pub w_query_heads: ParamId,
    pub w_key_heads: ParamId,
    pub w_value_heads: ParamId,
    /// Head mixing, `[D, D]` plus `[D]` bias.
    pub w_attn: ParamId,
    pub b_attn: ParamId,
    pub ln_out_gain: ParamId,
    pub ln_out_bias: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        let bound = 1.0 / (dim as f64).sqrt();
        let dh = dim / heads;
        let mut w = |name: &str, shape: &[usize]| {
            store.add(format!("{prefix}.{name}"), uniform::<F>(rng, shape, bound))
        };
        let w_query = w("w_query", &[dim, dim])?;
        let b_query = w("b_query", &[dim])?;
        let w_key = w("w_key", &[dim, dim])?;
        let b_key = w("b_key", &[dim])?;
        let w_value = w("w_value", &[dim, dim])?;
        let b_value = w("b_value", &[dim])?;
        let w_query_heads = w("w_query_heads", &[heads, dh, dim])?;
        let w_key_heads = w("w_key_heads", &[heads, dh, dim])?;
        let w_value_heads = w("w_value_heads", &[heads, dh, dim])?;
        let w_attn = w("w_attn", &[dim, dim])?;
        let b_attn = w("b_attn", &[dim])?;
        let ln_in_gain = store.add(
            format!("{prefix}.ln_in.gain"),
            Tensor::full([dim], F::one()),
        )?;
        let ln_in_bias = store.add(format!("{prefix}.ln_in.bias"), Tensor::zeros([dim]))?;
        let ln_out_gain = store.add(
            format!("{prefix}.ln_out.gain"),
            Tensor::full([dim], F::one()),
        )?;
        let ln_out_bias = store.add(format!("{prefix}.ln_out.bias"), Tensor::zeros([dim]))?;
        Ok(AttentionParams {
            ln_in_gain,
            ln_in_bias,
            w_query,
            b_query,
            w_key,
            b_key,
            w_value,
            b_value,
            w_query_heads,
            w_key_heads,
            w_value_heads,
            w_attn,
            b_attn,
            ln_out_gain,
            ln_out_bias,
            heads,
        })
    }

    /// Independent of the sequence length and of the number of sequences.
    pub fn num_params(dim: usize) -> usize {
        // shared q/k/v with bias, per-head q/k/v, mixing with bias, two LN sites
        3 * (dim * dim + dim) + 3 * dim * dim + (dim * dim + dim) + 4 * dim
    }
}

pub fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "feature dimension {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Dropout applied to the attention output in training mode.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

/// Evaluation disables dropout; training draws masks from the given generator.
pub enum Mode<'r> {
    Eval,
    Train(Dropout<'r>),
}

impl Mode<'_> {
    pub(crate) fn dropout<F: Real>(&mut self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let Mode::Train(d) = self else {
            return Ok(x);
        };
        if d.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - d.rate;
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let scale = F::c(1.0 / keep);
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if d.rng.gen::<f64>() < keep {
                    scale
                } else {
                    F::zero()
                }
            })
            .collect();
        let mask = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, mask)
    }
}

/// Result of one attentive layer before the outer residual.
pub struct AttentionOut {
    /// `LN(G + Dropout(A))`, shaped like the input.
    pub output: Var,
    /// Softmax weights `[B, J, T, T]` (rows are queries).
    pub weights: Var,
}

/// Attentive layer over `x: [B, T, D]`: B independent sequences of length T
/// share every weight. `pos` is `[T, D]` or `None` to omit positional encoding.
pub fn attention_layer<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    p: &AttentionParams,
    vars: &[Var],
    pos: Option<Var>,
    mode: &mut Mode<'_>,
) -> Result<AttentionOut> {
    let shape = g.shape(x).to_vec();
    let (batch, len, dim) = (shape[0], shape[1], shape[2]);
    check_heads(dim, p.heads)?;
    let heads = p.heads;
    let dh = dim / heads;
    let v = |id: ParamId| vars[id.index()];

    let normed = g.layer_norm(x, v(p.ln_in_gain), v(p.ln_in_bias))?;
    let gin = match pos {
        Some(pe) => g.add(normed, pe)?,
        None => normed,
    };
    let flat = g.reshape(gin, &[batch * len, dim])?;

    let project = |g: &mut Graph<F>, w: ParamId, b: ParamId, wh: ParamId| -> Result<Var> {
        let shared = g.matmul_t(flat, v(w), false, true)?;
        let shared = g.add(shared, v(b))?;
        let stacked = g.reshape(v(wh), &[dim, dim])?;
        let per_head = g.matmul_t(shared, stacked, false, true)?;
        let per_head = g.reshape(per_head, &[batch, len, heads, dh])?;
        let per_head = g.permute(per_head, &[0, 2, 1, 3])?;
        g.reshape(per_head, &[batch * heads, len, dh])
    };
    let q = project(g, p.w_query, p.b_query, p.w_query_heads)?;
    let k = project(g, p.w_key, p.b_key, p.w_key_heads)?;
    let val = project(g, p.w_value, p.b_value, p.w_value_heads)?;

    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let weights = g.softmax(scores, 2)?;
    let ctx = g.batch_matmul(weights, val, false)?;
    let ctx = g.reshape(ctx, &[batch, heads, len, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch * len, dim])?;
    let mixed = g.matmul_t(ctx, v(p.w_attn), false, true)?;
    let mixed = g.add(mixed, v(p.b_attn))?;
    let attn = g.reshape(mixed, &[batch, len, dim])?;

    let attn = mode.dropout(g, attn)?;
    let sum = g.add(gin, attn)?;
    let output = g.layer_norm(sum, v(p.ln_out_gain), v(p.ln_out_bias))?;
    let weights = g.reshape(weights, &[batch, heads, len, len])?;
    Ok(AttentionOut { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_values() {
        let pe = PositionalEncoding::<f64>::new(4, 6);
        let t = &pe.table;
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 1]), 1.0);
        assert!((t.at(&[3, 0]) - 3f64.sin()).abs() < 1e-15);
        assert!((t.at(&[3, 2]) - (3.0 / 100.0f64).sin()).abs() < 1e-15);
        assert!((t.at(&[3, 3]) - (3.0 / 100.0f64).cos()).abs() < 1e-15);
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(pe.slice(2).unwrap().shape(), &[2, 4]);
        assert!(pe.slice(7).is_err());
    }

    #[test]
    fn heads_must_divide_dim() {
        assert!(matches!(check_heads(10, 4), Err(Error::Config(_))));
        assert!(check_heads(8, 4).is_ok());
    }
}
