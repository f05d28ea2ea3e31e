//! Dual-path blocks.
//!
//! A block runs a local layer along the intra-segment axis (length K) and then
//! a global layer along the inter-segment axis (length S). Each layer is either
//! recurrent (Bi-LSTM, projection, layer norm, residual) or attentive
//! (multi-head self-attention with weights tied across the other axis). The
//! default pairing is a recurrent local layer with an attentive global layer;
//! the global attentive layer may additionally compress the K axis to Q
//! sequences with a learned affine map and expand back afterwards.
//!
//! Inside the graph, block tensors are laid out `[K, S, D]` so that both the
//! per-step recurrent batch (over S) and the per-k attention batch are
//! contiguous.

pub mod attention;
pub mod lstm;
pub mod mpl;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub use attention::{attention_layer, AttentionParams, Dropout, Mode, PositionalEncoding};
pub use lstm::{bilstm_forward, bilstm_var, BiLstmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Recurrent,
    Attentive,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Recurrent => "recurrent",
            BlockKind::Attentive => "attentive",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" | "lstm" => Ok(BlockKind::Recurrent),
            "attentive" | "attention" => Ok(BlockKind::Attentive),
            _ => Err(Error::Config(format!("unknown layer kind {s:?}"))),
        }
    }
}

/// Which model runs along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockVariant {
    pub local: BlockKind,
    pub global: BlockKind,
    /// Compress K to Q before global attention. Only valid with an attentive global layer.
    pub use_lowdim: bool,
}

impl BlockVariant {
    pub const GALR: BlockVariant = BlockVariant {
        local: BlockKind::Recurrent,
        global: BlockKind::Attentive,
        use_lowdim: true,
    };

    pub const DPRNN: BlockVariant = BlockVariant {
        local: BlockKind::Recurrent,
        global: BlockKind::Recurrent,
        use_lowdim: false,
    };

    pub fn new(local: BlockKind, global: BlockKind, use_lowdim: bool) -> Self {
        BlockVariant {
            local,
            global,
            use_lowdim,
        }
    }

    /// The four local/global pairings, low-dim mapping enabled where applicable.
    pub fn table() -> [BlockVariant; 4] {
        use BlockKind::*;
        [
            BlockVariant::new(Recurrent, Recurrent, false),
            BlockVariant::new(Attentive, Recurrent, false),
            BlockVariant::new(Recurrent, Attentive, true),
            BlockVariant::new(Attentive, Attentive, true),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_lowdim && self.global != BlockKind::Attentive {
            return Err(Error::Config(
                "low-dimension mapping requires an attentive global layer".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("local={} global={}", self.local, self.global)
    }
}

/// Sizes shared by every block of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub d: usize,
    pub k: usize,
    pub q: usize,
    pub h: usize,
    pub j: usize,
}

/// Recurrent layer: Bi-LSTM, projection `R: [D, 2H]`, `Y: [D]`, layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentParams {
    pub lstm: BiLstmParams,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl RecurrentParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        let lstm = BiLstmParams::init(store, rng, &format!("{prefix}.lstm"), dim, hidden)?;
        let bound = 1.0 / ((2 * hidden) as f64).sqrt();
        let proj_w = store.add(
            format!("{prefix}.proj.weight"),
            uniform(rng, &[dim, 2 * hidden], bound),
        )?;
        let proj_b = store.add(format!("{prefix}.proj.bias"), uniform(rng, &[dim], bound))?;
        let ln_gain = store.add(format!("{prefix}.ln.gain"), Tensor::full([dim], F::one()))?;
        let ln_bias = store.add(format!("{prefix}.ln.bias"), Tensor::zeros([dim]))?;
        Ok(RecurrentParams {
            lstm,
            proj_w,
            proj_b,
            ln_gain,
            ln_bias,
        })
    }

    pub fn num_params(dim: usize, hidden: usize) -> usize {
        BiLstmParams::num_params(dim, hidden) + dim * 2 * hidden + dim + 2 * dim
    }
}

/// Affine maps along the K axis: `K -> Q` and back.
#[derive(Debug, Clone, PartialEq)]
pub struct LowDimParams {
    /// `[Q, K]` and `[Q]`.
    pub map_w: ParamId,
    pub map_b: ParamId,
    /// `[K, Q]` and `[K]`.
    pub inv_w: ParamId,
    pub inv_b: ParamId,
}

impl LowDimParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        k: usize,
        q: usize,
    ) -> Result<Self> {
        let bm = 1.0 / (k as f64).sqrt();
        let bi = 1.0 / (q as f64).sqrt();
        Ok(LowDimParams {
            map_w: store.add(format!("{prefix}.c_map.weight"), uniform(rng, &[q, k], bm))?,
            map_b: store.add(format!("{prefix}.c_map.bias"), uniform(rng, &[q], bm))?,
            inv_w: store.add(format!("{prefix}.c_inv.weight"), uniform(rng, &[k, q], bi))?,
            inv_b: store.add(format!("{prefix}.c_inv.bias"), uniform(rng, &[k], bi))?,
        })
    }

    /// `Q(K+1) + K(Q+1)`.
    pub fn num_params(k: usize, q: usize) -> usize {
        q * (k + 1) + k * (q + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LocalLayer {
    Recurrent(RecurrentParams),
    Attentive(AttentionParams),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GlobalLayer {
    Recurrent(RecurrentParams),
    Attentive {
        attn: AttentionParams,
        lowdim: Option<LowDimParams>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub local: LocalLayer,
    pub global: GlobalLayer,
}

pub fn check_lowdim(k: usize, q: usize) -> Result<()> {
    if q == 0 || q > k {
        return Err(Error::Config(format!(
            "low dimension Q={q} must satisfy 1 <= Q <= K={k}"
        )));
    }
    Ok(())
}

impl BlockParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dims: BlockDims,
        variant: BlockVariant,
    ) -> Result<Self> {
        variant.validate()?;
        let local = match variant.local {
            BlockKind::Recurrent => LocalLayer::Recurrent(RecurrentParams::init(
                store,
                rng,
                &format!("{prefix}.local"),
                dims.d,
                dims.h,
            )?),
            BlockKind::Attentive => LocalLayer::Attentive(AttentionParams::init(
                store,
                rng,
                &format!("{prefix}.local"),
                dims.d,
                dims.j,
            )?),
        };
        let global = match variant.global {
            BlockKind::Recurrent => GlobalLayer::Recurrent(RecurrentParams::init(
                store,
                rng,
                &format!("{prefix}.global"),
                dims.d,
                dims.h,
            )?),
            BlockKind::Attentive => {
                let attn =
                    AttentionParams::init(store, rng, &format!("{prefix}.global"), dims.d, dims.j)?;
                let lowdim = if variant.use_lowdim {
                    check_lowdim(dims.k, dims.q)?;
                    Some(LowDimParams::init(
                        store,
                        rng,
                        &format!("{prefix}.global"),
                        dims.k,
                        dims.q,
                    )?)
                } else {
                    None
                };
                GlobalLayer::Attentive { attn, lowdim }
            }
        };
        Ok(BlockParams { local, global })
    }

    /// Closed-form parameter count of one block.
    pub fn num_params(dims: BlockDims, variant: BlockVariant) -> usize {
        let layer = |kind: BlockKind| match kind {
            BlockKind::Recurrent => RecurrentParams::num_params(dims.d, dims.h),
            BlockKind::Attentive => AttentionParams::num_params(dims.d),
        };
        let lowdim = if variant.use_lowdim && variant.global == BlockKind::Attentive {
            LowDimParams::num_params(dims.k, dims.q)
        } else {
            0
        };
        layer(variant.local) + layer(variant.global) + lowdim
    }
}

/// Per-forward options for blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockOptions {
    /// Add sinusoidal positional encoding in attentive layers.
    pub positional: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        BlockOptions { positional: true }
    }
}

/// Softmax weights captured from a block's attentive layers.
#[derive(Debug, Clone, Default)]
pub struct BlockTrace {
    /// `[K or Q, J, S, S]`.
    pub global_weights: Option<Var>,
    /// `[S, J, K, K]`.
    pub local_weights: Option<Var>,
}

fn positional<F: Real>(
    g: &mut Graph<F>,
    len: usize,
    dim: usize,
    opts: BlockOptions,
) -> Option<Var> {
    opts.positional
        .then(|| g.constant(PositionalEncoding::new(dim, len).table))
}

/// `LN(R · BiLSTM(x) + Y) + x` over `x: [T, B, D]`, recurring along T.
pub fn recurrent_layer<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    p: &RecurrentParams,
    vars: &[Var],
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (steps, batch, dim) = (shape[0], shape[1], shape[2]);
    let h2 = 2 * p.lstm.hidden;
    let y = bilstm_var(g, x, &p.lstm, vars)?;
    let flat = g.reshape(y, &[steps * batch, h2])?;
    let proj = g.matmul_t(flat, vars[p.proj_w.index()], false, true)?;
    let proj = g.add(proj, vars[p.proj_b.index()])?;
    let proj = g.reshape(proj, &[steps, batch, dim])?;
    let normed = g.layer_norm(proj, vars[p.ln_gain.index()], vars[p.ln_bias.index()])?;
    g.add(normed, x)
}

/// Local layer on `t: [K, S, D]`, returning `L̂` of the same shape.
pub fn local_layer_var<F: Real>(
    g: &mut Graph<F>,
    t: Var,
    layer: &LocalLayer,
    vars: &[Var],
    opts: BlockOptions,
    mode: &mut Mode<'_>,
    trace: &mut BlockTrace,
) -> Result<Var> {
    match layer {
        LocalLayer::Recurrent(p) => recurrent_layer(g, t, p, vars),
        LocalLayer::Attentive(p) => {
            let shape = g.shape(t).to_vec();
            let x = g.permute(t, &[1, 0, 2])?;
            let pe = positional(g, shape[0], shape[2], opts);
            let out = attention_layer(g, x, p, vars, pe, mode)?;
            trace.local_weights = Some(out.weights);
            let y = g.add(out.output, x)?;
            g.permute(y, &[1, 0, 2])
        }
    }
}

/// Global layer on `L̂: [K, S, D]`, returning the next block input.
pub fn global_layer_var<F: Real>(
    g: &mut Graph<F>,
    lhat: Var,
    layer: &GlobalLayer,
    vars: &[Var],
    opts: BlockOptions,
    mode: &mut Mode<'_>,
    trace: &mut BlockTrace,
) -> Result<Var> {
    let shape = g.shape(lhat).to_vec();
    let (k, s, d) = (shape[0], shape[1], shape[2]);
    match layer {
        GlobalLayer::Recurrent(p) => {
            let x = g.permute(lhat, &[1, 0, 2])?;
            let y = recurrent_layer(g, x, p, vars)?;
            g.permute(y, &[1, 0, 2])
        }
        GlobalLayer::Attentive { attn, lowdim: None } => {
            let pe = positional(g, s, d, opts);
            let out = attention_layer(g, lhat, attn, vars, pe, mode)?;
            trace.global_weights = Some(out.weights);
            g.add(out.output, lhat)
        }
        GlobalLayer::Attentive {
            attn,
            lowdim: Some(ld),
        } => {
            let q = g.shape(vars[ld.map_w.index()])[0];
            let flat = g.reshape(lhat, &[k, s * d])?;
            let mapped = g.matmul(vars[ld.map_w.index()], flat)?;
            let mb = g.reshape(vars[ld.map_b.index()], &[q, 1])?;
            let mapped = g.add(mapped, mb)?;
            let mapped = g.reshape(mapped, &[q, s, d])?;
            let pe = positional(g, s, d, opts);
            let out = attention_layer(g, mapped, attn, vars, pe, mode)?;
            trace.global_weights = Some(out.weights);
            let flat = g.reshape(out.output, &[q, s * d])?;
            let back = g.matmul(vars[ld.inv_w.index()], flat)?;
            let ib = g.reshape(vars[ld.inv_b.index()], &[k, 1])?;
            let back = g.add(back, ib)?;
            let back = g.reshape(back, &[k, s, d])?;
            g.add(back, lhat)
        }
    }
}

/// One block on `t: [K, S, D]`.
pub fn block_var<F: Real>(
    g: &mut Graph<F>,
    t: Var,
    p: &BlockParams,
    vars: &[Var],
    opts: BlockOptions,
    mode: &mut Mode<'_>,
    trace: &mut BlockTrace,
) -> Result<Var> {
    let lhat = local_layer_var(g, t, &p.local, vars, opts, mode, trace)?;
    global_layer_var(g, lhat, &p.global, vars, opts, mode, trace)
}

/// A stack of blocks with its own parameter store, operating on segment
/// tensors in `[D, S, K]` layout. Used for standalone experiments and tests.
#[derive(Debug, Clone)]
pub struct BlockStack<F> {
    pub store: ParamStore<F>,
    pub blocks: Vec<BlockParams>,
    pub dims: BlockDims,
    pub variant: BlockVariant,
    pub options: BlockOptions,
}

impl<F: Real> BlockStack<F> {
    pub fn new(dims: BlockDims, variant: BlockVariant, count: usize, seed: u64) -> Result<Self> {
        attention::check_heads(dims.d, dims.j)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let blocks = (0..count)
            .map(|n| BlockParams::init(&mut store, &mut rng, &format!("block{n}"), dims, variant))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockStack {
            store,
            blocks,
            dims,
            variant,
            options: BlockOptions::default(),
        })
    }

    fn run<T>(
        &self,
        input: &Tensor<F>,
        f: impl FnOnce(&mut Graph<F>, Var, &[Var], &mut BlockTrace) -> Result<(Var, T)>,
    ) -> Result<(Tensor<F>, T, Graph<F>)> {
        if input.ndim() != 3 || input.shape()[0] != self.dims.d {
            return Err(Error::Dimension(format!(
                "expected [D={}, S, K] segments, got {:?}",
                self.dims.d,
                input.shape()
            )));
        }
        let mut g = Graph::new();
        let vars = self.store.bind(&mut g, false);
        let x = g.constant(input.permute(&[2, 1, 0])?);
        let mut trace = BlockTrace::default();
        let (y, extra) = f(&mut g, x, &vars, &mut trace)?;
        let out = g.value(y).permute(&[2, 1, 0])?;
        Ok((out, extra, g))
    }

    pub fn local_layer(&self, t: &Tensor<F>, block: usize) -> Result<Tensor<F>> {
        let p = self.block(block)?;
        let opts = self.options;
        let (out, (), _) = self.run(t, |g, x, vars, tr| {
            Ok((
                local_layer_var(g, x, &p.local, vars, opts, &mut Mode::Eval, tr)?,
                (),
            ))
        })?;
        Ok(out)
    }

    pub fn global_layer(&self, lhat: &Tensor<F>, block: usize) -> Result<Tensor<F>> {
        let p = self.block(block)?;
        let opts = self.options;
        let (out, (), _) = self.run(lhat, |g, x, vars, tr| {
            Ok((
                global_layer_var(g, x, &p.global, vars, opts, &mut Mode::Eval, tr)?,
                (),
            ))
        })?;
        Ok(out)
    }

    /// All blocks in sequence.
    pub fn forward(&self, t: &Tensor<F>) -> Result<Tensor<F>> {
        let opts = self.options;
        let (out, (), _) = self.run(t, |g, mut x, vars, tr| {
            for p in &self.blocks {
                x = block_var(g, x, p, vars, opts, &mut Mode::Eval, tr)?;
            }
            Ok((x, ()))
        })?;
        Ok(out)
    }

    /// Global attention softmax matrices of `block` and `head`: one `[S, S]`
    /// matrix per (possibly compressed) intra-segment index.
    pub fn attention_maps(
        &self,
        t: &Tensor<F>,
        block: usize,
        head: usize,
    ) -> Result<Vec<Tensor<F>>> {
        self.block(block)?;
        if head >= self.dims.j {
            return Err(Error::Usage(format!(
                "head {head} out of range (J={})",
                self.dims.j
            )));
        }
        let opts = self.options;
        let (_, weights, g) = self.run(t, |g, mut x, vars, tr| {
            let mut captured = None;
            for (n, p) in self.blocks.iter().enumerate() {
                let mut local = BlockTrace::default();
                x = block_var(g, x, p, vars, opts, &mut Mode::Eval, &mut local)?;
                if n == block {
                    captured = local.global_weights;
                }
                *tr = local;
            }
            Ok((x, captured))
        })?;
        let weights = weights
            .ok_or_else(|| Error::Usage(format!("block {block} has no global attention layer")))?;
        Ok(split_head(g.value(weights), head))
    }

    fn block(&self, n: usize) -> Result<&BlockParams> {
        self.blocks.get(n).ok_or_else(|| {
            Error::Usage(format!(
                "block {n} out of range ({} blocks)",
                self.blocks.len()
            ))
        })
    }
}

/// Extracts `[T, T]` matrices for one head from `[B, J, T, T]` weights.
pub fn split_head<F: Real>(weights: &Tensor<F>, head: usize) -> Vec<Tensor<F>> {
    let s = weights.shape();
    let (batch, heads, len) = (s[0], s[1], s[2]);
    (0..batch)
        .map(|b| {
            let start = ((b * heads + head) * len) * len;
            Tensor::new(
                [len, len],
                weights.data()[start..start + len * len].to_vec(),
            )
            .expect("square")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_validation() {
        assert!(BlockVariant::GALR.validate().is_ok());
        assert!(
            BlockVariant::new(BlockKind::Recurrent, BlockKind::Recurrent, true)
                .validate()
                .is_err()
        );
        assert_eq!(BlockVariant::table().len(), 4);
        assert_eq!("lstm".parse::<BlockKind>().unwrap(), BlockKind::Recurrent);
        assert!("conv".parse::<BlockKind>().is_err());
    }

    #[test]
    fn lowdim_bounds() {
        assert!(check_lowdim(8, 8).is_ok());
        assert!(matches!(check_lowdim(8, 9), Err(Error::Config(_))));
        assert!(matches!(check_lowdim(8, 0), Err(Error::Config(_))));
        assert_eq!(LowDimParams::num_params(100, 32), 32 * 101 + 100 * 33);
    }

    #[test]
    fn store_matches_closed_form() {
        let dims = BlockDims {
            d: 8,
            k: 6,
            q: 3,
            h: 5,
            j: 2,
        };
        for v in BlockVariant::table() {
            let stack = BlockStack::<f32>::new(dims, v, 1, 0).unwrap();
            assert_eq!(
                stack.store.num_scalars(),
                BlockParams::num_params(dims, v),
                "{v:?}"
            );
        }
    }
}
