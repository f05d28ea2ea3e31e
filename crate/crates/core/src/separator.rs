//! The assembled network: encoder → segmentation → blocks → mask head →
//! masking → decoder, for C sources.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::attention::check_heads;
use crate::blocks::{
    block_var, check_lowdim, split_head, BlockDims, BlockOptions, BlockParams, BlockTrace,
    BlockVariant, Mode,
};
use crate::error::{dim_err, Error, Result};
use crate::frontend::{
    decode_var, encode_var, pad_waveform, SegmentTensor, Waveform, DEFAULT_SAMPLE_RATE,
};
use crate::graph::{Graph, Var};
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Architecture hyperparameters. Field names are the single-letter symbols
/// used throughout: feature dim `d`, window `m`, segment size `k`, low dim `q`
/// (0 disables the low-dim map), LSTM hidden `h`, heads `j`, blocks `n`,
/// sources `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub q: usize,
    pub h: usize,
    pub j: usize,
    pub n: usize,
    pub c: usize,
    pub variant: BlockVariant,
    pub dropout: f64,
    /// Sinusoidal positional encoding in attentive layers.
    #[serde(default = "default_true")]
    pub positional: bool,
}

fn default_true() -> bool {
    true
}

impl Default for HyperParams {
    /// The lightest full-size GALR configuration.
    fn default() -> Self {
        HyperParams {
            d: 64,
            m: 16,
            k: 100,
            q: 32,
            h: 128,
            j: 8,
            n: 6,
            c: 2,
            variant: BlockVariant::GALR,
            dropout: 0.1,
            positional: true,
        }
    }
}

impl HyperParams {
    /// Small configuration that trains in minutes on one core.
    pub fn toy() -> Self {
        HyperParams {
            d: 16,
            m: 8,
            k: 16,
            q: 8,
            h: 16,
            j: 4,
            n: 2,
            c: 2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.h == 0 {
            return err(format!("D={} and H={} must be positive", self.d, self.h));
        }
        check_heads(self.d, self.j)?;
        if self.k < 2 || self.k % 2 != 0 {
            return err(format!("segment size K={} must be even and >= 2", self.k));
        }
        if self.m < 2 || self.m % 2 != 0 {
            return err(format!("window M={} must be even and >= 2", self.m));
        }
        if self.n == 0 {
            return err("N must be at least 1".into());
        }
        if self.c < 2 {
            return err(format!("C={} must be at least 2", self.c));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.variant.validate()?;
        if self.q != 0 {
            check_lowdim(self.k, self.q)?;
        }
        Ok(())
    }

    /// Variant actually built: the low-dim map needs `q > 0`.
    pub fn effective_variant(&self) -> BlockVariant {
        BlockVariant {
            use_lowdim: self.variant.use_lowdim && self.q > 0,
            ..self.variant
        }
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d: self.d,
            k: self.k,
            q: self.q,
            h: self.h,
            j: self.j,
        }
    }

    /// Closed-form trainable scalar count.
    pub fn count_params(&self) -> usize {
        let (d, m, c) = (self.d, self.m, self.c);
        let frontend = d * m + m * d;
        let mask = (c * d * d + c * d) + 3 * (d * d + d);
        frontend
            + mask
            + self.n * BlockParams::num_params(self.block_dims(), self.effective_variant())
    }

    /// Parameters per component, in store order: encoder, blocks, mask head, decoder.
    pub fn param_breakdown(&self) -> Vec<(&'static str, usize)> {
        let d = self.d;
        vec![
            ("encoder", d * self.m),
            (
                "blocks",
                self.n * BlockParams::num_params(self.block_dims(), self.effective_variant()),
            ),
            ("mask_head", self.c * d * d + self.c * d + 3 * (d * d + d)),
            ("decoder", self.m * d),
        ]
    }
}

/// `W_2d: [C·D, D]` and the three `[D, D]` gate/mask maps, each with a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskHeadParams {
    pub w2d: ParamId,
    pub b2d: ParamId,
    pub u_tanh: ParamId,
    pub b_tanh: ParamId,
    pub u_sigmoid: ParamId,
    pub b_sigmoid: ParamId,
    pub u_relu: ParamId,
    pub b_relu: ParamId,
}

impl MaskHeadParams {
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        d: usize,
        c: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        let mut w = |name: &str, shape: &[usize]| {
            store.add(format!("mask.{name}"), uniform::<F>(rng, shape, bound))
        };
        Ok(MaskHeadParams {
            w2d: w("w2d", &[c * d, d])?,
            b2d: w("b2d", &[c * d])?,
            u_tanh: w("u_tanh", &[d, d])?,
            b_tanh: w("b_tanh", &[d])?,
            u_sigmoid: w("u_sigmoid", &[d, d])?,
            b_sigmoid: w("b_sigmoid", &[d])?,
            u_relu: w("u_relu", &[d, d])?,
            b_relu: w("b_relu", &[d])?,
        })
    }
}

/// Node ranges and attention weights recorded during one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// `(phase name, node range)` in execution order.
    pub phases: Vec<(String, Range<usize>)>,
    pub blocks: Vec<BlockTrace>,
    /// Encoder output `[I, D]`.
    pub encoded: Option<Var>,
    /// Output of the last block, `[K, S, D]`.
    pub block_output: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct SeparatorModel<F> {
    pub hp: HyperParams,
    pub store: ParamStore<F>,
    pub encoder: ParamId,
    pub blocks: Vec<BlockParams>,
    pub mask: MaskHeadParams,
    pub decoder: ParamId,
}

impl<F: Real> SeparatorModel<F> {
    pub fn new(hp: HyperParams, seed: u64) -> Result<Self> {
        hp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = store.add(
            "encoder.weight",
            uniform(&mut rng, &[hp.d, 1, hp.m], 1.0 / (hp.m as f64).sqrt()),
        )?;
        let dims = hp.block_dims();
        let variant = hp.effective_variant();
        let blocks = (0..hp.n)
            .map(|n| BlockParams::init(&mut store, &mut rng, &format!("block{n}"), dims, variant))
            .collect::<Result<Vec<_>>>()?;
        let mask = MaskHeadParams::init(&mut store, &mut rng, hp.d, hp.c)?;
        let decoder = store.add(
            "decoder.weight",
            uniform(&mut rng, &[hp.m, hp.d], 1.0 / (hp.d as f64).sqrt()),
        )?;
        Ok(SeparatorModel {
            hp,
            store,
            encoder,
            blocks,
            mask,
            decoder,
        })
    }

    /// Rebuilds a model around existing parameters. Names, order and shapes
    /// must match what `hp` builds.
    pub fn from_store(hp: HyperParams, store: ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(hp, 0)?;
        if store.len() != model.store.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for ((a, ta), (b, tb)) in model.store.iter().zip(store.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Config(format!(
                    "parameter {b} {:?} does not match expected {a} {:?}",
                    tb.shape(),
                    ta.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn cast<G: Real>(&self) -> SeparatorModel<G> {
        SeparatorModel {
            hp: self.hp,
            store: self.store.cast(),
            encoder: self.encoder,
            blocks: self.blocks.clone(),
            mask: self.mask.clone(),
            decoder: self.decoder,
        }
    }

    fn options(&self) -> BlockOptions {
        BlockOptions {
            positional: self.hp.positional,
        }
    }

    /// Builds the forward pass for `samples` into `g` using bound parameters
    /// `vars`. Returns one `[L]` estimate per source.
    pub fn forward_var(
        &self,
        g: &mut Graph<F>,
        vars: &[Var],
        samples: &[f32],
        mode: &mut Mode<'_>,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Vec<Var>> {
        let hp = &self.hp;
        let mut mark = g.len();
        let mut phase = |g: &Graph<F>, trace: &mut Option<&mut ForwardTrace>, name: String| {
            let end = g.len();
            if let Some(t) = trace.as_deref_mut() {
                t.phases.push((name, mark..end));
            }
            mark = end;
        };

        let (wave, frames) = pad_waveform::<F>(samples, hp.m)?;
        let wave = g.constant(wave);
        let enc = encode_var(g, wave, vars[self.encoder.index()])?;
        let segs = g.segment(enc, hp.k)?;
        let mut t = g.permute(segs, &[1, 0, 2])?;
        phase(g, &mut trace, "frontend".into());

        let opts = self.options();
        for (n, p) in self.blocks.iter().enumerate() {
            let mut bt = BlockTrace::default();
            t = block_var(g, t, p, vars, opts, mode, &mut bt)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.blocks.push(bt);
            }
            phase(g, &mut trace, format!("block{n}"));
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.encoded = Some(enc);
            tr.block_output = Some(t);
        }

        let masks = self.mask_head_var(g, vars, t, frames)?;
        let mut out = Vec::with_capacity(hp.c);
        for m in masks {
            let masked = g.mul(enc, m)?;
            out.push(decode_var(
                g,
                masked,
                vars[self.decoder.index()],
                samples.len(),
                false,
            )?);
        }
        phase(g, &mut trace, "mask_decoder".into());
        Ok(out)
    }

    /// Masks `[I, D]` per source from the last block output `t: [K, S, D]`.
    pub fn mask_head_var(
        &self,
        g: &mut Graph<F>,
        vars: &[Var],
        t: Var,
        frames: usize,
    ) -> Result<Vec<Var>> {
        let (d, c) = (self.hp.d, self.hp.c);
        let shape = g.shape(t).to_vec();
        if shape.len() != 3 || shape[2] != d {
            return Err(dim_err!("mask head expects [K, S, {d}], got {shape:?}"));
        }
        let (k, s) = (shape[0], shape[1]);
        let v = |id: ParamId| vars[id.index()];
        let p = &self.mask;

        let x = g.permute(t, &[1, 0, 2])?;
        let x = g.reshape(x, &[s * k, d])?;
        let y = g.matmul_t(x, v(p.w2d), false, true)?;
        let y = g.add(y, v(p.b2d))?;
        let y = g.reshape(y, &[s, k, c * d])?;
        let y = g.overlap_add(y, k / 2, false, k / 2, frames)?;

        let mut masks = Vec::with_capacity(c);
        for src in 0..c {
            let sc = g.slice(y, 1, src * d, d)?;
            let a = g.matmul_t(sc, v(p.u_tanh), false, true)?;
            let a = g.add(a, v(p.b_tanh))?;
            let a = g.tanh(a)?;
            let b = g.matmul_t(sc, v(p.u_sigmoid), false, true)?;
            let b = g.add(b, v(p.b_sigmoid))?;
            let b = g.sigmoid(b)?;
            let gated = g.mul(a, b)?;
            let m = g.matmul_t(gated, v(p.u_relu), false, true)?;
            let m = g.add(m, v(p.b_relu))?;
            masks.push(g.relu(m)?);
        }
        Ok(masks)
    }

    /// Tensor-level mask head: `[D, S, K]` segments to `C` masks `[D, I]`.
    pub fn mask_head(&self, t: &SegmentTensor<F>) -> Result<Vec<Tensor<F>>> {
        let mut g = Graph::new();
        let vars = self.store.bind(&mut g, false);
        let x = g.constant(t.data.permute(&[2, 1, 0])?);
        let masks = self.mask_head_var(&mut g, &vars, x, t.valid_length)?;
        masks
            .into_iter()
            .map(|m| g.value(m).permute(&[1, 0]))
            .collect()
    }

    /// Inference: one waveform per source, each as long as the input.
    pub fn separate(&self, w: &Waveform) -> Result<Vec<Waveform>> {
        let mut g = Graph::new();
        let vars = self.store.bind(&mut g, false);
        let outs = self.forward_var(&mut g, &vars, &w.samples, &mut Mode::Eval, None)?;
        let rate = if w.sample_rate == 0 {
            DEFAULT_SAMPLE_RATE
        } else {
            w.sample_rate
        };
        Ok(outs
            .into_iter()
            .map(|o| {
                Waveform::new(
                    g.value(o).data().iter().map(|v| v.f64() as f32).collect(),
                    rate,
                )
            })
            .collect())
    }

    /// Global attention softmax matrices of `block`, `head` for input `w`:
    /// one `[S, S]` matrix per intra-segment index (or per low-dim index).
    pub fn attention_maps(
        &self,
        w: &Waveform,
        block: usize,
        head: usize,
    ) -> Result<Vec<Tensor<F>>> {
        if block >= self.hp.n {
            return Err(Error::Usage(format!(
                "block {block} out of range (N={})",
                self.hp.n
            )));
        }
        if head >= self.hp.j {
            return Err(Error::Usage(format!(
                "head {head} out of range (J={})",
                self.hp.j
            )));
        }
        let mut g = Graph::new();
        let vars = self.store.bind(&mut g, false);
        let mut trace = ForwardTrace::default();
        self.forward_var(&mut g, &vars, &w.samples, &mut Mode::Eval, Some(&mut trace))?;
        let weights = trace.blocks[block]
            .global_weights
            .ok_or_else(|| Error::Usage(format!("block {block} has no global attention layer")))?;
        Ok(split_head(g.value(weights), head))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_matches_store() {
        let hp = HyperParams::toy();
        let m = SeparatorModel::<f32>::new(hp, 1).unwrap();
        assert_eq!(m.num_params(), hp.count_params());
        let total: usize = hp.param_breakdown().iter().map(|p| p.1).sum();
        assert_eq!(total, hp.count_params());
    }

    #[test]
    fn validation() {
        let mut hp = HyperParams::toy();
        hp.j = 3;
        assert!(matches!(hp.validate(), Err(Error::Config(_))));
        let mut hp = HyperParams::toy();
        hp.q = hp.k + 2;
        assert!(hp.validate().is_err());
        let mut hp = HyperParams::toy();
        hp.k = 7;
        assert!(hp.validate().is_err());
        let mut hp = HyperParams::toy();
        hp.c = 1;
        assert!(hp.validate().is_err());
    }

    #[test]
    fn separate_shapes() {
        let hp = HyperParams::toy();
        let m = SeparatorModel::<f32>::new(hp, 3).unwrap();
        let w = Waveform::new((0..203).map(|i| (i as f32 * 0.1).sin()).collect(), 8000);
        let out = m.separate(&w).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|o| o.len() == 203));
        assert_eq!(out, m.separate(&w).unwrap());
        assert!(matches!(
            m.separate(&Waveform::new(vec![0.0; 4], 8000)),
            Err(Error::Input(_))
        ));
    }
}
