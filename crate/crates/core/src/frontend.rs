//! Waveform and feature-space transforms: the learned encoder, segmentation into
//! half-overlapping chunks, overlap-add and the learned decoder.
//!
//! Graph-level functions (`*_var`) are what the separator differentiates
//! through; the tensor-level functions wrap them for standalone use.
//!
//! Frames use hop `M/2`. The waveform is zero-padded at the tail so the final
//! frame is complete, and the decoder trims back to the original length.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{segment_count, Graph, Var};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Mono audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Scales to unit peak. Silent input is returned unchanged.
    pub fn normalized(&self) -> Self {
        let peak = self.peak();
        if peak == 0.0 {
            return self.clone();
        }
        Waveform {
            samples: self.samples.iter().map(|x| x / peak).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSignal<F> {
    /// `[D, I]`, elementwise non-negative.
    pub features: Tensor<F>,
    pub original_length: usize,
    pub hop: usize,
}

impl<F: Real> EncodedSignal<F> {
    pub fn frames(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Segmented features `[D, S, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTensor<F> {
    pub data: Tensor<F>,
    /// Frame count `I` before padding.
    pub valid_length: usize,
}

impl<F: Real> SegmentTensor<F> {
    pub fn segments(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn segment_len(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Number of hop-`window/2` frames needed to cover `len` samples.
pub fn frame_count(len: usize, window: usize) -> Result<usize> {
    if window < 2 || window % 2 != 0 {
        return Err(Error::Usage(format!(
            "window length must be even and >= 2, got {window}"
        )));
    }
    if len < window {
        return Err(Error::Input(format!(
            "input of {len} samples is shorter than the window length {window}"
        )));
    }
    Ok((len - window).div_ceil(window / 2) + 1)
}

/// Length after tail padding so that `frames` frames fit exactly.
pub fn padded_length(frames: usize, window: usize) -> usize {
    (frames - 1) * (window / 2) + window
}

/// Segment count `S = ceil(2I/K) + 1`.
pub fn num_segments(frames: usize, seg_len: usize) -> usize {
    segment_count(frames, seg_len)
}

/// Zero-pads `samples` at the tail and returns them as a `[1, L']` tensor.
pub fn pad_waveform<F: Real>(samples: &[f32], window: usize) -> Result<(Tensor<F>, usize)> {
    let frames = frame_count(samples.len(), window)?;
    let len = padded_length(frames, window);
    let mut data: Vec<F> = samples.iter().map(|&x| F::c(f64::from(x))).collect();
    data.resize(len, F::zero());
    Ok((Tensor::new([1, len], data)?, frames))
}

/// `ReLU(U * x)` framed at hop `M/2`; `wave: [1, L']`, `basis: [D, 1, M]`.
/// Returns frames-major features `[I, D]`.
pub fn encode_var<F: Real>(g: &mut Graph<F>, wave: Var, basis: Var) -> Result<Var> {
    let window = g.shape(basis)[2];
    let conv = g.conv1d(wave, basis, None, window / 2)?;
    let feats = g.relu(conv)?;
    g.permute(feats, &[1, 0])
}

/// Maps frames `[I, D]` through `B: [M, D]` and overlap-adds at hop `M/2`,
/// returning `[len]` with `len = min(target_length, (I-1)·M/2 + M)`.
pub fn decode_var<F: Real>(
    g: &mut Graph<F>,
    masked: Var,
    basis: Var,
    target_length: usize,
    normalize: bool,
) -> Result<Var> {
    let (frames, feat) = (g.shape(masked)[0], g.shape(masked)[1]);
    let bshape = g.shape(basis).to_vec();
    if bshape.len() != 2 || bshape[1] != feat {
        return Err(dim_err!(
            "decoder basis {bshape:?} does not match features [{frames}, {feat}]"
        ));
    }
    let window = bshape[0];
    let framed = g.matmul_t(masked, basis, false, true)?;
    let framed = g.reshape(framed, &[frames, window, 1])?;
    let len = target_length.min(padded_length(frames, window));
    let wave = g.overlap_add(framed, window / 2, normalize, 0, len)?;
    g.reshape(wave, &[len])
}

/// Encodes a waveform with basis `U: [D, 1, M]`.
pub fn encode<F: Real>(w: &Waveform, basis: &Tensor<F>) -> Result<EncodedSignal<F>> {
    let shape = basis.shape();
    if shape.len() != 3 || shape[1] != 1 {
        return Err(dim_err!("encoder basis must be [D, 1, M], got {shape:?}"));
    }
    let window = shape[2];
    let (wave, _) = pad_waveform::<F>(&w.samples, window)?;
    let mut g = Graph::new();
    let x = g.constant(wave);
    let u = g.constant(basis.clone());
    let feats = encode_var(&mut g, x, u)?;
    let features = g.value(feats).permute(&[1, 0])?;
    Ok(EncodedSignal {
        features,
        original_length: w.len(),
        hop: window / 2,
    })
}

/// Splits `[D, I]` features into `[D, S, K]` half-overlapping segments.
pub fn segment<F: Real>(x: &EncodedSignal<F>, seg_len: usize) -> Result<SegmentTensor<F>> {
    let mut g = Graph::new();
    let frames = g.constant(x.features.permute(&[1, 0])?);
    let segs = g.segment(frames, seg_len)?;
    Ok(SegmentTensor {
        data: g.value(segs).permute(&[2, 0, 1])?,
        valid_length: x.frames(),
    })
}

/// Overlap-adds segments `[D, S, K]` at hop `K/2`, dropping the head padding,
/// back to `[D, I]`.
pub fn overlap_add_segments<F: Real>(t: &SegmentTensor<F>, normalize: bool) -> Result<Tensor<F>> {
    let seg_len = t.segment_len();
    let mut g = Graph::new();
    let x = g.constant(t.data.permute(&[1, 2, 0])?);
    let y = g.overlap_add(x, seg_len / 2, normalize, seg_len / 2, t.valid_length)?;
    g.value(y).permute(&[1, 0])
}

/// Overlap-adds a stack of windows `[N, W]` (or `[N, W, F]`) placed `hop` apart.
/// `hop` must be half the window length. The result has `target_length` rows.
pub fn overlap_add<F: Real>(
    frames: &Tensor<F>,
    hop: usize,
    normalize: bool,
    target_length: usize,
) -> Result<Tensor<F>> {
    let shape = frames.shape();
    let stack = match shape.len() {
        2 => frames.clone().reshape([shape[0], shape[1], 1])?,
        3 => frames.clone(),
        _ => {
            return Err(dim_err!(
                "overlap_add expects [N, W] or [N, W, F], got {shape:?}"
            ))
        }
    };
    if hop * 2 != stack.shape()[1] {
        return Err(Error::Usage(format!(
            "hop {hop} is not half the window length {}",
            stack.shape()[1]
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(stack);
    let y = g.overlap_add(x, hop, normalize, 0, target_length)?;
    let out = g.value(y).clone();
    if shape.len() == 2 {
        out.reshape([target_length])
    } else {
        Ok(out)
    }
}

/// Reconstructs a waveform from masked features `[D, I]` with `B: [M, D]`.
pub fn decode<F: Real>(
    masked: &Tensor<F>,
    basis: &Tensor<F>,
    original_length: usize,
) -> Result<Waveform> {
    decode_frames(masked, basis, original_length, false)
}

/// [`decode`] with a choice of overlap normalization.
pub fn decode_frames<F: Real>(
    masked: &Tensor<F>,
    basis: &Tensor<F>,
    original_length: usize,
    normalize: bool,
) -> Result<Waveform> {
    if masked.ndim() != 2 {
        return Err(dim_err!(
            "decode expects [D, I] features, got {:?}",
            masked.shape()
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(masked.permute(&[1, 0])?);
    let b = g.constant(basis.clone());
    let y = decode_var(&mut g, x, b, original_length, normalize)?;
    Ok(Waveform::new(
        g.value(y).data().iter().map(|v| v.f64() as f32).collect(),
        DEFAULT_SAMPLE_RATE,
    ))
}
