//! Globally attentive locally recurrent (GALR) time-domain source separation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`graph`]: dense tensors and a tape-based reverse-mode engine
//!   (f32 for training and inference, f64 for gradient checks).
//! - [`frontend`]: learned encoder, segmentation, overlap-add and decoder.
//! - [`blocks`]: the locally recurrent / globally attentive block and its
//!   recurrent/attentive variants, including the low-dimension segment mapping.
//! - [`separator`]: the assembled mask-estimation network.
//! - [`training`]: SI-SNR with permutation-invariant training, Adam, synthetic data.
//! - [`cost`]: analytic FLOPs, parameter, memory and path-length model.
//! - [`io`]: WAV codec, checkpoints and run configuration.

pub mod blocks;
pub mod cost;
pub mod error;
pub mod frontend;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod params;
pub mod separator;
pub mod tensor;
pub mod training;

pub use blocks::{BlockKind, BlockVariant};
pub use cost::{Arch, CostReport};
pub use error::{CheckpointError, Error, Result};
pub use frontend::Waveform;
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use separator::{HyperParams, SeparatorModel};
pub use tensor::{DType, Real, Tensor};
