//! WAV codec, checkpoints and run configuration.

pub mod checkpoint;
pub mod config;
pub mod wav;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use wav::{wav_read, wav_write};
