//! TOML run configuration.
//!
//! ```toml
//! [model]          # architecture; defaults to the lightest full-size GALR
//! d = 64
//! m = 16
//! k = 100
//! q = 32           # 0 disables the low-dim map
//! h = 128
//! j = 8
//! n = 6
//! c = 2
//! dropout = 0.1
//! variant = { local = "recurrent", global = "attentive", use_lowdim = true }
//!
//! [train]          # see `TrainConfig`
//! epochs = 100
//! batch = 4
//! seed = 0
//!
//! [data]           # synthetic mixtures
//! kind = "disjoint_band_noise"
//! train_count = 128
//! val_count = 16
//! seconds = 1.0
//!
//! [paths]
//! checkpoint = "model.galr"
//! metrics = "metrics.jsonl"
//! ```
//!
//! Every section and field is optional; unknown fields are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::DEFAULT_SAMPLE_RATE;
use crate::separator::HyperParams;
use crate::training::{SignalKind, SyntheticConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub kind: SignalKind,
    pub train_count: usize,
    pub val_count: usize,
    pub seconds: f64,
    pub seed: u64,
    pub snr_range: (f64, f64),
    pub bands: Vec<(f64, f64)>,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            kind: SignalKind::DisjointBandNoise,
            train_count: 128,
            val_count: 16,
            seconds: 1.0,
            seed: 1,
            snr_range: (0.0, 5.0),
            bands: Vec::new(),
        }
    }
}

impl DataSettings {
    fn synthetic(&self, seed: u64, count: usize, sources: usize) -> SyntheticConfig {
        SyntheticConfig {
            seed,
            count,
            seconds: self.seconds,
            sample_rate: DEFAULT_SAMPLE_RATE,
            sources,
            kind: self.kind,
            snr_range: self.snr_range,
            bands: self.bands.clone(),
        }
    }

    pub fn train_set(&self, sources: usize) -> SyntheticConfig {
        self.synthetic(self.seed, self.train_count, sources)
    }

    /// Held-out mixtures drawn from an independent seed.
    pub fn val_set(&self, sources: usize) -> SyntheticConfig {
        self.synthetic(self.seed.wrapping_add(0x9E37_79B9), self.val_count, sources)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: HyperParams,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub paths: Paths,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit
        for (name, seed) in [
            ("train.seed", self.train.seed),
            ("data.seed", self.data.seed),
        ] {
            if seed > i64::MAX as u64 {
                return Err(Error::Config(format!("{name}={seed} exceeds {}", i64::MAX)));
            }
        }
        self.model.validate()?;
        self.train.validate()?;
        self.data.train_set(self.model.c).validate()?;
        self.data.val_set(self.model.c).validate()
    }
}
