//! Seeded synthetic mixtures standing in for speech corpora.
//!
//! Each source occupies its own frequency band, so separation is learnable by
//! a small model. Sources are peak-normalized, then the non-reference sources
//! are rescaled so the reference-to-source energy ratio equals a drawn SNR.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{Waveform, DEFAULT_SAMPLE_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// Gaussian noise band-limited to a per-source band.
    DisjointBandNoise,
    /// A few harmonically related tones per source, each inside its band.
    SinusoidPair,
}

impl std::str::FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint_band_noise" | "noise" => Ok(SignalKind::DisjointBandNoise),
            "sinusoid_pair" | "sine" => Ok(SignalKind::SinusoidPair),
            _ => Err(Error::Config(format!("unknown signal kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureExample {
    pub mixture: Waveform,
    /// Scaled sources; `mixture` is their exact sum.
    pub sources: Vec<Waveform>,
    /// Energy ratio of source 0 to every other source, in dB.
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub count: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    pub sources: usize,
    pub kind: SignalKind,
    pub snr_range: (f64, f64),
    /// Band edges in Hz, one `(low, high)` per source. Empty splits
    /// `[100, 3800]` evenly with guard gaps.
    pub bands: Vec<(f64, f64)>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            count: 16,
            seconds: 1.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            sources: 2,
            kind: SignalKind::DisjointBandNoise,
            snr_range: (0.0, 5.0),
            bands: Vec::new(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synthetic count must be at least 1".into()));
        }
        if self.sources < 2 {
            return Err(Error::Config(
                "synthetic mixtures need at least 2 sources".into(),
            ));
        }
        if !(self.seconds > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config(
                "synthetic length and sample rate must be positive".into(),
            ));
        }
        if self.snr_range.0 > self.snr_range.1 {
            return Err(Error::Config(format!(
                "empty SNR range {:?}",
                self.snr_range
            )));
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        for &(lo, hi) in &self.resolved_bands() {
            if !(0.0 <= lo && lo < hi && hi <= nyquist) {
                return Err(Error::Config(format!(
                    "band ({lo}, {hi}) Hz invalid below Nyquist {nyquist}"
                )));
            }
        }
        if !self.bands.is_empty() && self.bands.len() != self.sources {
            return Err(Error::Config(format!(
                "{} bands for {} sources",
                self.bands.len(),
                self.sources
            )));
        }
        Ok(())
    }

    pub fn len_samples(&self) -> usize {
        (self.seconds * f64::from(self.sample_rate)).round() as usize
    }

    pub fn resolved_bands(&self) -> Vec<(f64, f64)> {
        if !self.bands.is_empty() {
            return self.bands.clone();
        }
        let (lo, hi) = (
            100.0,
            3800.0f64.min(f64::from(self.sample_rate) / 2.0 * 0.95),
        );
        let width = (hi - lo) / self.sources as f64;
        let guard = 0.125 * width;
        (0..self.sources)
            .map(|c| {
                let a = lo + c as f64 * width;
                (
                    a + if c == 0 { 0.0 } else { guard },
                    a + width - if c + 1 == self.sources { 0.0 } else { guard },
                )
            })
            .collect()
    }
}

/// Deterministic stream of mixtures.
pub struct SyntheticStream {
    cfg: SyntheticConfig,
    rng: ChaCha8Rng,
    bands: Vec<(f64, f64)>,
    fft: FftPlanner<f64>,
    remaining: usize,
}

impl SyntheticStream {
    pub fn new(cfg: SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SyntheticStream {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            bands: cfg.resolved_bands(),
            remaining: cfg.count,
            fft: FftPlanner::new(),
            cfg,
        })
    }

    fn band_noise(&mut self, len: usize, band: (f64, f64)) -> Vec<f64> {
        let rate = f64::from(self.cfg.sample_rate);
        let mut buf: Vec<Complex<f64>> = (0..len)
            .map(|_| Complex::new(self.rng.sample::<f64, _>(StandardNormal), 0.0))
            .collect();
        self.fft.plan_fft_forward(len).process(&mut buf);
        for (i, z) in buf.iter_mut().enumerate() {
            let bin = i.min(len - i);
            let f = bin as f64 * rate / len as f64;
            if f < band.0 || f > band.1 {
                *z = Complex::new(0.0, 0.0);
            }
        }
        self.fft.plan_fft_inverse(len).process(&mut buf);
        buf.into_iter().map(|z| z.re).collect()
    }

    fn tones(&mut self, len: usize, band: (f64, f64)) -> Vec<f64> {
        let rate = f64::from(self.cfg.sample_rate);
        let count = self.rng.gen_range(2..=4);
        let mut out = vec![0.0; len];
        for _ in 0..count {
            let f = self.rng.gen_range(band.0..band.1);
            let amp = self.rng.gen_range(0.3..1.0);
            let phase = self.rng.gen_range(0.0..2.0 * PI);
            for (t, v) in out.iter_mut().enumerate() {
                *v += amp * (2.0 * PI * f * t as f64 / rate + phase).sin();
            }
        }
        out
    }

    fn example(&mut self) -> MixtureExample {
        let len = self.cfg.len_samples();
        let rate = self.cfg.sample_rate;
        let snr_db = if self.cfg.snr_range.0 == self.cfg.snr_range.1 {
            self.cfg.snr_range.0
        } else {
            self.rng
                .gen_range(self.cfg.snr_range.0..=self.cfg.snr_range.1)
        };
        let mut raw = Vec::with_capacity(self.bands.len());
        for c in 0..self.bands.len() {
            let band = self.bands[c];
            let mut s = match self.cfg.kind {
                SignalKind::DisjointBandNoise => self.band_noise(len, band),
                SignalKind::SinusoidPair => self.tones(len, band),
            };
            let peak = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                s.iter_mut().for_each(|v| *v /= peak);
            }
            raw.push(s);
        }
        let energy = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>();
        let e0 = energy(&raw[0]);
        let gain = 10f64.powf(-snr_db / 20.0);
        for s in raw.iter_mut().skip(1) {
            let g = if e0 > 0.0 {
                gain * (e0 / energy(s)).sqrt()
            } else {
                0.0
            };
            s.iter_mut().for_each(|v| *v *= g);
        }
        // keep the mixture inside [-1, 1]
        let mix_peak = (0..len)
            .map(|t| raw.iter().map(|s| s[t]).sum::<f64>().abs())
            .fold(0.0f64, f64::max);
        let norm = if mix_peak > 1.0 { 1.0 / mix_peak } else { 1.0 };
        let sources: Vec<Vec<f32>> = raw
            .iter()
            .map(|s| s.iter().map(|v| (v * norm) as f32).collect())
            .collect();
        let mixture = mix(&sources);
        MixtureExample {
            mixture: Waveform::new(mixture, rate),
            sources: sources
                .into_iter()
                .map(|s| Waveform::new(s, rate))
                .collect(),
            snr_db,
        }
    }
}

/// Sample-wise sum in source order.
pub fn mix(sources: &[Vec<f32>]) -> Vec<f32> {
    let len = sources.first().map_or(0, Vec::len);
    (0..len)
        .map(|t| sources.iter().fold(0.0f32, |acc, s| acc + s[t]))
        .collect()
}

impl Iterator for SyntheticStream {
    type Item = MixtureExample;

    fn next(&mut self) -> Option<MixtureExample> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(self.example())
    }
}

/// Collects `cfg.count` mixtures.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Vec<MixtureExample>> {
    Ok(SyntheticStream::new(cfg.clone())?.collect())
}

/// Measured energy ratio of source 0 to source `c`, in dB.
pub fn measured_snr_db(ex: &MixtureExample, c: usize) -> f64 {
    let e = |w: &Waveform| {
        w.samples
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
    };
    10.0 * (e(&ex.sources[0]) / e(&ex.sources[c])).log10()
}
