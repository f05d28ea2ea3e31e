//! 16-bit PCM mono WAV at 8 kHz.

use std::io::{Read, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::frontend::{Waveform, DEFAULT_SAMPLE_RATE};

const SCALE: f32 = 32768.0;

fn spec() -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: DEFAULT_SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

fn check_spec(s: WavSpec) -> Result<()> {
    let mut bad = Vec::new();
    if s.channels != 1 {
        bad.push(format!("channels={}", s.channels));
    }
    if s.sample_rate != DEFAULT_SAMPLE_RATE {
        bad.push(format!("sample_rate={}", s.sample_rate));
    }
    if s.sample_format != SampleFormat::Int || s.bits_per_sample != 16 {
        let kind = match s.sample_format {
            SampleFormat::Int => "int",
            SampleFormat::Float => "float",
        };
        bad.push(format!("format={kind}{}", s.bits_per_sample));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Format(format!(
            "unsupported WAV ({}); expected mono 16-bit PCM at {DEFAULT_SAMPLE_RATE} Hz",
            bad.join(", ")
        )))
    }
}

fn format_err(e: hound::Error) -> Error {
    Error::Format(format!("invalid WAV: {e}"))
}

pub fn read_from<R: Read>(reader: R) -> Result<Waveform> {
    let r = WavReader::new(reader).map_err(format_err)?;
    check_spec(r.spec())?;
    let samples = r
        .into_samples::<i16>()
        .map(|s| s.map(|v| f32::from(v) / SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(format_err)?;
    Ok(Waveform::new(samples, DEFAULT_SAMPLE_RATE))
}

pub fn write_to<W: Write + Seek>(writer: W, w: &Waveform) -> Result<()> {
    if w.sample_rate != DEFAULT_SAMPLE_RATE {
        return Err(Error::Format(format!(
            "cannot write sample_rate={}; only {DEFAULT_SAMPLE_RATE} Hz is supported",
            w.sample_rate
        )));
    }
    let mut out = WavWriter::new(writer, spec()).map_err(format_err)?;
    for &x in &w.samples {
        let v = (x * SCALE).round().clamp(-SCALE, SCALE - 1.0) as i16;
        out.write_sample(v).map_err(format_err)?;
    }
    out.finalize().map_err(format_err)
}

pub fn wav_read(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(std::io::BufReader::new(f))
}

pub fn wav_write(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_to(std::io::BufWriter::new(f), w)
}
