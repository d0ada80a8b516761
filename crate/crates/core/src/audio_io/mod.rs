//! File I/O: mono WAV signals, experiment configuration, CSV/JSON results.

pub mod config;
pub mod table;

use std::path::Path;

use hound::{SampleFormat, WavSpec};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{load_config, ExperimentConfig, RawConfig};

/// Mono signal with samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BitDepth {
    Pcm16,
    #[default]
    Float32,
}

const PCM16_SCALE: f64 = 32768.0;

/// Read a PCM16 or float32 WAV file. Multichannel files keep only the
/// first channel. With `expected_rate` set, a different file rate is an
/// error; there is no resampling.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if let Some(expected) = expected_rate {
        if spec.sample_rate != expected {
            return Err(Error::SampleRate {
                path: path.to_path_buf(),
                found: spec.sample_rate,
                expected,
            });
        }
    }
    let channels = usize::from(spec.channels.max(1));
    if channels > 1 {
        log::warn!(
            "{} has {channels} channels; using the first",
            path.display()
        );
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / PCM16_SCALE))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (format, bits) => {
            return Err(Error::UnsupportedWav {
                path: path.to_path_buf(),
                detail: format!("{bits}-bit {format:?} (expected 16-bit PCM or 32-bit float)"),
            })
        }
    };
    let samples: Vec<f64> = interleaved.into_iter().step_by(channels).collect();
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::UnsupportedWav {
            path: path.to_path_buf(),
            detail: "non-finite sample values".into(),
        });
    }
    Ok(AudioBuffer {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Write a mono WAV file. Samples beyond `[-1, 1]` are saturated; the
/// number of saturated samples is returned.
pub fn write_wav(buffer: &AudioBuffer, path: impl AsRef<Path>, depth: BitDepth) -> Result<usize> {
    let path = path.as_ref();
    if buffer.samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::config(
            "wav.samples",
            format!("refusing to write non-finite samples to {}", path.display()),
        ));
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate,
        bits_per_sample: match depth {
            BitDepth::Pcm16 => 16,
            BitDepth::Float32 => 32,
        },
        sample_format: match depth {
            BitDepth::Pcm16 => SampleFormat::Int,
            BitDepth::Float32 => SampleFormat::Float,
        },
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    let mut clipped = 0;
    for &v in &buffer.samples {
        if v.abs() > 1.0 {
            clipped += 1;
        }
        let v = v.clamp(-1.0, 1.0);
        match depth {
            BitDepth::Pcm16 => {
                let q = (v * PCM16_SCALE)
                    .round()
                    .clamp(-PCM16_SCALE, PCM16_SCALE - 1.0);
                writer.write_sample(q as i16).map_err(wav_err)?;
            }
            BitDepth::Float32 => writer.write_sample(v as f32).map_err(wav_err)?,
        }
    }
    writer.finalize().map_err(wav_err)?;
    if clipped > 0 {
        log::warn!(
            "{clipped} samples saturated while writing {}",
            path.display()
        );
    }
    Ok(clipped)
}
