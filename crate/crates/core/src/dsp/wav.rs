use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WavFormat {
    #[default]
    Float32,
    Pcm16,
}

fn map_hound(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::Unsupported => Error::UnsupportedFormat(path.display().to_string()),
        other => Error::Corrupt {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Reads a RIFF WAV file; returns one waveform per channel.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<Waveform>> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: "zero channels".into(),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: {bits}-bit {fmt:?}",
                path.display()
            )))
        }
    };
    let frames = interleaved.len() / channels;
    (0..channels)
        .map(|c| {
            let samples = (0..frames).map(|i| interleaved[i * channels + c]).collect();
            Waveform::new(samples, spec.sample_rate)
        })
        .collect()
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform, format: WavFormat) -> Result<()> {
    write_wav_channels(path, std::slice::from_ref(wave), format)
}

/// Writes equal-length waveforms as one interleaved multichannel file.
pub fn write_wav_channels(
    path: impl AsRef<Path>,
    channels: &[Waveform],
    format: WavFormat,
) -> Result<()> {
    let path = path.as_ref();
    let first = channels
        .first()
        .ok_or_else(|| Error::InvalidConfig("no channels to write".into()))?;
    for ch in &channels[1..] {
        first.check_compatible(ch)?;
    }
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate: first.sample_rate(),
        bits_per_sample: match format {
            WavFormat::Float32 => 32,
            WavFormat::Pcm16 => 16,
        },
        sample_format: match format {
            WavFormat::Float32 => SampleFormat::Float,
            WavFormat::Pcm16 => SampleFormat::Int,
        },
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut writer = WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for i in 0..first.len() {
        for ch in channels {
            let s = ch.samples()[i];
            let res = match format {
                WavFormat::Float32 => writer.write_sample(s as f32),
                WavFormat::Pcm16 => {
                    writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
                }
            };
            res.map_err(|e| map_hound(path, e))?;
        }
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}
