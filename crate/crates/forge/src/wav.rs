//! 16-bit PCM WAV input. Samples keep their integer values; stereo is
//! averaged to mono.

use std::io;
use std::path::Path;

use acdnet_core::data::LabeledClip;
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("{path}: unsupported format in `{chunk}` chunk: {detail}")]
    UnsupportedFormat { path: String, chunk: &'static str, detail: String },
    #[error("{path}: truncated data: header declares {declared} samples, file holds {found}")]
    Truncated { path: String, declared: usize, found: usize },
    #[error("{path}: malformed WAV: {detail}")]
    Malformed { path: String, detail: String },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WavAudio {
    /// Mono samples at 16-bit integer scale.
    pub samples: Vec<f32>,
    pub sr: usize,
}

pub fn load_wav(path: &Path) -> Result<WavAudio, WavError> {
    let p = path.display().to_string();
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => WavError::Io { path: p.clone(), source },
        hound::Error::Unsupported => WavError::UnsupportedFormat {
            path: p.clone(),
            chunk: "fmt ",
            detail: "compressed or unknown encoding".into(),
        },
        other => WavError::Malformed {
            path: p.clone(),
            detail: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        let kind = if spec.sample_format == SampleFormat::Float { "float" } else { "integer" };
        return Err(WavError::UnsupportedFormat {
            path: p,
            chunk: "fmt ",
            detail: format!("{}-bit {kind} samples, need 16-bit PCM", spec.bits_per_sample),
        });
    }
    let channels = usize::from(spec.channels);
    if !(1..=2).contains(&channels) {
        return Err(WavError::UnsupportedFormat {
            path: p,
            chunk: "fmt ",
            detail: format!("{channels} channels, need mono or stereo"),
        });
    }
    let declared = reader.len() as usize;
    let mut raw = Vec::with_capacity(declared);
    for s in reader.into_samples::<i16>() {
        match s {
            Ok(v) => raw.push(v),
            // hound reports a short data chunk as an `Other` io error
            Err(hound::Error::IoError(ref e)) if matches!(e.kind(), io::ErrorKind::UnexpectedEof | io::ErrorKind::Other) => {
                return Err(WavError::Truncated {
                    path: p,
                    declared,
                    found: raw.len(),
                })
            }
            Err(e) => {
                return Err(WavError::Malformed {
                    path: p,
                    detail: e.to_string(),
                })
            }
        }
    }
    if raw.len() % channels != 0 {
        return Err(WavError::Truncated {
            path: p,
            declared,
            found: raw.len(),
        });
    }
    let samples = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&v| f32::from(v)).sum::<f32>() / channels as f32)
        .collect();
    Ok(WavAudio {
        samples,
        sr: spec.sample_rate as usize,
    })
}

pub fn load_wav_clip(path: &Path, label: usize) -> Result<LabeledClip, WavError> {
    let a = load_wav(path)?;
    Ok(LabeledClip {
        samples: a.samples,
        label,
        sr: a.sr,
    })
}

/// Writes mono 16-bit PCM, rounding and saturating each sample.
pub fn write_wav(path: &Path, samples: &[f32], sr: usize) -> Result<(), WavError> {
    let p = path.display().to_string();
    let spec = WavSpec {
        channels: 1,
        sample_rate: sr as u32,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(source) => WavError::Io { path: p.clone(), source },
        other => WavError::Malformed {
            path: p.clone(),
            detail: other.to_string(),
        },
    };
    let mut w = WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        w.write_sample(s.round().clamp(-32768.0, 32767.0) as i16).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}
