//! PCM16 mono WAV files.

use std::path::Path;

use hound::{SampleFormat, WavSpec};
use nue_core::synth::Waveform;

use crate::error::{AsrError, Result};

fn classify(path: &Path, e: hound::Error) -> AsrError {
    let path = path.to_path_buf();
    match e {
        // Short reads surface as `UnexpectedEof` or `Other`.
        hound::Error::IoError(source)
            if !matches!(
                source.kind(),
                std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::Other
            ) =>
        {
            AsrError::Io { path, source }
        }
        hound::Error::Unsupported | hound::Error::TooWide | hound::Error::InvalidSampleFormat => {
            AsrError::UnsupportedFormat {
                path,
                reason: e.to_string(),
            }
        }
        e => AsrError::CorruptAudio {
            path,
            reason: e.to_string(),
        },
    }
}

fn check_spec(path: &Path, spec: WavSpec) -> Result<()> {
    if spec.channels != 1 || spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AsrError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!(
                "need 16-bit integer PCM mono, found {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    Ok(())
}

/// Reads a PCM16 mono file; samples are `int16 / 32768`.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| classify(path, e))?;
    let spec = reader.spec();
    check_spec(path, spec)?;
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<Result<Vec<f32>, _>>()
        .map_err(|e| classify(path, e))?;
    if samples.len() as u32 != reader.duration() {
        return Err(AsrError::CorruptAudio {
            path: path.to_path_buf(),
            reason: "data chunk is truncated".into(),
        });
    }
    Ok(Waveform::new(samples, spec.sample_rate)?)
}

/// Duration in seconds from the header alone.
pub fn wav_seconds(path: &Path) -> Result<f64> {
    let reader = hound::WavReader::open(path).map_err(|e| classify(path, e))?;
    let spec = reader.spec();
    check_spec(path, spec)?;
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}

fn quantize(x: f32) -> i16 {
    (x as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes `wave` as PCM16 mono, rounding to the nearest step.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| classify(path, e))?;
    for &s in &wave.samples {
        w.write_sample(quantize(s)).map_err(|e| classify(path, e))?;
    }
    w.finalize().map_err(|e| classify(path, e))
}
