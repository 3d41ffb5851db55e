use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavEncoding {
    Pcm16,
    #[default]
    Float32,
}

/// Reads a mono 16-bit PCM or 32-bit float WAV file, normalized to [-1, 1].
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio {
            path: path.into(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    let unsupported = |reason: String| Error::Audio {
        path: path.into(),
        reason,
    };
    if spec.channels != 1 {
        return Err(unsupported(format!(
            "{} channels; only mono input is supported",
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(unsupported(format!(
                "{bits}-bit {fmt:?} samples; expected 16-bit PCM or 32-bit float"
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate).map_err(|e| unsupported(e.to_string()))
}

pub fn encode_wav(w: &Waveform, encoding: WavEncoding) -> Result<Vec<u8>> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut writer = WavWriter::new(&mut cursor, spec)?;
        for &s in w.samples() {
            match encoding {
                WavEncoding::Pcm16 => writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?,
                WavEncoding::Float32 => writer.write_sample(s as f32)?,
            }
        }
        writer.finalize()?;
    }
    Ok(cursor.into_inner())
}

/// Writes `w` atomically; the destination never holds a partial file.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    write_atomic(path.as_ref(), &encode_wav(w, encoding)?)
}
