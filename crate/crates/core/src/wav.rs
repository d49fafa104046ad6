//! WAV file reader/writer: 16-bit integer and 32-bit float PCM, 1-8 channels.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::stft::MultiChannelWaveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Int16,
    Float32,
}

fn wav_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Wav { path: path.display().to_string(), msg: msg.to_string() }
}

pub fn read_wav(path: &Path) -> Result<MultiChannelWaveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 8 {
        return Err(wav_err(path, format!("unsupported channel count {}", spec.channels)));
    }
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(wav_err(path, format!("unsupported format {fmt:?} {bits} bit")));
        }
    };
    if interleaved.is_empty() {
        return Err(wav_err(path, "file contains no samples"));
    }
    let frames = interleaved.len() / channels;
    let mut samples = Array2::zeros((channels, frames));
    for (i, v) in interleaved.iter().enumerate() {
        samples[[i % channels, i / channels]] = *v;
    }
    MultiChannelWaveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: &Path, wave: &MultiChannelWaveform, format: WavFormat) -> Result<()> {
    if wave.channels() > 8 {
        return Err(wav_err(path, format!("unsupported channel count {}", wave.channels())));
    }
    let spec = hound::WavSpec {
        channels: wave.channels() as u16,
        sample_rate: wave.sample_rate,
        bits_per_sample: match format {
            WavFormat::Int16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Int16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for i in 0..wave.len() {
        for p in 0..wave.channels() {
            let v = wave.samples[[p, i]];
            match format {
                WavFormat::Int16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q).map_err(|e| wav_err(path, e))?;
                }
                WavFormat::Float32 => {
                    writer.write_sample(v as f32).map_err(|e| wav_err(path, e))?;
                }
            }
        }
    }
    writer.finalize().map_err(|e| wav_err(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn float_roundtrip_preserves_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = Array2::from_shape_fn((4, 1000), |_| rng.gen_range(-0.99..0.99));
        let wave = MultiChannelWaveform::new(samples, 16_000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        write_wav(&path, &wave, WavFormat::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.channels(), 4);
        assert_eq!(back.sample_rate, 16_000);
        let err = (&back.samples - &wave.samples).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-7);
    }

    #[test]
    fn int16_roundtrip_within_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = Array2::from_shape_fn((1, 500), |_| rng.gen_range(-0.9..0.9));
        let wave = MultiChannelWaveform::new(samples, 16_000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x16.wav");
        write_wav(&path, &wave, WavFormat::Int16).unwrap();
        let back = read_wav(&path).unwrap();
        let err = (&back.samples - &wave.samples).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1.0 / 32000.0);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_wav(Path::new("/nonexistent/q.wav")).unwrap_err();
        assert!(err.to_string().contains("q.wav"));
    }
}
