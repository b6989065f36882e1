//! 16-bit PCM mono WAV.

use std::path::Path;

use crate::error::{Error, Result};

/// Reads a mono PCM16 file as samples in [-1, 1). The file's rate must equal
/// `expected_rate`; nothing is resampled.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Vec<f32>> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut r = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(
            path,
            format!("need 16-bit PCM mono, got {} ch / {} bit {:?}", spec.channels, spec.bits_per_sample, spec.sample_format),
        ));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::SampleRate { path: path.to_path_buf(), found: spec.sample_rate, expected: expected_rate });
    }
    r.samples::<i16>().map(|s| s.map(|v| v as f32 / 32768.0).map_err(wav_err)).collect()
}

pub fn to_pcm16(x: f32) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(path: &Path, samples: &[f32], rate: u32) -> Result<()> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let spec = hound::WavSpec { channels: 1, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        w.write_sample(to_pcm16(s)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}
