//! PCM16 WAV reading and writing at the toolkit sample rate.

use crate::core::{Waveform, SAMPLE_RATE};
use crate::{AdvoxError, Result};
use ndarray::Array1;
use std::path::Path;

/// Load a mono 16-bit PCM WAV at 16 kHz. Anything else is rejected.
pub fn load_waveform(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| AdvoxError::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AdvoxError::Audio(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(AdvoxError::Audio(format!(
            "{}: expected {} Hz, got {} Hz",
            path.display(),
            SAMPLE_RATE,
            spec.sample_rate
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(AdvoxError::Audio(format!(
            "{}: expected 16-bit integer PCM",
            path.display()
        )));
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.into_samples::<i16>().collect();
    let samples =
        samples.map_err(|e| AdvoxError::Audio(format!("{}: {e}", path.display())))?;
    let scaled = Array1::from_iter(samples.iter().map(|&s| s as f32 / 32768.0));
    Waveform::new(scaled)
}

/// Write as mono 16-bit PCM at 16 kHz.
pub fn save_waveform(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| AdvoxError::Audio(format!("{}: {e}", path.display())))?;
    for &s in w.samples() {
        // Same 32768 scale as the reader keeps the round trip within
        // half an LSB everywhere except the clamped +1.0 endpoint.
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(q)
            .map_err(|e| AdvoxError::Audio(format!("{}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| AdvoxError::Audio(format!("{}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_within_one_lsb() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples = Array1::from_shape_simple_fn(1000, || rng.gen_range(-1.0f32..1.0));
        let w = Waveform::new(samples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        save_waveform(&path, &w).unwrap();
        let back = load_waveform(&path).unwrap();
        let max_err = (back.samples() - w.samples())
            .mapv(f32::abs)
            .fold(0.0f32, |a, &b| a.max(b));
        assert!(max_err <= 1.0 / 32768.0, "round-trip error {max_err}");
    }

    #[test]
    fn wrong_rate_and_channels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();

        let p8k = dir.path().join("8k.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&p8k, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(load_waveform(&p8k), Err(AdvoxError::Audio(_))));

        let pst = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&pst, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(load_waveform(&pst), Err(AdvoxError::Audio(_))));
    }

    #[test]
    fn missing_file_is_an_audio_error() {
        assert!(matches!(
            load_waveform(Path::new("/nonexistent/file.wav")),
            Err(AdvoxError::Audio(_))
        ));
    }
}
