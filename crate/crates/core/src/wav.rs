//! PCM 16-bit little-endian WAV I/O for mono and two-channel audio.

use std::path::Path;

use thiserror::Error;

use crate::signal::Waveform;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("wav: {0}")]
    Format(#[from] hound::Error),
    #[error("expected {expected} channel(s), file has {found}")]
    ChannelCount { expected: u16, found: u16 },
    #[error("channel lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

fn to_i16(sample: f64) -> i16 {
    (sample.clamp(-1.0, 1.0) * 32_767.0).round() as i16
}

fn spec(channels: u16, sample_rate: f64) -> hound::WavSpec {
    hound::WavSpec {
        channels,
        sample_rate: sample_rate.round() as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

/// Write a mono waveform; samples are clamped to [−1, 1].
pub fn write_mono(path: &Path, wave: &Waveform) -> Result<(), WavError> {
    let mut writer = hound::WavWriter::create(path, spec(1, wave.sample_rate))?;
    for &s in &wave.samples {
        writer.write_sample(to_i16(s))?;
    }
    writer.finalize()?;
    Ok(())
}

/// Write an interleaved two-channel file from left/right waveforms.
pub fn write_stereo(path: &Path, left: &Waveform, right: &Waveform) -> Result<(), WavError> {
    if left.len() != right.len() {
        return Err(WavError::LengthMismatch(left.len(), right.len()));
    }
    let mut writer = hound::WavWriter::create(path, spec(2, left.sample_rate))?;
    for (l, r) in left.samples.iter().zip(&right.samples) {
        writer.write_sample(to_i16(*l))?;
        writer.write_sample(to_i16(*r))?;
    }
    writer.finalize()?;
    Ok(())
}

/// Read a mono or multi-channel file into per-channel waveforms scaled to
/// [−1, 1].
pub fn read(path: &Path) -> Result<Vec<Waveform>, WavError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let mut chans: Vec<Vec<f64>> = vec![Vec::new(); channels];
    match spec.sample_format {
        hound::SampleFormat::Int => {
            let denom = f64::from(1i32 << (spec.bits_per_sample - 1));
            for (i, s) in reader.samples::<i32>().enumerate() {
                chans[i % channels].push(s? as f64 / denom);
            }
        }
        hound::SampleFormat::Float => {
            for (i, s) in reader.samples::<f32>().enumerate() {
                chans[i % channels].push(s? as f64);
            }
        }
    }
    Ok(chans
        .into_iter()
        .map(|samples| Waveform::new(samples, spec.sample_rate as f64))
        .collect())
}

/// Read a file that must contain exactly two channels.
pub fn read_stereo(path: &Path) -> Result<(Waveform, Waveform), WavError> {
    let mut chans = read(path)?;
    if chans.len() != 2 {
        return Err(WavError::ChannelCount { expected: 2, found: chans.len() as u16 });
    }
    let right = chans.pop().unwrap();
    let left = chans.pop().unwrap();
    Ok((left, right))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mono_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let wave = Waveform::new(vec![0.0, 0.5, -0.5, 1.0, -1.0, 0.25], 50_000.0);
        write_mono(&path, &wave).unwrap();
        let back = read(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].sample_rate, 50_000.0);
        for (a, b) in wave.samples.iter().zip(&back[0].samples) {
            assert!((a - b).abs() < 1.0 / 32_000.0, "{a} vs {b}");
        }
    }

    #[test]
    fn stereo_round_trip_and_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t2.wav");
        let left = Waveform::new(vec![2.0, -2.0, 0.1], 50_000.0); // clamps
        let right = Waveform::new(vec![0.0, 0.9, -0.9], 50_000.0);
        write_stereo(&path, &left, &right).unwrap();
        let (l, r) = read_stereo(&path).unwrap();
        assert!((l.samples[0] - 1.0).abs() < 1e-3);
        assert!((l.samples[1] + 1.0).abs() < 1e-3);
        assert!((r.samples[1] - 0.9).abs() < 1e-3);
        assert_eq!(l.len(), 3);
        assert_eq!(r.len(), 3);
    }

    #[test]
    fn length_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t3.wav");
        let left = Waveform::new(vec![0.0; 3], 50_000.0);
        let right = Waveform::new(vec![0.0; 4], 50_000.0);
        assert!(matches!(
            write_stereo(&path, &left, &right),
            Err(WavError::LengthMismatch(3, 4))
        ));
    }
}
