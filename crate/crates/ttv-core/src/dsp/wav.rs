//! WAV I/O: IEEE-float 32-bit is written; PCM 16-bit and float are read.
//! Samples live in [-1, 1] as f64 per channel.

use std::path::Path;

use crate::error::{Error, Result};

pub fn write_wav(path: &Path, channels: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    if channels.is_empty() || channels.iter().any(|c| c.len() != channels[0].len()) {
        return Err(Error::Validation(
            "write_wav needs equal-length channels".into(),
        ));
    }
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::Wav(e.to_string()))?;
    for i in 0..channels[0].len() {
        for ch in channels {
            writer
                .write_sample(ch[i] as f32)
                .map_err(|e| Error::Wav(e.to_string()))?;
        }
    }
    writer.finalize().map_err(|e| Error::Wav(e.to_string()))?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<(Vec<Vec<f64>>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Wav(e.to_string()))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let mut channels = vec![Vec::new(); n_ch];
    match spec.sample_format {
        hound::SampleFormat::Float => {
            for (i, s) in reader.samples::<f32>().enumerate() {
                let s = s.map_err(|e| Error::Wav(e.to_string()))?;
                channels[i % n_ch].push(s as f64);
            }
        }
        hound::SampleFormat::Int => {
            if spec.bits_per_sample != 16 {
                return Err(Error::Wav(format!(
                    "unsupported PCM depth {}",
                    spec.bits_per_sample
                )));
            }
            for (i, s) in reader.samples::<i16>().enumerate() {
                let s = s.map_err(|e| Error::Wav(e.to_string()))?;
                channels[i % n_ch].push(s as f64 / 32768.0);
            }
        }
    }
    Ok((channels, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn float_round_trip_and_stereo() {
        let dir = std::env::temp_dir().join("ttv_wav_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pair.wav");

        let mut rng = RngState::new(1);
        let a: Vec<f64> = (0..800).map(|_| 0.3 * rng.next_normal()).collect();
        let b: Vec<f64> = (0..800).map(|_| 0.3 * rng.next_normal()).collect();
        write_wav(&path, &[a.clone(), b.clone()], 16_000).unwrap();
        let (back, rate) = read_wav(&path).unwrap();
        assert_eq!(rate, 16_000);
        assert_eq!(back.len(), 2);
        for (orig, got) in [(&a, &back[0]), (&b, &back[1])] {
            let max = orig
                .iter()
                .zip(got.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            // f32 storage precision
            assert!(max < 1e-6, "max {max}");
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn pcm16_is_readable() {
        let dir = std::env::temp_dir().join("ttv_wav_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pcm.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..100i16 {
            w.write_sample(i * 300).unwrap();
        }
        w.finalize().unwrap();
        let (ch, _) = read_wav(&path).unwrap();
        assert_eq!(ch[0].len(), 100);
        assert!((ch[0][1] - 300.0 / 32768.0).abs() < 1e-9);
        std::fs::remove_file(&path).ok();
    }
}
