//! STFT / ISTFT with a periodic Hann window and weighted overlap-add.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dsp::FeatureConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magnitude/phase spectrogram, `[frames x (fft_size/2 + 1)]` each.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub mag: Tensor,
    pub phase: Tensor,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.mag.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.mag.shape()[1]
    }
}

/// Periodic Hann: w[i] = 0.5 * (1 - cos(2 pi i / n)).
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Windowed frames, real FFT, one-sided bins 0..fft_size/2.
pub fn stft(wave: &[f64], cfg: &FeatureConfig) -> Result<Spectrogram> {
    if wave.len() < cfg.frame_len {
        return Err(Error::Validation(format!(
            "waveform too short for stft: {} < frame length {}",
            wave.len(),
            cfg.frame_len
        )));
    }
    let n = cfg.fft_size;
    let frames = 1 + (wave.len() - cfg.frame_len) / cfg.hop;
    let bins = n / 2 + 1;
    let window = hann_periodic(cfg.frame_len);

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut mag = Tensor::zeros(&[frames, bins]);
    let mut phase = Tensor::zeros(&[frames, bins]);
    let mut buf = vec![Complex::new(0.0, 0.0); n];

    for t in 0..frames {
        let start = t * cfg.hop;
        for i in 0..n {
            let x = if i < cfg.frame_len {
                wave[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        for (k, c) in buf.iter().take(bins).enumerate() {
            mag.data_mut()[t * bins + k] = c.norm();
            phase.data_mut()[t * bins + k] = c.im.atan2(c.re);
        }
    }
    Ok(Spectrogram { mag, phase })
}

/// Weighted overlap-add resynthesis from one-sided magnitude and phase.
///
/// Each frame is inverted, multiplied by the synthesis (= analysis) window,
/// and accumulated; the running sum of squared windows normalizes the
/// overlap, so with unmodified spectra `istft(stft(x))` reproduces the
/// interior of `x` to machine precision. Edge samples where the window
/// coverage is negligible come out as zero.
pub fn istft(mag: &Tensor, phase: &Tensor, cfg: &FeatureConfig) -> Result<Vec<f64>> {
    if mag.shape() != phase.shape() || mag.rank() != 2 {
        return Err(Error::shape_mismatch("istft", mag.shape(), phase.shape()));
    }
    let n = cfg.fft_size;
    let bins = n / 2 + 1;
    if mag.shape()[1] != bins {
        return Err(Error::shape_mismatch("istft", mag.shape(), &[0, bins]));
    }
    let frames = mag.shape()[0];
    let out_len = (frames - 1) * cfg.hop + cfg.frame_len;
    let window = hann_periodic(cfg.frame_len);

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut num = vec![0.0; out_len];
    let mut den = vec![0.0; out_len];
    let mut buf = vec![Complex::new(0.0, 0.0); n];

    for t in 0..frames {
        for k in 0..bins {
            let m = mag.data()[t * bins + k];
            let p = phase.data()[t * bins + k];
            buf[k] = Complex::new(m * p.cos(), m * p.sin());
        }
        // conjugate symmetry for the upper half
        for k in bins..n {
            buf[k] = buf[n - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for i in 0..cfg.frame_len {
            let sample = buf[i].re / n as f64;
            num[start + i] += window[i] * sample;
            den[start + i] += window[i] * window[i];
        }
    }
    for (x, d) in num.iter_mut().zip(&den) {
        if *d > 1e-8 {
            *x /= d;
        } else {
            *x = 0.0;
        }
    }
    Ok(num)
}
