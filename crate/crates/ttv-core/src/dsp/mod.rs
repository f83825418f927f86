//! Waveform <-> feature pipeline: STFT, log-power spectra, context windows,
//! DC-bin handling, noise-aware-training augmentation, normalization,
//! global-variance equalization, synthetic dataset generation, and the
//! waveform quality metrics used in place of perceptual scoring.

mod metrics;
mod stft;
mod synth;
mod wav;

pub use metrics::{log_spectral_distance, seg_snr};
pub use stft::{hann_periodic, istft, stft, Spectrogram};
pub use synth::{measured_snr_db, synth_dataset, CleanKind, NoiseKind, SynthSpec, Utterance};
pub use wav::{read_wav, write_wav};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// STFT/LPS/context parameters. Defaults follow the experimental setup:
/// 16 kHz audio, 512-point transform over 32 ms frames, 50% overlap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureConfig {
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    #[serde(default = "default_fft_size")]
    pub fft_size: usize,
    #[serde(default = "default_fft_size")]
    pub frame_len: usize,
    #[serde(default = "default_hop")]
    pub hop: usize,
    /// Context frames on each side; a frame sees 2M+1 frames in total.
    #[serde(default)]
    pub context_m: usize,
    /// Input channel count B.
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Append a noise estimate (mean LPS of the first 6 frames) per frame.
    #[serde(default)]
    pub nat: bool,
    /// Drop the DC bin from features and targets (restored unchanged after
    /// regression), making the per-frame width a power-friendly 256.
    #[serde(default)]
    pub drop_dc: bool,
    #[serde(default = "default_lps_floor")]
    pub lps_floor: f64,
}

fn default_sample_rate() -> u32 {
    16_000
}
fn default_fft_size() -> usize {
    512
}
fn default_hop() -> usize {
    256
}
fn default_channels() -> usize {
    1
}
fn default_lps_floor() -> f64 {
    1e-12
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: default_sample_rate(),
            fft_size: default_fft_size(),
            frame_len: default_fft_size(),
            hop: default_hop(),
            context_m: 0,
            channels: default_channels(),
            nat: false,
            drop_dc: false,
            lps_floor: default_lps_floor(),
        }
    }
}

/// Frames NAT averages for the noise estimate.
pub const NAT_ESTIMATE_FRAMES: usize = 6;

impl FeatureConfig {
    /// One-sided bin count, fft_size/2 + 1 (257 for the default setup).
    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Bins actually carried per frame after optional DC dropping.
    pub fn carried_bins(&self) -> usize {
        self.freq_bins() - usize::from(self.drop_dc)
    }

    /// Model input width: bins * (2M+1) * B, plus one more bins-wide block
    /// when NAT is on.
    pub fn feature_width(&self) -> usize {
        let per_frame = self.carried_bins() * self.channels;
        per_frame * (2 * self.context_m + 1) + self.carried_bins() * usize::from(self.nat)
    }

    /// Regression target width (one frame of carried bins).
    pub fn target_width(&self) -> usize {
        self.carried_bins()
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.fft_size % 2 != 0 {
            return Err(Error::Validation("fft_size must be even and > 0".into()));
        }
        if self.frame_len != self.fft_size {
            return Err(Error::Validation(
                "frame_len must equal fft_size (no zero-padding path)".into(),
            ));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::Validation("hop must be in 1..=frame_len".into()));
        }
        if self.channels == 0 {
            return Err(Error::Validation("channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// log(max(|X|^2, floor)) elementwise over a magnitude spectrogram.
pub fn lps(mag: &Tensor, floor: f64) -> Tensor {
    mag.map(|m| (m * m).max(floor).ln())
}

/// Magnitude back from LPS: sqrt(exp(lps)).
pub fn lps_to_mag(lps: &Tensor) -> Tensor {
    lps.map(|v| v.exp().sqrt())
}

/// Concatenate each frame with its M neighbors on each side, replicating the
/// edge frames at the boundaries: row t becomes frames t-M..t+M.
pub fn context_expand(features: &Tensor, m: usize) -> Result<Tensor> {
    if features.rank() != 2 {
        return Err(Error::InvalidShape(format!(
            "context_expand needs [T, D], got {:?}",
            features.shape()
        )));
    }
    let (t_len, d) = (features.shape()[0], features.shape()[1]);
    let width = d * (2 * m + 1);
    let mut out = Tensor::zeros(&[t_len, width]);
    for t in 0..t_len {
        for (slot, off) in (-(m as isize)..=m as isize).enumerate() {
            let src = (t as isize + off).clamp(0, t_len as isize - 1) as usize;
            let dst = t * width + slot * d;
            out.data_mut()[dst..dst + d].copy_from_slice(&features.data()[src * d..(src + 1) * d]);
        }
    }
    Ok(out)
}

/// Remove bin 0 from every frame of a `[T, bins]` matrix, returning the
/// narrowed matrix and the removed column.
pub fn drop_dc_bin(features: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    if features.rank() != 2 || features.shape()[1] < 2 {
        return Err(Error::InvalidShape(format!(
            "drop_dc_bin needs [T, D >= 2], got {:?}",
            features.shape()
        )));
    }
    let (t_len, d) = (features.shape()[0], features.shape()[1]);
    let mut out = Tensor::zeros(&[t_len, d - 1]);
    let mut dc = Vec::with_capacity(t_len);
    for t in 0..t_len {
        dc.push(features.data()[t * d]);
        out.data_mut()[t * (d - 1)..(t + 1) * (d - 1)]
            .copy_from_slice(&features.data()[t * d + 1..(t + 1) * d]);
    }
    Ok((out, dc))
}

/// Put a previously removed DC column back in front of every frame,
/// unchanged.
pub fn reattach_dc_bin(output: &Tensor, dc: &[f64]) -> Result<Tensor> {
    if output.rank() != 2 || output.shape()[0] != dc.len() {
        return Err(Error::shape_mismatch(
            "reattach_dc_bin",
            output.shape(),
            &[dc.len()],
        ));
    }
    let (t_len, d) = (output.shape()[0], output.shape()[1]);
    let mut out = Tensor::zeros(&[t_len, d + 1]);
    for t in 0..t_len {
        out.data_mut()[t * (d + 1)] = dc[t];
        out.data_mut()[t * (d + 1) + 1..(t + 1) * (d + 1)]
            .copy_from_slice(&output.data()[t * d..(t + 1) * d]);
    }
    Ok(out)
}

/// Utterance-level noise estimate: mean LPS of the first
/// `NAT_ESTIMATE_FRAMES` frames (or all frames when fewer exist).
pub fn noise_estimate(lps: &Tensor) -> Result<Vec<f64>> {
    if lps.rank() != 2 {
        return Err(Error::InvalidShape(format!(
            "noise_estimate needs [T, D], got {:?}",
            lps.shape()
        )));
    }
    let (t_len, d) = (lps.shape()[0], lps.shape()[1]);
    let take = t_len.min(NAT_ESTIMATE_FRAMES);
    let mut est = vec![0.0; d];
    for t in 0..take {
        for (e, v) in est.iter_mut().zip(&lps.data()[t * d..(t + 1) * d]) {
            *e += v;
        }
    }
    for e in &mut est {
        *e /= take as f64;
    }
    Ok(est)
}

/// Append the same noise estimate to every frame's feature vector.
pub fn nat_augment(features: &Tensor, estimate: &[f64]) -> Result<Tensor> {
    if features.rank() != 2 {
        return Err(Error::InvalidShape(format!(
            "nat_augment needs [T, D], got {:?}",
            features.shape()
        )));
    }
    let (t_len, d) = (features.shape()[0], features.shape()[1]);
    let e = estimate.len();
    let mut out = Tensor::zeros(&[t_len, d + e]);
    for t in 0..t_len {
        out.data_mut()[t * (d + e)..t * (d + e) + d]
            .copy_from_slice(&features.data()[t * d..(t + 1) * d]);
        out.data_mut()[t * (d + e) + d..(t + 1) * (d + e)].copy_from_slice(estimate);
    }
    Ok(out)
}

/// Per-dimension mean and standard deviation over a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>, // floored at 1e-8
}

impl NormStats {
    pub fn fit(rows: &Tensor) -> Result<NormStats> {
        if rows.rank() != 2 || rows.shape()[0] == 0 {
            return Err(Error::InvalidShape(format!(
                "NormStats::fit needs a non-empty [N, D], got {:?}",
                rows.shape()
            )));
        }
        let (n, d) = (rows.shape()[0], rows.shape()[1]);
        let mut mean = vec![0.0; d];
        for row in rows.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for row in rows.data().chunks(d) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                let dlt = x - m;
                *v += dlt * dlt;
            }
        }
        let std = var
            .iter()
            .map(|v| (v / n as f64).sqrt().max(1e-8))
            .collect();
        Ok(NormStats { mean, std })
    }

    /// Per-dimension means with one pooled standard deviation shared by all
    /// dimensions. Used for regression targets: per-dimension scaling would
    /// weight an MSE loss by 1/sigma_d^2, concentrating gradient pressure on
    /// near-constant dimensions; a pooled scale keeps errors weighted by
    /// their actual size in the feature domain.
    pub fn fit_pooled_std(rows: &Tensor) -> Result<NormStats> {
        let per_dim = NormStats::fit(rows)?;
        let d = per_dim.std.len() as f64;
        let pooled = (per_dim.std.iter().map(|s| s * s).sum::<f64>() / d)
            .sqrt()
            .max(1e-8);
        Ok(NormStats {
            mean: per_dim.mean,
            std: vec![pooled; per_dim.std.len()],
        })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, rows: &Tensor) -> Result<Tensor> {
        self.apply(rows, |x, m, s| (x - m) / s)
    }

    pub fn denormalize(&self, rows: &Tensor) -> Result<Tensor> {
        self.apply(rows, |x, m, s| x * s + m)
    }

    fn apply(&self, rows: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        if rows.rank() != 2 || rows.shape()[1] != self.width() {
            return Err(Error::shape_mismatch(
                "normalize",
                rows.shape(),
                &[self.width()],
            ));
        }
        let d = self.width();
        let mut out = rows.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = f(*x, *m, *s);
            }
        }
        Ok(out)
    }
}

/// Per-dimension variances of clean references and of model estimates on
/// training data, plus the estimate means the equalization is centered on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GvStats {
    pub ref_var: Vec<f64>,
    pub est_var: Vec<f64>,
    pub est_mean: Vec<f64>,
}

impl GvStats {
    pub fn fit(reference: &Tensor, estimates: &Tensor) -> Result<GvStats> {
        let r = NormStats::fit(reference)?;
        let e = NormStats::fit(estimates)?;
        if r.width() != e.width() {
            return Err(Error::shape_mismatch(
                "gv fit",
                reference.shape(),
                estimates.shape(),
            ));
        }
        Ok(GvStats {
            ref_var: r.std.iter().map(|s| s * s).collect(),
            est_var: e.std.iter().map(|s| s * s).collect(),
            est_mean: e.mean,
        })
    }
}

pub struct GvOutcome {
    pub equalized: Tensor,
    /// Dimensions passed through unscaled because the estimate variance was
    /// below 1e-8.
    pub passed_through: Vec<usize>,
}

/// Rescale each dimension about the estimate mean so its variance matches
/// the clean-reference variance:
/// out_d = (est_d - mu_d) * sqrt(ref_var_d / est_var_d) + mu_d.
pub fn gv_equalize(estimates: &Tensor, gv: &GvStats) -> Result<GvOutcome> {
    if estimates.rank() != 2 || estimates.shape()[1] != gv.est_mean.len() {
        return Err(Error::shape_mismatch(
            "gv_equalize",
            estimates.shape(),
            &[gv.est_mean.len()],
        ));
    }
    let d = gv.est_mean.len();
    let mut passed_through = Vec::new();
    let mut scale = vec![1.0; d];
    for i in 0..d {
        if gv.est_var[i] < 1e-8 {
            passed_through.push(i);
        } else {
            scale[i] = (gv.ref_var[i] / gv.est_var[i]).sqrt();
        }
    }
    let mut out = estimates.clone();
    for row in out.data_mut().chunks_mut(d) {
        for i in 0..d {
            row[i] = (row[i] - gv.est_mean[i]) * scale[i] + gv.est_mean[i];
        }
    }
    Ok(GvOutcome {
        equalized: out,
        passed_through,
    })
}

/// Per-utterance features ready for the regression models.
pub struct UtteranceFeatures {
    /// `[T, feature_width]` un-normalized model input.
    pub x: Tensor,
    /// `[T, target_width]` un-normalized clean-LPS target.
    pub y: Tensor,
    /// Noisy channel-1 DC LPS per frame, kept when `drop_dc` so it can be
    /// reattached to the regression output unchanged.
    pub noisy_dc: Vec<f64>,
    /// Channel-1 noisy spectrogram, for noisy-phase resynthesis.
    pub noisy: Spectrogram,
    /// Clean LPS with the full bin count, for spectral metrics.
    pub clean_lps_full: Tensor,
}

/// Full front-end for one utterance: per-channel LPS, optional DC dropping,
/// context expansion, optional NAT. The target is the clean LPS frame.
pub fn utterance_features(
    noisy: &[Vec<f64>],
    clean: &[f64],
    cfg: &FeatureConfig,
) -> Result<UtteranceFeatures> {
    cfg.validate()?;
    if noisy.len() != cfg.channels {
        return Err(Error::Validation(format!(
            "expected {} noisy channels, got {}",
            cfg.channels,
            noisy.len()
        )));
    }

    let mut per_channel = Vec::with_capacity(cfg.channels);
    let mut noisy_spec = None;
    for ch in noisy {
        let spec = stft(ch, cfg)?;
        per_channel.push(lps(&spec.mag, cfg.lps_floor));
        if noisy_spec.is_none() {
            noisy_spec = Some(spec);
        }
    }
    let noisy_spec = noisy_spec.expect("at least one channel");
    let clean_spec = stft(clean, cfg)?;
    let clean_lps_full = lps(&clean_spec.mag, cfg.lps_floor);

    let frames = per_channel
        .iter()
        .map(|l| l.shape()[0])
        .min()
        .unwrap()
        .min(clean_lps_full.shape()[0]);
    let bins = cfg.freq_bins();

    // optional DC dropping, channel 1's DC column kept for reattachment
    let mut noisy_dc = Vec::new();
    let mut channel_frames = Vec::with_capacity(cfg.channels);
    for (ci, full) in per_channel.iter().enumerate() {
        let trimmed = Tensor::new(
            vec![frames, bins],
            full.data()[..frames * bins].to_vec(),
        )?;
        if cfg.drop_dc {
            let (dropped, dc) = drop_dc_bin(&trimmed)?;
            if ci == 0 {
                noisy_dc = dc;
            }
            channel_frames.push(dropped);
        } else {
            channel_frames.push(trimmed);
        }
    }

    // concat channels per frame: [T, carried_bins * B]
    let cb = cfg.carried_bins();
    let mut stacked = Tensor::zeros(&[frames, cb * cfg.channels]);
    for t in 0..frames {
        for (ci, ch) in channel_frames.iter().enumerate() {
            let dst = t * cb * cfg.channels + ci * cb;
            stacked.data_mut()[dst..dst + cb].copy_from_slice(&ch.data()[t * cb..(t + 1) * cb]);
        }
    }

    let mut x = context_expand(&stacked, cfg.context_m)?;
    if cfg.nat {
        let est = noise_estimate(&channel_frames[0])?;
        x = nat_augment(&x, &est)?;
    }
    debug_assert_eq!(x.shape()[1], cfg.feature_width());

    let clean_trimmed = Tensor::new(
        vec![frames, bins],
        clean_lps_full.data()[..frames * bins].to_vec(),
    )?;
    let y = if cfg.drop_dc {
        drop_dc_bin(&clean_trimmed)?.0
    } else {
        clean_trimmed.clone()
    };

    Ok(UtteranceFeatures {
        x,
        y,
        noisy_dc,
        noisy: noisy_spec,
        clean_lps_full: clean_trimmed,
    })
}
