//! Waveform and spectral quality metrics standing in for perceptual scores:
//! segmental SNR and log-spectral distance.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-frame SNR clamp range in dB.
pub const SEG_SNR_MIN_DB: f64 = -10.0;
pub const SEG_SNR_MAX_DB: f64 = 35.0;

/// Mean over frames of `10 log10(sum ref^2 / sum (ref - est)^2)`, each frame
/// clamped to [-10, 35] dB. Frames with zero reference energy are skipped;
/// a perfect match clamps to the 35 dB ceiling.
pub fn seg_snr(reference: &[f64], estimate: &[f64], frame_len: usize, hop: usize) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::shape_mismatch(
            "seg_snr",
            &[reference.len()],
            &[estimate.len()],
        ));
    }
    if reference.len() < frame_len || frame_len == 0 || hop == 0 {
        return Err(Error::Validation("seg_snr: bad frame/hop".into()));
    }
    let frames = 1 + (reference.len() - frame_len) / hop;
    let mut acc = 0.0;
    let mut used = 0usize;
    for t in 0..frames {
        let start = t * hop;
        let r = &reference[start..start + frame_len];
        let e = &estimate[start..start + frame_len];
        let ref_energy: f64 = r.iter().map(|v| v * v).sum();
        if ref_energy <= 0.0 {
            continue;
        }
        let err_energy: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        let snr = if err_energy == 0.0 {
            SEG_SNR_MAX_DB
        } else {
            (10.0 * (ref_energy / err_energy).log10()).clamp(SEG_SNR_MIN_DB, SEG_SNR_MAX_DB)
        };
        acc += snr;
        used += 1;
    }
    if used == 0 {
        return Ok(0.0);
    }
    Ok(acc / used as f64)
}

/// Mean over frames of the per-frame RMS difference of log spectra in dB.
/// The inputs are natural-log LPS rows `[T, D]`; the 10/ln(10) factor
/// converts to dB before the RMS.
pub fn log_spectral_distance(ref_lps: &Tensor, est_lps: &Tensor) -> Result<f64> {
    if ref_lps.shape() != est_lps.shape() || ref_lps.rank() != 2 {
        return Err(Error::shape_mismatch(
            "log_spectral_distance",
            ref_lps.shape(),
            est_lps.shape(),
        ));
    }
    let (t_len, d) = (ref_lps.shape()[0], ref_lps.shape()[1]);
    let to_db = 10.0 / std::f64::consts::LN_10;
    let mut acc = 0.0;
    for t in 0..t_len {
        let mut sq = 0.0;
        for i in 0..d {
            let diff = (ref_lps.data()[t * d + i] - est_lps.data()[t * d + i]) * to_db;
            sq += diff * diff;
        }
        acc += (sq / d as f64).sqrt();
    }
    Ok(acc / t_len as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn perfect_match_hits_clamp_and_zero_lsd() {
        let mut rng = RngState::new(1);
        let x: Vec<f64> = (0..2048).map(|_| rng.next_normal()).collect();
        let snr = seg_snr(&x, &x, 512, 256).unwrap();
        assert_eq!(snr, SEG_SNR_MAX_DB);

        let lps = rng.normal_tensor(&[4, 10], 1.0);
        assert_eq!(log_spectral_distance(&lps, &lps).unwrap(), 0.0);
    }

    #[test]
    fn zero_estimate_gives_zero_db() {
        let mut rng = RngState::new(2);
        let x: Vec<f64> = (0..2048).map(|_| rng.next_normal()).collect();
        let zeros = vec![0.0; x.len()];
        // ref vs zero: error energy equals ref energy, ratio 1, 0 dB
        let snr = seg_snr(&x, &zeros, 512, 256).unwrap();
        assert!(snr.abs() < 1e-12);
    }

    #[test]
    fn white_noise_at_known_snr() {
        let mut rng = RngState::new(3);
        let clean: Vec<f64> = (0..16000).map(|_| rng.next_normal()).collect();
        // add noise at exactly 10 dB overall
        let noise: Vec<f64> = (0..16000).map(|_| rng.next_normal()).collect();
        let p_c: f64 = clean.iter().map(|v| v * v).sum();
        let p_n: f64 = noise.iter().map(|v| v * v).sum();
        let alpha = (p_c / (p_n * 10f64.powf(1.0))).sqrt();
        let noisy: Vec<f64> = clean.iter().zip(&noise).map(|(c, n)| c + alpha * n).collect();
        let snr = seg_snr(&clean, &noisy, 512, 256).unwrap();
        assert!((snr - 10.0).abs() < 1.0, "seg snr {snr}");
    }

    #[test]
    fn lsd_of_constant_offset() {
        let base = RngState::new(4).normal_tensor(&[5, 8], 1.0);
        // offset of ln(10)/10 in natural log is exactly 1 dB everywhere
        let shifted = base.map(|x| x + std::f64::consts::LN_10 / 10.0);
        let lsd = log_spectral_distance(&base, &shifted).unwrap();
        assert!((lsd - 1.0).abs() < 1e-12, "lsd {lsd}");
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(seg_snr(&[0.0; 100], &[0.0; 99], 10, 5).is_err());
    }
}
