//! Synthetic paired (noisy, clean) waveform generation at exact SNRs.
//!
//! Clean material cycles through harmonic tones with vibrato, filtered noise
//! bursts, and linear chirps; noise through white, pink, and babble-like
//! modulated noise. Mixing scales the noise so the utterance-level SNR hits
//! the target exactly. Channel 2, when requested, is channel 1 delayed by a
//! fixed integer number of samples and scaled, a stand-in for a second
//! microphone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanKind {
    Harmonic,
    NoiseBurst,
    Chirp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub utterances: usize,
    /// Seconds per utterance.
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    /// Target SNRs cycled over utterances.
    #[serde(default = "default_snr_grid")]
    pub snr_grid_db: Vec<f64>,
    #[serde(default = "default_one")]
    pub channels: usize,
    /// Channel-2 delay in samples.
    #[serde(default = "default_delay")]
    pub channel_delay: usize,
    /// Channel-2 gain.
    #[serde(default = "default_gain")]
    pub channel_gain: f64,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
}

fn default_duration() -> f64 {
    1.0
}
fn default_snr_grid() -> Vec<f64> {
    vec![15.0, 10.0, 5.0, 0.0]
}
fn default_one() -> usize {
    1
}
fn default_delay() -> usize {
    12
}
fn default_gain() -> f64 {
    0.8
}
fn default_rate() -> u32 {
    16_000
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            utterances: 16,
            duration_s: default_duration(),
            snr_grid_db: default_snr_grid(),
            channels: 1,
            channel_delay: default_delay(),
            channel_gain: default_gain(),
            sample_rate: default_rate(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    /// Single-channel clean reference.
    pub clean: Vec<f64>,
    /// One or more noisy channels; channel 0 is clean + scaled noise.
    pub noisy: Vec<Vec<f64>>,
    pub snr_db: f64,
    pub clean_kind: CleanKind,
    pub noise_kind: NoiseKind,
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn scale_to_rms(x: &mut [f64], target: f64) {
    let r = rms(x);
    if r > 0.0 {
        let s = target / r;
        for v in x {
            *v *= s;
        }
    }
}

// Generator parameters are drawn from small discrete families so that the
// archetypes recur across utterances (what varies per utterance is phase,
// noise, and SNR). Fully continuous parameters would make every utterance a
// novel signal and turn the desk task into pure memorization.
const F0_GRID: [f64; 5] = [140.0, 180.0, 230.0, 290.0, 370.0];
const CHIRP_GRID: [(f64, f64); 4] = [
    (200.0, 1800.0),
    (350.0, 2600.0),
    (500.0, 3200.0),
    (150.0, 1200.0),
];
const BURST_ALPHA_GRID: [f64; 3] = [0.85, 0.9, 0.95];

fn harmonic_tone(rng: &mut RngState, n: usize, rate: f64) -> Vec<f64> {
    let f0 = F0_GRID[rng.next_index(F0_GRID.len())];
    let harmonics = 4 + rng.next_index(5);
    let vib_rate = rng.uniform(4.0, 7.0);
    // sub-bin depth: partial peaks stay within one FFT bin so the per-frame
    // leakage pattern is stable enough to regress
    let vib_depth = rng.uniform(0.002, 0.005);
    let mut out = vec![0.0; n];
    let mut phases: Vec<f64> = (0..harmonics)
        .map(|_| rng.uniform(0.0, std::f64::consts::TAU))
        .collect();
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / rate;
        let vib = 1.0 + vib_depth * (std::f64::consts::TAU * vib_rate * t).sin();
        for (h, ph) in phases.iter_mut().enumerate() {
            let freq = f0 * (h + 1) as f64 * vib;
            *ph += std::f64::consts::TAU * freq / rate;
            *o += (*ph).sin() / (h + 1) as f64;
        }
    }
    out
}

fn one_pole_lowpass(x: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut state = 0.0;
    for &v in x {
        state = alpha * state + (1.0 - alpha) * v;
        out.push(state);
    }
    out
}

fn noise_burst(rng: &mut RngState, n: usize, rate: f64) -> Vec<f64> {
    let cutoff_alpha = BURST_ALPHA_GRID[rng.next_index(BURST_ALPHA_GRID.len())];
    let raw: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
    let mut filtered = one_pole_lowpass(&raw, cutoff_alpha);
    // raised-cosine burst envelope
    let burst_hz = rng.uniform(1.5, 4.0);
    for (i, v) in filtered.iter_mut().enumerate() {
        let t = i as f64 / rate;
        let env = 0.5 * (1.0 - (std::f64::consts::TAU * burst_hz * t).cos());
        *v *= env;
    }
    filtered
}

fn chirp(rng: &mut RngState, n: usize, rate: f64) -> Vec<f64> {
    let (f1, f2) = CHIRP_GRID[rng.next_index(CHIRP_GRID.len())];
    let dur = n as f64 / rate;
    (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let phase = std::f64::consts::TAU * (f1 * t + 0.5 * (f2 - f1) / dur * t * t);
            phase.sin()
        })
        .collect()
}

fn pink_noise(rng: &mut RngState, n: usize) -> Vec<f64> {
    // sum of octave-spaced held white sources (Voss-style)
    const ROWS: usize = 8;
    let mut held = [0.0; ROWS];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        for (r, h) in held.iter_mut().enumerate() {
            if i % (1 << r) == 0 {
                *h = rng.next_normal();
            }
        }
        out.push(held.iter().sum::<f64>() / (ROWS as f64).sqrt());
    }
    out
}

fn babble_noise(rng: &mut RngState, n: usize, rate: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
    let mut base = one_pole_lowpass(&raw, 0.85);
    let mod_hz = rng.uniform(2.0, 6.0);
    let mod_phase = rng.uniform(0.0, std::f64::consts::TAU);
    for (i, v) in base.iter_mut().enumerate() {
        let t = i as f64 / rate;
        let env = 0.6 + 0.4 * (std::f64::consts::TAU * mod_hz * t + mod_phase).sin();
        *v *= env;
    }
    base
}

/// Clean "recordings" per dataset: a fixed bank of waveforms derived from
/// the dataset seed alone. Utterances reuse bank entries under fresh noise,
/// the way corpus-based noisy sets reuse clean recordings across noise
/// conditions; a regression target must be a repeatable signal, not a fresh
/// random realization per utterance.
const CLEAN_BANK_SIZE: usize = 9;
const BANK_SALT: u64 = 0x5EED_BA5E;

fn clean_bank(seed: u64, n: usize, rate: f64) -> Vec<(CleanKind, Vec<f64>)> {
    let kinds = [
        CleanKind::Harmonic,
        CleanKind::Harmonic,
        CleanKind::Harmonic,
        CleanKind::Harmonic,
        CleanKind::NoiseBurst,
        CleanKind::NoiseBurst,
        CleanKind::Chirp,
        CleanKind::Chirp,
        CleanKind::Chirp,
    ];
    (0..CLEAN_BANK_SIZE)
        .map(|b| {
            let kind = kinds[b % kinds.len()];
            let mut rng = RngState::derive(seed ^ BANK_SALT, b as u64);
            let mut wave = match kind {
                CleanKind::Harmonic => harmonic_tone(&mut rng, n, rate),
                CleanKind::NoiseBurst => noise_burst(&mut rng, n, rate),
                CleanKind::Chirp => chirp(&mut rng, n, rate),
            };
            scale_to_rms(&mut wave, 0.1);
            (kind, wave)
        })
        .collect()
}

/// Deterministic dataset for a seed: clean material comes from the seed's
/// fixed bank, while each utterance draws its noise from its own substream,
/// so generation order never matters.
pub fn synth_dataset(seed: u64, spec: &SynthSpec) -> Result<Vec<Utterance>> {
    if spec.utterances == 0 || spec.snr_grid_db.is_empty() {
        return Err(Error::Validation(
            "synth spec needs utterances >= 1 and a non-empty SNR grid".into(),
        ));
    }
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::Validation("channels must be 1 or 2".into()));
    }
    let rate = spec.sample_rate as f64;
    let n = (spec.duration_s * rate) as usize;
    if n < 1024 {
        return Err(Error::Validation("duration too short".into()));
    }

    let bank = clean_bank(seed, n, rate);
    let noise_kinds = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];

    let mut out = Vec::with_capacity(spec.utterances);
    for u in 0..spec.utterances {
        let mut rng = RngState::derive(seed, u as u64);
        let (clean_kind, clean) = bank[u % bank.len()].clone();
        let noise_kind = noise_kinds[(u / 3) % noise_kinds.len()];
        let snr_db = spec.snr_grid_db[u % spec.snr_grid_db.len()];

        let mut noise = match noise_kind {
            NoiseKind::White => (0..n).map(|_| rng.next_normal()).collect(),
            NoiseKind::Pink => pink_noise(&mut rng, n),
            NoiseKind::Babble => babble_noise(&mut rng, n, rate),
        };
        // exact SNR: 10 log10(P_clean / P_noise_scaled) = snr_db
        let p_clean = clean.iter().map(|v| v * v).sum::<f64>();
        let p_noise = noise.iter().map(|v| v * v).sum::<f64>();
        let alpha = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
        for v in &mut noise {
            *v *= alpha;
        }

        let ch1: Vec<f64> = clean.iter().zip(&noise).map(|(c, nz)| c + nz).collect();
        let mut noisy = vec![ch1];
        if spec.channels == 2 {
            let mut ch2 = vec![0.0; n];
            for i in spec.channel_delay..n {
                ch2[i] = spec.channel_gain * noisy[0][i - spec.channel_delay];
            }
            noisy.push(ch2);
        }

        out.push(Utterance {
            id: format!("utt{u:04}"),
            clean,
            noisy,
            snr_db,
            clean_kind,
            noise_kind,
        });
    }
    Ok(out)
}

/// Measured utterance-level SNR of a (clean, noisy) pair in dB.
pub fn measured_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let p_clean: f64 = clean.iter().map(|v| v * v).sum();
    let p_noise: f64 = clean
        .iter()
        .zip(noisy)
        .map(|(c, n)| (n - c) * (n - c))
        .sum();
    10.0 * (p_clean / p_noise).log10()
}
