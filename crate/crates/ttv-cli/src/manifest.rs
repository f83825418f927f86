//! Dataset directory layout: WAV pairs plus a JSON manifest, and the
//! deterministic train/val/test split over utterance indices.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ttv_core::dsp::{read_wav, write_wav, CleanKind, NoiseKind, Utterance};
use ttv_core::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub snr_db: f64,
    pub clean_kind: CleanKind,
    pub noise_kind: NoiseKind,
    pub clean: String,
    pub noisy: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub sample_rate: u32,
    pub channels: usize,
    pub seed: u64,
    pub utterances: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(Self::path(dir))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(Self::path(dir), text + "\n")?;
        Ok(())
    }
}

/// Write a synthesized dataset as WAV pairs + manifest.
pub fn write_dataset(
    dir: &Path,
    data: &[Utterance],
    sample_rate: u32,
    channels: usize,
    seed: u64,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(data.len());
    for utt in data {
        let clean_name = format!("{}.clean.wav", utt.id);
        let noisy_name = format!("{}.noisy.wav", utt.id);
        write_wav(&dir.join(&clean_name), &[utt.clean.clone()], sample_rate)?;
        write_wav(&dir.join(&noisy_name), &utt.noisy, sample_rate)?;
        entries.push(ManifestEntry {
            id: utt.id.clone(),
            snr_db: utt.snr_db,
            clean_kind: utt.clean_kind,
            noise_kind: utt.noise_kind,
            clean: clean_name,
            noisy: noisy_name,
        });
    }
    let manifest = Manifest {
        sample_rate,
        channels,
        seed,
        utterances: entries,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Loaded waveforms for one utterance.
pub struct LoadedUtterance {
    pub id: String,
    pub clean: Vec<f64>,
    pub noisy: Vec<Vec<f64>>,
}

pub fn load_utterance(dir: &Path, entry: &ManifestEntry) -> Result<LoadedUtterance> {
    let (clean_ch, _) = read_wav(&dir.join(&entry.clean))?;
    let (noisy, _) = read_wav(&dir.join(&entry.noisy))?;
    let clean = clean_ch
        .into_iter()
        .next()
        .ok_or_else(|| Error::Validation(format!("{}: empty clean wav", entry.id)))?;
    Ok(LoadedUtterance {
        id: entry.id.clone(),
        clean,
        noisy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Fixed 60/20/20 split by utterance position. The modulus is coprime with
/// the 4-entry SNR cycle, so every split sees every SNR level.
pub fn split_of(index: usize) -> Split {
    match index % 5 {
        3 => Split::Val,
        4 => Split::Test,
        _ => Split::Train,
    }
}

pub fn indices_for(manifest: &Manifest, split: Split) -> Vec<usize> {
    (0..manifest.utterances.len())
        .filter(|&i| split_of(i) == split)
        .collect()
}
