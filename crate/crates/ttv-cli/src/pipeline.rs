//! Glue between the dataset directory and the core library: feature
//! extraction into frame-level datasets, the trained-model checkpoint
//! bundle, and utterance-level evaluation with resynthesis.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ttv_core::ckpt::Checkpoint;
use ttv_core::dsp::{
    self, istft, lps_to_mag, reattach_dc_bin, FeatureConfig, GvStats, NormStats,
    UtteranceFeatures,
};
use ttv_core::error::{Error, Result};
use ttv_core::tensor::Tensor;
use ttv_core::train::{predict, Dataset, TrainConfig, TrainSummary};
use ttv_core::zoo::{build_model, BuiltModel, ModelConfig};
use ttv_core::RngState;

use crate::manifest::{indices_for, load_utterance, LoadedUtterance, Manifest, Split};

/// One JSON file drives a run: architecture, feature front-end, training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.check_consistent()?;
        Ok(cfg)
    }

    /// The model's declared input geometry must match what the feature
    /// pipeline will produce.
    pub fn check_consistent(&self) -> Result<()> {
        self.features.validate()?;
        self.model.validate()?;
        let feat = &self.features;
        let input = &self.model.input;
        if input.freq_bins != feat.carried_bins()
            || input.context_frames != 2 * feat.context_m + 1
            || input.channels != feat.channels
            || input.nat != feat.nat
        {
            return Err(Error::Validation(format!(
                "model input ({} bins x {} frames x {} ch, nat {}) does not match \
                 features ({} bins x {} frames x {} ch, nat {})",
                input.freq_bins,
                input.context_frames,
                input.channels,
                input.nat,
                feat.carried_bins(),
                2 * feat.context_m + 1,
                feat.channels,
                feat.nat,
            )));
        }
        if self.model.output_dim != feat.target_width() {
            return Err(Error::Validation(format!(
                "model output_dim {} does not match target width {}",
                self.model.output_dim,
                feat.target_width()
            )));
        }
        Ok(())
    }
}

/// Features for a list of utterances, kept per utterance for evaluation.
pub struct FeatureSet {
    pub utterances: Vec<(LoadedUtterance, UtteranceFeatures)>,
}

impl FeatureSet {
    pub fn extract(
        dir: &Path,
        manifest: &Manifest,
        split: Split,
        cfg: &FeatureConfig,
    ) -> Result<FeatureSet> {
        let mut utterances = Vec::new();
        for i in indices_for(manifest, split) {
            let loaded = load_utterance(dir, &manifest.utterances[i])?;
            let feats = dsp::utterance_features(&loaded.noisy, &loaded.clean, cfg)?;
            utterances.push((loaded, feats));
        }
        if utterances.is_empty() {
            return Err(Error::Validation(format!(
                "no utterances in {split:?} split"
            )));
        }
        Ok(FeatureSet { utterances })
    }

    /// Stack all frames into one raw (un-normalized) dataset.
    pub fn stacked(&self) -> Result<(Tensor, Tensor)> {
        let d_in = self.utterances[0].1.x.shape()[1];
        let d_out = self.utterances[0].1.y.shape()[1];
        let frames: usize = self.utterances.iter().map(|(_, f)| f.x.shape()[0]).sum();
        let mut x = Tensor::zeros(&[frames, d_in]);
        let mut y = Tensor::zeros(&[frames, d_out]);
        let mut row = 0;
        for (_, f) in &self.utterances {
            let n = f.x.shape()[0];
            x.data_mut()[row * d_in..(row + n) * d_in].copy_from_slice(f.x.data());
            y.data_mut()[row * d_out..(row + n) * d_out].copy_from_slice(f.y.data());
            row += n;
        }
        Ok((x, y))
    }

    pub fn normalized_dataset(&self, in_stats: &NormStats, out_stats: &NormStats) -> Result<Dataset> {
        let (x, y) = self.stacked()?;
        Dataset::new(in_stats.normalize(&x)?, out_stats.normalize(&y)?)
    }
}

/// Everything a trained model needs to be reloaded and evaluated.
pub struct TrainedBundle {
    pub run: RunConfig,
    pub model: BuiltModel,
    pub in_stats: NormStats,
    pub out_stats: NormStats,
    pub gv: GvStats,
    pub summary: Option<TrainSummary>,
    pub val_mse: Option<f64>,
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec())
}

impl TrainedBundle {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = self.model.dump_tensors();
        tensors.push(("norm.in.mean".into(), vec_tensor(&self.in_stats.mean)));
        tensors.push(("norm.in.std".into(), vec_tensor(&self.in_stats.std)));
        tensors.push(("norm.out.mean".into(), vec_tensor(&self.out_stats.mean)));
        tensors.push(("norm.out.std".into(), vec_tensor(&self.out_stats.std)));
        tensors.push(("gv.ref_var".into(), vec_tensor(&self.gv.ref_var)));
        tensors.push(("gv.est_var".into(), vec_tensor(&self.gv.est_var)));
        tensors.push(("gv.est_mean".into(), vec_tensor(&self.gv.est_mean)));
        let metadata = serde_json::json!({
            "model": self.model.config,
            "features": self.run.features,
            "train": self.run.train,
            "seed": self.run.train.seed,
            "history": self.summary.as_ref().map(|s| &s.history),
            "val_mse": self.val_mse,
        });
        Ok(Checkpoint { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<TrainedBundle> {
        let ckpt = Checkpoint::load(path)?;
        let model_cfg: ModelConfig = serde_json::from_value(ckpt.metadata["model"].clone())?;
        let features: FeatureConfig = serde_json::from_value(ckpt.metadata["features"].clone())?;
        let train: TrainConfig = serde_json::from_value(ckpt.metadata["train"].clone())?;
        let val_mse = ckpt.metadata["val_mse"].as_f64();

        let mut model = build_model(&model_cfg, &mut RngState::new(train.seed))?;
        model.load_tensors(&ckpt.tensors)?;

        let take = |name: &str| -> Result<Vec<f64>> {
            ckpt.tensor(name)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Validation(format!("checkpoint is missing `{name}`")))
        };
        Ok(TrainedBundle {
            run: RunConfig {
                model: model_cfg,
                features,
                train,
            },
            model,
            in_stats: NormStats {
                mean: take("norm.in.mean")?,
                std: take("norm.in.std")?,
            },
            out_stats: NormStats {
                mean: take("norm.out.mean")?,
                std: take("norm.out.std")?,
            },
            gv: GvStats {
                ref_var: take("gv.ref_var")?,
                est_var: take("gv.est_var")?,
                est_mean: take("gv.est_mean")?,
            },
            summary: None,
            val_mse,
        })
    }
}

/// Aggregated evaluation metrics over a split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// MSE in the normalized target domain (the training objective).
    pub mse: f64,
    /// Log-spectral distance enhanced vs clean, dB.
    pub lsd: f64,
    /// Log-spectral distance noisy vs clean, dB (reference point).
    pub lsd_noisy: f64,
    /// Segmental SNR of the noisy input against clean, dB.
    pub seg_snr_in: f64,
    /// Segmental SNR of the enhanced output against clean, dB.
    pub seg_snr_out: f64,
}

pub struct EvalOutcome {
    pub metrics: EvalMetrics,
    /// (utterance id, enhanced waveform), in split order.
    pub enhanced: Vec<(String, Vec<f64>)>,
}

/// Run the model over a feature set and score it. `apply_gv` switches on
/// global-variance equalization of the denormalized estimates.
pub fn evaluate_set(
    bundle: &mut TrainedBundle,
    set: &FeatureSet,
    apply_gv: bool,
) -> Result<EvalOutcome> {
    let cfg = bundle.run.features.clone();
    let batch = bundle.run.train.batch_size.max(1);
    let mut mse_acc = 0.0;
    let mut mse_n = 0.0;
    let mut lsd_acc = 0.0;
    let mut lsd_noisy_acc = 0.0;
    let mut snr_in_acc = 0.0;
    let mut snr_out_acc = 0.0;
    let mut enhanced_out = Vec::new();

    for (loaded, feats) in &set.utterances {
        let x = bundle.in_stats.normalize(&feats.x)?;
        let y = bundle.out_stats.normalize(&feats.y)?;
        let pred = predict(&mut bundle.model, &x, batch)?;
        let d = pred.sub(&y)?;
        mse_acc += d.sum_squares();
        mse_n += d.len() as f64;

        let mut est = bundle.out_stats.denormalize(&pred)?;
        if apply_gv {
            est = dsp::gv_equalize(&est, &bundle.gv)?.equalized;
        }
        // full-width enhanced LPS (reattach the untouched noisy DC bin)
        let enhanced_lps = if cfg.drop_dc {
            reattach_dc_bin(&est, &feats.noisy_dc)?
        } else {
            est
        };

        let clean_lps = &feats.clean_lps_full;
        let noisy_lps = dsp::lps(&feats.noisy.mag, cfg.lps_floor);
        lsd_acc += dsp::log_spectral_distance(clean_lps, &enhanced_lps)?;
        lsd_noisy_acc += dsp::log_spectral_distance(clean_lps, &noisy_lps)?;

        // noisy-phase resynthesis
        let mag = lps_to_mag(&enhanced_lps);
        let wave = istft(&mag, &feats.noisy.phase, &cfg)?;
        let n = wave.len().min(loaded.clean.len());
        snr_out_acc += dsp::seg_snr(&loaded.clean[..n], &wave[..n], cfg.frame_len, cfg.hop)?;
        let snr_in_utt = dsp::seg_snr(
            &loaded.clean[..n],
            &loaded.noisy[0][..n],
            cfg.frame_len,
            cfg.hop,
        )?;
        snr_in_acc += snr_in_utt;
        if std::env::var("TTV_DEBUG_PER_UTT").is_ok() {
            let snr_out_utt = dsp::seg_snr(&loaded.clean[..n], &wave[..n], cfg.frame_len, cfg.hop)?;
            let oracle = {
                let clean_spec = dsp::stft(&loaded.clean, &cfg)?;
                let w = istft(&clean_spec.mag, &feats.noisy.phase, &cfg)?;
                dsp::seg_snr(&loaded.clean[..n], &w[..n], cfg.frame_len, cfg.hop)?
            };
            eprintln!("{}: in {snr_in_utt:6.2} out {snr_out_utt:6.2} oracle {oracle:6.2}", loaded.id);
        }
        enhanced_out.push((loaded.id.clone(), wave));
    }

    let n_utt = set.utterances.len() as f64;
    Ok(EvalOutcome {
        metrics: EvalMetrics {
            mse: mse_acc / mse_n,
            lsd: lsd_acc / n_utt,
            lsd_noisy: lsd_noisy_acc / n_utt,
            seg_snr_in: snr_in_acc / n_utt,
            seg_snr_out: snr_out_acc / n_utt,
        },
        enhanced: enhanced_out,
    })
}

/// Fit input/output normalization and GV reference variance, train, and
/// measure post-training estimate statistics.
pub fn train_bundle(
    run: &RunConfig,
    dir: &Path,
    manifest: &Manifest,
    log: Option<&Path>,
) -> Result<TrainedBundle> {
    run.check_consistent()?;
    let train_set = FeatureSet::extract(dir, manifest, Split::Train, &run.features)?;
    let val_set = FeatureSet::extract(dir, manifest, Split::Val, &run.features).ok();

    let (raw_x, raw_y) = train_set.stacked()?;
    let in_stats = NormStats::fit(&raw_x)?;
    let out_stats = NormStats::fit_pooled_std(&raw_y)?;
    let train_data = Dataset::new(in_stats.normalize(&raw_x)?, out_stats.normalize(&raw_y)?)?;
    let val_data = match &val_set {
        Some(set) => Some(set.normalized_dataset(&in_stats, &out_stats)?),
        None => None,
    };

    let mut model = build_model(&run.model, &mut RngState::new(run.train.seed))?;
    let summary = ttv_core::train::train(&mut model, &train_data, val_data.as_ref(), &run.train)?;

    if let Some(path) = log {
        let mut lines = String::new();
        for report in &summary.history {
            lines.push_str(&serde_json::to_string(report)?);
            lines.push('\n');
        }
        std::fs::write(path, lines)?;
    }

    // GV statistics on training data: reference variance of the raw targets,
    // estimate variance of the denormalized model outputs
    let pred = predict(&mut model, &train_data.x, run.train.batch_size.max(1))?;
    let est = out_stats.denormalize(&pred)?;
    let gv = GvStats::fit(&raw_y, &est)?;

    let val_mse = summary
        .history
        .last()
        .and_then(|h| h.val_mse)
        .or(summary.best_val_mse);

    Ok(TrainedBundle {
        run: run.clone(),
        model,
        in_stats,
        out_stats,
        gv,
        summary: Some(summary),
        val_mse,
    })
}
