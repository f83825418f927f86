//! Command-line harness: dataset synthesis, training, evaluation,
//! compression, parameter accounting, bound sweeps, and the tradeoff table.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical
//! failure.

mod manifest;
mod pipeline;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use ttv_core::bounds::{cnn_bound, cnntt_bound, ttdnn_bound, BoundParams, RANK_SUBSTITUTION_NOTE};
use ttv_core::dsp::{synth_dataset, write_wav, SynthSpec};
use ttv_core::error::{Error, Result};
use ttv_core::train::evaluate_mse;
use ttv_core::zoo::{compress_model, count_params_formula, CompressSpec, ModelKind};
use ttv_core::RngState;

use manifest::{write_dataset, Manifest, Split};
use pipeline::{evaluate_set, train_bundle, FeatureSet, RunConfig, TrainedBundle};

#[derive(Parser)]
#[command(name = "ttv", version, about = "Tensor-to-vector regression models for speech enhancement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a paired (noisy, clean) WAV dataset with a manifest.
    SynthData {
        /// Synthesis spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a dataset directory and write a checkpoint.
    Train {
        /// Run config (JSON: model + features + train).
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory (from synth-data).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the held-out split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Apply global-variance equalization before scoring/resynthesis.
        #[arg(long)]
        gv: bool,
        /// Write enhanced waveforms into this directory.
        #[arg(long)]
        resynth: Option<PathBuf>,
    },
    /// Print the exact trainable-parameter count of a model config.
    Params {
        #[arg(long)]
        model: PathBuf,
    },
    /// Factor a trained checkpoint into a compressed variant.
    Compress {
        #[arg(long)]
        ckpt: PathBuf,
        /// Compression family: tt or tucker.
        #[arg(long)]
        kind: String,
        /// Per-layer rank spec (JSON CompressSpec).
        #[arg(long)]
        ranks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every config in a suite; emit a CSV table.
    Tradeoff {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep checkpoints and logs in this directory.
        #[arg(long)]
        work: Option<PathBuf>,
    },
    /// Evaluate the representation-power bound expressions; emit a CSV.
    Bounds {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        let code = match err {
            Error::Numerical(_) => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::SynthData { spec, out, seed } => cmd_synth(&spec, &out, seed),
        Cmd::Train {
            model,
            data,
            out,
            epochs,
            seed,
        } => cmd_train(&model, &data, &out, epochs, seed),
        Cmd::Eval {
            ckpt,
            data,
            gv,
            resynth,
        } => cmd_eval(&ckpt, &data, gv, resynth.as_deref()),
        Cmd::Params { model } => cmd_params(&model),
        Cmd::Compress {
            ckpt,
            kind,
            ranks,
            out,
        } => cmd_compress(&ckpt, &kind, &ranks, &out),
        Cmd::Tradeoff { suite, out, work } => cmd_tradeoff(&suite, &out, work.as_deref()),
        Cmd::Bounds { params, out } => cmd_bounds(&params, &out),
    }
}

fn cmd_synth(spec_path: &Path, out: &Path, seed: u64) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)?;
    let spec: SynthSpec = serde_json::from_str(&text)?;
    let data = synth_dataset(seed, &spec)?;
    let manifest = write_dataset(out, &data, spec.sample_rate, spec.channels, seed)?;
    println!(
        "wrote {} utterance pairs to {} (seed {seed})",
        manifest.utterances.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    model_path: &Path,
    data: &Path,
    out: &Path,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut run = RunConfig::load(model_path)?;
    if let Some(e) = epochs {
        run.train.epochs = e;
    }
    if let Some(s) = seed {
        run.train.seed = s;
    }
    let manifest = Manifest::load(data)?;
    let log_path = log_path_for(out);
    let bundle = train_bundle(&run, data, &manifest, Some(&log_path))?;
    bundle.save(out)?;
    let summary = bundle.summary.as_ref().expect("fresh training has a summary");
    let last = summary.history.last();
    println!(
        "{}",
        serde_json::json!({
            "epochs_run": summary.history.len(),
            "train_mse": last.map(|h| h.train_mse),
            "val_mse": last.and_then(|h| h.val_mse),
            "stopped_early": summary.stopped_early,
            "params": bundle.model.param_count(),
            "ckpt": out.display().to_string(),
        })
    );
    Ok(())
}

fn log_path_for(ckpt: &Path) -> PathBuf {
    let mut os = ckpt.as_os_str().to_os_string();
    os.push(".train.jsonl");
    PathBuf::from(os)
}

fn cmd_eval(ckpt: &Path, data: &Path, gv: bool, resynth: Option<&Path>) -> Result<()> {
    let mut bundle = TrainedBundle::load(ckpt)?;
    let manifest = Manifest::load(data)?;
    let eval_split = match std::env::var("TTV_DEBUG_SPLIT").as_deref() {
        Ok("train") => Split::Train,
        Ok("val") => Split::Val,
        _ => Split::Test,
    };
    let test = FeatureSet::extract(data, &manifest, eval_split, &bundle.run.features)?;
    let outcome = evaluate_set(&mut bundle, &test, gv)?;

    // recompute validation MSE over the same pipeline used in training, so
    // a reloaded checkpoint reproduces the stored value bitwise
    let val_mse = match FeatureSet::extract(data, &manifest, Split::Val, &bundle.run.features) {
        Ok(val) => {
            let ds = val.normalized_dataset(&bundle.in_stats, &bundle.out_stats)?;
            Some(evaluate_mse(
                &mut bundle.model,
                &ds,
                bundle.run.train.batch_size,
            )?)
        }
        Err(_) => None,
    };

    if let Some(dir) = resynth {
        std::fs::create_dir_all(dir)?;
        for (id, wave) in &outcome.enhanced {
            write_wav(
                &dir.join(format!("{id}.enhanced.wav")),
                &[wave.clone()],
                bundle.run.features.sample_rate,
            )?;
        }
    }

    let m = &outcome.metrics;
    println!(
        "{}",
        serde_json::json!({
            "mse": m.mse,
            "lsd": m.lsd,
            "lsdNoisy": m.lsd_noisy,
            "segSnrIn": m.seg_snr_in,
            "segSnrOut": m.seg_snr_out,
            "valMse": val_mse,
            "gv": gv,
        })
    );
    Ok(())
}

fn human_count(n: usize) -> String {
    let with_commas = {
        let s = n.to_string();
        let mut out = String::new();
        for (i, ch) in s.chars().enumerate() {
            if i > 0 && (s.len() - i) % 3 == 0 {
                out.push(',');
            }
            out.push(ch);
        }
        out
    };
    format!("{with_commas} ({:.1}M)", n as f64 / 1e6)
}

fn cmd_params(model_path: &Path) -> Result<()> {
    let run = RunConfig::load(model_path)?;
    let count = count_params_formula(&run.model)?;
    println!("{}", human_count(count));
    Ok(())
}

fn cmd_compress(ckpt: &Path, kind: &str, ranks: &Path, out: &Path) -> Result<()> {
    let bundle = TrainedBundle::load(ckpt)?;
    let spec: CompressSpec = serde_json::from_str(&std::fs::read_to_string(ranks)?)?;
    let target = match (bundle.run.model.kind, kind) {
        (ModelKind::Dnn, "tt") => ModelKind::DnnTt,
        (ModelKind::Cnn, "tt") => ModelKind::CnnTt,
        (ModelKind::Cnn, "tucker") => ModelKind::CnnTucker,
        (source, k) => {
            return Err(Error::Validation(format!(
                "cannot compress a {} checkpoint with --kind {k}",
                source.as_str()
            )))
        }
    };
    let (mut compressed, report) = compress_model(&bundle.model, target, &spec)?;

    // measured output agreement on random normalized inputs
    let mut source_model = TrainedBundle::load(ckpt)?.model;
    let width = bundle.run.model.input_width();
    let mut max_diff = 0.0f64;
    for trial in 0..16u64 {
        let x = RngState::derive(0xC0_FF_EE, trial).normal_tensor(&[4, width], 1.0);
        let a = source_model.forward(&x, ttv_core::layers::Mode::Infer)?;
        let b = compressed.forward(&x, ttv_core::layers::Mode::Infer)?;
        max_diff = max_diff.max(a.max_abs_diff(&b));
    }

    let new_run = RunConfig {
        model: compressed.config.clone(),
        features: bundle.run.features.clone(),
        train: bundle.run.train.clone(),
    };
    let new_bundle = TrainedBundle {
        run: new_run,
        model: compressed,
        in_stats: bundle.in_stats.clone(),
        out_stats: bundle.out_stats.clone(),
        gv: bundle.gv.clone(),
        summary: None,
        val_mse: None,
    };
    new_bundle.save(out)?;

    println!(
        "{}",
        serde_json::json!({
            "kind": target.as_str(),
            "old_params": report.old_total,
            "new_params": report.new_total,
            "ratio": report.new_total as f64 / report.old_total as f64,
            "layers": report.layers,
            "output_max_abs_diff": max_diff,
            "ckpt": out.display().to_string(),
        })
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct SuiteEntry {
    id: String,
    config: PathBuf,
}

#[derive(Debug, Deserialize)]
struct Suite {
    /// Generate the dataset with this spec and seed...
    #[serde(default)]
    synth: Option<SynthSpec>,
    #[serde(default)]
    synth_seed: u64,
    /// ...or point at an existing dataset directory.
    #[serde(default)]
    data_dir: Option<PathBuf>,
    entries: Vec<SuiteEntry>,
    /// Optional overrides applied to every entry.
    #[serde(default)]
    epochs: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

fn cmd_tradeoff(suite_path: &Path, out: &Path, work: Option<&Path>) -> Result<()> {
    let suite: Suite = serde_json::from_str(&std::fs::read_to_string(suite_path)?)?;
    if suite.entries.is_empty() {
        std::fs::write(out, tradeoff_header())?;
        println!("empty suite: wrote header-only CSV to {}", out.display());
        return Ok(());
    }
    let base = suite_path.parent().unwrap_or(Path::new("."));

    let tmp;
    let work_dir = match work {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            dir.to_path_buf()
        }
        None => {
            tmp = std::env::temp_dir().join(format!("ttv-tradeoff-{}", std::process::id()));
            std::fs::create_dir_all(&tmp)?;
            tmp.clone()
        }
    };

    let data_dir = match (&suite.data_dir, &suite.synth) {
        (Some(dir), _) => base.join(dir),
        (None, Some(spec)) => {
            let dir = work_dir.join("data");
            let data = synth_dataset(suite.synth_seed, spec)?;
            write_dataset(&dir, &data, spec.sample_rate, spec.channels, suite.synth_seed)?;
            dir
        }
        (None, None) => {
            return Err(Error::Validation(
                "suite needs either data_dir or a synth spec".into(),
            ))
        }
    };
    let manifest = Manifest::load(&data_dir)?;

    let mut csv = tradeoff_header();
    for entry in &suite.entries {
        let t0 = std::time::Instant::now();
        let mut run = RunConfig::load(&base.join(&entry.config))?;
        if let Some(e) = suite.epochs {
            run.train.epochs = e;
        }
        if let Some(s) = suite.seed {
            run.train.seed = s;
        }
        let mut bundle = train_bundle(&run, &data_dir, &manifest, None)?;
        bundle.save(&work_dir.join(format!("{}.ckpt", entry.id)))?;
        let test = FeatureSet::extract(&data_dir, &manifest, Split::Test, &run.features)?;
        let outcome = evaluate_set(&mut bundle, &test, false)?;
        let m = &outcome.metrics;
        csv.push_str(&format!(
            "{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            entry.id,
            run.model.kind.as_str(),
            bundle.model.param_count(),
            m.mse,
            m.lsd,
            m.lsd_noisy,
            m.seg_snr_in,
            m.seg_snr_out,
        ));
        eprintln!(
            "tradeoff: {} done in {} ms",
            entry.id,
            t0.elapsed().as_millis()
        );
    }
    std::fs::write(out, csv)?;
    println!("wrote {} rows to {}", suite.entries.len(), out.display());
    Ok(())
}

fn tradeoff_header() -> String {
    "id,kind,params,mse,lsd,lsd_noisy,seg_snr_in,seg_snr_out\n".to_string()
}

#[derive(Debug, Serialize, Deserialize)]
struct BoundEntry {
    id: String,
    params: BoundParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoundFile {
    entries: Vec<BoundEntry>,
}

fn cmd_bounds(params: &Path, out: &Path) -> Result<()> {
    let file: BoundFile = serde_json::from_str(&std::fs::read_to_string(params)?)?;
    let mut csv = format!("# note: eq3/eq4 computed with {RANK_SUBSTITUTION_NOTE}\n");
    csv.push_str("id,cnn_bound,ttdnn_bound,cnntt_bound\n");
    for entry in &file.entries {
        entry.params.validate()?;
        csv.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e}\n",
            entry.id,
            cnn_bound(&entry.params),
            ttdnn_bound(&entry.params),
            cnntt_bound(&entry.params),
        ));
    }
    std::fs::write(out, csv)?;
    println!("wrote {} bound rows to {}", file.entries.len(), out.display());
    Ok(())
}
