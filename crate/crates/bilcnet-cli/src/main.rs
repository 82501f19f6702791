//! Command-line driver wiring the pipeline end to end: synthetic capture
//! generation, preprocessing into binary datasets, training, evaluation,
//! zero-shot transfer runs, and gradient verification.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bilcnet::eval::{
    confusion, metrics, temporal_split, zero_shot_folds, zero_shot_report, ClassMetrics,
    OverallMetrics,
};
use bilcnet::model::{BiLCNet, ModelConfig};
use bilcnet::num::splitmix64;
use bilcnet::preprocess::{compute_stats, preprocess_session, session_files, SampleSet};
use bilcnet::record::read_session;
use bilcnet::synth::{generate_dataset, manifest_path};
use bilcnet::train::{fit, TrainConfig};
use bilcnet::verify::{model_case, noise_floor, primitive_suite};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "bilcnet", version, about = "Traffic classification over 5G physical-channel logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic session grid (4 labels x 11 gains)
    Gen {
        /// Directory for session files and the manifest
        #[arg(long)]
        out: PathBuf,
        /// Radio frames per session
        #[arg(long)]
        frames: u64,
        /// Root seed for the whole grid
        #[arg(long)]
        seed: u64,
    },
    /// Convert session logs into one binary dataset
    Preprocess {
        /// Directory holding .jsonl session files
        #[arg(long = "in")]
        input: PathBuf,
        /// Output dataset path (.blcd)
        #[arg(long)]
        out: PathBuf,
        /// Rolling-statistics window in frames
        #[arg(long, default_value_t = 10)]
        window: usize,
    },
    /// Train a model on the temporal train/val splits of a dataset
    Train {
        /// Input dataset (.blcd)
        #[arg(long)]
        data: PathBuf,
        /// Run configuration (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Output model path (.blcm)
        #[arg(long)]
        out: PathBuf,
        /// Override the configured epoch limit
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a saved model on the temporal test split
    Eval {
        /// Input dataset (.blcd)
        #[arg(long)]
        data: PathBuf,
        /// Saved model (.blcm)
        #[arg(long)]
        model: PathBuf,
        /// Output metrics report (JSON)
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and test once per gain level, holding that gain out
    Zeroshot {
        /// Input dataset (.blcd)
        #[arg(long)]
        data: PathBuf,
        /// Run configuration (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Output report (JSON)
        #[arg(long)]
        report: PathBuf,
    },
    /// Check analytic gradients against central finite differences
    Gradcheck {
        /// Relative error tolerance per coordinate
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Seed selecting the probe points
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Runtime(String),
    Verification,
}

type CliResult = Result<(), Failure>;

fn fail<E: Display>(context: impl Into<String>) -> impl FnOnce(E) -> Failure {
    let context = context.into();
    move |e| Failure::Runtime(format!("{context}: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen { out, frames, seed } => cmd_gen(&out, frames, seed),
        Command::Preprocess { input, out, window } => cmd_preprocess(&input, &out, window),
        Command::Train { data, config, out, epochs } => cmd_train(&data, &config, &out, epochs),
        Command::Eval { data, model, report } => cmd_eval(&data, &model, &report),
        Command::Zeroshot { data, config, report } => cmd_zeroshot(&data, &config, &report),
        Command::Gradcheck { tol, seed } => cmd_gradcheck(tol, seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Verification) => ExitCode::from(3),
    }
}

// --- configuration ----------------------------------------------------------

/// Run settings merged from one JSON document; every field has a default,
/// unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelConfig,
    model_seed: u64,
    train: TrainConfig,
    train_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            model_seed: 0,
            train: TrainConfig::default(),
            train_frac: 0.8,
        }
    }
}

fn load_run_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(fail(path.display().to_string()))?;
    serde_json::from_str(&text).map_err(fail(format!("{}: bad config", path.display())))
}

/// Place a derived artifact next to `path`: "model.blcm" -> "model.history.jsonl".
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(fail(path.display().to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(fail(path.display().to_string()))
}

fn dim_check(model: &BiLCNet<f32>, set: &SampleSet) -> CliResult {
    if model.config.input_dim != set.d || set.t != bilcnet::preprocess::FRAME_ROWS {
        return Err(Failure::Runtime(format!(
            "model expects {}x{} samples, dataset carries {}x{}",
            bilcnet::preprocess::FRAME_ROWS,
            model.config.input_dim,
            set.t,
            set.d
        )));
    }
    Ok(())
}

// --- commands ---------------------------------------------------------------

fn cmd_gen(out: &Path, frames: u64, seed: u64) -> CliResult {
    let manifest = generate_dataset(out, frames, seed).map_err(fail(out.display().to_string()))?;
    println!(
        "{} sessions written, manifest at {}",
        manifest.sessions.len(),
        manifest_path(out).display()
    );
    Ok(())
}

fn cmd_preprocess(dir: &Path, out: &Path, window: usize) -> CliResult {
    let files = session_files(dir).map_err(fail(dir.display().to_string()))?;
    if files.is_empty() {
        return Err(Failure::Runtime(format!(
            "no .jsonl session files under {}",
            dir.display()
        )));
    }
    let mut set = SampleSet::new();
    for path in &files {
        let context = path.display().to_string();
        let (header, records, _) = read_session(path).map_err(fail(context.clone()))?;
        for matrix in preprocess_session(&header, &records, window).map_err(fail(context))? {
            set.push(&matrix);
        }
    }
    set.write(out).map_err(fail(out.display().to_string()))?;
    let all: Vec<usize> = (0..set.len()).collect();
    let stats = compute_stats(&set, &all).map_err(fail("feature statistics"))?;
    write_json(&sibling(out, "stats.json"), &stats)?;
    println!("{} samples, T={} D={}", set.len(), set.t, set.d);
    Ok(())
}

fn cmd_train(data: &Path, config_path: &Path, out: &Path, epochs: Option<usize>) -> CliResult {
    let mut run = load_run_config(config_path)?;
    if let Some(limit) = epochs {
        run.train.max_epochs = limit;
        run.train.patience = run.train.patience.min(limit);
    }
    let set = SampleSet::read(data).map_err(fail(data.display().to_string()))?;
    let split = temporal_split(&set, run.train_frac).map_err(fail("temporal split"))?;
    let mut model =
        BiLCNet::<f32>::init(&run.model, run.model_seed).map_err(fail("model init"))?;
    dim_check(&model, &set)?;
    apply_normalization(&mut model, &set, &split.train)?;
    let report =
        fit(&mut model, &set, &split.train, &split.val, &run.train).map_err(fail("fit"))?;
    model.save(out).map_err(fail(out.display().to_string()))?;
    let mut history = String::new();
    for epoch in &report.history {
        history.push_str(&serde_json::to_string(epoch).map_err(fail("history"))?);
        history.push('\n');
    }
    let history_path = sibling(out, "history.jsonl");
    std::fs::write(&history_path, history).map_err(fail(history_path.display().to_string()))?;
    write_json(&sibling(out, "config.json"), &run)?;
    let best = &report.history[report.best_epoch - 1];
    println!(
        "trained {} epochs; best epoch {}: val_acc {:.4} val_loss {:.4}",
        report.history.len(),
        report.best_epoch,
        best.val_acc,
        best.val_loss
    );
    Ok(())
}

/// Standardize with statistics of the training rows only.
fn apply_normalization(model: &mut BiLCNet<f32>, set: &SampleSet, train: &[usize]) -> CliResult {
    let stats = compute_stats(set, train).map_err(fail("feature statistics"))?;
    let means: Vec<f32> = stats.means.iter().map(|&v| v as f32).collect();
    let sigmas: Vec<f32> = stats.sigmas.iter().map(|&v| v as f32).collect();
    model.set_normalization(&means, &sigmas);
    Ok(())
}

#[derive(Serialize)]
struct EvalDocument {
    confusion: [[u64; 4]; 4],
    per_class: [ClassMetrics; 4],
    overall: OverallMetrics,
}

fn predict_split(
    model: &BiLCNet<f32>,
    set: &SampleSet,
    idx: &[usize],
) -> Result<(Vec<usize>, Vec<usize>), Failure> {
    let mut labels = Vec::with_capacity(idx.len());
    let mut preds = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(256) {
        let (x, y) = set.gather::<f32>(chunk);
        preds.extend(model.predict(&x).map_err(fail("predict"))?);
        labels.extend(y);
    }
    Ok((labels, preds))
}

fn cmd_eval(data: &Path, model_path: &Path, report_path: &Path) -> CliResult {
    let set = SampleSet::read(data).map_err(fail(data.display().to_string()))?;
    let model = BiLCNet::<f32>::load(model_path).map_err(fail(model_path.display().to_string()))?;
    dim_check(&model, &set)?;
    let split = temporal_split(&set, RunConfig::default().train_frac).map_err(fail("temporal split"))?;
    let (labels, preds) = predict_split(&model, &set, &split.test)?;
    let cm = confusion(&labels, &preds).map_err(fail("confusion"))?;
    let mr = metrics(&cm).map_err(fail("metrics"))?;
    write_json(
        report_path,
        &EvalDocument {
            confusion: cm.counts,
            per_class: mr.per_class,
            overall: mr.overall,
        },
    )?;
    println!(
        "test accuracy {:.4}  macro precision {:.4}  recall {:.4}  f1 {:.4}  ({} samples)",
        mr.overall.accuracy,
        mr.overall.macro_precision,
        mr.overall.macro_recall,
        mr.overall.macro_f1,
        labels.len()
    );
    Ok(())
}

/// Hold back the last `frac` of each session's frames (at least one) as a
/// validation tail; the rest stays training data.
fn temporal_tail_split(set: &SampleSet, idx: &[usize], frac: f64) -> (Vec<usize>, Vec<usize>) {
    let mut sessions: BTreeMap<(u8, u8), Vec<usize>> = BTreeMap::new();
    for &i in idx {
        sessions.entry(set.session_key(i)).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut frames) in sessions {
        frames.sort_by_key(|&i| set.ordinals[i]);
        if frames.len() < 2 {
            train.extend(frames);
            continue;
        }
        let n_val = ((frames.len() as f64 * frac) as usize).clamp(1, frames.len() - 1);
        let cut = frames.len() - n_val;
        train.extend(&frames[..cut]);
        val.extend(&frames[cut..]);
    }
    (train, val)
}

fn cmd_zeroshot(data: &Path, config_path: &Path, report_path: &Path) -> CliResult {
    let run = load_run_config(config_path)?;
    let set = SampleSet::read(data).map_err(fail(data.display().to_string()))?;
    let folds = zero_shot_folds(&set).map_err(fail("fold construction"))?;
    let mut accuracies = Vec::with_capacity(folds.len());
    for fold in &folds {
        // both seeds are re-derived per fold so serial and parallel
        // execution orders would produce the same report
        let salt = (fold.gain_db as u64) << 32;
        let mut tcfg = run.train.clone();
        tcfg.seed = splitmix64(run.train.seed ^ salt);
        let mut model = BiLCNet::<f32>::init(&run.model, splitmix64(run.model_seed ^ salt))
            .map_err(fail("model init"))?;
        dim_check(&model, &set)?;
        let (train_idx, val_idx) = temporal_tail_split(&set, &fold.train, 0.1);
        apply_normalization(&mut model, &set, &train_idx)?;
        fit(&mut model, &set, &train_idx, &val_idx, &tcfg)
            .map_err(fail(format!("fit holding out {} dB", fold.gain_db)))?;
        let (labels, preds) = predict_split(&model, &set, &fold.test)?;
        let correct = labels.iter().zip(&preds).filter(|(a, b)| a == b).count();
        let accuracy = correct as f64 / labels.len() as f64;
        println!("held-out {} dB: accuracy {:.4}", fold.gain_db, accuracy);
        accuracies.push((fold.gain_db, accuracy));
    }
    let report = zero_shot_report(&accuracies).map_err(fail("report"))?;
    write_json(report_path, &report)?;
    write_json(&sibling(report_path, "config.json"), &run)?;
    println!("mean zero-shot accuracy {:.4}", report.mean);
    Ok(())
}

fn cmd_gradcheck(tol: f64, seed: u64) -> CliResult {
    let mut cases = primitive_suite::<f64>(tol, seed);
    cases.push(model_case::<f64>(tol, seed));
    println!(
        "{:<20} {:>12} {:>12}  result   (coordinate passes under rel {tol:.1e} or abs {:.1e})",
        "case",
        "max rel",
        "max abs",
        noise_floor::<f64>()
    );
    let mut all_pass = true;
    for case in &cases {
        println!(
            "{:<20} {:>12.3e} {:>12.3e}  {}",
            case.name,
            case.report.max_rel_err,
            case.report.max_abs_err,
            if case.report.pass { "ok" } else { "FAIL" }
        );
        all_pass &= case.report.pass;
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bilcnet::preprocess::FrameMatrix;
    use bilcnet::record::{GainLevel, TrafficLabel};

    fn set_with_sessions(frames: usize) -> SampleSet {
        let mut set = SampleSet::new();
        for label in TrafficLabel::ALL {
            for ordinal in 0..frames {
                set.push(&FrameMatrix {
                    label,
                    gain: GainLevel::new(70).unwrap(),
                    frame: ordinal as u64,
                    ordinal: ordinal as u32,
                    values: vec![0.0; 610],
                });
            }
        }
        set
    }

    #[test]
    fn tail_split_keeps_the_last_frames_for_validation() {
        let set = set_with_sessions(10);
        let idx: Vec<usize> = (0..set.len()).collect();
        let (train, val) = temporal_tail_split(&set, &idx, 0.1);
        assert_eq!(train.len(), 36);
        assert_eq!(val.len(), 4);
        for &v in &val {
            assert_eq!(set.ordinals[v], 9, "validation must take the session tail");
        }
    }

    #[test]
    fn tail_split_never_empties_a_two_frame_session() {
        let set = set_with_sessions(2);
        let idx: Vec<usize> = (0..set.len()).collect();
        let (train, val) = temporal_tail_split(&set, &idx, 0.1);
        assert_eq!(train.len(), 4);
        assert_eq!(val.len(), 4);
    }

    #[test]
    fn run_config_rejects_unknown_keys_and_fills_defaults() {
        let parsed: RunConfig = serde_json::from_str("{\"train_frac\": 0.7}").unwrap();
        assert_eq!(parsed.train_frac, 0.7);
        assert_eq!(parsed.model, ModelConfig::default());
        assert!(serde_json::from_str::<RunConfig>("{\"name\": \"x\"}").is_err());
    }

    #[test]
    fn sibling_paths_replace_the_extension() {
        assert_eq!(
            sibling(Path::new("runs/model.blcm"), "history.jsonl"),
            Path::new("runs/model.history.jsonl")
        );
        assert_eq!(
            sibling(Path::new("runs/data.blcd"), "stats.json"),
            Path::new("runs/data.stats.json")
        );
    }
}
