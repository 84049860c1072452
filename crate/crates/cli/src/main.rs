//! `gsattn`: generate synthetic driving scenes, train and evaluate the
//! attention models, export attention heatmaps, and run the built-in
//! verification suites.
//!
//! Every subcommand is read-only except for its declared outputs, exits
//! nonzero on failure, and removes partial outputs it created before
//! failing.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gsattn::data::{
    read_dataset, read_ppm, region_features_for, write_dataset, write_pgm, Family, SynthConfig,
    ACTION_NAMES, EXPLANATION_NAMES,
};
use gsattn::metrics::{evaluate, EvalReport};
use gsattn::network::{
    extract_features, forward, predict_labels, Arch, FeatureConfig, ModelConfig, ModelInput,
    Prediction, N_ACTIONS, N_EXPLANATIONS,
};
use gsattn::train::{load_checkpoint, train_loop, Checkpoint, EpochSummary, TrainConfig};
use gsattn::verify::{all_suites, gradcheck_suite, invariants_suite, metrics_suite, CheckResult};
use gsattn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "gsattn",
    version,
    about = "Attention-based driving decisions with explanations, end to end on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/val/test splits plus manifest).
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator seed; fully determines every byte of the dataset.
        #[arg(long)]
        seed: u64,
        /// Scene family: basic | relativity.
        #[arg(long, value_parser = parse_family)]
        family: Family,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 500)]
        n_val: usize,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
        /// Image height and width in pixels (square images).
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Patch side in pixels; must divide size.
        #[arg(long, default_value_t = 4)]
        patch: usize,
        /// Feature width of the frozen patch extractor.
        #[arg(long, default_value_t = 32)]
        feat: usize,
    },
    /// Train a model on a generated dataset.
    Train {
        /// Dataset directory (as written by synth).
        #[arg(long)]
        data: PathBuf,
        /// Architecture: gsa | gna | rha | rsa.
        #[arg(long, value_parser = parse_arch)]
        model: Arch,
        /// Number of attention heads.
        #[arg(long, default_value_t = 8)]
        heads: usize,
        /// Regions kept by the rha hard selector.
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 10)]
        batch_size: usize,
        /// Initial learning rate.
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        /// Inverse-time decay coefficient.
        #[arg(long, default_value_t = 1e-4)]
        lr_decay: f64,
        /// Action-loss weight λ in L = λ·L_A + L_E.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Seed for parameter init and epoch shuffles.
        #[arg(long)]
        seed: u64,
        /// Output directory for curve.csv, latest.ckpt, best.ckpt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Split name: train | val | test.
        #[arg(long)]
        split: String,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output metrics JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict actions and explanations for a single image.
    Predict {
        /// Input image (PPM, dims matching the checkpoint's config).
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Probability threshold for the predicted_* lists.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Output prediction JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-head attention scores as CSV and PGM heatmaps.
    AttentionDump {
        #[arg(long)]
        image: PathBuf,
        /// Checkpoint of an attention architecture (gsa or rsa).
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory for head<i>.csv and head<i>.pgm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in verification suites.
    Verify {
        /// Suite: gradcheck | metrics | invariants | all.
        #[arg(long, value_parser = parse_suite)]
        suite: Suite,
    },
}

#[derive(Clone, Copy, Debug)]
enum Suite {
    Gradcheck,
    Metrics,
    Invariants,
    All,
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    match s {
        "basic" => Ok(Family::Basic),
        "relativity" => Ok(Family::Relativity),
        other => Err(format!("unknown family '{other}' (expected basic|relativity)")),
    }
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    s.parse::<Arch>().map_err(|e| e.to_string())
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    match s {
        "gradcheck" => Ok(Suite::Gradcheck),
        "metrics" => Ok(Suite::Metrics),
        "invariants" => Ok(Suite::Invariants),
        "all" => Ok(Suite::All),
        other => Err(format!("unknown suite '{other}' (expected gradcheck|metrics|invariants|all)")),
    }
}

fn main() -> ExitCode {
    // Die quietly when a downstream pager closes the pipe (`gsattn train … | head`)
    // instead of panicking on EPIPE, like other unix CLIs.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, seed, family, n_train, n_val, n_test, size, patch, feat } => {
            cmd_synth(&out, SynthConfig {
                seed,
                family,
                n_train,
                n_val,
                n_test,
                height: size,
                width: size,
                patch,
                feat,
            })
        }
        Command::Train {
            data,
            model,
            heads,
            k,
            epochs,
            batch_size,
            lr,
            lr_decay,
            lambda,
            seed,
            out,
        } => {
            let model_cfg = ModelConfig { arch: model, h: heads, k, lambda, ..ModelConfig::default() };
            let cfg = TrainConfig {
                epochs,
                batch_size,
                lr0: lr,
                decay: lr_decay,
                lambda,
                seed,
                model: model_cfg,
            };
            cmd_train(&data, cfg, &out)
        }
        Command::Eval { data, split, ckpt, out } => cmd_eval(&data, &split, &ckpt, &out),
        Command::Predict { image, ckpt, threshold, out } => {
            cmd_predict(&image, &ckpt, threshold, &out)
        }
        Command::AttentionDump { image, ckpt, out } => cmd_attention_dump(&image, &ckpt, &out),
        Command::Verify { suite } => cmd_verify(suite),
    }
}

/// Write `bytes` to `path` atomically (temp file + rename), so a failed
/// run never leaves a partial file behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_synth(out: &Path, cfg: SynthConfig) -> Result<()> {
    let dir_preexisted = out.exists();
    match write_dataset(out, &cfg) {
        Ok(manifest) => {
            println!(
                "wrote {} train / {} val / {} test scenes ({}x{}, family {}) to {}",
                manifest.n_train,
                manifest.n_val,
                manifest.n_test,
                manifest.height,
                manifest.width,
                manifest.family,
                out.display()
            );
            Ok(())
        }
        Err(e) => {
            // Validation and manifest-conflict refusals happen before any
            // bytes hit disk. If this run created the directory itself,
            // drop it entirely rather than leave partial splits; a
            // pre-existing directory is never deleted.
            if !dir_preexisted && out.exists() {
                let _ = fs::remove_dir_all(out);
            }
            Err(e)
        }
    }
}

fn cmd_train(data: &Path, cfg: TrainConfig, out: &Path) -> Result<()> {
    let dataset = read_dataset(data)?;
    let feature = FeatureConfig::from_manifest(&dataset.manifest);
    cfg.validate()?;
    feature.validate()?;
    let print_epoch = |s: &EpochSummary| {
        println!(
            "epoch {:>4}  mean loss {:.6}  val decision mF1 {:.4}{}",
            s.epoch,
            s.mean_loss,
            s.val.decision_mf1,
            if s.improved { "  (best so far)" } else { "" }
        );
    };
    match train_loop(cfg, feature, &dataset, out, print_epoch) {
        Ok(outcome) => {
            println!(
                "done: {} steps; best epoch {} (val decision mF1 {:.4})",
                outcome.steps, outcome.best_epoch, outcome.best_val_decision_mf1
            );
            println!(
                "wrote {}, {}, {}",
                outcome.curve_path.display(),
                outcome.latest_path.display(),
                outcome.best_path.display()
            );
            Ok(())
        }
        Err(e) => {
            for name in ["curve.csv", "latest.ckpt", "best.ckpt"] {
                let _ = fs::remove_file(out.join(name));
            }
            Err(e)
        }
    }
}

fn load_checkpoint_for(data_feature: &FeatureConfig, path: &Path) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.config.feature != *data_feature {
        return Err(Error::Config(format!(
            "checkpoint feature config ({}x{}, patch {}, feat {}) does not match dataset ({}x{}, patch {}, feat {})",
            ckpt.config.feature.height,
            ckpt.config.feature.width,
            ckpt.config.feature.patch,
            ckpt.config.feature.feat,
            data_feature.height,
            data_feature.width,
            data_feature.patch,
            data_feature.feat,
        )));
    }
    Ok(ckpt)
}

fn cmd_eval(data: &Path, split: &str, ckpt_path: &Path, out: &Path) -> Result<()> {
    let dataset = read_dataset(data)?;
    let feature = FeatureConfig::from_manifest(&dataset.manifest);
    let ckpt = load_checkpoint_for(&feature, ckpt_path)?;
    let scenes = gsattn::network::prepare_split(dataset.split(split)?, &feature)?;
    let report = evaluate(&ckpt.params, &ckpt.config.model, &scenes)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_atomic(out, json.as_bytes())?;
    print_aggregates(&report);
    println!("wrote {}", out.display());
    Ok(())
}

fn print_aggregates(report: &EvalReport) {
    println!("decision_mF1       {:.6}", report.decision_mf1);
    println!("decision_F1all     {:.6}", report.decision_f1all);
    println!("explanation_mF1    {:.6}", report.explanation_mf1);
    println!("explanation_F1all  {:.6}", report.explanation_f1all);
}

/// Forward one bare image through a checkpoint. Region architectures get
/// a single whole-image region, since no object annotations exist at
/// prediction time.
fn predict_image(ckpt: &Checkpoint, image_path: &Path) -> Result<Prediction> {
    let image = read_ppm(image_path)?;
    let feature = &ckpt.config.feature;
    if image.height != feature.height || image.width != feature.width {
        return Err(Error::Config(format!(
            "image {} is {}x{}, but the checkpoint expects {}x{}",
            image_path.display(),
            image.height,
            image.width,
            feature.height,
            feature.width,
        )));
    }
    let extractor = feature.extractor_matrix();
    let arch = ckpt.params.arch();
    if arch.takes_regions() {
        let regions = region_features_for(&image, &[], &extractor, feature.patch)?;
        forward(&ckpt.params, &ModelInput::Regions(&regions), ckpt.config.model.k)
    } else {
        let features = extract_features(&image, feature.patch, &extractor)?;
        forward(&ckpt.params, &ModelInput::Features(&features), ckpt.config.model.k)
    }
}

fn cmd_predict(image: &Path, ckpt_path: &Path, threshold: f64, out: &Path) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must be in (0, 1), got {threshold}")));
    }
    let ckpt = load_checkpoint(ckpt_path)?;
    let pred = predict_image(&ckpt, image)?;
    let (action_bits, expl_bits) = predict_labels(&pred, threshold);

    let actions: serde_json::Map<String, serde_json::Value> = ACTION_NAMES
        .iter()
        .zip(pred.action_probs.iter())
        .map(|(name, &p)| ((*name).to_string(), serde_json::json!(p)))
        .collect();
    let explanations: Vec<serde_json::Value> = (0..N_EXPLANATIONS)
        .map(|i| {
            serde_json::json!({
                "index": i,
                "name": EXPLANATION_NAMES[i],
                "prob": pred.explanation_probs[i],
            })
        })
        .collect();
    let predicted_actions: Vec<&str> = (0..N_ACTIONS)
        .filter(|&i| action_bits[i] == 1)
        .map(|i| ACTION_NAMES[i])
        .collect();
    let predicted_explanations: Vec<serde_json::Value> = (0..N_EXPLANATIONS)
        .filter(|&i| expl_bits[i] == 1)
        .map(|i| serde_json::json!({ "index": i, "name": EXPLANATION_NAMES[i] }))
        .collect();

    let doc = serde_json::json!({
        "actions": actions,
        "explanations": explanations,
        "predicted_actions": predicted_actions,
        "predicted_explanations": predicted_explanations,
    });
    let text = serde_json::to_string_pretty(&doc).expect("prediction serializes") + "\n";
    write_atomic(out, text.as_bytes())?;
    if predicted_actions.is_empty() {
        println!("no action above threshold {threshold}");
    } else {
        println!("predicted: {}", predicted_actions.join(", "));
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_attention_dump(image: &Path, ckpt_path: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let arch = ckpt.params.arch();
    if !matches!(arch, Arch::Gsa | Arch::Rsa) {
        return Err(Error::Config(format!(
            "architecture {arch} has no attention scores to dump (need gsa or rsa)"
        )));
    }
    let pred = predict_image(&ckpt, image)?;
    let attention = pred.attention.expect("gsa/rsa forward always yields attention");

    fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<()> {
        for (i, scores) in attention.scores.iter().enumerate() {
            let csv_path = out.join(format!("head{i}.csv"));
            let mut csv = String::new();
            for r in 0..scores.rows() {
                let row: Vec<String> =
                    scores.row_slice(r).iter().map(|v| format!("{v}")).collect();
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            write_atomic(&csv_path, csv.as_bytes())?;
            written.push(csv_path);

            let pgm_path = out.join(format!("head{i}.pgm"));
            write_pgm(&pgm_path, scores)?;
            written.push(pgm_path);

            let worst = (0..scores.rows())
                .map(|r| (scores.row_slice(r).iter().sum::<f64>() - 1.0).abs())
                .fold(0.0f64, f64::max);
            println!(
                "head{i}: {}x{} scores, max |row sum - 1| = {worst:.3e}",
                scores.rows(),
                scores.cols()
            );
        }
        Ok(())
    })();
    match result {
        Ok(()) => {
            println!("wrote {} files to {}", written.len(), out.display());
            Ok(())
        }
        Err(e) => {
            for path in written {
                let _ = fs::remove_file(path);
            }
            Err(e)
        }
    }
}

fn cmd_verify(suite: Suite) -> Result<()> {
    let checks: Vec<CheckResult> = match suite {
        Suite::Gradcheck => gradcheck_suite(),
        Suite::Metrics => metrics_suite(),
        Suite::Invariants => invariants_suite(),
        Suite::All => all_suites(),
    };
    let mut failed = 0usize;
    for check in &checks {
        let status = if check.pass { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", check.name, check.detail);
        if !check.pass {
            failed += 1;
        }
    }
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} verification checks failed")));
    }
    Ok(())
}
