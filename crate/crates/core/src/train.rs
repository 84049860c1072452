//! SGD training with inverse-time learning-rate decay, per-step curve
//! logging, and binary checkpoints.
//!
//! Determinism is the load-bearing property: (seed, config, dataset)
//! fully determine parameter initialization, epoch shuffles, every
//! gradient, and therefore every logged loss byte. Batch gradients are
//! per-sample gradients summed in batch-index order; the logged losses
//! are batch means.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{batches, splitmix64, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::network::{
    forward_on_tape, loss_on_tape, prepare_split, FeatureConfig, ModelConfig, ModelParams,
    PreparedScene,
};
use crate::tensor::Tensor2;

// ── configuration ──────────────────────────────────────────────────────

/// Training hyperparameters. `lambda` is duplicated from the model
/// config by convention; the trainer reads this copy.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: f64,
    pub lambda: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 10,
            lr0: 0.001,
            decay: 1e-4,
            lambda: 1.0,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train config: epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train config: batch_size must be >= 1".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!(
                "train config: lr0 must be finite and > 0, got {}",
                self.lr0
            )));
        }
        if !(self.decay.is_finite() && self.decay >= 0.0) {
            return Err(Error::Config(format!(
                "train config: decay must be finite and >= 0, got {}",
                self.decay
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "train config: lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        self.model.validate()
    }
}

/// Inverse-time decay: α_t = lr0 / (1 + decay·t).
pub fn lr_at(step: u64, lr0: f64, decay: f64) -> f64 {
    lr0 / (1.0 + decay * step as f64)
}

/// One elementwise SGD update θ ← θ − lr·g over named tensors. Names and
/// shapes must line up pairwise.
pub fn apply_sgd(
    named: &mut [(String, &mut Tensor2)],
    grads: &[(String, Tensor2)],
    lr: f64,
) -> Result<()> {
    if named.len() != grads.len() {
        return Err(Error::Contract(format!(
            "sgd: {} parameters vs {} gradients",
            named.len(),
            grads.len()
        )));
    }
    for ((pn, p), (gn, g)) in named.iter_mut().zip(grads) {
        if pn != gn {
            return Err(Error::Contract(format!("sgd: parameter '{pn}' paired with gradient '{gn}'")));
        }
        p.add_scaled_assign(g, -lr)
            .map_err(|e| Error::Contract(format!("sgd: '{pn}': {e}")))?;
    }
    Ok(())
}

/// SGD update over a full model.
pub fn sgd_step(params: &mut ModelParams, grads: &[(String, Tensor2)], lr: f64) -> Result<()> {
    apply_sgd(&mut params.named_tensors_mut(), grads, lr)
}

// ── curve logging ──────────────────────────────────────────────────────

/// Exact header of curve.csv.
pub const CURVE_HEADER: &str = "step,epoch,lr,loss_action,loss_explanation,loss_total";

/// One logged optimizer step. Loss columns are batch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_action: f64,
    pub loss_explanation: f64,
    pub loss_total: f64,
}

impl CurveRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.loss_action, self.loss_explanation, self.loss_total
        )
    }
}

// ── trainer ────────────────────────────────────────────────────────────

/// Result of one trained epoch.
#[derive(Debug, Clone)]
pub struct EpochSummary {
    pub epoch: usize,
    pub rows: Vec<CurveRow>,
    /// Mean of the epoch's batch-mean total losses.
    pub mean_loss: f64,
    pub val: EvalReport,
    /// Whether this epoch became the new best by validation decision mF1.
    pub improved: bool,
}

/// Incremental trainer: epochs run one at a time so callers can stop
/// early (the overfit acceptance check) or stream the curve to disk.
pub struct Trainer {
    cfg: TrainConfig,
    feature: FeatureConfig,
    params: ModelParams,
    train_scenes: Vec<PreparedScene>,
    val_scenes: Vec<PreparedScene>,
    step: u64,
    epochs_done: usize,
    best_val_mf1: f64,
    best_epoch: Option<usize>,
    best_params: Option<ModelParams>,
    rng: ChaCha8Rng,
}

const PARAM_SEED_TAG: u64 = 0x5052_4d53; // "PRMS"

/// The parameter-init seed derived from a training seed.
pub fn param_seed_for(seed: u64) -> u64 {
    splitmix64(seed ^ PARAM_SEED_TAG)
}

impl Trainer {
    /// Prepare scenes and initialize parameters from the derived seed.
    pub fn new(cfg: TrainConfig, feature: FeatureConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        feature.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed_for(cfg.seed));
        let params = ModelParams::init(&cfg.model, &feature, &mut rng)?;
        let train_scenes = prepare_split(&dataset.train, &feature)?;
        let val_scenes = prepare_split(&dataset.val, &feature)?;
        if train_scenes.is_empty() {
            return Err(Error::Config("trainer: empty training split".into()));
        }
        Ok(Trainer {
            cfg,
            feature,
            params,
            train_scenes,
            val_scenes,
            step: 0,
            epochs_done: 0,
            best_val_mf1: f64::NEG_INFINITY,
            best_epoch: None,
            best_params: None,
            rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Best-so-far parameters by validation decision mF1 (ties keep the
    /// earlier epoch); `None` before the first epoch completes.
    pub fn best_params(&self) -> Option<&ModelParams> {
        self.best_params.as_ref()
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_val_mf1(&self) -> f64 {
        self.best_val_mf1
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn global_step(&self) -> u64 {
        self.step
    }

    /// Snapshot of the current trainer state as a checkpoint.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: CheckpointConfig {
                format_version: CHECKPOINT_FORMAT_VERSION,
                model: self.cfg.model,
                feature: self.feature,
                seed: self.cfg.seed,
                step: self.step,
                rng: RngState::capture(&self.rng),
            },
            params: self.params.clone(),
        }
    }

    /// Like [`Self::checkpoint`] but holding the best-validation
    /// parameters instead of the latest ones.
    pub fn best_checkpoint(&self) -> Option<Checkpoint> {
        self.best_params.as_ref().map(|params| {
            let mut ckpt = self.checkpoint();
            ckpt.params = params.clone();
            ckpt
        })
    }

    /// Train one epoch: shuffle deterministically, sum per-sample
    /// gradients per batch in batch-index order, apply SGD at the
    /// stepwise-decayed rate, then evaluate the validation split.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let epoch = self.epochs_done;
        let arch = self.params.arch();
        let plan = batches(self.train_scenes.len(), self.cfg.batch_size, self.cfg.seed, epoch)?;
        let mut rows = Vec::with_capacity(plan.len());
        for batch in &plan {
            let lr = lr_at(self.step, self.cfg.lr0, self.cfg.decay);
            let mut grad_sums: Option<Vec<(String, Tensor2)>> = None;
            let (mut la_sum, mut le_sum, mut l_sum) = (0.0, 0.0, 0.0);
            for &idx in batch {
                let scene = &self.train_scenes[idx];
                let mut tape = Tape::new();
                let (bound, pairs) = self.params.bind(&mut tape);
                let fwd =
                    forward_on_tape(&mut tape, &bound, &scene.input_for(arch), self.cfg.model.k)?;
                let loss = loss_on_tape(&mut tape, &fwd, &scene.labels, self.cfg.lambda)?;
                tape.backward(loss.total)?;
                la_sum += tape.value(loss.action).item()?;
                le_sum += tape.value(loss.explanation).item()?;
                l_sum += tape.value(loss.total).item()?;
                match &mut grad_sums {
                    None => {
                        grad_sums = Some(
                            pairs
                                .iter()
                                .map(|(name, id)| (name.clone(), tape.grad(*id).clone()))
                                .collect(),
                        );
                    }
                    Some(sums) => {
                        for ((_, sum), (_, id)) in sums.iter_mut().zip(&pairs) {
                            sum.add_assign(tape.grad(*id))?;
                        }
                    }
                }
            }
            let grads = grad_sums.expect("batches are never empty");
            sgd_step(&mut self.params, &grads, lr)?;
            let n = batch.len() as f64;
            rows.push(CurveRow {
                step: self.step,
                epoch,
                lr,
                loss_action: la_sum / n,
                loss_explanation: le_sum / n,
                loss_total: l_sum / n,
            });
            self.step += 1;
        }
        self.epochs_done += 1;

        let val = evaluate(&self.params, &self.cfg.model, &self.val_scenes)?;
        let improved = val.decision_mf1 > self.best_val_mf1;
        if improved {
            self.best_val_mf1 = val.decision_mf1;
            self.best_epoch = Some(epoch);
            self.best_params = Some(self.params.clone());
        }
        let mean_loss = rows.iter().map(|r| r.loss_total).sum::<f64>() / rows.len() as f64;
        Ok(EpochSummary { epoch, rows, mean_loss, val, improved })
    }
}

// ── full training loop ─────────────────────────────────────────────────

/// Paths and headline numbers of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve_path: PathBuf,
    pub latest_path: PathBuf,
    pub best_path: PathBuf,
    pub steps: u64,
    pub best_epoch: usize,
    pub best_val_decision_mf1: f64,
    pub final_val: EvalReport,
}

/// Train for the configured number of epochs, streaming `curve.csv` and
/// writing `latest.ckpt` plus `best.ckpt` (by validation decision mF1)
/// after every epoch. All writes are atomic (temp file + rename).
pub fn train_loop(
    cfg: TrainConfig,
    feature: FeatureConfig,
    dataset: &Dataset,
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let curve_path = out_dir.join("curve.csv");
    let latest_path = out_dir.join("latest.ckpt");
    let best_path = out_dir.join("best.ckpt");
    // Open the curve first so unwritable outputs fail before training.
    let mut curve = fs::File::create(&curve_path)
        .map_err(|e| Error::io(curve_path.display().to_string(), e))?;
    let write_line = |f: &mut fs::File, line: &str| -> Result<()> {
        f.write_all(line.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .map_err(|e| Error::io(curve_path.display().to_string(), e))
    };
    write_line(&mut curve, CURVE_HEADER)?;

    let mut trainer = Trainer::new(cfg, feature, dataset)?;
    let mut final_val = None;
    for _ in 0..cfg.epochs {
        let summary = trainer.run_epoch()?;
        for row in &summary.rows {
            write_line(&mut curve, &row.csv_line())?;
        }
        save_checkpoint(&latest_path, &trainer.checkpoint())?;
        if summary.improved {
            let best = trainer.best_checkpoint().expect("improved implies best exists");
            save_checkpoint(&best_path, &best)?;
        }
        on_epoch(&summary);
        final_val = Some(summary.val);
    }
    curve.sync_all().map_err(|e| Error::io(curve_path.display().to_string(), e))?;
    Ok(TrainOutcome {
        curve_path,
        latest_path,
        best_path,
        steps: trainer.global_step(),
        best_epoch: trainer.best_epoch().expect("epochs >= 1"),
        best_val_decision_mf1: trainer.best_val_mf1(),
        final_val: final_val.expect("epochs >= 1"),
    })
}

// ── checkpoints ────────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GSACKPT1";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Serializable ChaCha8 state: 32-byte seed as hex plus the 128-bit word
/// position split into two u64 halves.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed();
        let mut hex = String::with_capacity(64);
        for b in seed {
            hex.push_str(&format!("{b:02x}"));
        }
        let pos = rng.get_word_pos();
        RngState {
            seed_hex: hex,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.seed_hex.len() != 64 || !self.seed_hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Integrity(format!(
                "rng state: seed must be 64 hex digits, got '{}'",
                self.seed_hex
            )));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in self.seed_hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).expect("hex digits are utf-8");
            seed[i] = u8::from_str_radix(s, 16).expect("validated hex");
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        Ok(rng)
    }
}

/// Everything the JSON block of a checkpoint records.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointConfig {
    pub format_version: u32,
    pub model: ModelConfig,
    pub feature: FeatureConfig,
    pub seed: u64,
    pub step: u64,
    pub rng: RngState,
}

/// A config snapshot plus every named parameter tensor.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub params: ModelParams,
}

/// Serialize a checkpoint: magic, length-prefixed config JSON, then one
/// record per tensor — u32 name length, name bytes, u32 rank (always 2),
/// u32 rows, u32 cols, f64 data. All integers and floats little-endian.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let json =
        serde_json::to_vec(&ckpt.config).map_err(|e| Error::Config(format!("checkpoint config serialization: {e}")))?;
    let named = ckpt.params.named_tensors();
    let mut bytes = Vec::with_capacity(
        8 + 4 + json.len() + named.iter().map(|(n, t)| 16 + n.len() + 8 * t.len()).sum::<usize>(),
    );
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (name, tensor) in named {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
        bytes.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path.clone(),
                format!("truncated at byte {} (needed {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Read a checkpoint back. The parameter skeleton is rebuilt from the
/// config snapshot, so every stored tensor must match a known name and
/// its exact shape; anything else is an integrity error.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    let mut r = Reader { bytes: &bytes, pos: 0, path: p.clone() };

    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(p, "magic mismatch, not a checkpoint"));
    }
    let json_len = r.u32()? as usize;
    let config: CheckpointConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::format(p.clone(), format!("config block: {e}")))?;
    if config.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(
            p,
            format!(
                "format_version {} unsupported (want {CHECKPOINT_FORMAT_VERSION})",
                config.format_version
            ),
        ));
    }

    // Skeleton with the right shapes; every value overwritten below.
    let mut params = ModelParams::init(
        &config.model,
        &config.feature,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let mut filled: Vec<(String, bool)> =
        params.named_tensors().iter().map(|(n, _)| (n.clone(), false)).collect();

    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format(p.clone(), "tensor name is not UTF-8"))?;
        let rank = r.u32()?;
        if rank != 2 {
            return Err(Error::format(p, format!("tensor '{name}' has rank {rank}, want 2")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(8 * rows * cols)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let slot = filled
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint tensor '{name}' is not a parameter of a {} model", config.model.arch)))?;
        if slot.1 {
            return Err(Error::Integrity(format!("checkpoint tensor '{name}' appears twice")));
        }
        slot.1 = true;
        let mut named_mut = params.named_tensors_mut();
        let target = named_mut
            .iter_mut()
            .find(|(n, _)| *n == name)
            .expect("name present in filled list");
        if target.1.shape() != (rows, cols) {
            return Err(Error::Integrity(format!(
                "checkpoint tensor '{name}' is {rows}x{cols}, config implies {}x{}",
                target.1.rows(),
                target.1.cols()
            )));
        }
        **(&mut target.1) = Tensor2::from_vec(rows, cols, data)?;
    }
    if let Some((missing, _)) = filled.iter().find(|(_, seen)| !seen) {
        return Err(Error::Integrity(format!("checkpoint is missing tensor '{missing}'")));
    }
    Ok(Checkpoint { config, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_dataset, Family, SynthConfig};
    use crate::network::Arch;
    use tempfile::tempdir;

    fn tiny_synth(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            family: Family::Basic,
            n_train: 12,
            n_val: 4,
            n_test: 4,
            height: 16,
            width: 16,
            patch: 4,
            feat: 6,
        }
    }

    fn tiny_train_cfg(arch: Arch, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 5,
            lr0: 0.05,
            decay: 1e-4,
            lambda: 1.0,
            seed,
            model: ModelConfig {
                arch,
                h: 2,
                d_k: 4,
                d_v: 4,
                d_out: 6,
                hidden: 16,
                k: 2,
                lambda: 1.0,
                threshold: 0.5,
            },
        }
    }

    fn load_tiny(dir: &Path, seed: u64) -> (Dataset, FeatureConfig) {
        write_dataset(dir, &tiny_synth(seed)).unwrap();
        let ds = crate::data::read_dataset(dir).unwrap();
        let feature = FeatureConfig::from_manifest(&ds.manifest);
        (ds, feature)
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at(0, 0.001, 1e-4), 0.001);
        assert!((lr_at(10_000, 0.001, 1e-4) - 0.0005).abs() < 1e-18);
        assert_eq!(lr_at(12345, 0.7, 0.0), 0.7, "zero decay is constant");
        let mut prev = f64::INFINITY;
        for step in 0..100 {
            let lr = lr_at(step * 37, 0.01, 3e-3);
            assert!(lr <= prev, "monotone non-increasing");
            prev = lr;
        }
    }

    #[test]
    fn sgd_zero_gradient_and_zero_lr_are_identity() {
        let feat = FeatureConfig { height: 8, width: 8, patch: 4, feat: 3, extractor_seed: 0 };
        let cfg = tiny_train_cfg(Arch::Gna, 3).model;
        let mut params =
            ModelParams::init(&cfg, &feat, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let before: Vec<Tensor2> =
            params.named_tensors().iter().map(|(_, t)| (*t).clone()).collect();
        let zero_grads: Vec<(String, Tensor2)> = params
            .named_tensors()
            .iter()
            .map(|(n, t)| (n.clone(), Tensor2::zeros(t.rows(), t.cols())))
            .collect();
        sgd_step(&mut params, &zero_grads, 0.5).unwrap();
        for ((_, t), b) in params.named_tensors().iter().zip(&before) {
            assert_eq!(t.data(), b.data(), "zero gradients leave parameters bitwise unchanged");
        }
        let self_grads: Vec<(String, Tensor2)> = params
            .named_tensors()
            .iter()
            .map(|(n, t)| (n.clone(), (*t).clone()))
            .collect();
        sgd_step(&mut params, &self_grads, 0.0).unwrap();
        for ((_, t), b) in params.named_tensors().iter().zip(&before) {
            assert_eq!(t.data(), b.data(), "lr 0 leaves parameters unchanged");
        }
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // d/dθ (θ−3)² = 2(θ−3); lr 0.1 from 0 → θ → 3.
        let mut theta = Tensor2::scalar(0.0);
        for _ in 0..100 {
            let g = Tensor2::scalar(2.0 * (theta.item().unwrap() - 3.0));
            let mut named = [("theta".to_string(), &mut theta)];
            apply_sgd(&mut named, &[("theta".to_string(), g)], 0.1).unwrap();
        }
        assert!((theta.item().unwrap() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn sgd_rejects_mismatches() {
        let g = Tensor2::scalar(1.0);
        let mut t = Tensor2::scalar(0.0);
        let mut named = [("a".to_string(), &mut t)];
        assert!(apply_sgd(&mut named, &[("b".to_string(), g.clone())], 0.1).is_err());
        let mut named = [("a".to_string(), &mut t)];
        let wide = Tensor2::zeros(1, 2);
        assert!(apply_sgd(&mut named, &[("a".to_string(), wide)], 0.1).is_err());
        let mut named = [("a".to_string(), &mut t)];
        assert!(apply_sgd(&mut named, &[], 0.1).is_err());
    }

    #[test]
    fn training_is_reproducible_and_loss_decreases() {
        let dir = tempdir().unwrap();
        let (ds, feature) = load_tiny(dir.path(), 71);
        let cfg = tiny_train_cfg(Arch::Gna, 9);

        let mut t1 = Trainer::new(cfg, feature, &ds).unwrap();
        let mut t2 = Trainer::new(cfg, feature, &ds).unwrap();
        let mut means = Vec::new();
        for _ in 0..6 {
            let a = t1.run_epoch().unwrap();
            let b = t2.run_epoch().unwrap();
            for (ra, rb) in a.rows.iter().zip(&b.rows) {
                assert_eq!(ra, rb, "same seed must reproduce every logged value bitwise");
            }
            means.push(a.mean_loss);
        }
        let violations = means.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(
            violations <= 1,
            "epoch-mean loss should be non-increasing early on (means {means:?})"
        );
    }

    #[test]
    fn lambda_zero_makes_total_equal_explanation() {
        let dir = tempdir().unwrap();
        let (ds, feature) = load_tiny(dir.path(), 72);
        let mut cfg = tiny_train_cfg(Arch::Gsa, 4);
        cfg.lambda = 0.0;
        cfg.model.lambda = 0.0;
        cfg.epochs = 1;
        let mut trainer = Trainer::new(cfg, feature, &ds).unwrap();
        let summary = trainer.run_epoch().unwrap();
        for row in &summary.rows {
            assert_eq!(row.loss_total, row.loss_explanation, "λ=0 → L = L_E exactly");
        }
    }

    #[test]
    fn train_loop_writes_curve_and_checkpoints() {
        let dir = tempdir().unwrap();
        let (ds, feature) = load_tiny(dir.path().join("data").as_path(), 73);
        let out = dir.path().join("run");
        let cfg = tiny_train_cfg(Arch::Rha, 11);
        let outcome = train_loop(cfg, feature, &ds, &out, |_| {}).unwrap();
        assert!(outcome.curve_path.exists());
        assert!(outcome.latest_path.exists());
        assert!(outcome.best_path.exists());
        let text = fs::read_to_string(&outcome.curve_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CURVE_HEADER);
        // 12 scenes / batch 5 → 3 steps per epoch × 2 epochs.
        assert_eq!(lines.count(), 6);
        assert_eq!(outcome.steps, 6);

        // Same seed again → byte-identical curve.
        let out2 = dir.path().join("run2");
        train_loop(cfg, feature, &ds, &out2, |_| {}).unwrap();
        let a = fs::read(out.join("curve.csv")).unwrap();
        let b = fs::read(out2.join("curve.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let (ds, feature) = load_tiny(dir.path().join("data").as_path(), 74);
        let cfg = tiny_train_cfg(Arch::Gsa, 21);
        let mut trainer = Trainer::new(cfg, feature, &ds).unwrap();
        trainer.run_epoch().unwrap();

        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &trainer.checkpoint()).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap(), "save→load→save");

        // Reloaded parameters evaluate bit-identically.
        let val = prepare_split(&ds.val, &feature).unwrap();
        let before = evaluate(trainer.params(), &cfg.model, &val).unwrap();
        let after = evaluate(&loaded.params, &loaded.config.model, &val).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempdir().unwrap();
        let (ds, feature) = load_tiny(dir.path().join("data").as_path(), 75);
        let cfg = tiny_train_cfg(Arch::Gna, 22);
        let trainer = Trainer::new(cfg, feature, &ds).unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &trainer.checkpoint()).unwrap();

        let good = fs::read(&path).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

        let mut truncated = good.clone();
        truncated.truncate(good.len() - 5);
        fs::write(&path, &truncated).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

        // Flip a tensor-name byte → unknown parameter name.
        let json_len =
            u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
        let name_start = 8 + 4 + json_len + 4;
        let mut bad_name = good.clone();
        bad_name[name_start] = b'z';
        fs::write(&path, &bad_name).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn rng_state_round_trips() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // Advance so the word position is non-trivial.
        for _ in 0..37 {
            let _: f64 = rng.gen();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        assert_eq!(RngState::capture(&restored), state, "capture∘restore is identity");
        assert_eq!(rng.gen::<u64>(), restored.gen::<u64>(), "streams continue in lockstep");

        let mut bad = state;
        bad.seed_hex.truncate(10);
        assert!(bad.restore().is_err());
    }
}
