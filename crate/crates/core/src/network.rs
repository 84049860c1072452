//! The four model forward paths (GSA, GNA, RHA, RSA), the frozen patch
//! feature extractor, the shared decision/reason head, and the losses.
//!
//! Every architecture ends in the same head: a hidden ReLU layer feeding
//! two linear heads that emit 4 action logits and 21 explanation logits.
//! What differs is the trunk in front of it:
//!
//! * **GSA** — multi-head self-attention over the patch feature
//!   sequence, flattened position-wise into the head.
//! * **GNA** — the no-attention ablation: the flattened sequence through
//!   a two-layer fully connected block parameter-matched (±10%) to the
//!   attention block.
//! * **RHA** — regional hard attention: a linear scorer ranks region
//!   features, the top-k are kept, and their sigmoid-gated mean is
//!   pooled into the head. Selection is piecewise-constant and treated
//!   as fixed within a step; the scorer trains through the gate values
//!   of the selected regions only.
//! * **RSA** — regional soft attention: self-attention over region
//!   features, mean-pooled over positions.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    fan_uniform, mhsa_forward, AttentionDims, AttentionParams, BoundAttention,
};
use crate::autodiff::{NodeId, Tape};
use crate::data::{Image, LabelPair, Manifest, RegionSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

pub const N_ACTIONS: usize = 4;
pub const N_EXPLANATIONS: usize = 21;

// ── configuration ──────────────────────────────────────────────────────

/// Which trunk sits in front of the shared head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gsa,
    Gna,
    Rha,
    Rsa,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Gsa, Arch::Gna, Arch::Rha, Arch::Rsa];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Gsa => "gsa",
            Arch::Gna => "gna",
            Arch::Rha => "rha",
            Arch::Rsa => "rsa",
        }
    }

    /// Whether the trunk consumes region features rather than the patch
    /// feature sequence.
    pub fn takes_regions(self) -> bool {
        matches!(self, Arch::Rha | Arch::Rsa)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gsa" => Ok(Arch::Gsa),
            "gna" => Ok(Arch::Gna),
            "rha" => Ok(Arch::Rha),
            "rsa" => Ok(Arch::Rsa),
            other => Err(Error::Config(format!(
                "unknown architecture '{other}' (expected gsa, gna, rha, or rsa)"
            ))),
        }
    }
}

/// Hyperparameters shared by all architectures.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Attention head count (gsa/rsa; also sizes the gna parity target).
    pub h: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_out: usize,
    /// Width of the shared hidden classifier layer.
    pub hidden: usize,
    /// Top-k region count for rha.
    pub k: usize,
    /// Weight of the action loss in the multitask objective.
    pub lambda: f64,
    /// Probability cutoff for binarizing predictions.
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Gsa,
            h: 8,
            d_k: 16,
            d_v: 16,
            d_out: 64,
            hidden: 128,
            k: 5,
            lambda: 1.0,
            threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("h", self.h), ("d_k", self.d_k), ("d_v", self.d_v), ("d_out", self.d_out), ("hidden", self.hidden)]
        {
            if v == 0 {
                return Err(Error::Config(format!("model config: {name} must be >= 1")));
            }
        }
        if self.arch == Arch::Rha && self.k == 0 {
            return Err(Error::Config("model config: k must be >= 1 for rha".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "model config: lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.threshold.is_finite() && self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "model config: threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Attention dims induced by this config for feature width `f`.
    pub fn attention_dims(&self, f: usize) -> AttentionDims {
        AttentionDims { f, d_k: self.d_k, d_v: self.d_v, h: self.h, d_out: self.d_out }
    }
}

/// Geometry of the frozen feature extractor; recorded in the dataset
/// manifest so features are reproducible from the seed alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Feature width f.
    pub feat: usize,
    pub extractor_seed: u64,
}

impl FeatureConfig {
    pub fn from_manifest(m: &Manifest) -> Self {
        FeatureConfig {
            height: m.height,
            width: m.width,
            patch: m.patch,
            feat: m.feat,
            extractor_seed: m.extractor_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.feat == 0 {
            return Err(Error::Config("feature config: patch and feat must be >= 1".into()));
        }
        if self.height == 0
            || self.width == 0
            || self.height % self.patch != 0
            || self.width % self.patch != 0
        {
            return Err(Error::Config(format!(
                "feature config: {}x{} image is not divisible into {}x{} patches",
                self.height, self.width, self.patch, self.patch
            )));
        }
        Ok(())
    }

    /// Sequence length s = grid_h × grid_w.
    pub fn s(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Flattened patch width 3p².
    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// The frozen projection matrix this config describes.
    pub fn extractor_matrix(&self) -> Tensor2 {
        feature_extractor_matrix(self.patch, self.feat, self.extractor_seed)
    }
}

// ── frozen feature extractor ───────────────────────────────────────────

/// The frozen (3p²)×f patch projection, reproducible from its seed.
/// Entries are drawn at twice the fan-balanced width: patch pixels are
/// sparse (most of a scene is background), so the wider draw keeps
/// projected features at a healthy O(1) scale.
pub fn feature_extractor_matrix(patch: usize, feat: usize, seed: u64) -> Tensor2 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = fan_uniform(&mut rng, 3 * patch * patch, feat);
    for v in m.data_mut() {
        *v *= 2.0;
    }
    m
}

/// Split an image into non-overlapping p×p patches row-major, flatten
/// each to 3p² values, and project through the frozen matrix, yielding
/// the s×f feature sequence with s = (H/p)(W/p).
pub fn extract_features(image: &Image, patch: usize, extractor: &Tensor2) -> Result<Tensor2> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::Config(format!(
            "extract_features: {}x{} image is not divisible into {patch}x{patch} patches",
            image.height, image.width
        )));
    }
    let pd = 3 * patch * patch;
    if extractor.rows() != pd {
        return Err(Error::Shape(format!(
            "extract_features: extractor has {} rows, patches flatten to {pd}",
            extractor.rows()
        )));
    }
    let grid_h = image.height / patch;
    let grid_w = image.width / patch;
    let mut patches = Tensor2::zeros(grid_h * grid_w, pd);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let row = gy * grid_w + gx;
            let mut c = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    let px = image.pixel(gy * patch + dy, gx * patch + dx);
                    patches.set(row, c, px[0]);
                    patches.set(row, c + 1, px[1]);
                    patches.set(row, c + 2, px[2]);
                    c += 3;
                }
            }
        }
    }
    patches.matmul(extractor)
}

// ── parameters ─────────────────────────────────────────────────────────

/// The shared classifier head: hidden ReLU layer, then linear action and
/// explanation heads.
#[derive(Debug, Clone)]
pub struct HeadBlock {
    pub w_hidden: Tensor2, // in×hidden
    pub b_hidden: Tensor2, // 1×hidden
    pub w_action: Tensor2, // hidden×4
    pub b_action: Tensor2, // 1×4
    pub w_expl: Tensor2,   // hidden×21
    pub b_expl: Tensor2,   // 1×21
}

impl HeadBlock {
    /// Fixed draw order: W_hidden, W_action, W_expl; biases start zero.
    fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Self {
        HeadBlock {
            w_hidden: fan_uniform(rng, input, hidden),
            b_hidden: Tensor2::zeros(1, hidden),
            w_action: fan_uniform(rng, hidden, N_ACTIONS),
            b_action: Tensor2::zeros(1, N_ACTIONS),
            w_expl: fan_uniform(rng, hidden, N_EXPLANATIONS),
            b_expl: Tensor2::zeros(1, N_EXPLANATIONS),
        }
    }

    fn param_count(&self) -> usize {
        self.w_hidden.len()
            + self.b_hidden.len()
            + self.w_action.len()
            + self.b_action.len()
            + self.w_expl.len()
            + self.b_expl.len()
    }
}

/// Widths (w1, w2) of the GNA fully connected block.
///
/// The block must land within ±10% of `target_params` (the attention
/// block's count under the same config). The second layer is pinned to
/// the head width so the classifier sees the same interface as a pooled
/// attention output, and the first layer is solved from the parity
/// equation `w1·(input + 1 + w2) + w2 ≈ target`.
pub fn gna_widths(target_params: usize, input_width: usize, hidden: usize) -> (usize, usize) {
    let w2 = hidden;
    let denom = (input_width + w2 + 1) as f64;
    let w1 = ((target_params as f64 - w2 as f64) / denom).round();
    (w1.max(1.0) as usize, w2)
}

/// Parameter count of a two-layer FC block `input → w1 → w2` with biases.
pub fn fc_block_param_count(input_width: usize, w1: usize, w2: usize) -> usize {
    input_width * w1 + w1 + w1 * w2 + w2
}

/// Every trainable tensor of one model.
#[derive(Debug, Clone)]
pub enum ModelParams {
    Gsa { attn: AttentionParams, head: HeadBlock },
    Gna { w1: Tensor2, b1: Tensor2, w2: Tensor2, b2: Tensor2, head: HeadBlock },
    Rha { w_score: Tensor2, b_score: Tensor2, head: HeadBlock },
    Rsa { attn: AttentionParams, head: HeadBlock },
}

impl ModelParams {
    /// Fresh parameters. The draw order per architecture is fixed, so a
    /// seed pins every initial value: trunk tensors first (biases zero),
    /// then the head block.
    pub fn init(cfg: &ModelConfig, feat: &FeatureConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        feat.validate()?;
        let f = feat.feat;
        match cfg.arch {
            Arch::Gsa => {
                let attn = AttentionParams::init(&cfg.attention_dims(f), rng)?;
                let head = HeadBlock::init(rng, feat.s() * cfg.d_out, cfg.hidden);
                Ok(ModelParams::Gsa { attn, head })
            }
            Arch::Gna => {
                let target = cfg.attention_dims(f).param_count();
                let input = feat.s() * f;
                let (w1, w2) = gna_widths(target, input, cfg.hidden);
                Ok(ModelParams::Gna {
                    w1: fan_uniform(rng, input, w1),
                    b1: Tensor2::zeros(1, w1),
                    w2: fan_uniform(rng, w1, w2),
                    b2: Tensor2::zeros(1, w2),
                    head: HeadBlock::init(rng, w2, cfg.hidden),
                })
            }
            Arch::Rha => Ok(ModelParams::Rha {
                w_score: fan_uniform(rng, f, 1),
                b_score: Tensor2::zeros(1, 1),
                head: HeadBlock::init(rng, f, cfg.hidden),
            }),
            Arch::Rsa => {
                let attn = AttentionParams::init(&cfg.attention_dims(f), rng)?;
                let head = HeadBlock::init(rng, cfg.d_out, cfg.hidden);
                Ok(ModelParams::Rsa { attn, head })
            }
        }
    }

    pub fn arch(&self) -> Arch {
        match self {
            ModelParams::Gsa { .. } => Arch::Gsa,
            ModelParams::Gna { .. } => Arch::Gna,
            ModelParams::Rha { .. } => Arch::Rha,
            ModelParams::Rsa { .. } => Arch::Rsa,
        }
    }

    /// Trainable scalar count of the trunk alone (attention block, FC
    /// block, or scorer) — the quantity the GNA parity contract compares.
    pub fn block_param_count(&self) -> usize {
        match self {
            ModelParams::Gsa { attn, .. } | ModelParams::Rsa { attn, .. } => attn.param_count(),
            ModelParams::Gna { w1, b1, w2, b2, .. } => {
                w1.len() + b1.len() + w2.len() + b2.len()
            }
            ModelParams::Rha { w_score, b_score, .. } => w_score.len() + b_score.len(),
        }
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        let head = match self {
            ModelParams::Gsa { head, .. }
            | ModelParams::Gna { head, .. }
            | ModelParams::Rha { head, .. }
            | ModelParams::Rsa { head, .. } => head.param_count(),
        };
        self.block_param_count() + head
    }

    /// Every tensor with its canonical name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor2)> {
        let mut out: Vec<(String, &Tensor2)> = Vec::new();
        let head = match self {
            ModelParams::Gsa { attn, head } | ModelParams::Rsa { attn, head } => {
                for (i, hd) in attn.heads.iter().enumerate() {
                    out.push((format!("attn.head{i}.w_q"), &hd.w_q));
                    out.push((format!("attn.head{i}.w_k"), &hd.w_k));
                    out.push((format!("attn.head{i}.w_v"), &hd.w_v));
                }
                out.push(("attn.w_out".into(), &attn.w_out));
                out.push(("attn.b_out".into(), &attn.b_out));
                head
            }
            ModelParams::Gna { w1, b1, w2, b2, head } => {
                out.push(("fcn.w1".into(), w1));
                out.push(("fcn.b1".into(), b1));
                out.push(("fcn.w2".into(), w2));
                out.push(("fcn.b2".into(), b2));
                head
            }
            ModelParams::Rha { w_score, b_score, head } => {
                out.push(("scorer.w".into(), w_score));
                out.push(("scorer.b".into(), b_score));
                head
            }
        };
        out.push(("head.w_hidden".into(), &head.w_hidden));
        out.push(("head.b_hidden".into(), &head.b_hidden));
        out.push(("head.w_action".into(), &head.w_action));
        out.push(("head.b_action".into(), &head.b_action));
        out.push(("head.w_expl".into(), &head.w_expl));
        out.push(("head.b_expl".into(), &head.b_expl));
        out
    }

    /// Mutable view in the same order as [`Self::named_tensors`].
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        let mut out: Vec<(String, &mut Tensor2)> = Vec::new();
        let head = match self {
            ModelParams::Gsa { attn, head } | ModelParams::Rsa { attn, head } => {
                for (i, hd) in attn.heads.iter_mut().enumerate() {
                    out.push((format!("attn.head{i}.w_q"), &mut hd.w_q));
                    out.push((format!("attn.head{i}.w_k"), &mut hd.w_k));
                    out.push((format!("attn.head{i}.w_v"), &mut hd.w_v));
                }
                out.push(("attn.w_out".into(), &mut attn.w_out));
                out.push(("attn.b_out".into(), &mut attn.b_out));
                head
            }
            ModelParams::Gna { w1, b1, w2, b2, head } => {
                out.push(("fcn.w1".into(), w1));
                out.push(("fcn.b1".into(), b1));
                out.push(("fcn.w2".into(), w2));
                out.push(("fcn.b2".into(), b2));
                head
            }
            ModelParams::Rha { w_score, b_score, head } => {
                out.push(("scorer.w".into(), w_score));
                out.push(("scorer.b".into(), b_score));
                head
            }
        };
        out.push(("head.w_hidden".into(), &mut head.w_hidden));
        out.push(("head.b_hidden".into(), &mut head.b_hidden));
        out.push(("head.w_action".into(), &mut head.w_action));
        out.push(("head.b_action".into(), &mut head.b_action));
        out.push(("head.w_expl".into(), &mut head.w_expl));
        out.push(("head.b_expl".into(), &mut head.b_expl));
        out
    }

    /// Bind every tensor onto the tape; the returned pairs carry the
    /// canonical names in [`Self::named_tensors`] order, so gradients can
    /// be read back by name after `backward`.
    pub fn bind(&self, tape: &mut Tape) -> (BoundModel, Vec<(String, NodeId)>) {
        let pairs: Vec<(String, NodeId)> = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, tape.leaf(t.clone())))
            .collect();
        let ids: Vec<NodeId> = pairs.iter().map(|p| p.1).collect();
        let bound = self
            .bound_from_ids(&ids)
            .expect("leaf list arity matches named_tensors by construction");
        (bound, pairs)
    }

    /// Reassemble the bound structure from parameter leaves laid out in
    /// [`Self::named_tensors`] order (the layout `grad_check` hands back).
    pub fn bound_from_ids(&self, ids: &[NodeId]) -> Result<BoundModel> {
        let expected = self.named_tensors().len();
        if ids.len() != expected {
            return Err(Error::Contract(format!(
                "bound_from_ids: got {} leaves, model has {expected} tensors",
                ids.len()
            )));
        }
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("length checked above");
        let bound = match self {
            ModelParams::Gsa { attn, .. } | ModelParams::Rsa { attn, .. } => {
                let heads = (0..attn.heads.len())
                    .map(|_| crate::attention::BoundHead { w_q: next(), w_k: next(), w_v: next() })
                    .collect();
                let battn = BoundAttention {
                    heads,
                    w_out: next(),
                    b_out: next(),
                    d_k: attn.heads[0].w_q.cols(),
                };
                let head = BoundHeadBlock {
                    w_hidden: next(),
                    b_hidden: next(),
                    w_action: next(),
                    b_action: next(),
                    w_expl: next(),
                    b_expl: next(),
                };
                if self.arch() == Arch::Gsa {
                    BoundModel::Gsa { attn: battn, head }
                } else {
                    BoundModel::Rsa { attn: battn, head }
                }
            }
            ModelParams::Gna { .. } => BoundModel::Gna {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                head: BoundHeadBlock {
                    w_hidden: next(),
                    b_hidden: next(),
                    w_action: next(),
                    b_action: next(),
                    w_expl: next(),
                    b_expl: next(),
                },
            },
            ModelParams::Rha { .. } => BoundModel::Rha {
                w_score: next(),
                b_score: next(),
                head: BoundHeadBlock {
                    w_hidden: next(),
                    b_hidden: next(),
                    w_action: next(),
                    b_action: next(),
                    w_expl: next(),
                    b_expl: next(),
                },
            },
        };
        Ok(bound)
    }
}

// ── tape-level forward ─────────────────────────────────────────────────

/// Tape handles of the bound head block.
#[derive(Debug, Clone, Copy)]
pub struct BoundHeadBlock {
    pub w_hidden: NodeId,
    pub b_hidden: NodeId,
    pub w_action: NodeId,
    pub b_action: NodeId,
    pub w_expl: NodeId,
    pub b_expl: NodeId,
}

/// Tape handles of one bound model.
#[derive(Debug, Clone)]
pub enum BoundModel {
    Gsa { attn: BoundAttention, head: BoundHeadBlock },
    Gna { w1: NodeId, b1: NodeId, w2: NodeId, b2: NodeId, head: BoundHeadBlock },
    Rha { w_score: NodeId, b_score: NodeId, head: BoundHeadBlock },
    Rsa { attn: BoundAttention, head: BoundHeadBlock },
}

/// What a model consumes: the patch feature sequence (gsa/gna) or the
/// per-scene region features (rha/rsa).
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Features(&'a Tensor2),
    Regions(&'a RegionSet),
}

/// Output handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// 1×4.
    pub action_logits: NodeId,
    /// 1×21.
    pub explanation_logits: NodeId,
    /// Elementwise sigmoids of the logits.
    pub action_probs: NodeId,
    pub explanation_probs: NodeId,
    /// Per-head s×s attention score matrices (gsa/rsa only).
    pub attention: Vec<NodeId>,
    /// Indices chosen by top-k selection (rha only), ascending.
    pub selected: Vec<usize>,
}

fn head_forward(
    tape: &mut Tape,
    x: NodeId,
    head: &BoundHeadBlock,
) -> Result<(NodeId, NodeId)> {
    let pre = tape.matmul(x, head.w_hidden)?;
    let pre = tape.add_row_bias(pre, head.b_hidden)?;
    let hid = tape.relu(pre)?;
    let a = tape.matmul(hid, head.w_action)?;
    let a = tape.add_row_bias(a, head.b_action)?;
    let e = tape.matmul(hid, head.w_expl)?;
    let e = tape.add_row_bias(e, head.b_expl)?;
    Ok((a, e))
}

fn features_of<'a>(input: &ModelInput<'a>, arch: Arch) -> Result<&'a Tensor2> {
    match input {
        ModelInput::Features(x) => Ok(x),
        ModelInput::Regions(_) => Err(Error::Contract(format!(
            "{arch} consumes the patch feature sequence, got region features"
        ))),
    }
}

fn regions_of<'a>(input: &ModelInput<'a>, arch: Arch) -> Result<&'a RegionSet> {
    match input {
        ModelInput::Regions(r) => {
            if r.is_empty() {
                return Err(Error::Contract(format!("{arch} requires at least one region")));
            }
            Ok(r)
        }
        ModelInput::Features(_) => Err(Error::Contract(format!(
            "{arch} consumes region features, got the patch feature sequence"
        ))),
    }
}

/// Run one architecture forward on the tape. `k` is the rha top-k count
/// and is ignored by the other trunks.
pub fn forward_on_tape(
    tape: &mut Tape,
    bound: &BoundModel,
    input: &ModelInput<'_>,
    k: usize,
) -> Result<ForwardNodes> {
    let (action_logits, explanation_logits, attention, selected) = match bound {
        BoundModel::Gsa { attn, head } => {
            let x = features_of(input, Arch::Gsa)?;
            let (s, _) = x.shape();
            let xid = tape.leaf(x.clone());
            let nodes = mhsa_forward(tape, xid, attn)?;
            let d_out = tape.value(nodes.output).cols();
            let flat = tape.reshape(nodes.output, 1, s * d_out)?;
            let (a, e) = head_forward(tape, flat, head)?;
            (a, e, nodes.scores, Vec::new())
        }
        BoundModel::Gna { w1, b1, w2, b2, head } => {
            let x = features_of(input, Arch::Gna)?;
            let xid = tape.leaf(x.clone());
            let flat = tape.reshape(xid, 1, x.len())?;
            let h1 = tape.matmul(flat, *w1)?;
            let h1 = tape.add_row_bias(h1, *b1)?;
            let h1 = tape.relu(h1)?;
            let h2 = tape.matmul(h1, *w2)?;
            let h2 = tape.add_row_bias(h2, *b2)?;
            let (a, e) = head_forward(tape, h2, head)?;
            (a, e, Vec::new(), Vec::new())
        }
        BoundModel::Rha { w_score, b_score, head } => {
            if k == 0 {
                return Err(Error::Contract("rha: k must be >= 1".into()));
            }
            let r = regions_of(input, Arch::Rha)?;
            let rid = tape.leaf(r.features.clone());
            let scores = tape.matmul(rid, *w_score)?;
            let scores = tape.add_row_bias(scores, *b_score)?;
            // Selection is a value-level decision, constant within the
            // step: gradients flow through the gathered rows and gates,
            // never through the indices.
            let score_values = tape.value(scores).data().to_vec();
            let selected = select_topk(&score_values, k)?;
            let picked = tape.gather_rows(rid, &selected)?;
            let gates = tape.gather_rows(scores, &selected)?;
            let gates = tape.sigmoid(gates)?;
            let gated = tape.row_scale(picked, gates)?;
            let pooled = tape.mean_rows(gated)?;
            let (a, e) = head_forward(tape, pooled, head)?;
            (a, e, Vec::new(), selected)
        }
        BoundModel::Rsa { attn, head } => {
            let r = regions_of(input, Arch::Rsa)?;
            let rid = tape.leaf(r.features.clone());
            let nodes = mhsa_forward(tape, rid, attn)?;
            let pooled = tape.mean_rows(nodes.output)?;
            let (a, e) = head_forward(tape, pooled, head)?;
            (a, e, nodes.scores, Vec::new())
        }
    };
    let action_probs = tape.sigmoid(action_logits)?;
    let explanation_probs = tape.sigmoid(explanation_logits)?;
    Ok(ForwardNodes {
        action_logits,
        explanation_logits,
        action_probs,
        explanation_probs,
        attention,
        selected,
    })
}

/// Loss handles of one multitask objective.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    /// λ·L_A + L_E, 1×1.
    pub total: NodeId,
    /// L_A: mean BCE over the 4 action outputs.
    pub action: NodeId,
    /// L_E: mean BCE over the 21 explanation outputs.
    pub explanation: NodeId,
}

/// Attach the multitask BCE objective to a forward pass.
pub fn loss_on_tape(
    tape: &mut Tape,
    fwd: &ForwardNodes,
    label: &LabelPair,
    lambda: f64,
) -> Result<LossNodes> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Contract(format!(
            "multitask loss: lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let ya = Tensor2::row(&label.actions.map(f64::from));
    let ye = Tensor2::row(&label.explanations.map(f64::from));
    let action = tape.bce_mean(fwd.action_probs, ya)?;
    let explanation = tape.bce_mean(fwd.explanation_probs, ye)?;
    let scaled = tape.scale_const(action, lambda)?;
    let total = tape.add(scaled, explanation)?;
    Ok(LossNodes { total, action, explanation })
}

// ── top-k selection ────────────────────────────────────────────────────

/// Indices of the k largest scores, ties broken toward the lowest index,
/// returned sorted ascending. `k > n` degenerates to all indices.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Contract("select_topk: empty score vector".into()));
    }
    if k == 0 {
        return Err(Error::Contract("select_topk: k must be >= 1".into()));
    }
    if k >= scores.len() {
        return Ok((0..scores.len()).collect());
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

// ── value-level prediction ─────────────────────────────────────────────

/// Per-head attention score matrices of one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// One s×s row-stochastic matrix per head.
    pub scores: Vec<Tensor2>,
}

/// One model output: logits, their sigmoid probabilities, and whatever
/// interpretability artifact the trunk produces.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub action_logits: [f64; N_ACTIONS],
    pub explanation_logits: [f64; N_EXPLANATIONS],
    pub action_probs: [f64; N_ACTIONS],
    pub explanation_probs: [f64; N_EXPLANATIONS],
    /// Present for gsa/rsa.
    pub attention: Option<AttentionOutput>,
    /// Present for rha: the selected region indices, ascending.
    pub selected: Option<Vec<usize>>,
}

fn fixed<const N: usize>(t: &Tensor2) -> [f64; N] {
    let mut out = [0.0; N];
    out.copy_from_slice(t.data());
    out
}

/// Run one architecture forward at value level.
pub fn forward(params: &ModelParams, input: &ModelInput<'_>, k: usize) -> Result<Prediction> {
    let mut tape = Tape::new();
    let (bound, _) = params.bind(&mut tape);
    let fwd = forward_on_tape(&mut tape, &bound, input, k)?;
    let attention = if fwd.attention.is_empty() {
        None
    } else {
        Some(AttentionOutput {
            scores: fwd.attention.iter().map(|&id| tape.value(id).clone()).collect(),
        })
    };
    let selected =
        if params.arch() == Arch::Rha { Some(fwd.selected.clone()) } else { None };
    Ok(Prediction {
        action_logits: fixed(tape.value(fwd.action_logits)),
        explanation_logits: fixed(tape.value(fwd.explanation_logits)),
        action_probs: fixed(tape.value(fwd.action_probs)),
        explanation_probs: fixed(tape.value(fwd.explanation_probs)),
        attention,
        selected,
    })
}

// ── model-facing view of a dataset scene ───────────────────────────────

/// One scene with everything any architecture consumes: the patch
/// feature sequence (computed once from the image through the frozen
/// extractor) and the stored region features.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub features: Tensor2,
    pub regions: RegionSet,
    pub labels: LabelPair,
}

impl PreparedScene {
    pub fn from_dataset_scene(
        scene: &crate::data::DatasetScene,
        patch: usize,
        extractor: &Tensor2,
    ) -> Result<Self> {
        Ok(PreparedScene {
            features: extract_features(&scene.image, patch, extractor)?,
            regions: scene.regions.clone(),
            labels: scene.labels.clone(),
        })
    }

    /// The input the given trunk consumes.
    pub fn input_for(&self, arch: Arch) -> ModelInput<'_> {
        if arch.takes_regions() {
            ModelInput::Regions(&self.regions)
        } else {
            ModelInput::Features(&self.features)
        }
    }
}

/// Prepare every scene of a split for model consumption.
pub fn prepare_split(
    split: &crate::data::Split,
    feat: &FeatureConfig,
) -> Result<Vec<PreparedScene>> {
    feat.validate()?;
    let extractor = feat.extractor_matrix();
    split
        .scenes
        .iter()
        .map(|s| PreparedScene::from_dataset_scene(s, feat.patch, &extractor))
        .collect()
}

// ── losses at value level ──────────────────────────────────────────────

/// Mean binary cross entropy with probabilities clamped to
/// [ε, 1−ε], ε = [`crate::autodiff::BCE_EPS`].
pub fn bce_loss(y: &[f64], p: &[f64]) -> Result<f64> {
    if y.len() != p.len() {
        return Err(Error::Contract(format!(
            "bce_loss: {} labels vs {} probabilities",
            y.len(),
            p.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Contract("bce_loss: empty vectors".into()));
    }
    let eps = crate::autodiff::BCE_EPS;
    let sum: f64 = y
        .iter()
        .zip(p)
        .map(|(&yi, &pi)| {
            let pc = pi.clamp(eps, 1.0 - eps);
            -(yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln())
        })
        .sum();
    Ok(sum / y.len() as f64)
}

/// L = λ·L_A + L_E over a prediction's probabilities.
/// Returns (L, L_A, L_E).
pub fn multitask_loss(
    pred: &Prediction,
    label: &LabelPair,
    lambda: f64,
) -> Result<(f64, f64, f64)> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Contract(format!(
            "multitask loss: lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let ya = label.actions.map(f64::from);
    let ye = label.explanations.map(f64::from);
    let la = bce_loss(&ya, &pred.action_probs)?;
    let le = bce_loss(&ye, &pred.explanation_probs)?;
    Ok((lambda * la + le, la, le))
}

/// Binarize probabilities with a `>=` comparator at `threshold`.
pub fn predict_labels(pred: &Prediction, threshold: f64) -> ([u8; N_ACTIONS], [u8; N_EXPLANATIONS]) {
    let actions = pred.action_probs.map(|p| u8::from(p >= threshold));
    let explanations = pred.explanation_probs.map(|p| u8::from(p >= threshold));
    (actions, explanations)
}
