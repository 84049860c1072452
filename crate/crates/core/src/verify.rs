//! Self-contained verification suites: gradient checks, metric-oracle
//! equivalence, and structural invariants.
//!
//! The CLI `verify` subcommand and the acceptance tests both run these,
//! so there is exactly one implementation of each check. Every suite is
//! deterministic (pinned seeds) and returns one [`CheckResult`] per
//! property with a human-readable measurement in `detail`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{mhsa_apply, permute_rows, AttentionDims, AttentionParams};
use crate::autodiff::{grad_check, GradCheckReport, NodeId, Tape};
use crate::data::{splitmix64, LabelPair, PixelBox, RegionSet};
use crate::error::Result;
use crate::metrics::{f1_all, m_f1};
use crate::network::{
    bce_loss, forward, forward_on_tape, loss_on_tape, multitask_loss, select_topk, Arch,
    FeatureConfig, ModelConfig, ModelInput, ModelParams,
};
use crate::tensor::Tensor2;

/// Outcome of one verified property.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    /// The measured quantity, e.g. worst error against its tolerance.
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        CheckResult { name: name.into(), pass, detail }
    }
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const ATTENTION_TOL: f64 = 1e-9;
pub const METRIC_TOL: f64 = 1e-12;
const INSTANCES_PER_OP: usize = 100;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| r.gen_range(-1.5..1.5))
}

/// Random tensor with rows in `1..rmax` and cols in `1..cmax`.
fn rand_tensor_sized(r: &mut ChaCha8Rng, rmax: usize, cmax: usize) -> Tensor2 {
    let rows = r.gen_range(1..rmax);
    let cols = r.gen_range(1..cmax);
    rand_tensor(r, rows, cols)
}

/// Random values kept a safe margin away from the ReLU kink at 0, where
/// central finite differences are meaningless.
fn rand_tensor_off_kink(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| {
        let magnitude = r.gen_range(0.01..1.5);
        if r.gen_bool(0.5) {
            magnitude
        } else {
            -magnitude
        }
    })
}

/// Deterministic mixing weights derived from position, used to give
/// every checked op a non-uniform upstream gradient.
fn mix_weights(n: usize, salt: u64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let h = splitmix64(salt.wrapping_mul(0x9E37_79B9) ^ i as u64);
            (h % 2000) as f64 / 1000.0 - 1.0 + 0.001
        })
        .collect()
}

/// Reduce an r×c node to a scalar through fixed left/right mixing
/// vectors, so the op under test sees a dense, varied adjoint.
fn mixdown(tape: &mut Tape, out: NodeId) -> Result<NodeId> {
    let (r, c) = tape.value(out).shape();
    let lw = tape.leaf(Tensor2::from_vec(1, r, mix_weights(r, 3))?);
    let rw = tape.leaf(Tensor2::from_vec(c, 1, mix_weights(c, 7))?);
    let t = tape.matmul(lw, out)?;
    tape.matmul(t, rw)
}

/// Run `instances` finite-difference checks of one op; each instance
/// draws its own shapes/values from the instance-keyed rng.
fn check_op<F>(name: &str, seed: u64, mut instance: F) -> CheckResult
where
    F: FnMut(
        &mut ChaCha8Rng,
    ) -> Result<(Vec<(String, Tensor2)>, Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>)>,
{
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES_PER_OP {
        let mut r = rng(splitmix64(seed ^ i as u64));
        let built = instance(&mut r).and_then(|(params, build)| {
            grad_check(|tape, ids| build(tape, ids), &params, GRADCHECK_STEP, GRADCHECK_TOL)
        });
        match built {
            Ok(report) => {
                worst = worst.max(report.worst_rel_err());
                if !report.pass {
                    return CheckResult::new(
                        name,
                        false,
                        format!(
                            "instance {i}: rel err {:.3e} exceeds tol {GRADCHECK_TOL:.0e} in {:?}",
                            report.worst_rel_err(),
                            report.failures()
                        ),
                    );
                }
            }
            Err(e) => return CheckResult::new(name, false, format!("instance {i}: {e}")),
        }
    }
    CheckResult::new(
        name,
        true,
        format!("{INSTANCES_PER_OP} instances, worst rel err {worst:.3e} (tol {GRADCHECK_TOL:.0e})"),
    )
}

// ── gradcheck suite ────────────────────────────────────────────────────

/// Per-op and end-to-end finite-difference gradient checks.
pub fn gradcheck_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();

    out.push(check_op("gradcheck.matmul", 0x11, |r| {
        let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let params = vec![
            ("a".to_string(), rand_tensor(r, m, k)),
            ("b".to_string(), rand_tensor(r, k, n)),
        ];
        Ok((params, Box::new(|t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            mixdown(t, y)
        })))
    }));

    out.push(check_op("gradcheck.transpose", 0x12, |r| {
        let params = vec![("x".to_string(), rand_tensor_sized(r, 6, 6))];
        Ok((params, Box::new(|t, ids| {
            let y = t.transpose(ids[0])?;
            mixdown(t, y)
        })))
    }));

    out.push(check_op("gradcheck.add", 0x13, |r| {
        let (m, n) = (r.gen_range(1..6), r.gen_range(1..6));
        let params = vec![
            ("a".to_string(), rand_tensor(r, m, n)),
            ("b".to_string(), rand_tensor(r, m, n)),
        ];
        Ok((params, Box::new(|t, ids| {
            let y = t.add(ids[0], ids[1])?;
            mixdown(t, y)
        })))
    }));

    out.push(check_op("gradcheck.add_row_bias", 0x14, |r| {
        let (m, n) = (r.gen_range(1..6), r.gen_range(1..6));
        let params = vec![
            ("x".to_string(), rand_tensor(r, m, n)),
            ("bias".to_string(), rand_tensor(r, 1, n)),
        ];
        Ok((params, Box::new(|t, ids| {
            let y = t.add_row_bias(ids[0], ids[1])?;
            mixdown(t, y)
        })))
    }));

    out.push(check_op("gradcheck.relu", 0x15, |r| {
        let params =
            {
            let rows = r.gen_range(1..6);
            let cols = r.gen_range(1..6);
            vec![("x".to_string(), rand_tensor_off_kink(r, rows, cols))]
        };
        Ok((params, Box::new(|t, ids| {
            let y = t.relu(ids[0])?;
            mixdown(t, y)
        })))
    }));

    out.push(check_op("gradcheck.sigmoid", 0x16, |r| {
        let params = vec![("x".to_string(), rand_tensor_sized(r, 6, 6))];
        Ok((params, Box::new(|t, ids| {
            let y = t.sigmoid(ids[0])?;
            mixdown(t, y)
        })))
    }));

    out.push(check_op("gradcheck.softmax_rows", 0x17, |r| {
        let scale = r.gen_range(0.5..4.0);
        let rows = r.gen_range(1..6);
        let cols = r.gen_range(2..6);
        let params = vec![("x".to_string(), rand_tensor(r, rows, cols))];
        Ok((params, Box::new(move |t, ids| {
            let y = t.softmax_rows(ids[0], scale)?;
            mixdown(t, y)
        })))
    }));

    out.push(check_op("gradcheck.concat_cols", 0x18, |r| {
        let m = r.gen_range(1..5);
        let widths: Vec<usize> = (0..3).map(|_| r.gen_range(1..4)).collect();
        let params = vec![
            ("a".to_string(), rand_tensor(r, m, widths[0])),
            ("b".to_string(), rand_tensor(r, m, widths[1])),
            ("c".to_string(), rand_tensor(r, m, widths[2])),
        ];
        Ok((params, Box::new(|t, ids| {
            let y = t.concat_cols(&[ids[0], ids[1], ids[2]])?;
            mixdown(t, y)
        })))
    }));

    out.push(check_op("gradcheck.reshape", 0x19, |r| {
        let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
        let params = vec![("x".to_string(), rand_tensor(r, m, n))];
        Ok((params, Box::new(move |t, ids| {
            let y = t.reshape(ids[0], 1, m * n)?;
            mixdown(t, y)
        })))
    }));

    out.push(check_op("gradcheck.mean_rows", 0x1a, |r| {
        let params = vec![("x".to_string(), rand_tensor_sized(r, 7, 6))];
        Ok((params, Box::new(|t, ids| {
            let y = t.mean_rows(ids[0])?;
            mixdown(t, y)
        })))
    }));

    out.push(check_op("gradcheck.gather_rows", 0x1b, |r| {
        let m = r.gen_range(2..7);
        let picks = r.gen_range(1..6);
        let idx: Vec<usize> = (0..picks).map(|_| r.gen_range(0..m)).collect();
        let cols = r.gen_range(1..5);
        let params = vec![("x".to_string(), rand_tensor(r, m, cols))];
        Ok((params, Box::new(move |t, ids| {
            let y = t.gather_rows(ids[0], &idx)?;
            mixdown(t, y)
        })))
    }));

    out.push(check_op("gradcheck.row_scale", 0x1c, |r| {
        let (m, n) = (r.gen_range(1..6), r.gen_range(1..6));
        let params = vec![
            ("x".to_string(), rand_tensor(r, m, n)),
            ("gate".to_string(), rand_tensor(r, m, 1)),
        ];
        Ok((params, Box::new(|t, ids| {
            let y = t.row_scale(ids[0], ids[1])?;
            mixdown(t, y)
        })))
    }));

    out.push(check_op("gradcheck.scale_const", 0x1d, |r| {
        let c = r.gen_range(-2.0..2.0);
        let params = vec![("x".to_string(), rand_tensor_sized(r, 6, 6))];
        Ok((params, Box::new(move |t, ids| {
            let y = t.scale_const(ids[0], c)?;
            mixdown(t, y)
        })))
    }));

    out.push(check_op("gradcheck.sum_all", 0x1e, |r| {
        let params = vec![("x".to_string(), rand_tensor_sized(r, 7, 6))];
        Ok((params, Box::new(|t, ids| t.sum_all(ids[0]))))
    }));

    out.push(check_op("gradcheck.bce_mean", 0x1f, |r| {
        let n = r.gen_range(1..8);
        let probs = Tensor2::from_fn(1, n, |_, _| r.gen_range(0.05..0.95));
        let targets = Tensor2::from_fn(1, n, |_, _| f64::from(r.gen_range(0..2u8)));
        let params = vec![("probs".to_string(), probs)];
        Ok((params, Box::new(move |t, ids| t.bce_mean(ids[0], targets.clone()))))
    }));

    // End-to-end: full forward+loss graphs of the differentiable trunks,
    // plus rha under fixed selection (scores well separated so the
    // finite-difference step cannot flip the top-k set).
    for arch in [Arch::Gsa, Arch::Gna, Arch::Rsa, Arch::Rha] {
        out.push(end_to_end_check(arch));
    }
    out
}

fn tiny_feature() -> FeatureConfig {
    FeatureConfig { height: 8, width: 8, patch: 4, feat: 6, extractor_seed: 17 }
}

fn tiny_model(arch: Arch) -> ModelConfig {
    ModelConfig {
        arch,
        h: 2,
        d_k: 3,
        d_v: 3,
        d_out: 5,
        hidden: 7,
        k: 2,
        lambda: 1.0,
        threshold: 0.5,
    }
}

fn end_to_end_check(arch: Arch) -> CheckResult {
    let name = format!("gradcheck.end_to_end.{arch}");
    let feature = tiny_feature();
    let cfg = tiny_model(arch);
    let mut worst: f64 = 0.0;
    for i in 0..3u64 {
        let mut r = rng(splitmix64(0x20 + i) ^ arch as u64);
        let params = match ModelParams::init(&cfg, &feature, &mut r) {
            Ok(p) => p,
            Err(e) => return CheckResult::new(&name, false, e.to_string()),
        };
        let features = rand_tensor(&mut r, feature.s(), feature.feat);
        let regions = RegionSet {
            boxes: (0..5).map(|j| PixelBox { x0: j, y0: 0, x1: j + 1, y1: 1 }).collect(),
            // Spread region features out so rha scores stay well
            // separated at every perturbed parameter value.
            features: Tensor2::from_fn(5, feature.feat, |i2, j| {
                (i2 as f64 - 2.0) * 0.8 + 0.13 * j as f64
            }),
        };
        let mut label = LabelPair::empty();
        label.actions = [1, 0, 0, 1];
        label.explanations[3] = 1;
        label.explanations[16] = 1;

        let named: Vec<(String, Tensor2)> =
            params.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let report: Result<GradCheckReport> = grad_check(
            |tape, ids| {
                let bound = params.bound_from_ids(ids)?;
                let input = if arch.takes_regions() {
                    ModelInput::Regions(&regions)
                } else {
                    ModelInput::Features(&features)
                };
                let fwd = forward_on_tape(tape, &bound, &input, cfg.k)?;
                Ok(loss_on_tape(tape, &fwd, &label, cfg.lambda)?.total)
            },
            &named,
            GRADCHECK_STEP,
            GRADCHECK_TOL,
        );
        match report {
            Ok(rep) => {
                worst = worst.max(rep.worst_rel_err());
                if !rep.pass {
                    return CheckResult::new(
                        &name,
                        false,
                        format!(
                            "instance {i}: rel err {:.3e} in {:?}",
                            rep.worst_rel_err(),
                            rep.failures()
                        ),
                    );
                }
            }
            Err(e) => return CheckResult::new(&name, false, format!("instance {i}: {e}")),
        }
    }
    CheckResult::new(
        &name,
        true,
        format!("3 instances, all parameters, worst rel err {worst:.3e} (tol {GRADCHECK_TOL:.0e})"),
    )
}

// ── metrics suite ──────────────────────────────────────────────────────

/// Brute-force confusion counting, written in a deliberately different
/// style from the metrics module (sample-major, signed arithmetic).
fn oracle_counts(preds: &[Vec<u8>], labels: &[Vec<u8>], class: Option<usize>) -> (i64, i64, i64) {
    let (mut tp, mut fp, mut fnn) = (0i64, 0i64, 0i64);
    for (p_row, l_row) in preds.iter().zip(labels) {
        for j in 0..p_row.len() {
            if let Some(c) = class {
                if j != c {
                    continue;
                }
            }
            match (p_row[j] != 0, l_row[j] != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                (false, false) => {}
            }
        }
    }
    (tp, fp, fnn)
}

fn oracle_f1(tp: i64, fp: i64, fnn: i64) -> f64 {
    let d = 2 * tp + fp + fnn;
    if d == 0 {
        0.0
    } else {
        2.0 * tp as f64 / d as f64
    }
}

/// 1,000-case brute-force equivalence for each of C=4 and C=21.
pub fn metrics_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    for &classes in &[4usize, 21] {
        let name = format!("metrics.oracle_equivalence.c{classes}");
        let mut r = rng(0x4d45_5452 ^ classes as u64);
        let mut worst: f64 = 0.0;
        let mut pass = true;
        let mut detail = String::new();
        for case in 0..1000 {
            let n = r.gen_range(1..15);
            let density = r.gen_range(0.05..0.95);
            let draw = |r: &mut ChaCha8Rng| -> Vec<Vec<u8>> {
                (0..n).map(|_| (0..classes).map(|_| u8::from(r.gen_bool(density))).collect()).collect()
            };
            let preds = draw(&mut r);
            let labels = draw(&mut r);

            let micro = match f1_all(&preds, &labels) {
                Ok(v) => v,
                Err(e) => {
                    pass = false;
                    detail = format!("case {case}: {e}");
                    break;
                }
            };
            let (tp, fp, fnn) = oracle_counts(&preds, &labels, None);
            let micro_err = (micro - oracle_f1(tp, fp, fnn)).abs();

            let (macro_, per) = m_f1(&preds, &labels).expect("shapes match");
            let mut macro_oracle = 0.0;
            let mut per_err: f64 = 0.0;
            for (j, &got) in per.iter().enumerate() {
                let (tp, fp, fnn) = oracle_counts(&preds, &labels, Some(j));
                let want = oracle_f1(tp, fp, fnn);
                macro_oracle += want;
                per_err = per_err.max((got - want).abs());
            }
            macro_oracle /= classes as f64;
            let macro_err = (macro_ - macro_oracle).abs();

            worst = worst.max(micro_err).max(macro_err).max(per_err);
            if worst >= METRIC_TOL {
                pass = false;
                detail = format!("case {case}: error {worst:.3e} >= {METRIC_TOL:.0e}");
                break;
            }
        }
        if pass {
            detail = format!("1000 cases, worst abs err {worst:.3e} (tol {METRIC_TOL:.0e})");
        }
        out.push(CheckResult::new(&name, pass, detail));
    }
    out
}

// ── invariants suite ───────────────────────────────────────────────────

/// Attention row-normalization, permutation equivariance, top-k oracle
/// equality, and the loss identities.
pub fn invariants_suite() -> Vec<CheckResult> {
    vec![
        row_stochastic_check(),
        permutation_equivariance_check(),
        topk_oracle_check(),
        loss_identities_check(),
    ]
}

fn random_attention(r: &mut ChaCha8Rng) -> (AttentionParams, Tensor2) {
    let dims = AttentionDims {
        f: r.gen_range(2..8),
        d_k: r.gen_range(1..6),
        d_v: r.gen_range(1..6),
        h: r.gen_range(1..4),
        d_out: r.gen_range(1..6),
    };
    let params = AttentionParams::init(&dims, r).expect("dims are positive");
    let s = r.gen_range(2..10);
    let x = rand_tensor(r, s, dims.f);
    (params, x)
}

fn row_stochastic_check() -> CheckResult {
    let name = "invariants.attention_rows_sum_to_one";
    let mut r = rng(0x524f_5753);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (params, x) = random_attention(&mut r);
        let (_, scores) = match mhsa_apply(&params, &x) {
            Ok(v) => v,
            Err(e) => return CheckResult::new(name, false, e.to_string()),
        };
        for a in &scores {
            for i in 0..a.rows() {
                let sum: f64 = a.row_slice(i).iter().sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
    }
    CheckResult::new(
        name,
        worst < ATTENTION_TOL,
        format!("1000 inputs, worst |row sum − 1| = {worst:.3e} (tol {ATTENTION_TOL:.0e})"),
    )
}

fn permutation_equivariance_check() -> CheckResult {
    let name = "invariants.mhsa_permutation_equivariance";
    let mut r = rng(0x5045_524d);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (params, x) = random_attention(&mut r);
        let s = x.rows();
        let mut perm: Vec<usize> = (0..s).collect();
        for i in (1..s).rev() {
            let j = r.gen_range(0..=i);
            perm.swap(i, j);
        }
        let result = (|| -> Result<f64> {
            let (y, _) = mhsa_apply(&params, &x)?;
            let px = permute_rows(&x, &perm)?;
            let (py, _) = mhsa_apply(&params, &px)?;
            let y_permuted = permute_rows(&y, &perm)?;
            py.max_abs_diff(&y_permuted)
        })();
        match result {
            Ok(d) => worst = worst.max(d),
            Err(e) => return CheckResult::new(name, false, e.to_string()),
        }
    }
    CheckResult::new(
        name,
        worst < ATTENTION_TOL,
        format!("100 (X, P) pairs, worst |MHSA(PX) − P·MHSA(X)| = {worst:.3e} (tol {ATTENTION_TOL:.0e})"),
    )
}

fn topk_oracle_check() -> CheckResult {
    let name = "invariants.topk_matches_sort_oracle";
    let mut r = rng(0x544f_504b);
    for case in 0..10_000 {
        let n = r.gen_range(1..20);
        // Half the vectors draw from a coarse grid to force ties.
        let coarse = r.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    f64::from(r.gen_range(0..4u8)) * 0.25
                } else {
                    r.gen_range(-2.0..2.0)
                }
            })
            .collect();
        let k = r.gen_range(1..=n + 2);
        let got = match select_topk(&scores, k) {
            Ok(v) => v,
            Err(e) => return CheckResult::new(name, false, format!("case {case}: {e}")),
        };
        // Oracle: stable sort by descending score keeps ties in index
        // order; take k; report ascending.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let mut want: Vec<usize> = order.into_iter().take(k.min(n)).collect();
        want.sort_unstable();
        if got != want {
            return CheckResult::new(
                name,
                false,
                format!("case {case}: scores {scores:?} k {k}: got {got:?}, oracle {want:?}"),
            );
        }
    }
    CheckResult::new(name, true, "10000 vectors including tie grids, exact match".into())
}

fn loss_identities_check() -> CheckResult {
    let name = "invariants.loss_identities";
    let feature = tiny_feature();
    let cfg = tiny_model(Arch::Gsa);
    let mut r = rng(0x4c4f_5353);
    let params = match ModelParams::init(&cfg, &feature, &mut r) {
        Ok(p) => p,
        Err(e) => return CheckResult::new(name, false, e.to_string()),
    };
    let x = rand_tensor(&mut r, feature.s(), feature.feat);
    let pred = match forward(&params, &ModelInput::Features(&x), cfg.k) {
        Ok(p) => p,
        Err(e) => return CheckResult::new(name, false, e.to_string()),
    };
    let mut label = LabelPair::empty();
    label.actions = [0, 1, 1, 0];
    label.explanations[3] = 1;

    let (l0, _, le0) = multitask_loss(&pred, &label, 0.0).expect("lambda valid");
    if l0 != le0 {
        return CheckResult::new(name, false, format!("λ=0: L = {l0} but L_E = {le0}"));
    }
    let (l1, la1, le1) = multitask_loss(&pred, &label, 1.0).expect("lambda valid");
    if l1 != la1 + le1 {
        return CheckResult::new(name, false, format!("λ=1: L = {l1} but L_A + L_E = {}", la1 + le1));
    }
    // Perfect clamped predictions.
    let y = [1.0, 0.0, 1.0, 1.0, 0.0];
    let p: Vec<f64> = y.to_vec();
    let perfect = bce_loss(&y, &p).expect("lengths match");
    if perfect >= 1e-10 {
        return CheckResult::new(name, false, format!("perfect-prediction BCE {perfect:.3e} >= 1e-10"));
    }
    CheckResult::new(
        name,
        true,
        format!("λ identities exact; perfect-prediction BCE {perfect:.3e} < 1e-10"),
    )
}

/// Every suite back to back.
pub fn all_suites() -> Vec<CheckResult> {
    let mut out = gradcheck_suite();
    out.extend(metrics_suite());
    out.extend(invariants_suite());
    out
}
