//! Scaled dot-product self-attention and its multi-head wrapper.
//!
//! For an input sequence `X` of shape s×f, each head computes
//!
//! ```text
//! Q = X·W_Q      K = X·W_K      V = X·W_V
//! A = softmax(Q·Kᵀ / √d_k)          (row-wise, s×s)
//! head = A·V                        (s×d_v)
//! ```
//!
//! and the multi-head layer concatenates all heads and projects:
//!
//! ```text
//! MHSA(X) = concat(head_1, …, head_h) · W_out + b_out   (s×d_out)
//! ```
//!
//! `W_out` therefore has shape (h·d_v)×d_out. The per-head projections
//! carry no bias; the only bias in the layer sits on the output
//! projection. There is no positional encoding anywhere, which makes the
//! layer exactly permutation-equivariant: `MHSA(P·X) = P·MHSA(X)` for any
//! row permutation `P` — a property the tests pin down numerically.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Dimension bundle for one multi-head self-attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionDims {
    /// Width of each input row (feature dimension).
    pub f: usize,
    /// Query/key width per head.
    pub d_k: usize,
    /// Value width per head.
    pub d_v: usize,
    /// Number of heads.
    pub h: usize,
    /// Output width of the layer.
    pub d_out: usize,
}

impl AttentionDims {
    /// Validate that every dimension is at least 1.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("f", self.f),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("h", self.h),
            ("d_out", self.d_out),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("attention dim {name} must be >= 1, got 0")));
            }
        }
        Ok(())
    }

    /// Closed-form trainable-parameter count of the layer:
    /// `h·f·(2·d_k + d_v) + h·d_v·d_out + d_out`.
    pub fn param_count(&self) -> usize {
        self.h * self.f * (2 * self.d_k + self.d_v) + self.h * self.d_v * self.d_out + self.d_out
    }
}

/// Projections of one head; no biases by design.
#[derive(Debug, Clone)]
pub struct HeadProjections {
    pub w_q: Tensor2, // f×d_k
    pub w_k: Tensor2, // f×d_k
    pub w_v: Tensor2, // f×d_v
}

/// All trainable tensors of one multi-head self-attention layer.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: Vec<HeadProjections>,
    pub w_out: Tensor2, // (h·d_v)×d_out
    pub b_out: Tensor2, // 1×d_out
}

/// Uniform init on ±√(6 / (fan_in + fan_out)); the fan-balanced scheme
/// used for every weight matrix in this crate. Biases start at zero.
pub fn fan_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor2::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

impl AttentionParams {
    /// Fresh parameters for the given dims; draw order is fixed
    /// (per head: W_Q, W_K, W_V; then W_out) so a seed pins every value.
    pub fn init(dims: &AttentionDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        dims.validate()?;
        let heads = (0..dims.h)
            .map(|_| HeadProjections {
                w_q: fan_uniform(rng, dims.f, dims.d_k),
                w_k: fan_uniform(rng, dims.f, dims.d_k),
                w_v: fan_uniform(rng, dims.f, dims.d_v),
            })
            .collect();
        Ok(AttentionParams {
            heads,
            w_out: fan_uniform(rng, dims.h * dims.d_v, dims.d_out),
            b_out: Tensor2::zeros(1, dims.d_out),
        })
    }

    /// Dims reconstructed from tensor shapes.
    pub fn dims(&self) -> AttentionDims {
        let h = self.heads.len();
        let (f, d_k) = self.heads[0].w_q.shape();
        let d_v = self.heads[0].w_v.cols();
        AttentionDims { f, d_k, d_v, h, d_out: self.w_out.cols() }
    }

    /// Actual number of scalar parameters held.
    pub fn param_count(&self) -> usize {
        self.heads
            .iter()
            .map(|hd| hd.w_q.len() + hd.w_k.len() + hd.w_v.len())
            .sum::<usize>()
            + self.w_out.len()
            + self.b_out.len()
    }
}

/// Tape handles for one bound attention layer.
#[derive(Debug, Clone)]
pub struct BoundAttention {
    pub heads: Vec<BoundHead>,
    pub w_out: NodeId,
    pub b_out: NodeId,
    pub d_k: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
}

impl AttentionParams {
    /// Put every tensor on the tape as a leaf and return the handles.
    pub fn bind(&self, tape: &mut Tape) -> BoundAttention {
        let heads = self
            .heads
            .iter()
            .map(|hd| BoundHead {
                w_q: tape.leaf(hd.w_q.clone()),
                w_k: tape.leaf(hd.w_k.clone()),
                w_v: tape.leaf(hd.w_v.clone()),
            })
            .collect();
        BoundAttention {
            heads,
            w_out: tape.leaf(self.w_out.clone()),
            b_out: tape.leaf(self.b_out.clone()),
            d_k: self.heads[0].w_q.cols(),
        }
    }
}

/// Output handles of one head.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    /// s×d_v head output `A·V`.
    pub head: NodeId,
    /// s×s row-stochastic score matrix `A`.
    pub scores: NodeId,
}

/// Output handles of the full layer.
#[derive(Debug, Clone)]
pub struct AttentionNodes {
    /// s×d_out layer output.
    pub output: NodeId,
    /// Per-head s×s score matrices, in head order.
    pub scores: Vec<NodeId>,
}

/// One scaled dot-product attention head on the tape.
pub fn self_attention_head(
    tape: &mut Tape,
    x: NodeId,
    head: &BoundHead,
    d_k: usize,
) -> Result<HeadNodes> {
    if d_k == 0 {
        return Err(Error::Config("self_attention_head: d_k must be >= 1".into()));
    }
    let q = tape.matmul(x, head.w_q)?;
    let k = tape.matmul(x, head.w_k)?;
    let v = tape.matmul(x, head.w_v)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scores = tape.softmax_rows(logits, (d_k as f64).sqrt())?;
    let head_out = tape.matmul(scores, v)?;
    Ok(HeadNodes { head: head_out, scores })
}

/// Full multi-head self-attention layer on the tape.
///
/// `x` must be s×f with `f` matching the bound projections.
pub fn mhsa_forward(tape: &mut Tape, x: NodeId, bound: &BoundAttention) -> Result<AttentionNodes> {
    let f = tape.value(bound.heads[0].w_q).rows();
    let xs = tape.value(x).shape();
    if xs.1 != f {
        return Err(Error::Shape(format!(
            "mhsa_forward: input is {}x{} but projections expect f = {}",
            xs.0, xs.1, f
        )));
    }
    let mut heads = Vec::with_capacity(bound.heads.len());
    let mut scores = Vec::with_capacity(bound.heads.len());
    for bh in &bound.heads {
        let hn = self_attention_head(tape, x, bh, bound.d_k)?;
        heads.push(hn.head);
        scores.push(hn.scores);
    }
    let concat = tape.concat_cols(&heads)?;
    let projected = tape.matmul(concat, bound.w_out)?;
    let output = tape.add_row_bias(projected, bound.b_out)?;
    Ok(AttentionNodes { output, scores })
}

/// Convenience value-level application on a scratch tape: returns the
/// layer output and the per-head score matrices.
pub fn mhsa_apply(params: &AttentionParams, x: &Tensor2) -> Result<(Tensor2, Vec<Tensor2>)> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let bound = params.bind(&mut tape);
    let nodes = mhsa_forward(&mut tape, xid, &bound)?;
    let out = tape.value(nodes.output).clone();
    let scores = nodes.scores.iter().map(|&s| tape.value(s).clone()).collect();
    Ok((out, scores))
}

/// Permute the rows of a tensor: row `i` of the result is row `perm[i]`
/// of the input. Used by the equivariance tests and the verify suites.
pub fn permute_rows(x: &Tensor2, perm: &[usize]) -> Result<Tensor2> {
    if perm.len() != x.rows() {
        return Err(Error::Shape(format!(
            "permute_rows: permutation of length {} vs {} rows",
            perm.len(),
            x.rows()
        )));
    }
    let mut out = Tensor2::zeros(x.rows(), x.cols());
    for (i, &src) in perm.iter().enumerate() {
        if src >= x.rows() {
            return Err(Error::Contract(format!("permute_rows: index {src} out of range")));
        }
        for j in 0..x.cols() {
            out.set(i, j, x.get(src, j));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Single head, f = d_k = d_v = 1, all projections = [[1]]:
    /// X = [1, 0]ᵀ gives Q·Kᵀ = [[1,0],[0,0]] and √d_k = 1, so the
    /// score rows are softmax([1,0]) and softmax([0,0]).
    #[test]
    fn two_token_head_matches_hand_computation() {
        let params = AttentionParams {
            heads: vec![HeadProjections {
                w_q: Tensor2::scalar(1.0),
                w_k: Tensor2::scalar(1.0),
                w_v: Tensor2::scalar(1.0),
            }],
            w_out: Tensor2::scalar(1.0),
            b_out: Tensor2::zeros(1, 1),
        };
        let x = Tensor2::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let (out, scores) = mhsa_apply(&params, &x).unwrap();

        let e = std::f64::consts::E;
        let expected = [
            [e / (e + 1.0), 1.0 / (e + 1.0)],
            [0.5, 0.5],
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (scores[0].get(i, j) - expected[i][j]).abs() < 1e-12,
                    "score[{i}][{j}] = {}",
                    scores[0].get(i, j)
                );
            }
        }
        // head = A·V with V = [1, 0]ᵀ: first column of A.
        assert!((out.get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((out.get(1, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_give_uniform_scores() {
        let mut r = rng(11);
        let dims = AttentionDims { f: 6, d_k: 3, d_v: 4, h: 2, d_out: 5 };
        let params = AttentionParams::init(&dims, &mut r).unwrap();
        let row: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x = Tensor2::from_fn(5, 6, |_, j| row[j]);
        let (_, scores) = mhsa_apply(&params, &x).unwrap();
        for s in &scores {
            for i in 0..5 {
                for j in 0..5 {
                    assert!(
                        (s.get(i, j) - 0.2).abs() < 1e-12,
                        "uniform scores expected, got {}",
                        s.get(i, j)
                    );
                }
            }
        }
    }

    #[test]
    fn score_rows_sum_to_one() {
        let mut r = rng(12);
        let dims = AttentionDims { f: 8, d_k: 4, d_v: 4, h: 3, d_out: 6 };
        let params = AttentionParams::init(&dims, &mut r).unwrap();
        for _ in 0..20 {
            let x = Tensor2::from_fn(7, 8, |_, _| r.gen_range(-3.0..3.0));
            let (out, scores) = mhsa_apply(&params, &x).unwrap();
            assert!(out.all_finite());
            for s in &scores {
                for i in 0..s.rows() {
                    let sum: f64 = s.row_slice(i).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn layer_is_permutation_equivariant() {
        let mut r = rng(13);
        let dims = AttentionDims { f: 5, d_k: 3, d_v: 3, h: 2, d_out: 4 };
        let params = AttentionParams::init(&dims, &mut r).unwrap();
        for _ in 0..10 {
            let x = Tensor2::from_fn(6, 5, |_, _| r.gen_range(-2.0..2.0));
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut r);

            let (out, scores) = mhsa_apply(&params, &x).unwrap();
            let xp = permute_rows(&x, &perm).unwrap();
            let (out_p, scores_p) = mhsa_apply(&params, &xp).unwrap();

            let expected = permute_rows(&out, &perm).unwrap();
            assert!(out_p.max_abs_diff(&expected).unwrap() < 1e-9);

            // Scores transform as P·A·Pᵀ: permute rows, then columns.
            for (s, sp) in scores.iter().zip(&scores_p) {
                let rows = permute_rows(s, &perm).unwrap();
                let both = permute_rows(&rows.transpose(), &perm).unwrap().transpose();
                assert!(sp.max_abs_diff(&both).unwrap() < 1e-9);
            }
        }
    }

    #[test]
    fn param_count_matches_formula() {
        let dims = AttentionDims { f: 32, d_k: 16, d_v: 16, h: 8, d_out: 64 };
        let params = AttentionParams::init(&dims, &mut rng(3)).unwrap();
        assert_eq!(params.param_count(), dims.param_count());
        assert_eq!(dims.param_count(), 8 * 32 * 48 + 8 * 16 * 64 + 64);
        assert_eq!(params.dims(), dims);
    }

    #[test]
    fn zero_dims_are_config_errors() {
        let dims = AttentionDims { f: 4, d_k: 0, d_v: 2, h: 1, d_out: 3 };
        let err = AttentionParams::init(&dims, &mut rng(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let dims = AttentionDims { f: 5, d_k: 2, d_v: 2, h: 1, d_out: 3 };
        let params = AttentionParams::init(&dims, &mut rng(5)).unwrap();
        let x = Tensor2::zeros(4, 7); // width 7, expected 5
        let err = mhsa_apply(&params, &x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("f = 5"), "{msg}");
    }

    #[test]
    fn mhsa_gradients_match_finite_differences() {
        let dims = AttentionDims { f: 3, d_k: 2, d_v: 2, h: 2, d_out: 3 };
        let mut r = rng(21);
        let x = Tensor2::from_fn(4, 3, |_, _| r.gen_range(-1.0..1.0));
        let p0 = AttentionParams::init(&dims, &mut r).unwrap();

        // Flatten parameters into the grad_check interface.
        let mut named = vec![("x".to_string(), x)];
        for (i, hd) in p0.heads.iter().enumerate() {
            named.push((format!("h{i}.w_q"), hd.w_q.clone()));
            named.push((format!("h{i}.w_k"), hd.w_k.clone()));
            named.push((format!("h{i}.w_v"), hd.w_v.clone()));
        }
        named.push(("w_out".to_string(), p0.w_out.clone()));
        named.push(("b_out".to_string(), p0.b_out.clone()));

        let report = grad_check(
            |t, ids| {
                let bound = BoundAttention {
                    heads: vec![
                        BoundHead { w_q: ids[1], w_k: ids[2], w_v: ids[3] },
                        BoundHead { w_q: ids[4], w_k: ids[5], w_v: ids[6] },
                    ],
                    w_out: ids[7],
                    b_out: ids[8],
                    d_k: 2,
                };
                let nodes = mhsa_forward(t, ids[0], &bound)?;
                let s = t.sigmoid(nodes.output)?;
                t.sum_all(s)
            },
            &named,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.pass,
            "failed: {:?} worst {:.3e}",
            report.failures(),
            report.worst_rel_err()
        );
    }
}
