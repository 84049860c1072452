//! Confusion counting and the two F1 aggregates reported for both the
//! action and explanation heads.
//!
//! Two readings of F1 coexist deliberately:
//!
//! * **F1_all** — micro-averaged: TP/FP/FN pooled over every
//!   (sample, class) cell, then F1 applied once.
//! * **mF1** — macro-averaged: per-class pooled F1, averaged unweighted
//!   over classes. A class with zero support (no positives in either
//!   predictions or labels) scores 0, not 1 — conservative, and it
//!   visibly lowers mF1 on sparse label sets, which is why the
//!   convention is pinned here and tested.

use crate::error::{Error, Result};
use crate::network::{
    forward, predict_labels, ModelConfig, ModelParams, PreparedScene, N_ACTIONS, N_EXPLANATIONS,
};

/// Pooled binary confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn observe(&mut self, pred: u8, label: u8) {
        match (pred != 0, label != 0) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn f1(&self) -> f64 {
        f1(self.tp, self.fp, self.fn_)
    }
}

/// F1 = 2TP / (2TP + FP + FN), defined as 0 when the denominator is 0.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn check_shapes(preds: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<usize> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "metric input: {} prediction rows vs {} label rows",
            preds.len(),
            labels.len()
        )));
    }
    let c = preds.first().map_or(0, Vec::len);
    for (i, (p, l)) in preds.iter().zip(labels).enumerate() {
        if p.len() != c || l.len() != c {
            return Err(Error::Contract(format!(
                "metric input: row {i} has width {}/{} but row 0 has {c}",
                p.len(),
                l.len()
            )));
        }
    }
    Ok(c)
}

/// Micro-averaged F1: pool counts over every (sample, class) cell.
pub fn f1_all(preds: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<f64> {
    check_shapes(preds, labels)?;
    let mut counts = ConfusionCounts::default();
    for (p, l) in preds.iter().zip(labels) {
        for (&pi, &li) in p.iter().zip(l) {
            counts.observe(pi, li);
        }
    }
    Ok(counts.f1())
}

/// Macro-averaged F1 and the per-class array it averages.
pub fn m_f1(preds: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<(f64, Vec<f64>)> {
    let c = check_shapes(preds, labels)?;
    let per_class = per_class_f1(preds, labels, c)?;
    let mean = if c == 0 { 0.0 } else { per_class.iter().sum::<f64>() / c as f64 };
    Ok((mean, per_class))
}

/// Per-class pooled F1 over all samples.
pub fn per_class_f1(preds: &[Vec<u8>], labels: &[Vec<u8>], classes: usize) -> Result<Vec<f64>> {
    let c = check_shapes(preds, labels)?;
    if !preds.is_empty() && c != classes {
        return Err(Error::Contract(format!(
            "metric input: rows have {c} classes, caller expected {classes}"
        )));
    }
    let mut counts = vec![ConfusionCounts::default(); classes];
    for (p, l) in preds.iter().zip(labels) {
        for j in 0..classes {
            counts[j].observe(p[j], l[j]);
        }
    }
    Ok(counts.iter().map(ConfusionCounts::f1).collect())
}

/// The four aggregates plus per-class arrays; serializes to the pinned
/// `metrics.json` schema.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    #[serde(rename = "decision_mF1")]
    pub decision_mf1: f64,
    #[serde(rename = "decision_F1all")]
    pub decision_f1all: f64,
    #[serde(rename = "explanation_mF1")]
    pub explanation_mf1: f64,
    #[serde(rename = "explanation_F1all")]
    pub explanation_f1all: f64,
    #[serde(rename = "per_class_decision_F1")]
    pub per_class_decision_f1: Vec<f64>,
    #[serde(rename = "per_class_explanation_F1")]
    pub per_class_explanation_f1: Vec<f64>,
    pub n_samples: usize,
}

/// Compute all aggregates from already-binarized predictions.
pub fn report_from_bits(
    action_preds: &[Vec<u8>],
    action_labels: &[Vec<u8>],
    expl_preds: &[Vec<u8>],
    expl_labels: &[Vec<u8>],
) -> Result<EvalReport> {
    if action_preds.len() != expl_preds.len() {
        return Err(Error::Contract(format!(
            "metric input: {} action rows vs {} explanation rows",
            action_preds.len(),
            expl_preds.len()
        )));
    }
    let (decision_mf1, per_class_decision_f1) = m_f1(action_preds, action_labels)?;
    let (explanation_mf1, per_class_explanation_f1) = m_f1(expl_preds, expl_labels)?;
    Ok(EvalReport {
        decision_mf1,
        decision_f1all: f1_all(action_preds, action_labels)?,
        explanation_mf1,
        explanation_f1all: f1_all(expl_preds, expl_labels)?,
        per_class_decision_f1,
        per_class_explanation_f1,
        n_samples: action_preds.len(),
    })
}

/// Run the model over every prepared scene, binarize at the config
/// threshold, and aggregate. Deterministic: scenes are visited in order
/// and nothing is sampled.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    scenes: &[PreparedScene],
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Contract("evaluate: empty scene list".into()));
    }
    let arch = params.arch();
    let mut action_preds = Vec::with_capacity(scenes.len());
    let mut action_labels = Vec::with_capacity(scenes.len());
    let mut expl_preds = Vec::with_capacity(scenes.len());
    let mut expl_labels = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let pred = forward(params, &scene.input_for(arch), cfg.k)?;
        let (a, e) = predict_labels(&pred, cfg.threshold);
        action_preds.push(a.to_vec());
        expl_preds.push(e.to_vec());
        action_labels.push(scene.labels.actions.to_vec());
        expl_labels.push(scene.labels.explanations.to_vec());
    }
    let report = report_from_bits(&action_preds, &action_labels, &expl_preds, &expl_labels)?;
    debug_assert_eq!(report.per_class_decision_f1.len(), N_ACTIONS);
    debug_assert_eq!(report.per_class_explanation_f1.len(), N_EXPLANATIONS);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_bits(r: &mut ChaCha8Rng, n: usize, c: usize, p: f64) -> Vec<Vec<u8>> {
        (0..n).map(|_| (0..c).map(|_| u8::from(r.gen_bool(p))).collect()).collect()
    }

    /// Deliberately different implementation style: per-cell loops with
    /// i32 arithmetic, no shared helpers.
    fn oracle_f1_all(preds: &[Vec<u8>], labels: &[Vec<u8>]) -> f64 {
        let (mut tp, mut fp, mut fnn) = (0i64, 0i64, 0i64);
        for i in 0..preds.len() {
            for j in 0..preds[i].len() {
                let p = preds[i][j] != 0;
                let l = labels[i][j] != 0;
                if p && l {
                    tp += 1;
                } else if p && !l {
                    fp += 1;
                } else if !p && l {
                    fnn += 1;
                }
            }
        }
        if 2 * tp + fp + fnn == 0 {
            return 0.0;
        }
        2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
    }

    fn oracle_m_f1(preds: &[Vec<u8>], labels: &[Vec<u8>]) -> (f64, Vec<f64>) {
        let c = preds[0].len();
        let mut per = vec![0.0; c];
        for (j, slot) in per.iter_mut().enumerate() {
            let col_p: Vec<Vec<u8>> = preds.iter().map(|row| vec![row[j]]).collect();
            let col_l: Vec<Vec<u8>> = labels.iter().map(|row| vec![row[j]]).collect();
            *slot = oracle_f1_all(&col_p, &col_l);
        }
        (per.iter().sum::<f64>() / c as f64, per)
    }

    #[test]
    fn f1_hand_examples() {
        assert_eq!(f1(5, 0, 0), 1.0);
        assert_eq!(f1(0, 3, 2), 0.0);
        assert_eq!(f1(0, 0, 0), 0.0, "zero denominator convention");
        assert!((f1(2, 1, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn confusion_counts_partition_samples() {
        let mut c = ConfusionCounts::default();
        for (p, l) in [(1, 1), (1, 0), (0, 1), (0, 0), (1, 1)] {
            c.observe(p, l);
        }
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 1, 1));
        assert_eq!(c.total(), 5);
    }

    #[test]
    fn perfect_and_complement_predictions() {
        let labels = vec![vec![1, 0, 1], vec![0, 0, 1]];
        assert_eq!(f1_all(&labels, &labels).unwrap(), 1.0);
        let complement: Vec<Vec<u8>> =
            labels.iter().map(|r| r.iter().map(|&b| 1 - b).collect()).collect();
        assert_eq!(f1_all(&complement, &labels).unwrap(), 0.0);
        // Class 1 never occurs, so it scores 0 by the zero-support
        // convention even under perfect prediction.
        let (m, per) = m_f1(&labels, &labels).unwrap();
        assert_eq!(per, vec![1.0, 0.0, 1.0]);
        assert!((m - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_support_class_scores_zero() {
        // One of 4 classes predicted perfectly; the other three have no
        // positives anywhere → each contributes 0, so mF1 = 1/4.
        let labels = vec![vec![1, 0, 0, 0], vec![1, 0, 0, 0]];
        let (m, per) = m_f1(&labels, &labels).unwrap();
        assert_eq!(per, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(m, 0.25, "the convention visibly lowers mF1");
        // Micro pooling is unaffected: every positive cell is a TP.
        assert_eq!(f1_all(&labels, &labels).unwrap(), 1.0);
    }

    #[test]
    fn aggregates_match_brute_force_oracle() {
        let mut r = rng(99);
        for case in 0..1000 {
            let n = r.gen_range(1..12);
            let c = if case % 2 == 0 { 4 } else { 21 };
            let density = r.gen_range(0.05..0.95);
            let preds = random_bits(&mut r, n, c, density);
            let labels = random_bits(&mut r, n, c, density);
            let micro = f1_all(&preds, &labels).unwrap();
            assert!((micro - oracle_f1_all(&preds, &labels)).abs() < 1e-12);
            let (macro_, per) = m_f1(&preds, &labels).unwrap();
            let (om, operclass) = oracle_m_f1(&preds, &labels);
            assert!((macro_ - om).abs() < 1e-12);
            for (a, b) in per.iter().zip(&operclass) {
                assert!((a - b).abs() < 1e-12);
            }
            let mean = per.iter().sum::<f64>() / c as f64;
            assert_eq!(macro_, mean, "mF1 is exactly the mean of its per-class array");
        }
    }

    #[test]
    fn metrics_are_invariant_to_sample_order() {
        let mut r = rng(7);
        let preds = random_bits(&mut r, 9, 21, 0.3);
        let labels = random_bits(&mut r, 9, 21, 0.3);
        let mut rp = preds.clone();
        let mut rl = labels.clone();
        rp.reverse();
        rl.reverse();
        assert_eq!(f1_all(&preds, &labels).unwrap(), f1_all(&rp, &rl).unwrap());
        assert_eq!(m_f1(&preds, &labels).unwrap(), m_f1(&rp, &rl).unwrap());
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let a = vec![vec![1, 0]];
        let b = vec![vec![1, 0], vec![0, 0]];
        assert!(f1_all(&a, &b).is_err());
        let ragged = vec![vec![1, 0], vec![1]];
        assert!(f1_all(&ragged, &ragged.clone()).is_err());
    }

    #[test]
    fn report_serializes_with_pinned_keys() {
        let labels = vec![vec![1, 0, 1, 0]];
        let expl = vec![vec![0; 21]];
        let report = report_from_bits(&labels, &labels, &expl, &expl).unwrap();
        // Struct serialization emits fields in declaration order; the
        // string is what lands in metrics.json, so pin the order there.
        let text = serde_json::to_string(&report).unwrap();
        let expected = [
            "decision_mF1",
            "decision_F1all",
            "explanation_mF1",
            "explanation_F1all",
            "per_class_decision_F1",
            "per_class_explanation_F1",
            "n_samples",
        ];
        let positions: Vec<usize> = expected
            .iter()
            .map(|k| text.find(&format!("\"{k}\":")).unwrap_or_else(|| panic!("missing key {k}")))
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "keys out of order in {text}");

        let json = serde_json::to_value(&report).unwrap();
        let obj = json.as_object().unwrap();
        assert_eq!(obj.len(), expected.len());
        assert_eq!(obj["per_class_decision_F1"].as_array().unwrap().len(), 4);
        assert_eq!(obj["per_class_explanation_F1"].as_array().unwrap().len(), 21);
        let back: EvalReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, report);
    }
}
