//! Detection and generation metrics.
//!
//! Classification scores are support-weighted over the true classes; a class
//! that is never predicted has precision 0. ROUGE scores are balanced
//! F-measures. BLEU is corpus-level with uniform weights, the standard
//! brevity penalty and no smoothing, so any zero n-gram precision gives 0.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    /// Not computed; kept so reports have a stable shape.
    pub meteor: Option<f64>,
    pub bertscore: Option<f64>,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn classification_report(preds: &[usize], labels: &[usize]) -> Result<ClassificationReport> {
    if preds.len() != labels.len() {
        return Err(Error::Invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::Invalid("classification_report needs at least one sample".into()));
    }
    let n = labels.len() as f64;
    let classes = preds.iter().chain(labels).max().copied().unwrap_or(0) + 1;
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        predicted[p] += 1;
        support[y] += 1;
        if p == y {
            tp[p] += 1;
        }
    }
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        if support[c] == 0 {
            continue;
        }
        let p = if predicted[c] > 0 { tp[c] as f64 / predicted[c] as f64 } else { 0.0 };
        let r = tp[c] as f64 / support[c] as f64;
        let w = support[c] as f64 / n;
        wp += w * p;
        wr += w * r;
        wf += w * f1(p, r);
    }
    let accuracy = tp.iter().sum::<usize>() as f64 / n;
    Ok(ClassificationReport { accuracy, weighted_precision: wp, weighted_recall: wr, weighted_f1: wf })
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if n >= 1 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// `(clipped overlap, candidate n-grams, reference n-grams)`
fn overlap(candidate: &[usize], reference: &[usize], n: usize) -> (usize, usize, usize) {
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let hits = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (hits, c.values().sum(), r.values().sum())
}

pub fn rouge_n(candidate: &[usize], reference: &[usize], n: usize) -> f64 {
    let (hits, c, r) = overlap(candidate, reference, n);
    if c == 0 || r == 0 {
        return 0.0;
    }
    f1(hits as f64 / c as f64, hits as f64 / r as f64)
}

pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &[usize], reference: &[usize]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    f1(l / candidate.len() as f64, l / reference.len() as f64)
}

pub fn bleu_n(candidates: &[Vec<usize>], references: &[Vec<usize>], n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!("{} candidates for {} references", candidates.len(), references.len())));
    }
    if n == 0 {
        return Err(Error::Invalid("BLEU order must be >= 1".into()));
    }
    let cand_len: usize = candidates.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (mut hits, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let (h, t, _) = overlap(c, r, order);
            hits += h;
            total += t;
        }
        if hits == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (hits as f64 / total as f64).ln();
    }
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

/// ROUGE averaged over pairs, BLEU over the corpus.
pub fn generation_report(candidates: &[Vec<usize>], references: &[Vec<usize>]) -> Result<GenerationReport> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::Invalid(format!(
            "generation_report needs aligned non-empty corpora ({} vs {})",
            candidates.len(),
            references.len()
        )));
    }
    let k = candidates.len() as f64;
    let avg = |f: &dyn Fn(&[usize], &[usize]) -> f64| candidates.iter().zip(references).map(|(c, r)| f(c, r)).sum::<f64>() / k;
    Ok(GenerationReport {
        rouge1: avg(&|c, r| rouge_n(c, r, 1)),
        rouge2: avg(&|c, r| rouge_n(c, r, 2)),
        rouge_l: avg(&rouge_l),
        bleu1: bleu_n(candidates, references, 1)?,
        bleu2: bleu_n(candidates, references, 2)?,
        bleu3: bleu_n(candidates, references, 3)?,
        bleu4: bleu_n(candidates, references, 4)?,
        meteor: None,
        bertscore: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const A: usize = 10;
    const B: usize = 11;
    const C: usize = 12;
    const D: usize = 13;

    #[test]
    fn perfect_predictions() {
        let r = classification_report(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!(r, ClassificationReport { accuracy: 1.0, weighted_precision: 1.0, weighted_recall: 1.0, weighted_f1: 1.0 });
    }

    #[test]
    fn half_right() {
        let r = classification_report(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        for v in [r.accuracy, r.weighted_precision, r.weighted_recall, r.weighted_f1] {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let r = classification_report(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert_abs_diff_eq!(r.weighted_precision, 0.5 * 0.5, epsilon = 1e-15);
        assert!(classification_report(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_n(&[A, B, C], &[A, B, C], 1), 1.0);
        assert_abs_diff_eq!(rouge_n(&[A, B, C], &[A, B, D], 1), 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(rouge_n(&[A, B], &[C, D], 1), 0.0);
        assert_eq!(rouge_n(&[A, B], &[A], 2), 0.0);
        assert_abs_diff_eq!(rouge_l(&[A, C, B], &[A, B, C]), 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(rouge_l(&[], &[A]), 0.0);
    }

    #[test]
    fn bleu_examples() {
        let same = vec![vec![A, B, C, D]];
        assert_abs_diff_eq!(bleu_n(&same, &same, 4).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bleu_n(&[vec![A, B, C]], &[vec![A, B, D]], 1).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        // candidate half the reference length, all unigrams matching
        let bp = (1.0f64 - 4.0 / 2.0).exp();
        assert_abs_diff_eq!(bleu_n(&[vec![A, B]], &[vec![A, B, C, D]], 1).unwrap(), bp, epsilon = 1e-12);
        assert_eq!(bleu_n(&[vec![]], &[vec![A]], 1).unwrap(), 0.0);
    }

    #[test]
    fn report_serializes_null_fields() {
        let r = generation_report(&[vec![A, B]], &[vec![A, B]]).unwrap();
        let json = serde_json::to_value(r).unwrap();
        assert!(json["meteor"].is_null() && json["bertscore"].is_null());
        assert_eq!(json["rougeL"], 1.0);
    }

    fn tokens() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0usize..6, 1..10)
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(c in tokens(), r in tokens()) {
            for v in [rouge_n(&c, &r, 1), rouge_n(&c, &r, 2), rouge_l(&c, &r), bleu_n(std::slice::from_ref(&c), std::slice::from_ref(&r), 2).unwrap()] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            prop_assert!((rouge_l(&c, &c) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn relabeling_tokens_changes_nothing(c in tokens(), r in tokens(), shift in 1usize..50) {
            let map = |v: &Vec<usize>| v.iter().map(|t| (t * 7 + shift) % 1000).collect::<Vec<_>>();
            prop_assert_eq!(rouge_n(&c, &r, 2), rouge_n(&map(&c), &map(&r), 2));
            prop_assert_eq!(rouge_l(&c, &r), rouge_l(&map(&c), &map(&r)));
            prop_assert_eq!(bleu_n(std::slice::from_ref(&c), std::slice::from_ref(&r), 2).unwrap(), bleu_n(&[map(&c)], &[map(&r)], 2).unwrap());
        }

        #[test]
        fn report_is_order_invariant(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..30)) {
            let (p, y): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let (rp, ry): (Vec<_>, Vec<_>) = pairs.iter().rev().copied().unzip();
            let a = classification_report(&p, &y).unwrap();
            let b = classification_report(&rp, &ry).unwrap();
            prop_assert!((a.weighted_f1 - b.weighted_f1).abs() < 1e-12 && a.accuracy == b.accuracy);
        }
    }
}
