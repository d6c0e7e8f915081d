//! Binary classification metrics and contrasting-prompt inference.
//!
//! Conventions: AUROC credits ties with ½, an F1 with a zero denominator is 0,
//! and a sample is predicted positive when its score is strictly above `τ`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub score: f64,
    pub label: bool,
}

impl EvalRecord {
    pub fn new(score: f64, label: bool) -> Self {
        Self { score, label }
    }
}

fn class_counts(records: &[EvalRecord]) -> Result<(usize, usize)> {
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::Input(format!("non-finite score {}", r.score)));
    }
    let pos = records.iter().filter(|r| r.label).count();
    let neg = records.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

fn sorted_by_score(records: &[EvalRecord]) -> Vec<EvalRecord> {
    let mut v = records.to_vec();
    v.sort_by(|a, b| a.score.total_cmp(&b.score));
    v
}

/// `P(score_pos > score_neg) + ½·P(score_pos = score_neg)`.
pub fn auroc(records: &[EvalRecord]) -> Result<f64> {
    let (pos, neg) = class_counts(records)?;
    let sorted = sorted_by_score(records);
    // Count, for each positive, negatives strictly below plus half of tied ones.
    let mut neg_below = 0usize;
    let mut twice_wins = 0u128;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        let group_pos = sorted[i..j].iter().filter(|r| r.label).count();
        let group_neg = (j - i) - group_pos;
        twice_wins += (group_pos as u128) * (2 * neg_below as u128 + group_neg as u128);
        neg_below += group_neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

fn check_lengths(preds: &[bool], labels: &[bool]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Input("no predictions".into()));
    }
    Ok(())
}

fn f1_for(preds: &[bool], labels: &[bool], class: bool) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == class, l == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Support-weighted mean of the per-class F1 scores over `{false, true}`.
pub fn weighted_f1(preds: &[bool], labels: &[bool]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let n = labels.len() as f64;
    let n1 = labels.iter().filter(|&&l| l).count() as f64;
    let n0 = n - n1;
    Ok((n0 / n) * f1_for(preds, labels, false) + (n1 / n) * f1_for(preds, labels, true))
}

/// Unweighted mean of per-task scores.
pub fn macro_weighted_f1(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::Input("no tasks".into()));
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

pub fn accuracy(preds: &[bool], labels: &[bool]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn predict(records: &[EvalRecord], tau: f64) -> Vec<bool> {
    records.iter().map(|r| r.score > tau).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
    pub j: f64,
}

/// Threshold maximizing `J = TPR − FPR`.
///
/// Candidates are `−∞`, midpoints between adjacent distinct scores and `+∞`;
/// the smallest maximizing candidate wins.
pub fn youden_threshold(records: &[EvalRecord]) -> Result<Threshold> {
    let (pos, neg) = class_counts(records)?;
    let sorted = sorted_by_score(records);
    let (p, n) = (pos as f64, neg as f64);
    // At τ = −∞ every record is predicted positive.
    let mut tp = pos;
    let mut fp = neg;
    let mut best = Threshold {
        tau: f64::NEG_INFINITY,
        j: tp as f64 / p - fp as f64 / n,
    };
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].label {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        let tau = if i < sorted.len() {
            0.5 * (s + sorted[i].score)
        } else {
            f64::INFINITY
        };
        let j = tp as f64 / p - fp as f64 / n;
        if j > best.j {
            best = Threshold { tau, j };
        }
    }
    Ok(best)
}

fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (na, nb) = (a.norm(), b.norm());
    for n in [na, nb] {
        if n <= NORM_EPS {
            return Err(Error::DegenerateVector { norm: n, eps: NORM_EPS });
        }
    }
    Ok(a.dot(b)? / (na * nb))
}

/// `cos(v, t_pos) − cos(v, t_neg)` and whether it exceeds `tau`.
pub fn contrastive_predict(v: &Tensor, t_pos: &Tensor, t_neg: &Tensor, tau: f64) -> Result<(f64, bool)> {
    let score = cosine(v, t_pos)? - cosine(v, t_neg)?;
    Ok((score, score > tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" | "val" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!("unknown split '{s}'"))),
        }
    }
}

/// One labelled sample with its visual embedding and the two prompt embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub task: String,
    pub split: Split,
    pub vis: Vec<f64>,
    pub txt_pos: Vec<f64>,
    pub txt_neg: Vec<f64>,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: String,
    pub auroc: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub tau: f64,
}

/// Per-task metrics on the test split, thresholds fitted on `threshold_on`.
///
/// Tasks are reported in name order.
pub fn evaluate(records: &[EmbeddingRecord], threshold_on: Split) -> Result<Vec<MetricRow>> {
    let mut by_task: BTreeMap<&str, (Vec<EvalRecord>, Vec<EvalRecord>)> = BTreeMap::new();
    for r in records {
        let (score, _) = contrastive_predict(
            &Tensor::vector(r.vis.clone()),
            &Tensor::vector(r.txt_pos.clone()),
            &Tensor::vector(r.txt_neg.clone()),
            0.0,
        )?;
        let e = by_task.entry(&r.task).or_default();
        match r.split {
            Split::Validation => e.0.push(EvalRecord::new(score, r.label)),
            Split::Test => e.1.push(EvalRecord::new(score, r.label)),
        }
    }
    by_task
        .into_iter()
        .map(|(task, (val, test))| {
            let fit = match threshold_on {
                Split::Validation => &val,
                Split::Test => &test,
            };
            let tau = youden_threshold(fit)?.tau;
            let labels: Vec<bool> = test.iter().map(|r| r.label).collect();
            let preds = predict(&test, tau);
            Ok(MetricRow {
                task: task.to_string(),
                auroc: auroc(&test)?,
                weighted_f1: weighted_f1(&preds, &labels)?,
                accuracy: accuracy(&preds, &labels)?,
                tau,
            })
        })
        .collect()
}

/// Header plus one line per row, then a `macro` line averaging every column but `tau`.
pub fn metrics_csv(rows: &[MetricRow]) -> Result<String> {
    let mut s = String::from("task,auroc,weighted_f1,accuracy,tau\n");
    for r in rows {
        s += &format!("{},{},{},{},{}\n", r.task, r.auroc, r.weighted_f1, r.accuracy, r.tau);
    }
    let n = rows.len() as f64;
    let f1: Vec<f64> = rows.iter().map(|r| r.weighted_f1).collect();
    s += &format!(
        "macro,{},{},{},\n",
        rows.iter().map(|r| r.auroc).sum::<f64>() / n,
        macro_weighted_f1(&f1)?,
        rows.iter().map(|r| r.accuracy).sum::<f64>() / n
    );
    Ok(s)
}

/// Reference implementations by exhaustive enumeration, for cross-checking.
pub mod brute {
    use super::*;

    pub fn auroc(records: &[EvalRecord]) -> f64 {
        let pos: Vec<f64> = records.iter().filter(|r| r.label).map(|r| r.score).collect();
        let neg: Vec<f64> = records.iter().filter(|r| !r.label).map(|r| r.score).collect();
        let mut wins = 0.0;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    pub fn weighted_f1(preds: &[bool], labels: &[bool]) -> f64 {
        let n = labels.len() as f64;
        let mut total = 0.0;
        for class in [false, true] {
            let support = labels.iter().filter(|&&l| l == class).count() as f64;
            let tp = preds.iter().zip(labels).filter(|(&p, &l)| p == class && l == class).count() as f64;
            let pred_c = preds.iter().filter(|&&p| p == class).count() as f64;
            let precision = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
            let recall = if support > 0.0 { tp / support } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            total += support / n * f1;
        }
        total
    }

    /// Every candidate threshold, scored by counting directly.
    pub fn youden(records: &[EvalRecord]) -> Threshold {
        let mut scores: Vec<f64> = records.iter().map(|r| r.score).collect();
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        let mut cands = vec![f64::NEG_INFINITY];
        cands.extend(scores.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        cands.push(f64::INFINITY);
        let p = records.iter().filter(|r| r.label).count() as f64;
        let n = records.len() as f64 - p;
        let mut best = Threshold { tau: f64::NAN, j: f64::NEG_INFINITY };
        for tau in cands {
            let tp = records.iter().filter(|r| r.label && r.score > tau).count() as f64;
            let fp = records.iter().filter(|r| !r.label && r.score > tau).count() as f64;
            let j = tp / p - fp / n;
            if j > best.j {
                best = Threshold { tau, j };
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn recs(scores: &[f64], labels: &[u8]) -> Vec<EvalRecord> {
        scores.iter().zip(labels).map(|(&s, &l)| EvalRecord::new(s, l == 1)).collect()
    }

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&recs(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auroc(&recs(&[0.5; 4], &[0, 1, 0, 1])).unwrap(), 0.5);
        assert_eq!(auroc(&recs(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap(), 0.75);
        assert!(matches!(auroc(&recs(&[0.1, 0.2], &[1, 1])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn f1_and_accuracy_examples() {
        assert_eq!(weighted_f1(&b(&[1, 0, 1]), &b(&[1, 0, 1])).unwrap(), 1.0);
        assert_eq!(weighted_f1(&b(&[0, 1, 0, 1]), &b(&[1, 0, 1, 0])).unwrap(), 0.0);
        let f = weighted_f1(&b(&[1, 1, 0, 0]), &b(&[1, 0, 0, 0])).unwrap();
        assert!((f - (0.25 * 2.0 / 3.0 + 0.75 * 0.8)).abs() < 1e-15);
        assert!((f - 0.7667).abs() < 1e-4);
        assert!(weighted_f1(&b(&[1]), &b(&[1, 0])).is_err());
        assert!((macro_weighted_f1(&[0.5, 1.0]).unwrap() - 0.75).abs() < 1e-15);
        assert!(macro_weighted_f1(&[]).is_err());

        assert_eq!(accuracy(&b(&[1, 0]), &b(&[1, 0])).unwrap(), 1.0);
        assert_eq!(accuracy(&b(&[1, 0]), &b(&[0, 1])).unwrap(), 0.0);
        assert_eq!(accuracy(&b(&[1, 0, 1, 1]), &b(&[1, 0, 1, 0])).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn youden_examples() {
        let t = youden_threshold(&recs(&[0.1, 0.4, 0.6, 0.9], &[0, 0, 1, 1])).unwrap();
        assert_eq!(t.tau, 0.5);
        assert_eq!(t.j, 1.0);
        let t = youden_threshold(&recs(&[0.3; 4], &[0, 1, 0, 1])).unwrap();
        assert_eq!(t.j, 0.0);
        assert_eq!(t.tau, f64::NEG_INFINITY);
        let r = recs(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]);
        assert_eq!(youden_threshold(&r).unwrap(), brute::youden(&r));
        assert!(youden_threshold(&recs(&[0.1], &[0])).is_err());
    }

    #[test]
    fn contrastive_predict_examples() {
        let v = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let t = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let (s, p) = contrastive_predict(&v, &t, &t, 0.0).unwrap();
        assert_eq!(s, 0.0);
        assert!(!p);
        let e0 = Tensor::vector(vec![1.0, 0.0]);
        let e1 = Tensor::vector(vec![0.0, 1.0]);
        let (s, p) = contrastive_predict(&e0, &e0, &e1, 0.5).unwrap();
        assert!((s - 1.0).abs() < 1e-15 && p);
        let n = Tensor::vector(vec![-1.0, 0.5, 0.25]);
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let (s, _) = contrastive_predict(&v, &t, &n, 0.0).unwrap();
        assert!((s - (cos(v.data(), t.data()) - cos(v.data(), n.data()))).abs() < 1e-15);
        assert!(contrastive_predict(&Tensor::zeros(&[3]), &t, &n, 0.0).is_err());
    }

    #[test]
    fn evaluate_and_csv() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let pos = vec![1.0, 0.0, 0.0];
        let neg = vec![0.0, 1.0, 0.0];
        let mut records = Vec::new();
        for i in 0..40 {
            let label = i % 2 == 0;
            let base = if label { &pos } else { &neg };
            let vis: Vec<f64> = base.iter().map(|x| x + r.random_range(-0.4..0.4)).collect();
            records.push(EmbeddingRecord {
                task: if i % 4 < 2 { "b".into() } else { "a".into() },
                split: if i < 20 { Split::Validation } else { Split::Test },
                vis,
                txt_pos: pos.clone(),
                txt_neg: neg.clone(),
                label,
            });
        }
        let rows = evaluate(&records, Split::Validation).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].task, "a");
        assert!(rows.iter().all(|r| r.auroc == 1.0 && r.accuracy == 1.0));
        let csv = metrics_csv(&rows).unwrap();
        assert!(csv.starts_with("task,auroc,weighted_f1,accuracy,tau\n"));
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.ends_with("macro,1,1,1,\n"));
    }

    #[test]
    fn brute_force_agreement() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = r.random_range(2..=100);
            let levels = r.random_range(1..=20);
            let mut v: Vec<EvalRecord> = (0..n)
                .map(|_| EvalRecord::new(r.random_range(0..levels) as f64 / 7.0, r.random_bool(0.4)))
                .collect();
            v[0].label = true;
            v[1].label = false;
            assert!((auroc(&v).unwrap() - brute::auroc(&v)).abs() < 1e-12);
            let t = youden_threshold(&v).unwrap();
            let bt = brute::youden(&v);
            assert_eq!(t.j, bt.j);
            assert_eq!(t.tau, bt.tau);
            let preds = predict(&v, t.tau);
            let labels: Vec<bool> = v.iter().map(|x| x.label).collect();
            assert!((weighted_f1(&preds, &labels).unwrap() - brute::weighted_f1(&preds, &labels)).abs() < 1e-12);
        }
    }

    fn arb_records() -> impl Strategy<Value = Vec<EvalRecord>> {
        proptest::collection::vec((-10.0f64..10.0, any::<bool>()), 2..60).prop_map(|mut v| {
            v[0].1 = true;
            v[1].1 = false;
            v.into_iter().map(|(s, l)| EvalRecord::new(s, l)).collect()
        })
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_increasing_maps(v in arb_records(), a in 0.1f64..5.0, c in -3.0f64..3.0) {
            let base = auroc(&v).unwrap();
            let affine: Vec<_> = v.iter().map(|r| EvalRecord::new(a * r.score + c, r.label)).collect();
            let exp: Vec<_> = v.iter().map(|r| EvalRecord::new(r.score.exp(), r.label)).collect();
            prop_assert!((auroc(&affine).unwrap() - base).abs() < 1e-12);
            prop_assert!((auroc(&exp).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn auroc_label_flip(v in arb_records()) {
            let mut scores: Vec<f64> = v.iter().map(|r| r.score).collect();
            scores.sort_by(f64::total_cmp);
            scores.dedup();
            prop_assume!(scores.len() == v.len());
            let flipped: Vec<_> = v.iter().map(|r| EvalRecord::new(r.score, !r.label)).collect();
            prop_assert!((auroc(&flipped).unwrap() - (1.0 - auroc(&v).unwrap())).abs() < 1e-12);
        }

        #[test]
        fn youden_matches_scan_and_scores_bounded(v in arb_records(), tau in -10.0f64..10.0) {
            prop_assert_eq!(youden_threshold(&v).unwrap(), brute::youden(&v));
            let labels: Vec<bool> = v.iter().map(|r| r.label).collect();
            let preds = predict(&v, tau);
            let f = weighted_f1(&preds, &labels).unwrap();
            let acc = accuracy(&preds, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&f) && (0.0..=1.0).contains(&acc));
        }
    }
}
