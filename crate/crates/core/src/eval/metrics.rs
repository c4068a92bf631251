//! Classification metrics over probability matrices.

use serde::{Deserialize, Serialize};

use crate::error::{CmglError, Result};
use crate::tape::Mat;

/// Serialises `None` as the string `"NA"`.
mod na {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Marker(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => Repr::Value(*x),
            None => Repr::Marker("NA".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(x) => Ok(Some(x)),
            Repr::Marker(m) if m == "NA" => Ok(None),
            Repr::Marker(m) => Err(serde::de::Error::custom(format!("expected a number or NA, got {m}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(with = "na")]
    pub auc: Option<f64>,
    #[serde(with = "na")]
    pub auprc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub macro_recall: f64,
    #[serde(with = "na")]
    pub macro_auc: Option<f64>,
    #[serde(with = "na")]
    pub macro_auprc: Option<f64>,
    pub n_eval: usize,
    /// Classes with no evaluation samples, left out of the macro means.
    pub skipped_classes: Vec<usize>,
    pub per_class: Vec<ClassMetrics>,
}

/// Row-wise argmax; ties go to the smaller index.
pub fn argmax_rows(scores: &Mat) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 for class `c`.
fn prf(pred: &[usize], labels: &[usize], c: usize) -> (f64, f64, f64) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (&p, &y) in pred.iter().zip(labels) {
        match (p == c, y == c) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Macro-F1 over classes present in `labels`.
pub fn macro_f1(pred: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let present: Vec<usize> = (0..num_classes).filter(|c| labels.contains(c)).collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().map(|&c| prf(pred, labels, c).2).sum::<f64>() / present.len() as f64
}

/// Mann-Whitney AUC with midranks. `None` unless both outcomes occur.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Average precision with one operating point per distinct score.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 || n_pos == positive.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| positive[k]).count();
        seen += j - i + 1;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        i = j + 1;
    }
    Some(ap)
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn compute_metrics(probs: &Mat, labels: &[usize]) -> Result<MetricsReport> {
    let (n, c) = probs.dim();
    if n != labels.len() || n == 0 {
        return Err(CmglError::Shape(format!("{n} probability rows for {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(CmglError::Domain(format!("label {bad} outside {c} classes")));
    }
    let pred = argmax_rows(probs);
    let accuracy = ratio(pred.iter().zip(labels).filter(|(p, y)| p == y).count(), n);

    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for class in 0..c {
        let support = labels.iter().filter(|&&y| y == class).count();
        if support == 0 {
            skipped.push(class);
            continue;
        }
        let (precision, recall, f1) = prf(&pred, labels, class);
        let scores: Vec<f64> = probs.column(class).to_vec();
        let positive: Vec<bool> = labels.iter().map(|&y| y == class).collect();
        per_class.push(ClassMetrics {
            class,
            support,
            precision,
            recall,
            f1,
            auc: binary_auc(&scores, &positive),
            auprc: average_precision(&scores, &positive),
        });
    }
    let k = per_class.len() as f64;
    Ok(MetricsReport {
        accuracy,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
        weighted_f1: per_class.iter().map(|m| m.f1 * m.support as f64).sum::<f64>() / n as f64,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        macro_auc: mean_defined(per_class.iter().map(|m| m.auc)),
        macro_auprc: mean_defined(per_class.iter().map(|m| m.auprc)),
        n_eval: n,
        skipped_classes: skipped,
        per_class,
    })
}
