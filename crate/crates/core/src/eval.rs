//! Classification metrics, ROC/AUC and energy anomaly statistics.

use std::io::Write;

use serde::Serialize;

use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_ENERGY_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaskMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the labels hold a single class.
    pub auc: Option<f64>,
    pub threshold: f64,
    pub confusion: Confusion,
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidInput(
            "metrics need at least one sample".into(),
        ));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    Ok(())
}

/// Positive iff `score >= threshold`. Precision is 0 when nothing is
/// predicted positive and recall is 0 when no label is positive.
pub fn confusion_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<TaskMetrics> {
    check_inputs(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(TaskMetrics {
        precision,
        recall,
        f1,
        auc: None,
        threshold,
        confusion: c,
    })
}

/// One ROC vertex: predicting positive at `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub auc: f64,
    /// Starts at `(0, 0, +inf)` and ends at `(1, 1, min score)`.
    pub points: Vec<RocPoint>,
}

fn class_counts(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|y| **y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Estimation(format!(
            "AUC is undefined with {pos} positive and {neg} negative labels"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC with midranks for tied scores.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += midrank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC vertices at every distinct score, plus the AUC.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Roc> {
    let area = auc(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        });
    }
    Ok(Roc { auc: area, points })
}

/// Confusion metrics at `threshold` plus AUC when both classes occur.
pub fn task_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<TaskMetrics> {
    let mut m = confusion_metrics(scores, labels, threshold)?;
    m.auc = match auc(scores, labels) {
        Ok(a) => Some(a),
        Err(Error::Estimation(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(m)
}

/// Threshold among the observed scores maximising F1; ties go to the
/// higher threshold.
pub fn best_f1_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, DEFAULT_THRESHOLD);
    for t in candidates {
        let f1 = confusion_metrics(scores, labels, t)?.f1;
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    Ok(best.1)
}

pub fn write_roc<W: Write>(roc: &Roc, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Parse(format!("writing ROC table: {e}"));
    w.write_record(["fpr", "tpr", "threshold"]).map_err(err)?;
    for p in &roc.points {
        w.write_record([
            p.fpr.to_string(),
            p.tpr.to_string(),
            p.threshold.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::Parse(format!("writing ROC table: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassStats {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Members with `E > threshold`.
    pub flagged: usize,
}

impl ClassStats {
    pub fn flagged_fraction(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.flagged as f64 / self.n as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyReport {
    pub threshold: f64,
    pub normal: ClassStats,
    pub anomalous: ClassStats,
    pub flagged: usize,
    /// `(mean_anom - mean_norm) / pooled std`; NaN when a class is empty or
    /// both are constant.
    pub separation: f64,
}

fn class_stats(values: impl Iterator<Item = f64>, threshold: f64) -> ClassStats {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    if n == 0 {
        return ClassStats {
            n,
            mean: f64::NAN,
            std: f64::NAN,
            flagged: 0,
        };
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    ClassStats {
        n,
        mean,
        std: var.sqrt(),
        flagged: v.iter().filter(|x| **x > threshold).count(),
    }
}

pub fn energy_separation(
    energies: &[f64],
    anomalous: &[bool],
    threshold: f64,
) -> Result<EnergyReport> {
    check_inputs(energies, anomalous)?;
    let pick = |want: bool| {
        energies
            .iter()
            .zip(anomalous)
            .filter(move |(_, a)| **a == want)
            .map(|(e, _)| *e)
    };
    let normal = class_stats(pick(false), threshold);
    let anom = class_stats(pick(true), threshold);
    let pooled = if normal.n + anom.n > 2 && normal.n > 0 && anom.n > 0 {
        let ss = normal.std.powi(2) * normal.n as f64 + anom.std.powi(2) * anom.n as f64;
        (ss / (normal.n + anom.n - 2) as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(EnergyReport {
        threshold,
        normal,
        anomalous: anom,
        flagged: normal.flagged + anom.flagged,
        separation: (anom.mean - normal.mean) / pooled,
    })
}
