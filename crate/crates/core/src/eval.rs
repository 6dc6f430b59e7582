//! OOD scores and evaluation metrics.
//!
//! AUPRC and FPR-95 treat OOD as the positive class and are computed over
//! pixels pooled across a whole split. Both sweep thresholds over the
//! distinct scores in descending order, grouping ties at one threshold.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{ClassTaxonomy, OOD_MAP_ID, OOD_MAP_OOD};
use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap, ProbabilityMap};
use crate::maxent::{entropy_map, pixel_entropy};

/// Per-pixel OOD score; higher means more likely OOD.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap(pub Grid<f64>);

impl core::ops::Deref for ScoreMap {
    type Target = Grid<f64>;
    fn deref(&self) -> &Grid<f64> {
        &self.0
    }
}

pub fn score_entropy(probs: &ProbabilityMap) -> Result<ScoreMap> {
    Ok(ScoreMap(entropy_map(probs)?.0))
}

/// `1 - max_k p_k`.
pub fn score_softmax(probs: &ProbabilityMap) -> Result<ScoreMap> {
    probs.check_simplex(1e-4)?;
    let data = probs.iter_pixels().map(|p| 1.0 - p.iter().copied().fold(0.0, f64::max)).collect();
    Grid::from_vec(probs.height(), probs.width(), data).map(ScoreMap)
}

/// Per-pixel average of the members' distributions.
pub fn mean_distribution(members: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    let first = members.first().ok_or_else(|| Error::config("ensemble has no members"))?;
    let mut data = vec![0.0f64; first.as_slice().len()];
    for m in members {
        if (m.height(), m.width(), m.classes()) != (first.height(), first.width(), first.classes()) {
            return Err(Error::shape("ensemble members disagree in shape"));
        }
        data.iter_mut().zip(m.as_slice()).for_each(|(d, &v)| *d += v);
    }
    let n = members.len() as f64;
    data.iter_mut().for_each(|d| *d /= n);
    ProbabilityMap::from_vec(first.height(), first.width(), first.classes(), data)
}

/// Entropy of the members' mean distribution.
pub fn score_ensemble(members: &[ProbabilityMap]) -> Result<ScoreMap> {
    if members.len() < 2 {
        return Err(Error::config(format!("ensemble needs at least 2 members, got {}", members.len())));
    }
    let mean = mean_distribution(members)?;
    mean.check_simplex(1e-4)?;
    let data = mean.iter_pixels().map(pixel_entropy).collect();
    Grid::from_vec(mean.height(), mean.width(), data).map(ScoreMap)
}

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let mut pos = 0u64;
    let mut neg = 0u64;
    for (&s, &l) in scores.iter().zip(labels) {
        if !s.is_finite() {
            return Err(Error::numeric(format!("non-finite score {s}")));
        }
        match l {
            0 => neg += 1,
            1 => pos += 1,
            other => return Err(Error::shape(format!("label {other} is not binary"))),
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined(format!(
            "need both classes present, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// `(tp, fp)` after each distinct threshold, scanning scores from high to low.
fn threshold_sweep(scores: &[f64], labels: &[u8]) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

/// Average precision: `Σ_n (R_n − R_{n−1}) · P_n` over descending thresholds.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in threshold_sweep(scores, labels) {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// False-positive rate at the highest threshold whose TPR reaches `tpr`.
pub fn fpr_at_tpr(scores: &[f64], labels: &[u8], tpr: f64) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    for (tp, fp) in threshold_sweep(scores, labels) {
        if tp as f64 / pos as f64 >= tpr {
            return Ok(fp as f64 / neg as f64);
        }
    }
    Ok(1.0)
}

pub fn fpr_at_95_tpr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    fpr_at_tpr(scores, labels, 0.95)
}

/// `(recall, precision)` after each distinct threshold.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, _) = check_binary(scores, labels)?;
    Ok(threshold_sweep(scores, labels)
        .into_iter()
        .map(|(tp, fp)| (tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64))
        .collect())
}

/// Scores and binary labels pooled over many images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelPool {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl PixelPool {
    /// Adds every pixel whose OOD label is 0 or 1; anything else (ignore) is skipped.
    pub fn add(&mut self, scores: &ScoreMap, ood_labels: &Grid<u8>) -> Result<()> {
        if scores.dims() != ood_labels.dims() {
            return Err(Error::shape(format!("scores {:?} vs labels {:?}", scores.dims(), ood_labels.dims())));
        }
        for (&s, &l) in scores.as_slice().iter().zip(ood_labels.as_slice()) {
            if l == OOD_MAP_ID || l == OOD_MAP_OOD {
                self.scores.push(s);
                self.labels.push(l);
            }
        }
        Ok(())
    }

    pub fn auprc(&self) -> Result<f64> {
        auprc(&self.scores, &self.labels)
    }

    pub fn fpr95(&self) -> Result<f64> {
        fpr_at_95_tpr(&self.scores, &self.labels)
    }
}

/// Converts a label map that marks OOD pixels with `ood_id` into 0/1/ignore labels.
pub fn eval_labels_from_label_map(labels: &LabelMap, taxonomy: &ClassTaxonomy) -> Grid<u8> {
    labels.map(|v| {
        if v == taxonomy.ood_id {
            OOD_MAP_OOD
        } else if v == taxonomy.ignore_id {
            taxonomy.ignore_id
        } else {
            OOD_MAP_ID
        }
    })
}

/// `K × K` confusion counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    /// Counts every pixel whose ground truth is a class (ignore pixels skipped).
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore_id: u8) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
        }
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            if g == ignore_id || usize::from(g) >= self.classes {
                continue;
            }
            let p = usize::from(p);
            if p >= self.classes {
                return Err(Error::shape(format!("predicted class {p} out of range")));
            }
            self.counts[usize::from(g) * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// IoU per class; `None` for classes absent from both prediction and truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let fp: u64 = (0..self.classes).filter(|&g| g != c).map(|g| self.get(g, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in ground truth or prediction.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

pub fn miou(pred: &LabelMap, gt: &LabelMap, taxonomy: &ClassTaxonomy) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(taxonomy.num_classes());
    cm.accumulate(pred, gt, taxonomy.ignore_id)?;
    Ok(cm.miou())
}

/// Mean with sample standard deviation (present only for two or more values).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
}

impl MeanStd {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: None };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            libm::sqrt(var)
        });
        Self { mean, std }
    }
}

/// Metrics of one method for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub auprc: f64,
    pub fpr95: f64,
    pub val_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub auprc: MeanStd,
    pub fpr95: MeanStd,
    pub val_miou: MeanStd,
}

/// `report.json` contents for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub metrics: AggregateMetrics,
    pub per_seed: Vec<SeedMetrics>,
    /// How pixels were pooled for AUPRC / FPR-95.
    pub pooling: String,
    /// Relative path of the timing report, if one was produced.
    pub timing: Option<String>,
    pub config_hash: String,
}

/// Pixel pooling convention recorded in every report.
pub const POOLING: &str = "global: all non-ignore pixels of the split pooled per seed";

impl MetricsReport {
    pub fn from_seed_metrics(
        method: impl Into<String>,
        dataset: impl Into<String>,
        per_seed: Vec<SeedMetrics>,
        config_hash: impl Into<String>,
    ) -> Self {
        let pick = |f: fn(&SeedMetrics) -> f64| MeanStd::from_values(&per_seed.iter().map(f).collect::<Vec<_>>());
        Self {
            method: method.into(),
            dataset: dataset.into(),
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            metrics: AggregateMetrics {
                auprc: pick(|s| s.auprc),
                fpr95: pick(|s| s.fpr95),
                val_miou: pick(|s| s.val_miou),
            },
            per_seed,
            pooling: POOLING.into(),
            timing: None,
            config_hash: config_hash.into(),
        }
    }
}

/// Two-sample Kolmogorov–Smirnov test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Statistic plus the asymptotic p-value `Q_KS((√n_e + 0.12 + 0.11/√n_e) D)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::MetricUndefined("KS test needs two non-empty samples".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < x.len() && j < y.len() {
        let v = if x[i] <= y[j] { x[i] } else { y[j] };
        while i < x.len() && x[i] == v {
            i += 1;
        }
        while j < y.len() && y[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = n * m / (n + m);
    let sq = libm::sqrt(ne);
    let lambda = (sq + 0.12 + 0.11 / sq) * d;
    Ok(KsResult { statistic: d, p_value: kolmogorov_q(lambda) })
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = sign * libm::exp(-2.0 * kf * kf * lambda * lambda);
        sum += term;
        if term.abs() < 1e-12 * sum.abs().max(1e-300) {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
