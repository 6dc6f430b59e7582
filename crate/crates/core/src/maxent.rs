//! Predictive entropy and maximum-entropy fine-tuning.
//!
//! The fine-tuning objective over a batch is
//!
//! ```text
//! total = mean_{ID pixels} CE(z, y)  -  lambda * mean_{synthetic-OOD pixels} H(softmax(z))
//! ```
//!
//! where ID pixels are those with `synth_mask = 0` and a non-ignore label,
//! and `H` is the Shannon entropy in nats. Minimising `total` fits the
//! in-distribution labels while pushing predictions on blurred regions
//! towards the uniform distribution.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{ClassTaxonomy, LabeledImage};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, LabelMap, LogitsMap, ProbabilityMap};
use crate::nn::Tensor;
use crate::seg::{self, SegNet, SegmentationModel};
use crate::synth::SynthesizedSample;
use crate::train::{self, BatchLoss, FitParams};

/// Shannon entropy (nats) of one distribution, with `0 · ln 0 = 0`.
pub fn pixel_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * libm::log(v)).sum::<f64>()
}

/// Per-pixel entropy in nats; every value lies in `[0, ln K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap(pub Grid<f64>);

impl core::ops::Deref for EntropyMap {
    type Target = Grid<f64>;
    fn deref(&self) -> &Grid<f64> {
        &self.0
    }
}

pub fn entropy_map(probs: &ProbabilityMap) -> Result<EntropyMap> {
    probs.check_simplex(1e-4)?;
    let data = probs.iter_pixels().map(pixel_entropy).collect();
    Grid::from_vec(probs.height(), probs.width(), data).map(EntropyMap)
}

/// Supervision for one image: its labels and, for synthesized samples, the
/// mask of blurred pixels that count as synthetic OOD.
#[derive(Clone, Copy, Debug)]
pub struct LossTarget<'a> {
    pub labels: &'a LabelMap,
    pub synth_mask: Option<&'a BinaryMask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_term: f64,
    pub maxent_term: f64,
    pub total: f64,
    pub lambda: f64,
    pub ce_pixels: u64,
    pub ood_pixels: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxEntConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl MaxEntConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

pub fn maxent_loss(logits: &[LogitsMap], targets: &[LossTarget<'_>], lambda: f64, ignore_id: u8) -> Result<LossBreakdown> {
    evaluate(logits, targets, lambda, ignore_id, false).map(|(b, _)| b)
}

/// Loss plus its gradient with respect to every logit (pixel-major, one
/// vector per map).
pub fn maxent_loss_with_grad(
    logits: &[LogitsMap],
    targets: &[LossTarget<'_>],
    lambda: f64,
    ignore_id: u8,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    evaluate(logits, targets, lambda, ignore_id, true)
}

/// Plain cross-entropy averaged over labelled pixels.
pub fn masked_cross_entropy(logits: &[LogitsMap], labels: &[&LabelMap], ignore_id: u8) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::shape("one label map per logits map required"));
    }
    let mut sum = 0.0;
    let mut n = 0u64;
    let mut lse_buf = Vec::new();
    for (z, y) in logits.iter().zip(labels) {
        check_dims(z, y, None)?;
        lse_buf.resize(z.classes(), 0.0);
        for (i, zi) in z.iter_pixels().enumerate() {
            let label = y.as_slice()[i];
            if label == ignore_id {
                continue;
            }
            let class = class_index(label, z.classes())?;
            let lse = seg::softmax_pixel(zi, &mut lse_buf);
            sum += lse - zi[class];
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::DegenerateBatch("no labelled pixels".into()));
    }
    Ok(sum / n as f64)
}

fn class_index(label: u8, k: usize) -> Result<usize> {
    let c = usize::from(label);
    if c >= k {
        return Err(Error::Validation {
            sample: String::from("<batch>"),
            message: format!("label {label} outside the {k} model classes"),
        });
    }
    Ok(c)
}

fn check_dims(z: &LogitsMap, y: &LabelMap, mask: Option<&BinaryMask>) -> Result<()> {
    if z.dims() != y.dims() || mask.is_some_and(|m| m.dims() != y.dims()) {
        return Err(Error::shape(format!("logits {:?} do not match labels {:?}", z.dims(), y.dims())));
    }
    Ok(())
}

fn evaluate(
    logits: &[LogitsMap],
    targets: &[LossTarget<'_>],
    lambda: f64,
    ignore_id: u8,
    want_grad: bool,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    check_lambda(lambda)?;
    if logits.len() != targets.len() {
        return Err(Error::shape("one target per logits map required"));
    }
    let mut ce_sum = 0.0;
    let mut ent_sum = 0.0;
    let mut n_ce = 0u64;
    let mut n_ood = 0u64;
    let mut p = Vec::new();
    // First pass: sums and counts (gradients need the final counts).
    for (z, t) in logits.iter().zip(targets) {
        check_dims(z, t.labels, t.synth_mask)?;
        p.resize(z.classes(), 0.0);
        for (i, zi) in z.iter_pixels().enumerate() {
            if zi.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite logit at pixel {i}")));
            }
            let synthetic = t.synth_mask.is_some_and(|m| m.as_slice()[i] != 0);
            let label = t.labels.as_slice()[i];
            if synthetic {
                let lse = seg::softmax_pixel(zi, &mut p);
                ent_sum += entropy_from_log(&p, zi, lse);
                n_ood += 1;
            } else if label != ignore_id {
                let class = class_index(label, z.classes())?;
                let lse = seg::softmax_pixel(zi, &mut p);
                ce_sum += lse - zi[class];
                n_ce += 1;
            }
        }
    }
    if n_ce == 0 && n_ood == 0 {
        return Err(Error::DegenerateBatch("batch has no supervised pixels".into()));
    }
    let ce_term = if n_ce == 0 { 0.0 } else { ce_sum / n_ce as f64 };
    let maxent_term = if n_ood == 0 { 0.0 } else { ent_sum / n_ood as f64 };
    let breakdown = LossBreakdown {
        ce_term,
        maxent_term,
        total: ce_term - lambda * maxent_term,
        lambda,
        ce_pixels: n_ce,
        ood_pixels: n_ood,
    };
    if !want_grad {
        return Ok((breakdown, Vec::new()));
    }

    let ce_scale = if n_ce == 0 { 0.0 } else { 1.0 / n_ce as f64 };
    let ent_scale = if n_ood == 0 { 0.0 } else { lambda / n_ood as f64 };
    let mut grads = Vec::with_capacity(logits.len());
    for (z, t) in logits.iter().zip(targets) {
        let k = z.classes();
        let mut g = vec![0.0f64; z.as_slice().len()];
        p.resize(k, 0.0);
        for (i, zi) in z.iter_pixels().enumerate() {
            let gi = &mut g[i * k..(i + 1) * k];
            let synthetic = t.synth_mask.is_some_and(|m| m.as_slice()[i] != 0);
            let label = t.labels.as_slice()[i];
            if synthetic {
                // d(-lambda H / N)/dz_j = lambda p_j (ln p_j + H) / N
                let lse = seg::softmax_pixel(zi, &mut p);
                let h = entropy_from_log(&p, zi, lse);
                for j in 0..k {
                    gi[j] = ent_scale * p[j] * ((zi[j] - lse) + h);
                }
            } else if label != ignore_id {
                seg::softmax_pixel(zi, &mut p);
                let class = usize::from(label);
                for j in 0..k {
                    gi[j] = ce_scale * (p[j] - if j == class { 1.0 } else { 0.0 });
                }
            }
        }
        grads.push(g);
    }
    Ok((breakdown, grads))
}

/// `H = -Σ p_j log p_j` with `log p_j = z_j - lse`, finite even when `p_j` underflows.
fn entropy_from_log(p: &[f64], z: &[f64], lse: f64) -> f64 {
    -p.iter().zip(z).map(|(&pj, &zj)| pj * (zj - lse)).sum::<f64>()
}

/// Mean loss components of one fine-tuning epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochBreakdown {
    pub epoch: usize,
    pub ce_term: f64,
    pub maxent_term: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: SegNet,
    pub curve: Vec<EpochBreakdown>,
}

/// Fine-tunes every layer of `base` on the merged pool `d_id ∪ d_synth`.
///
/// Batches are drawn from one shuffled pool, so synthesized and original
/// samples interleave in proportion to their counts. Blurred pixels carry
/// no cross-entropy supervision; they only feed the entropy term. With an
/// empty `d_synth` this reduces to cross-entropy fine-tuning.
pub fn finetune(
    base: &SegNet,
    d_id: &[LabeledImage],
    d_synth: &[SynthesizedSample],
    config: &MaxEntConfig,
    taxonomy: &ClassTaxonomy,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if d_id.is_empty() && d_synth.is_empty() {
        return Err(Error::config("fine-tuning pool is empty"));
    }
    if d_synth.is_empty() {
        log::warn!("no synthetic OOD samples; MaxEnt fine-tuning reduces to cross-entropy fine-tuning");
    }
    if base.num_classes() != taxonomy.num_classes() {
        return Err(Error::Compatibility(format!(
            "model has {} classes, taxonomy has {}",
            base.num_classes(),
            taxonomy.num_classes()
        )));
    }

    let mut inputs: Vec<Tensor> = d_id.iter().map(|s| seg::image_to_tensor(&s.image)).collect();
    inputs.extend(d_synth.iter().map(|s| seg::image_to_tensor(&s.image)));
    let targets: Vec<LossTarget<'_>> = d_id
        .iter()
        .map(|s| LossTarget { labels: &s.label_map, synth_mask: None })
        .chain(d_synth.iter().map(|s| LossTarget { labels: &s.label_map, synth_mask: Some(&s.synth_ood_mask) }))
        .collect();

    let mut model = base.clone();
    let mut curve = Vec::new();
    let fit = FitParams { epochs: config.epochs, lr: config.lr, batch_size: config.batch_size, seed: config.seed };
    let lambda = config.lambda;
    let ignore = taxonomy.ignore_id;
    train::fit(
        model.network_mut(),
        &inputs,
        fit,
        |batch, outputs| {
            let logits: Vec<LogitsMap> = outputs.iter().map(seg::tensor_to_logits).collect();
            let batch_targets: Vec<LossTarget<'_>> = batch.iter().map(|&i| targets[i]).collect();
            match maxent_loss_with_grad(&logits, &batch_targets, lambda, ignore) {
                Ok((b, grads)) => Ok(Some(BatchLoss {
                    loss: b.total,
                    stats: b,
                    grads: outputs
                        .iter()
                        .zip(&grads)
                        .map(|(o, g)| seg::grad_to_tensor(o.channels, o.height, o.width, g))
                        .collect(),
                })),
                Err(Error::DegenerateBatch(_)) => Ok(None),
                Err(e) => Err(e),
            }
        },
        |epoch, _, stats| {
            let n = stats.len().max(1) as f64;
            let ce = stats.iter().map(|b| b.ce_term).sum::<f64>() / n;
            let me = stats.iter().map(|b| b.maxent_term).sum::<f64>() / n;
            curve.push(EpochBreakdown { epoch, ce_term: ce, maxent_term: me, total: ce - lambda * me });
            Ok(())
        },
    )?;
    Ok(FinetuneOutcome { model, curve })
}

/// Number of histogram bins used by [`FinetuneReport`].
pub const HISTOGRAM_BINS: usize = 50;

/// Counts of `values` in `bins` equal-width bins over `[0, max]`; values at
/// or beyond `max` land in the last bin.
pub fn histogram(values: &[f64], bins: usize, max: f64) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    if bins == 0 || max <= 0.0 {
        return counts;
    }
    for &v in values {
        let b = libm::floor((v / max) * bins as f64);
        let b = if b.is_nan() || b < 0.0 { 0 } else { (b as usize).min(bins - 1) };
        counts[b] += 1;
    }
    counts
}

/// Entropy (nats) of every labelled pixel of `samples`.
pub fn id_pixel_entropies(model: &dyn SegmentationModel, samples: &[LabeledImage], ignore_id: u8) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in samples {
        let ent = entropy_map(&seg::softmax(&model.forward(&s.image)?)?)?;
        out.extend(
            ent.as_slice().iter().zip(s.label_map.as_slice()).filter(|(_, &l)| l != ignore_id).map(|(&e, _)| e),
        );
    }
    Ok(out)
}

/// Entropy (nats) of every blurred pixel of `samples`.
pub fn synth_pixel_entropies(model: &dyn SegmentationModel, samples: &[SynthesizedSample]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in samples {
        let ent = entropy_map(&seg::softmax(&model.forward(&s.image)?)?)?;
        out.extend(
            ent.as_slice().iter().zip(s.synth_ood_mask.as_slice()).filter(|(_, &m)| m != 0).map(|(&e, _)| e),
        );
    }
    Ok(out)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Before/after comparison of a fine-tuning run (`finetune_report.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub lambda: f64,
    pub epochs: usize,
    pub max_entropy: f64,
    pub id_entropy_hist: Vec<u64>,
    pub ood_entropy_hist: Vec<u64>,
    pub base_id_entropy_hist: Vec<u64>,
    pub base_ood_entropy_hist: Vec<u64>,
    pub id_mean_entropy_before: f64,
    pub id_mean_entropy_after: f64,
    pub ood_mean_entropy_before: f64,
    pub ood_mean_entropy_after: f64,
    pub miou_before: f64,
    pub miou_after: f64,
}

/// Compares `base` and `tuned` on held-out ID images and held-out
/// synthesized samples.
pub fn finetune_report(
    base: &SegNet,
    tuned: &SegNet,
    id_eval: &[LabeledImage],
    ood_eval: &[SynthesizedSample],
    taxonomy: &ClassTaxonomy,
    config: &MaxEntConfig,
) -> Result<FinetuneReport> {
    let max = libm::log(taxonomy.num_classes() as f64);
    let ignore = taxonomy.ignore_id;
    let id_before = id_pixel_entropies(base, id_eval, ignore)?;
    let id_after = id_pixel_entropies(tuned, id_eval, ignore)?;
    let ood_before = synth_pixel_entropies(base, ood_eval)?;
    let ood_after = synth_pixel_entropies(tuned, ood_eval)?;
    let (_, miou_before) = seg::evaluate_segmentation(base, id_eval, taxonomy)?;
    let (_, miou_after) = seg::evaluate_segmentation(tuned, id_eval, taxonomy)?;
    Ok(FinetuneReport {
        lambda: config.lambda,
        epochs: config.epochs,
        max_entropy: max,
        id_entropy_hist: histogram(&id_after, HISTOGRAM_BINS, max),
        ood_entropy_hist: histogram(&ood_after, HISTOGRAM_BINS, max),
        base_id_entropy_hist: histogram(&id_before, HISTOGRAM_BINS, max),
        base_ood_entropy_hist: histogram(&ood_before, HISTOGRAM_BINS, max),
        id_mean_entropy_before: mean(&id_before),
        id_mean_entropy_after: mean(&id_after),
        ood_mean_entropy_before: mean(&ood_before),
        ood_mean_entropy_after: mean(&ood_after),
        miou_before,
        miou_after,
    })
}
