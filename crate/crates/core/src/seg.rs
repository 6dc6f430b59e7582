//! The base segmentation network and its cross-entropy training.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{ClassTaxonomy, LabeledImage};
use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::grid::{LabelMap, LogitsMap, ProbabilityMap, RgbImage};
use crate::maxent::{self, LossTarget};
use crate::nn::{Tensor, UNet, UNetConfig};
use crate::train::{self, BatchLoss, FitParams};

/// Anything that maps an RGB image to per-pixel class scores.
///
/// The metacognitive network only ever sees the output of this trait, so
/// any backbone can be plugged in.
pub trait SegmentationModel {
    fn num_classes(&self) -> usize;

    fn forward(&self, image: &RgbImage) -> Result<LogitsMap>;

    fn forward_batch(&self, images: &[RgbImage]) -> Result<Vec<LogitsMap>> {
        images.iter().map(|img| self.forward(img)).collect()
    }
}

impl<T: SegmentationModel + ?Sized> SegmentationModel for &T {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn forward(&self, image: &RgbImage) -> Result<LogitsMap> {
        (**self).forward(image)
    }
}

impl<T: SegmentationModel + ?Sized> SegmentationModel for Box<T> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn forward(&self, image: &RgbImage) -> Result<LogitsMap> {
        (**self).forward(image)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegModelConfig {
    pub num_classes: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    pub depth: usize,
    pub base_width: usize,
    pub seed: u64,
}

fn default_input_channels() -> usize {
    3
}

impl SegModelConfig {
    fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.input_channels,
            out_channels: self.num_classes,
            depth: self.depth,
            base_width: self.base_width,
            seed: self.seed,
        }
    }
}

/// Compact U-shaped segmentation network.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    config: SegModelConfig,
    net: UNet,
}

impl SegNet {
    pub fn new(config: SegModelConfig) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::config("segmentation needs at least 2 classes"));
        }
        let net = UNet::new(config.unet())?;
        Ok(Self { config, net })
    }

    pub fn from_params(config: SegModelConfig, params: &[f32]) -> Result<Self> {
        let net = UNet::from_params(config.unet(), params)?;
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn params(&self) -> Vec<f32> {
        self.net.params()
    }

    pub fn network(&self) -> &UNet {
        &self.net
    }

    pub(crate) fn network_mut(&mut self) -> &mut UNet {
        &mut self.net
    }

    pub fn forward_tensor(&self, input: &Tensor) -> Result<LogitsMap> {
        let out = self.net.forward(input)?;
        Ok(tensor_to_logits(&out))
    }
}

impl SegmentationModel for SegNet {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn forward(&self, image: &RgbImage) -> Result<LogitsMap> {
        self.forward_tensor(&image_to_tensor(image))
    }
}

/// Scales 8-bit RGB to `[-1, 1]` in channel-major layout.
pub fn image_to_tensor(image: &RgbImage) -> Tensor {
    let (h, w) = image.dims();
    let mut t = Tensor::zeros(3, h, w);
    for (i, px) in image.as_raw().chunks_exact(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            t.data[c * h * w + i] = f32::from(v) / 127.5 - 1.0;
        }
    }
    t
}

/// Converts a `K × H × W` network output into a pixel-major logits map.
pub fn tensor_to_logits(t: &Tensor) -> LogitsMap {
    let (k, hw) = (t.channels, t.plane());
    let mut data = vec![0.0f64; k * hw];
    for c in 0..k {
        for (i, &v) in t.channel(c).iter().enumerate() {
            data[i * k + c] = f64::from(v);
        }
    }
    LogitsMap::from_vec(t.height, t.width, k, data).expect("sizes agree")
}

/// Converts a pixel-major gradient back to the network's layout.
pub(crate) fn grad_to_tensor(k: usize, h: usize, w: usize, grad: &[f64]) -> Tensor {
    let hw = h * w;
    let mut t = Tensor::zeros(k, h, w);
    for i in 0..hw {
        for c in 0..k {
            t.data[c * hw + i] = grad[i * k + c] as f32;
        }
    }
    t
}

/// Numerically stable softmax of one pixel into `out`; returns log-sum-exp.
pub fn softmax_pixel(z: &[f64], out: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = libm::exp(v - max);
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    max + libm::log(sum)
}

pub fn softmax(logits: &LogitsMap) -> Result<ProbabilityMap> {
    let k = logits.classes();
    let mut data = vec![0.0f64; logits.as_slice().len()];
    for (i, (z, out)) in logits.iter_pixels().zip(data.chunks_exact_mut(k)).enumerate() {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite logit at pixel {i}")));
        }
        softmax_pixel(z, out);
    }
    ProbabilityMap::from_vec(logits.height(), logits.width(), k, data)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel argmax class id.
pub fn predict_labels(probs: &ProbabilityMap) -> LabelMap {
    predict_from_class_map(probs)
}

/// Argmax straight from logits; agrees with `predict_labels(softmax(z))`.
pub fn predict_labels_from_logits(logits: &LogitsMap) -> LabelMap {
    predict_from_class_map(logits)
}

fn predict_from_class_map(map: &crate::grid::ClassMap) -> LabelMap {
    let data = map.iter_pixels().map(|p| argmax(p) as u8).collect();
    LabelMap::from_vec(map.height(), map.width(), data).expect("sizes agree")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// One row of a loss curve. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub miou: Option<f64>,
}

/// Masked cross-entropy and pooled mIoU of `model` over `samples`.
pub fn evaluate_segmentation(
    model: &dyn SegmentationModel,
    samples: &[LabeledImage],
    taxonomy: &ClassTaxonomy,
) -> Result<(f64, f64)> {
    let mut cm = ConfusionMatrix::new(taxonomy.num_classes());
    let mut ce_sum = 0.0;
    let mut n = 0u64;
    for s in samples {
        let logits = model.forward(&s.image)?;
        let breakdown = maxent::maxent_loss(
            core::slice::from_ref(&logits),
            &[LossTarget { labels: &s.label_map, synth_mask: None }],
            0.0,
            taxonomy.ignore_id,
        );
        match breakdown {
            Ok(b) => {
                ce_sum += b.ce_term * b.ce_pixels as f64;
                n += b.ce_pixels;
            }
            Err(Error::DegenerateBatch(_)) => {}
            Err(e) => return Err(e),
        }
        cm.accumulate(&predict_labels_from_logits(&logits), &s.label_map, taxonomy.ignore_id)?;
    }
    let loss = if n == 0 { 0.0 } else { ce_sum / n as f64 };
    Ok((loss, cm.miou()))
}

/// Trains `model` with masked cross-entropy (ignore pixels excluded).
///
/// The returned curve holds a `train` row per epoch (mean batch loss) and,
/// when `val` is non-empty, a `val` row with loss and mIoU.
pub fn train_segmentation(
    model: &mut SegNet,
    train: &[LabeledImage],
    val: &[LabeledImage],
    taxonomy: &ClassTaxonomy,
    params: TrainParams,
) -> Result<Vec<CurvePoint>> {
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if taxonomy.num_classes() != model.num_classes() {
        return Err(Error::Compatibility(format!(
            "model has {} classes, taxonomy has {}",
            model.num_classes(),
            taxonomy.num_classes()
        )));
    }
    for s in train {
        s.validate(taxonomy)?;
    }
    let mut curve = Vec::new();
    record_eval(&mut curve, 0, model, train, val, taxonomy)?;

    let inputs: Vec<Tensor> = train.iter().map(|s| image_to_tensor(&s.image)).collect();
    let ignore = taxonomy.ignore_id;
    let fit = FitParams { epochs: params.epochs, lr: params.lr, batch_size: params.batch_size, seed: params.seed };
    let mut snapshot = model.clone();
    train::fit(
        model.network_mut(),
        &inputs,
        fit,
        |batch, outputs| {
            let logits: Vec<LogitsMap> = outputs.iter().map(tensor_to_logits).collect();
            let targets: Vec<LossTarget<'_>> =
                batch.iter().map(|&i| LossTarget { labels: &train[i].label_map, synth_mask: None }).collect();
            match maxent::maxent_loss_with_grad(&logits, &targets, 0.0, ignore) {
                Ok((b, grads)) => Ok(Some(BatchLoss {
                    loss: b.total,
                    stats: b.total,
                    grads: outputs
                        .iter()
                        .zip(&grads)
                        .map(|(o, g)| grad_to_tensor(o.channels, o.height, o.width, g))
                        .collect(),
                })),
                Err(Error::DegenerateBatch(_)) => Ok(None),
                Err(e) => Err(e),
            }
        },
        |epoch, net, losses| {
            let mean = if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 };
            curve.push(CurvePoint { epoch, split: "train".into(), loss: mean, miou: None });
            if !val.is_empty() {
                snapshot.net = net.clone();
                let (loss, miou) = evaluate_segmentation(&snapshot, val, taxonomy)?;
                curve.push(CurvePoint { epoch, split: "val".into(), loss, miou: Some(miou) });
            }
            Ok(())
        },
    )?;
    Ok(curve)
}

fn record_eval(
    curve: &mut Vec<CurvePoint>,
    epoch: usize,
    model: &SegNet,
    train: &[LabeledImage],
    val: &[LabeledImage],
    taxonomy: &ClassTaxonomy,
) -> Result<()> {
    let (loss, miou) = evaluate_segmentation(model, train, taxonomy)?;
    curve.push(CurvePoint { epoch, split: "train".into(), loss, miou: Some(miou) });
    if !val.is_empty() {
        let (loss, miou) = evaluate_segmentation(model, val, taxonomy)?;
        curve.push(CurvePoint { epoch, split: "val".into(), loss, miou: Some(miou) });
    }
    Ok(())
}
