//! The metacognitive network.
//!
//! A small U-Net that looks only at what the segmentation backbone said (its
//! predicted class and its predictive entropy, stacked channel-wise with
//! the spatial layout intact) and predicts, per pixel, how likely that
//! prediction is wrong. It is trained with binary cross-entropy against
//! "prediction != ground truth" targets on in-distribution images; at test
//! time its soft mask serves as the OOD score.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, LabelMap, ProbabilityMap, RgbImage};
use crate::maxent::entropy_map;
use crate::nn::{Tensor, UNet, UNetConfig};
use crate::rng;
use crate::seg::{self, SegmentationModel};
use crate::train::{self, BatchLoss, FitParams};

/// How the predicted class enters the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassEncoding {
    /// One channel holding `class / (K - 1)`.
    #[default]
    Scaled,
    /// `K` indicator channels.
    OneHot,
}

/// How the entropy channel is scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyScaling {
    /// Divided by `ln K`, so it lies in `[0, 1]`.
    #[default]
    Normalized,
    /// Raw nats.
    RawNats,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetacogModelConfig {
    pub depth: usize,
    pub base_width: usize,
    pub seed: u64,
    #[serde(default)]
    pub class_encoding: ClassEncoding,
    #[serde(default)]
    pub entropy_scaling: EntropyScaling,
}

impl MetacogModelConfig {
    pub fn input_channels(&self, num_classes: usize) -> usize {
        match self.class_encoding {
            ClassEncoding::Scaled => 2,
            ClassEncoding::OneHot => num_classes + 1,
        }
    }
}

/// The stacked `[class, entropy]` input, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MetacogInput(pub Tensor);

impl core::ops::Deref for MetacogInput {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        &self.0
    }
}

/// Builds the default two-channel input: `argmax / (K-1)` and `entropy / ln K`.
pub fn build_metacog_input(probs: &ProbabilityMap) -> Result<MetacogInput> {
    build_metacog_input_with(probs, ClassEncoding::Scaled, EntropyScaling::Normalized)
}

pub fn build_metacog_input_with(
    probs: &ProbabilityMap,
    encoding: ClassEncoding,
    scaling: EntropyScaling,
) -> Result<MetacogInput> {
    let k = probs.classes();
    if k < 2 {
        return Err(Error::config("metacognitive input needs K >= 2 classes"));
    }
    let (h, w) = probs.dims();
    let hw = h * w;
    let labels = seg::predict_labels(probs);
    let entropy = entropy_map(probs)?;
    let ent_scale = match scaling {
        EntropyScaling::Normalized => 1.0 / libm::log(k as f64),
        EntropyScaling::RawNats => 1.0,
    };
    let class_channels = match encoding {
        ClassEncoding::Scaled => 1,
        ClassEncoding::OneHot => k,
    };
    let mut t = Tensor::zeros(class_channels + 1, h, w);
    for i in 0..hw {
        let class = usize::from(labels.as_slice()[i]);
        match encoding {
            ClassEncoding::Scaled => t.data[i] = (class as f64 / (k - 1) as f64) as f32,
            ClassEncoding::OneHot => t.data[class * hw + i] = 1.0,
        }
        let e = (entropy.as_slice()[i] * ent_scale) as f32;
        t.data[class_channels * hw + i] = match scaling {
            EntropyScaling::Normalized => e.clamp(0.0, 1.0),
            EntropyScaling::RawNats => e,
        };
    }
    Ok(MetacogInput(t))
}

/// Correct/incorrect targets: 1 where the prediction differs from a
/// non-ignore label, 0 elsewhere. `loss_mask` is 0 on ignore pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct MetacogTarget {
    pub target: BinaryMask,
    pub loss_mask: BinaryMask,
}

impl MetacogTarget {
    pub fn supervised_pixels(&self) -> usize {
        self.loss_mask.as_slice().iter().filter(|&&m| m != 0).count()
    }
}

pub fn build_target_mask(pred: &LabelMap, gt: &LabelMap, ignore_id: u8) -> Result<MetacogTarget> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let (h, w) = gt.dims();
    let mut target = BinaryMask::filled(h, w, 0);
    let mut loss_mask = BinaryMask::filled(h, w, 0);
    for (i, (&p, &g)) in pred.as_slice().iter().zip(gt.as_slice()).enumerate() {
        if g != ignore_id {
            loss_mask.as_mut_slice()[i] = 1;
            target.as_mut_slice()[i] = u8::from(p != g);
        }
    }
    Ok(MetacogTarget { target, loss_mask })
}

/// Per-pixel probability in `[0, 1]` that the segmentation is wrong / OOD.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftOodMask(pub Grid<f64>);

impl core::ops::Deref for SoftOodMask {
    type Target = Grid<f64>;
    fn deref(&self) -> &Grid<f64> {
        &self.0
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetacogNet {
    config: MetacogModelConfig,
    num_classes: usize,
    net: UNet,
}

impl MetacogNet {
    pub fn new(config: MetacogModelConfig, num_classes: usize) -> Result<Self> {
        let net = UNet::new(Self::unet(&config, num_classes)?)?;
        Ok(Self { config, num_classes, net })
    }

    pub fn from_params(config: MetacogModelConfig, num_classes: usize, params: &[f32]) -> Result<Self> {
        let net = UNet::from_params(Self::unet(&config, num_classes)?, params)?;
        Ok(Self { config, num_classes, net })
    }

    fn unet(config: &MetacogModelConfig, num_classes: usize) -> Result<UNetConfig> {
        if num_classes < 2 {
            return Err(Error::config("metacognitive network needs K >= 2 classes"));
        }
        Ok(UNetConfig {
            in_channels: config.input_channels(num_classes),
            out_channels: 1,
            depth: config.depth,
            base_width: config.base_width,
            seed: config.seed,
        })
    }

    pub fn config(&self) -> &MetacogModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> Vec<f32> {
        self.net.params()
    }

    pub fn network(&self) -> &UNet {
        &self.net
    }

    /// Input for this network's configured encoding.
    pub fn input_for(&self, probs: &ProbabilityMap) -> Result<MetacogInput> {
        if probs.classes() != self.num_classes {
            return Err(Error::Compatibility(format!(
                "metacognitive network expects {} classes, backbone produced {}",
                self.num_classes,
                probs.classes()
            )));
        }
        build_metacog_input_with(probs, self.config.class_encoding, self.config.entropy_scaling)
    }

    pub fn forward(&self, input: &MetacogInput) -> Result<SoftOodMask> {
        let out = self.net.forward(input)?;
        let data = out.data.iter().map(|&z| sigmoid(f64::from(z))).collect();
        Grid::from_vec(out.height, out.width, data).map(SoftOodMask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetacogTrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Number of training images drawn (all of them if fewer).
    pub subset_size: usize,
    pub seed: u64,
}

/// One training example for the metacognitive network.
#[derive(Clone, Debug, PartialEq)]
pub struct MetacogExample {
    pub input: MetacogInput,
    pub target: MetacogTarget,
}

/// Mean masked binary cross-entropy over a batch of raw network outputs,
/// with its gradient. Pixels with `loss_mask = 0` get exactly zero gradient.
pub fn masked_bce_with_grad(outputs: &[Tensor], targets: &[&MetacogTarget]) -> Result<(f64, Vec<Tensor>)> {
    if outputs.len() != targets.len() {
        return Err(Error::shape("one target per output required"));
    }
    let mut n = 0u64;
    let mut sum = 0.0;
    for (o, t) in outputs.iter().zip(targets) {
        if o.channels != 1 || (o.height, o.width) != t.target.dims() {
            return Err(Error::shape("metacognitive output does not match its target"));
        }
        for ((&z, &y), &m) in o.data.iter().zip(t.target.as_slice()).zip(t.loss_mask.as_slice()) {
            if m != 0 {
                let z = f64::from(z);
                // softplus(z) - y z, stable form
                sum += z.max(0.0) - f64::from(y) * z + libm::log1p(libm::exp(-z.abs()));
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::DegenerateBatch("no supervised pixels in metacognitive batch".into()));
    }
    let scale = 1.0 / n as f64;
    let grads = outputs
        .iter()
        .zip(targets)
        .map(|(o, t)| {
            let data = o
                .data
                .iter()
                .zip(t.target.as_slice())
                .zip(t.loss_mask.as_slice())
                .map(|((&z, &y), &m)| if m != 0 { ((sigmoid(f64::from(z)) - f64::from(y)) * scale) as f32 } else { 0.0 })
                .collect();
            Tensor { data, ..o.clone() }
        })
        .collect();
    Ok((sum * scale, grads))
}

/// Builds inputs and targets from a frozen backbone. Samples without any
/// labelled pixel are skipped with a warning.
pub fn prepare_examples(
    net: &MetacogNet,
    seg: &dyn SegmentationModel,
    samples: &[LabeledImage],
    ignore_id: u8,
) -> Result<Vec<MetacogExample>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let probs = seg::softmax(&seg.forward(&s.image)?)?;
        let target = build_target_mask(&seg::predict_labels(&probs), &s.label_map, ignore_id)?;
        if target.supervised_pixels() == 0 {
            log::warn!("sample `{}` has no labelled pixels; skipped for metacognitive training", s.id);
            continue;
        }
        out.push(MetacogExample { input: net.input_for(&probs)?, target });
    }
    Ok(out)
}

/// Trains on prepared examples; returns the mean BCE of each epoch.
pub fn train_metacog_on(net: &mut MetacogNet, examples: &[MetacogExample], params: &MetacogTrainParams) -> Result<Vec<f64>> {
    let inputs: Vec<Tensor> = examples.iter().map(|e| e.input.0.clone()).collect();
    let fit = FitParams { epochs: params.epochs, lr: params.lr, batch_size: params.batch_size, seed: params.seed };
    let mut curve = Vec::new();
    train::fit(
        &mut net.net,
        &inputs,
        fit,
        |batch, outputs| {
            let targets: Vec<&MetacogTarget> = batch.iter().map(|&i| &examples[i].target).collect();
            match masked_bce_with_grad(outputs, &targets) {
                Ok((loss, grads)) => Ok(Some(BatchLoss { loss, stats: loss, grads })),
                Err(Error::DegenerateBatch(_)) => Ok(None),
                Err(e) => Err(e),
            }
        },
        |_, _, losses| {
            curve.push(if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 });
            Ok(())
        },
    )?;
    Ok(curve)
}

/// Draws up to `params.subset_size` images from `d_train`, labels them
/// with the frozen backbone's mistakes, and trains a fresh network.
pub fn train_metacog(
    config: MetacogModelConfig,
    seg: &dyn SegmentationModel,
    d_train: &[LabeledImage],
    params: &MetacogTrainParams,
    ignore_id: u8,
) -> Result<(MetacogNet, Vec<f64>)> {
    let mut net = MetacogNet::new(config, seg.num_classes())?;
    let count = params.subset_size.min(d_train.len());
    let mut picks = index::sample(&mut rng::stream(params.seed, 3), d_train.len(), count).into_vec();
    picks.sort_unstable();
    let subset: Vec<LabeledImage> = picks.into_iter().map(|i| d_train[i].clone()).collect();
    let examples = prepare_examples(&net, seg, &subset, ignore_id)?;
    if examples.is_empty() {
        return Err(Error::config("no usable samples for metacognitive training"));
    }
    let curve = train_metacog_on(&mut net, &examples, params)?;
    Ok((net, curve))
}

/// Full inference path: backbone → softmax → stacked input → metacognitive net.
pub fn infer_ood_mask(metacog: &MetacogNet, seg: &dyn SegmentationModel, image: &RgbImage) -> Result<SoftOodMask> {
    if metacog.num_classes() != seg.num_classes() {
        return Err(Error::Compatibility(format!(
            "metacognitive network expects {} classes, backbone has {}",
            metacog.num_classes(),
            seg.num_classes()
        )));
    }
    let probs = seg::softmax(&seg.forward(image)?)?;
    metacog.forward(&metacog.input_for(&probs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn uniform(k: usize, h: usize, w: usize) -> ProbabilityMap {
        ProbabilityMap::from_vec(h, w, k, vec![1.0 / k as f64; k * h * w]).unwrap()
    }

    #[test]
    fn input_shapes_and_extremes() {
        let inp = build_metacog_input(&uniform(8, 64, 64)).unwrap();
        assert_eq!((inp.channels, inp.height, inp.width), (2, 64, 64));
        assert!(inp.channel(0).iter().all(|&v| v == 0.0));
        assert!(inp.channel(1).iter().all(|&v| (v - 1.0).abs() < 1e-6));

        let mut one_hot = vec![0.0; 5 * 4];
        for i in 0..4 {
            one_hot[i * 5] = 1.0;
        }
        let inp = build_metacog_input(&ProbabilityMap::from_vec(2, 2, 5, one_hot).unwrap()).unwrap();
        assert!(inp.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_encoding_channels() {
        let inp = build_metacog_input_with(&uniform(4, 3, 3), ClassEncoding::OneHot, EntropyScaling::RawNats).unwrap();
        assert_eq!(inp.channels, 5);
        assert!(inp.channel(0).iter().all(|&v| v == 1.0));
        assert!(inp.channel(4).iter().all(|&v| (f64::from(v) - 4f64.ln()).abs() < 1e-6));
    }

    #[test]
    fn single_class_rejected() {
        let p = ProbabilityMap::from_vec(1, 1, 1, vec![1.0]).unwrap();
        assert!(matches!(build_metacog_input(&p), Err(Error::Config(_))));
    }

    #[test]
    fn target_masks() {
        let gt = LabelMap::from_vec(2, 2, vec![0, 1, 2, 255]).unwrap();
        let t = build_target_mask(&gt.map(|v| if v == 255 { 0 } else { v }), &gt, 255).unwrap();
        assert_eq!(t.target.as_slice(), &[0, 0, 0, 0]);
        assert_eq!(t.loss_mask.as_slice(), &[1, 1, 1, 0]);

        let pred = LabelMap::from_vec(2, 2, vec![0, 2, 2, 1]).unwrap();
        let t = build_target_mask(&pred, &gt, 255).unwrap();
        assert_eq!(t.target.as_slice(), &[0, 1, 0, 0]);

        let all_ignore = LabelMap::filled(2, 2, 255);
        let t = build_target_mask(&pred, &all_ignore, 255).unwrap();
        assert_eq!(t.supervised_pixels(), 0);
    }

    #[test]
    fn masked_pixels_get_zero_gradient() {
        let out = Tensor::from_vec(1, 1, 3, vec![0.3, -1.2, 2.0]).unwrap();
        let t = MetacogTarget {
            target: BinaryMask::from_vec(1, 3, vec![1, 0, 1]).unwrap(),
            loss_mask: BinaryMask::from_vec(1, 3, vec![1, 0, 1]).unwrap(),
        };
        let (_, g) = masked_bce_with_grad(&[out], &[&t]).unwrap();
        assert_eq!(g[0].data[1], 0.0);
        assert!(g[0].data[0] < 0.0);
    }

    #[test]
    fn bce_gradient_matches_finite_difference() {
        let t = MetacogTarget {
            target: BinaryMask::from_vec(1, 2, vec![1, 0]).unwrap(),
            loss_mask: BinaryMask::from_vec(1, 2, vec![1, 1]).unwrap(),
        };
        let z = [0.7f32, -0.4];
        let (_, g) = masked_bce_with_grad(&[Tensor::from_vec(1, 1, 2, z.to_vec()).unwrap()], &[&t]).unwrap();
        for j in 0..2 {
            let eps = 1e-3f32;
            let mut up = z;
            up[j] += eps;
            let mut down = z;
            down[j] -= eps;
            let f = |v: [f32; 2]| masked_bce_with_grad(&[Tensor::from_vec(1, 1, 2, v.to_vec()).unwrap()], &[&t]).unwrap().0;
            let numeric = (f(up) - f(down)) / (2.0 * f64::from(eps));
            assert!((numeric - f64::from(g[0].data[j])).abs() < 1e-4);
        }
    }

    #[test]
    fn mismatched_class_counts_incompatible() {
        let cfg = MetacogModelConfig { depth: 2, base_width: 8, seed: 0, class_encoding: ClassEncoding::Scaled, entropy_scaling: EntropyScaling::Normalized };
        let meta = MetacogNet::new(cfg, 5).unwrap();
        let seg = seg::SegNet::new(seg::SegModelConfig { num_classes: 4, input_channels: 3, depth: 2, base_width: 8, seed: 0 }).unwrap();
        assert!(matches!(infer_ood_mask(&meta, &seg, &RgbImage::new(8, 8)), Err(Error::Compatibility(_))));
    }
}
