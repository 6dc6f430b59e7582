//! Synthetic OOD data from in-distribution images.
//!
//! A fixed random subset of classes `C_sub` stays in-distribution; in each
//! sampled image every pixel of any other class is replaced by a heavily
//! Gaussian-blurred version of the image. The blurred pixels become
//! synthetic OOD training data that sits in context next to real ID pixels.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::{ClassTaxonomy, LabeledImage};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, LabelMap, RgbImage};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurParams {
    pub sigma: f64,
    pub kernel_size: usize,
}

impl BlurParams {
    /// `sigma = max(H, W) / 40`, kernel the smallest odd size `>= 6 sigma` (at least 3).
    pub fn default_for(height: usize, width: usize) -> Self {
        let sigma = height.max(width) as f64 / 40.0;
        Self { sigma, kernel_size: odd_kernel_for(sigma) }
    }

    pub fn with_sigma(sigma: f64) -> Self {
        Self { sigma, kernel_size: odd_kernel_for(sigma) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::config(format!("blur sigma must be positive, got {}", self.sigma)));
        }
        if self.kernel_size < 3 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size must be odd and >= 3, got {}", self.kernel_size)));
        }
        Ok(())
    }

    fn weights(&self) -> Vec<f64> {
        let r = (self.kernel_size / 2) as i64;
        let denom = 2.0 * self.sigma * self.sigma;
        let raw: Vec<f64> = (-r..=r).map(|i| libm::exp(-((i * i) as f64) / denom)).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / sum).collect()
    }
}

fn odd_kernel_for(sigma: f64) -> usize {
    let k = libm::ceil(6.0 * sigma).max(3.0) as usize;
    if k.is_multiple_of(2) {
        k + 1
    } else {
        k
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// `|C_sub|`, the number of classes kept in-distribution.
    pub subset_size: usize,
    /// Number of images drawn from the training set.
    pub sample_count: usize,
    /// `None` picks [`BlurParams::default_for`] the image size.
    #[serde(default)]
    pub blur: Option<BlurParams>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self, taxonomy: &ClassTaxonomy, available: usize) -> Result<()> {
        let k = taxonomy.num_classes();
        if self.subset_size == 0 || self.subset_size >= k {
            return Err(Error::config(format!("subset size must be in 1..{k}, got {}", self.subset_size)));
        }
        if self.sample_count > available {
            return Err(Error::config(format!(
                "cannot draw {} samples from a dataset of {available}",
                self.sample_count
            )));
        }
        if let Some(b) = &self.blur {
            b.validate()?;
        }
        Ok(())
    }
}

/// A blurred copy of a training image.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedSample {
    pub source_id: String,
    pub image: RgbImage,
    /// Original labels, including those under the blur.
    pub label_map: LabelMap,
    /// 1 exactly where the blur was applied.
    pub synth_ood_mask: BinaryMask,
}

/// Draws `C_sub` once for a whole run; returned ids are sorted.
pub fn select_class_subset(taxonomy: &ClassTaxonomy, subset_size: usize, seed: u64) -> Result<Vec<u8>> {
    let k = taxonomy.num_classes();
    if subset_size >= k {
        return Err(Error::config(format!("subset size {subset_size} must be smaller than K = {k}")));
    }
    let mut ids: Vec<u8> = taxonomy.class_ids().collect();
    ids.shuffle(&mut rng::stream(seed, 1));
    let mut subset = ids[..subset_size].to_vec();
    subset.sort_unstable();
    Ok(subset)
}

/// Separable Gaussian blur with clamp-to-edge borders, rounded back to 8 bits.
pub fn gaussian_blur(image: &RgbImage, params: &BlurParams) -> Result<RgbImage> {
    params.validate()?;
    let (h, w) = image.dims();
    let weights = params.weights();
    let r = (params.kernel_size / 2) as isize;
    let src = image.as_raw();
    let mut horiz = alloc::vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (t, &wt) in weights.iter().enumerate() {
                let sx = (x as isize + t as isize - r).clamp(0, w as isize - 1) as usize;
                let i = (y * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += wt * f64::from(src[i + c]);
                }
            }
            horiz[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut out = alloc::vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (t, &wt) in weights.iter().enumerate() {
                let sy = (y as isize + t as isize - r).clamp(0, h as isize - 1) as usize;
                let i = (sy * w + x) * 3;
                for c in 0..3 {
                    acc[c] += wt * horiz[i + c];
                }
            }
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = libm::round(acc[c]).clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::from_raw(h, w, out)
}

/// Blurs the whole image, then composites the blur onto every pixel whose
/// label is neither in `c_sub` nor `ignore_id`.
pub fn blur_out_classes(
    sample: &LabeledImage,
    c_sub: &[u8],
    blur: &BlurParams,
    ignore_id: u8,
) -> Result<SynthesizedSample> {
    if sample.image.dims() != sample.label_map.dims() {
        return Err(Error::shape(format!("sample `{}` has mismatched image and labels", sample.id)));
    }
    let blurred = gaussian_blur(&sample.image, blur)?;
    let mask = sample.label_map.map(|l| u8::from(l != ignore_id && !c_sub.contains(&l)));
    let mut image = sample.image.clone();
    let (h, w) = image.dims();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 1 {
                image.put_pixel(y, x, blurred.pixel(y, x));
            }
        }
    }
    Ok(SynthesizedSample {
        source_id: sample.id.clone(),
        image,
        label_map: sample.label_map.clone(),
        synth_ood_mask: mask,
    })
}

/// The synthesized set together with how it was made.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub c_sub: Vec<u8>,
    pub blur: BlurParams,
    pub samples: Vec<SynthesizedSample>,
}

/// Samples `config.sample_count` images without replacement and blurs the
/// classes outside one run-wide `C_sub`. The source images are untouched.
pub fn build_synth_dataset(d_id: &[LabeledImage], taxonomy: &ClassTaxonomy, config: &SynthConfig) -> Result<SynthDataset> {
    config.validate(taxonomy, d_id.len())?;
    let c_sub = select_class_subset(taxonomy, config.subset_size, config.seed)?;
    let blur = match (config.blur, d_id.first()) {
        (Some(b), _) => b,
        (None, Some(s)) => BlurParams::default_for(s.image.height(), s.image.width()),
        (None, None) => BlurParams::default_for(32, 32),
    };
    let mut picks = index::sample(&mut rng::stream(config.seed, 2), d_id.len(), config.sample_count).into_vec();
    picks.sort_unstable();
    let samples = picks
        .into_iter()
        .map(|i| blur_out_classes(&d_id[i], &c_sub, &blur, taxonomy.ignore_id))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset { c_sub, blur, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{generate_toy_scenes, toy_taxonomy, ToySceneConfig};

    fn scenes(n: usize) -> Vec<LabeledImage> {
        let cfg = ToySceneConfig { num_images: n, height: 32, width: 32, num_classes: 6, seed: 3, ood_mode: false, atypical_percent: 25 };
        generate_toy_scenes(&cfg, "s").unwrap()
    }

    #[test]
    fn default_blur_scales_with_resolution() {
        let b = BlurParams::default_for(64, 48);
        assert!((b.sigma - 1.6).abs() < 1e-12);
        assert_eq!(b.kernel_size, 11);
        assert_eq!(BlurParams::default_for(32, 32).kernel_size, 5);
        assert_eq!(BlurParams::with_sigma(0.1).kernel_size, 3);
    }

    #[test]
    fn subset_draws() {
        let tax = ClassTaxonomy::from_names((0..19).map(|i| format!("c{i}"))).unwrap();
        let s = select_class_subset(&tax, 12, 5).unwrap();
        assert_eq!(s.len(), 12);
        assert_eq!(s, select_class_subset(&tax, 12, 5).unwrap());
        assert_eq!(select_class_subset(&tax, 18, 5).unwrap().len(), 18);
        assert!(matches!(select_class_subset(&tax, 19, 5), Err(Error::Config(_))));
    }

    #[test]
    fn keep_all_classes_is_identity() {
        let tax = toy_taxonomy(6).unwrap();
        let s = &scenes(1)[0];
        let all: Vec<u8> = tax.class_ids().collect();
        let out = blur_out_classes(s, &all, &BlurParams::default_for(32, 32), 255).unwrap();
        assert_eq!(out.image, s.image);
        assert!(out.synth_ood_mask.as_slice().iter().all(|&m| m == 0));
    }

    #[test]
    fn empty_subset_blurs_everything_but_ignore() {
        let mut s = scenes(1).remove(0);
        s.label_map.set(0, 0, 255);
        let out = blur_out_classes(&s, &[], &BlurParams::with_sigma(1.5), 255).unwrap();
        let blurred = gaussian_blur(&s.image, &BlurParams::with_sigma(1.5)).unwrap();
        assert_eq!(out.synth_ood_mask.get(0, 0), 0);
        assert_eq!(out.image.pixel(0, 0), s.image.pixel(0, 0));
        assert_eq!(out.synth_ood_mask.as_slice().iter().filter(|&&m| m == 1).count(), 32 * 32 - 1);
        assert_eq!(out.image.pixel(5, 5), blurred.pixel(5, 5));
    }

    #[test]
    fn constant_image_survives_blur() {
        let img = RgbImage::filled(20, 17, [13, 200, 77]);
        for sigma in [0.5, 1.0, 3.7] {
            assert_eq!(gaussian_blur(&img, &BlurParams::with_sigma(sigma)).unwrap(), img);
        }
    }

    #[test]
    fn invalid_kernel_rejected() {
        let img = RgbImage::new(4, 4);
        assert!(gaussian_blur(&img, &BlurParams { sigma: 1.0, kernel_size: 4 }).is_err());
        assert!(gaussian_blur(&img, &BlurParams { sigma: 0.0, kernel_size: 5 }).is_err());
    }

    #[test]
    fn blur_difference_grows_with_sigma() {
        let s = &scenes(1)[0];
        let mut last = 0.0;
        for sigma in [0.5, 1.0, 2.0, 4.0] {
            let out = blur_out_classes(s, &[], &BlurParams::with_sigma(sigma), 255).unwrap();
            let diff: f64 = out
                .image
                .as_raw()
                .iter()
                .zip(s.image.as_raw())
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
                .sum::<f64>()
                / s.image.as_raw().len() as f64;
            assert!(diff > last, "sigma {sigma}: {diff} <= {last}");
            last = diff;
        }
    }

    #[test]
    fn build_dataset_counts_and_masks() {
        let tax = toy_taxonomy(6).unwrap();
        let d_id = scenes(20);
        let cfg = SynthConfig { subset_size: 3, sample_count: 8, blur: None, seed: 9 };
        let synth = build_synth_dataset(&d_id, &tax, &cfg).unwrap();
        assert_eq!(synth.samples.len(), 8);
        assert_eq!(synth, build_synth_dataset(&d_id, &tax, &cfg).unwrap());
        let mut ids: Vec<_> = synth.samples.iter().map(|s| s.source_id.clone()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 8);
        for s in &synth.samples {
            let src = d_id.iter().find(|d| d.id == s.source_id).unwrap();
            let expected = src.label_map.as_slice().iter().filter(|l| !synth.c_sub.contains(l) && **l != 255).count();
            assert_eq!(s.synth_ood_mask.as_slice().iter().filter(|&&m| m == 1).count(), expected);
        }

        let zero = SynthConfig { sample_count: 0, ..cfg.clone() };
        assert!(build_synth_dataset(&d_id, &tax, &zero).unwrap().samples.is_empty());
        let too_many = SynthConfig { sample_count: 21, ..cfg };
        assert!(matches!(build_synth_dataset(&d_id, &tax, &too_many), Err(Error::Config(_))));
    }
}
