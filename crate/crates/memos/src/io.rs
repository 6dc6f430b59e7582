//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/<split>/<id>.png      RGB, 8-bit
//! <root>/labels/<split>/<id>.png      single channel, value = class id, 255 = ignore
//! <root>/ood_labels/<split>/<id>.png  optional, 0 = ID, 1 = OOD, 255 = ignore
//! ```
//!
//! A synthesized set uses the same layout with the single split `synth`,
//! plus `synth_ood/<id>.png` masks (0 or 255) and `synth_manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, ImageFormat};
use memos_core::synth::{BlurParams, SynthDataset};
use memos_core::{ClassTaxonomy, DatasetManifest, Grid, LabeledImage, RgbImage, SynthesizedSample};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const SYNTH_MANIFEST: &str = "synth_manifest.json";
pub const SYNTH_SPLIT: &str = "synth";

pub fn image_path(root: &Path, split: &str, id: &str) -> PathBuf {
    root.join("images").join(split).join(format!("{id}.png"))
}

pub fn label_path(root: &Path, split: &str, id: &str) -> PathBuf {
    root.join("labels").join(split).join(format!("{id}.png"))
}

pub fn ood_label_path(root: &Path, split: &str, id: &str) -> PathBuf {
    root.join("ood_labels").join(split).join(format!("{id}.png"))
}

pub fn synth_mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("synth_ood").join(format!("{id}.png"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| LabError::format(path, e))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::format(path, e))
}

pub fn write_rgb_png(path: &Path, image: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    image::save_buffer_with_format(
        path,
        image.as_raw(),
        image.width() as u32,
        image.height() as u32,
        ColorType::Rgb8,
        ImageFormat::Png,
    )
    .map_err(|e| LabError::format(path, e))
}

pub fn write_gray_png(path: &Path, grid: &Grid<u8>) -> Result<()> {
    ensure_parent(path)?;
    image::save_buffer_with_format(
        path,
        grid.as_slice(),
        grid.width() as u32,
        grid.height() as u32,
        ColorType::L8,
        ImageFormat::Png,
    )
    .map_err(|e| LabError::format(path, e))
}

fn decode(path: &Path) -> std::result::Result<image::DynamicImage, String> {
    image::open(path).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn read_rgb_png(path: &Path) -> std::result::Result<RgbImage, String> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::from_raw(h as usize, w as usize, img.into_raw()).map_err(|e| e.to_string())
}

/// Reads a single-channel 8-bit PNG without any colour conversion.
pub fn read_gray_png(path: &Path) -> std::result::Result<Grid<u8>, String> {
    let img = decode(path)?;
    if img.color() != ColorType::L8 {
        return Err(format!("{}: expected an 8-bit single-channel PNG, got {:?}", path.display(), img.color()));
    }
    let img = img.into_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(h as usize, w as usize, img.into_raw()).map_err(|e| e.to_string())
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    read_json(&root.join(MANIFEST))
}

/// Writes every split and the manifest. Existing files are overwritten.
pub fn save_dataset(
    root: &Path,
    taxonomy: &ClassTaxonomy,
    seed: u64,
    provenance: &str,
    splits: &[(&str, &[LabeledImage])],
) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::new(taxonomy, seed, provenance);
    for (split, samples) in splits {
        for s in *samples {
            write_rgb_png(&image_path(root, split, &s.id), &s.image)?;
            write_gray_png(&label_path(root, split, &s.id), &s.label_map)?;
            if let Some(ood) = &s.ood_map {
                write_gray_png(&ood_label_path(root, split, &s.id), ood)?;
            }
        }
        manifest.splits.insert((*split).to_string(), samples.iter().map(|s| s.id.clone()).collect());
    }
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn load_sample(root: &Path, split: &str, id: &str) -> Result<LabeledImage> {
    let load = |message: String| LabError::Load { sample: id.to_string(), message };
    let image = read_rgb_png(&image_path(root, split, id)).map_err(load)?;
    let label_map = read_gray_png(&label_path(root, split, id)).map_err(load)?;
    let ood = ood_label_path(root, split, id);
    let ood_map = if ood.exists() { Some(read_gray_png(&ood).map_err(load)?) } else { None };
    Ok(LabeledImage { id: id.to_string(), image, label_map, ood_map })
}

/// Loads one split in lexicographic id order, validating every sample.
/// A split the manifest does not list yields an empty sequence.
pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<LabeledImage>> {
    let manifest = load_manifest(root)?;
    let taxonomy = manifest.taxonomy()?;
    manifest
        .split_ids(split)
        .iter()
        .map(|id| {
            let s = load_sample(root, split, id)?;
            s.validate(&taxonomy)?;
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// `None` for problems with the manifest itself.
    pub sample: Option<String>,
    pub split: Option<String>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the manifest and every listed sample. Never fails; problems are
/// the report's content.
pub fn validate_dataset(root: &Path) -> ValidationReport {
    let manifest_level = |message: String| ValidationReport {
        violations: vec![Violation { sample: None, split: None, message }],
    };
    let manifest = match load_manifest(root) {
        Ok(m) => m,
        Err(e) => return manifest_level(e.to_string()),
    };
    let taxonomy = match manifest.taxonomy() {
        Ok(t) => t,
        Err(e) => return manifest_level(e.to_string()),
    };
    let mut report = ValidationReport::default();
    for (split, ids) in &manifest.splits {
        for id in ids {
            let outcome = load_sample(root, split, id).and_then(|s| s.validate(&taxonomy).map_err(LabError::from));
            if let Err(e) = outcome {
                report.violations.push(Violation {
                    sample: Some(id.clone()),
                    split: Some(split.clone()),
                    message: e.to_string(),
                });
            }
        }
    }
    report
}

/// Provenance of a synthesized set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub c_sub: Vec<u8>,
    pub blur: BlurParams,
    pub subset_size: usize,
    pub seed: u64,
    pub source_ids: Vec<String>,
    pub stage_hash: String,
    pub config_hash: String,
}

pub fn save_synth(root: &Path, taxonomy: &ClassTaxonomy, data: &SynthDataset, meta: &SynthManifest) -> Result<()> {
    let mut manifest = DatasetManifest::new(taxonomy, meta.seed, format!("synthetic OOD, config {}", meta.config_hash));
    for s in &data.samples {
        write_rgb_png(&image_path(root, SYNTH_SPLIT, &s.source_id), &s.image)?;
        write_gray_png(&label_path(root, SYNTH_SPLIT, &s.source_id), &s.label_map)?;
        write_gray_png(&synth_mask_path(root, &s.source_id), &s.synth_ood_mask.map(|m| if m != 0 { 255 } else { 0 }))?;
    }
    manifest.splits.insert(SYNTH_SPLIT.into(), data.samples.iter().map(|s| s.source_id.clone()).collect());
    write_json(&root.join(MANIFEST), &manifest)?;
    write_json(&root.join(SYNTH_MANIFEST), meta)
}

pub fn load_synth(root: &Path) -> Result<(SynthManifest, Vec<SynthesizedSample>)> {
    let meta: SynthManifest = read_json(&root.join(SYNTH_MANIFEST))?;
    let samples = load_dataset(root, SYNTH_SPLIT)?
        .into_iter()
        .map(|s| {
            let mask = read_gray_png(&synth_mask_path(root, &s.id))
                .map_err(|message| LabError::Load { sample: s.id.clone(), message })?;
            Ok(SynthesizedSample {
                source_id: s.id,
                image: s.image,
                label_map: s.label_map,
                synth_ood_mask: mask.map(|m| u8::from(m != 0)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((meta, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use memos_core::toy::{generate_toy_scenes, toy_taxonomy, ToySceneConfig};

    fn scenes(n: usize) -> Vec<LabeledImage> {
        let cfg = ToySceneConfig {
            num_images: n,
            height: 32,
            width: 32,
            num_classes: 5,
            seed: 4,
            ood_mode: true,
            atypical_percent: 25,
        };
        generate_toy_scenes(&cfg, "s").unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let tax = toy_taxonomy(5).unwrap();
        let samples = scenes(4);
        save_dataset(dir.path(), &tax, 4, "test", &[("train", &samples)]).unwrap();
        let back = load_dataset(dir.path(), "train").unwrap();
        assert_eq!(back, samples);
        assert!(load_dataset(dir.path(), "missing").unwrap().is_empty());
        assert!(validate_dataset(dir.path()).is_clean());
    }

    #[test]
    fn gray_png_rejects_colour() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_rgb_png(&p, &RgbImage::new(4, 4)).unwrap();
        assert!(read_gray_png(&p).is_err());
    }
}
