//! Dataset representation and validation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, LabelMap, RgbImage};

/// Value of an [`LabeledImage::ood_map`] pixel that belongs to the in-distribution.
pub const OOD_MAP_ID: u8 = 0;
/// Value of an [`LabeledImage::ood_map`] pixel that is out-of-distribution.
pub const OOD_MAP_OOD: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u8,
    pub name: String,
}

/// The closed-world label set.
///
/// Class ids are the network's output channel indices, so they must be
/// exactly `0..K` in order. `ignore_id` and `ood_id` are reserved values
/// outside that range.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    pub classes: Vec<ClassInfo>,
    pub ignore_id: u8,
    pub ood_id: u8,
}

impl ClassTaxonomy {
    pub fn new(classes: Vec<ClassInfo>, ignore_id: u8, ood_id: u8) -> Result<Self> {
        let taxonomy = Self { classes, ignore_id, ood_id };
        taxonomy.validate()?;
        Ok(taxonomy)
    }

    /// Taxonomy with ids `0..names.len()`, `ignore_id = 255`, `ood_id = 254`.
    pub fn from_names<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let classes = names
            .into_iter()
            .enumerate()
            .map(|(i, name)| {
                u8::try_from(i)
                    .map(|id| ClassInfo { id, name: name.into() })
                    .map_err(|_| Error::config("too many classes for 8-bit labels"))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(classes, 255, 254)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::config("taxonomy needs at least 2 classes"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if usize::from(c.id) != i {
                return Err(Error::config(format!(
                    "class ids must be 0..K in order; position {i} holds id {}",
                    c.id
                )));
            }
        }
        if self.is_class(self.ignore_id) {
            return Err(Error::config(format!("ignore_id {} collides with a class id", self.ignore_id)));
        }
        if self.is_class(self.ood_id) {
            return Err(Error::config(format!("ood_id {} collides with a class id", self.ood_id)));
        }
        if self.ignore_id == self.ood_id {
            return Err(Error::config("ignore_id and ood_id must differ"));
        }
        Ok(())
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    #[inline]
    pub fn is_class(&self, id: u8) -> bool {
        usize::from(id) < self.classes.len()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u8> + '_ {
        self.classes.iter().map(|c| c.id)
    }
}

/// An RGB image with its per-pixel labels and optional OOD ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: RgbImage,
    pub label_map: LabelMap,
    /// `0` = in-distribution, `1` = OOD, `ignore_id` = not evaluated.
    pub ood_map: Option<BinaryMask>,
}

impl LabeledImage {
    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        let fail = |message: String| Error::Validation { sample: self.id.clone(), message };
        if self.image.dims() != self.label_map.dims() {
            return Err(fail(format!(
                "image is {:?} but label map is {:?}",
                self.image.dims(),
                self.label_map.dims()
            )));
        }
        if let Some(&bad) =
            self.label_map.as_slice().iter().find(|&&v| !taxonomy.is_class(v) && v != taxonomy.ignore_id)
        {
            return Err(fail(format!("label value {bad} is not declared in the taxonomy")));
        }
        if let Some(ood) = &self.ood_map {
            if ood.dims() != self.label_map.dims() {
                return Err(fail(format!(
                    "ood map is {:?} but label map is {:?}",
                    ood.dims(),
                    self.label_map.dims()
                )));
            }
            if let Some(&bad) = ood
                .as_slice()
                .iter()
                .find(|&&v| v != OOD_MAP_ID && v != OOD_MAP_OOD && v != taxonomy.ignore_id)
            {
                return Err(fail(format!("ood map value {bad} is not 0, 1 or ignore")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.label_map.dims()
    }
}

/// `manifest.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<ClassInfo>,
    pub ignore_id: u8,
    pub ood_id: u8,
    pub splits: BTreeMap<String, Vec<String>>,
    pub seed: u64,
    #[serde(default)]
    pub provenance: String,
}

impl DatasetManifest {
    pub fn new(taxonomy: &ClassTaxonomy, seed: u64, provenance: impl Into<String>) -> Self {
        Self {
            classes: taxonomy.classes.clone(),
            ignore_id: taxonomy.ignore_id,
            ood_id: taxonomy.ood_id,
            splits: BTreeMap::new(),
            seed,
            provenance: provenance.into(),
        }
    }

    pub fn taxonomy(&self) -> Result<ClassTaxonomy> {
        ClassTaxonomy::new(self.classes.clone(), self.ignore_id, self.ood_id)
    }

    /// Sample ids of `split` in lexicographic order; an unknown split is empty.
    pub fn split_ids(&self, split: &str) -> Vec<String> {
        let mut ids = self.splits.get(split).cloned().unwrap_or_default();
        ids.sort();
        ids
    }
}

/// Fraction of labelled (non-ignore) pixels per class id across `samples`.
pub fn class_frequencies(samples: &[LabeledImage], taxonomy: &ClassTaxonomy) -> Vec<f64> {
    let mut counts = alloc::vec![0u64; taxonomy.num_classes()];
    let mut total = 0u64;
    for s in samples {
        for &v in s.label_map.as_slice() {
            if taxonomy.is_class(v) {
                counts[usize::from(v)] += 1;
                total += 1;
            }
        }
    }
    counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn taxonomy() -> ClassTaxonomy {
        ClassTaxonomy::from_names(["a", "b", "c", "d", "e"]).unwrap()
    }

    fn sample(labels: Vec<u8>) -> LabeledImage {
        LabeledImage {
            id: "s0".to_string(),
            image: RgbImage::new(2, 2),
            label_map: LabelMap::from_vec(2, 2, labels).unwrap(),
            ood_map: None,
        }
    }

    #[test]
    fn taxonomy_rejects_reserved_collisions() {
        let classes = vec![ClassInfo { id: 0, name: "a".into() }, ClassInfo { id: 1, name: "b".into() }];
        assert!(ClassTaxonomy::new(classes.clone(), 1, 254).is_err());
        assert!(ClassTaxonomy::new(classes.clone(), 255, 255).is_err());
        assert!(ClassTaxonomy::new(classes[..1].to_vec(), 255, 254).is_err());
        assert!(ClassTaxonomy::new(classes, 255, 254).is_ok());
    }

    #[test]
    fn taxonomy_requires_contiguous_ids() {
        let classes = vec![ClassInfo { id: 0, name: "a".into() }, ClassInfo { id: 2, name: "b".into() }];
        assert!(matches!(ClassTaxonomy::new(classes, 255, 254), Err(Error::Config(_))));
    }

    #[test]
    fn undeclared_label_is_a_validation_error() {
        let err = sample(vec![0, 1, 99, 255]).validate(&taxonomy()).unwrap_err();
        match err {
            Error::Validation { sample, message } => {
                assert_eq!(sample, "s0");
                assert!(message.contains("99"));
            }
            other => panic!("unexpected {other:?}"),
        }
        sample(vec![0, 1, 4, 255]).validate(&taxonomy()).unwrap();
    }

    #[test]
    fn size_mismatch_is_reported() {
        let mut s = sample(vec![0, 0, 0, 0]);
        s.image = RgbImage::new(3, 2);
        assert!(s.validate(&taxonomy()).is_err());
    }

    #[test]
    fn split_ids_are_sorted_and_missing_split_is_empty() {
        let mut m = DatasetManifest::new(&taxonomy(), 1, "");
        m.splits.insert("train".into(), vec!["b".into(), "a".into()]);
        assert_eq!(m.split_ids("train"), vec!["a".to_string(), "b".to_string()]);
        assert!(m.split_ids("val").is_empty());
    }
}
