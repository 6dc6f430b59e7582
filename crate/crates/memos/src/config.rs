//! Run configuration.
//!
//! A config file is TOML laid over the built-in defaults, so a file only
//! needs the keys it changes. A file may name another file with
//! `base = "path"`; the chain is resolved relative to each file and applied
//! oldest first.

use std::fs;
use std::path::{Path, PathBuf};

use memos_core::metacog::{ClassEncoding, EntropyScaling};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::pipeline::Method;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub atypical_percent: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthStageConfig {
    pub subset_size: usize,
    pub sample_count: usize,
    /// Unset means `max(H, W) / 40`.
    pub blur_sigma: Option<f64>,
    /// Unset means the next odd integer `>= 6 sigma`.
    pub kernel_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegStageConfig {
    pub depth: usize,
    pub base_width: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaxEntStageConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetacogStageConfig {
    pub depth: usize,
    pub base_width: usize,
    pub class_encoding: ClassEncoding,
    pub entropy_scaling: EntropyScaling,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub subset_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    /// Resolution of the timed input; unset means the dataset resolution.
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub warmup: usize,
    pub iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Methods `evaluate` runs when none is named on the command line.
    pub methods: Vec<Method>,
    pub ensemble_members: usize,
    /// Test images rendered as mask overlays per method.
    pub overlay_images: usize,
    pub timing: TimingConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds of the repeated stages; `--seed` narrows this to one.
    pub seeds: Vec<u64>,
    pub run_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthStageConfig,
    pub seg: SegStageConfig,
    pub maxent: MaxEntStageConfig,
    pub metacog: MetacogStageConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            run_dir: PathBuf::from("runs/toy"),
            data: DataConfig {
                num_classes: 8,
                height: 48,
                width: 48,
                train_images: 160,
                val_images: 40,
                test_images: 40,
                atypical_percent: 25,
                seed: 2024,
            },
            synth: SynthStageConfig { subset_size: 4, sample_count: 80, blur_sigma: None, kernel_size: None },
            seg: SegStageConfig { depth: 3, base_width: 16, epochs: 15, lr: 2e-3, batch_size: 8 },
            maxent: MaxEntStageConfig { lambda: 1.0, epochs: 5, lr: 5e-4, batch_size: 8 },
            metacog: MetacogStageConfig {
                depth: 3,
                base_width: 8,
                class_encoding: ClassEncoding::Scaled,
                entropy_scaling: EntropyScaling::Normalized,
                epochs: 20,
                lr: 2e-3,
                batch_size: 8,
                subset_size: 500,
            },
            eval: EvalConfig {
                methods: Method::ALL.to_vec(),
                ensemble_members: 3,
                overlay_images: 4,
                timing: TimingConfig { height: None, width: None, warmup: 3, iters: 20 },
            },
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_layers(path: &Path, depth: usize, layers: &mut Vec<toml::Value>) -> Result<()> {
    if depth > 8 {
        return Err(LabError::Config(format!("{}: `base` chain is too deep", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut value: toml::Value = toml::from_str(&text).map_err(|e| LabError::format(path, e))?;
    if let Some(base) = value.as_table_mut().and_then(|t| t.remove("base")) {
        let base = base
            .as_str()
            .ok_or_else(|| LabError::Config(format!("{}: `base` must be a path string", path.display())))?;
        let base_path = path.parent().unwrap_or(Path::new(".")).join(base);
        read_layers(&base_path, depth + 1, layers)?;
    }
    layers.push(value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        Self::from_layers(vec![over])
    }

    /// Loads `path` (and its `base` chain) over the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let mut layers = Vec::new();
        read_layers(path, 0, &mut layers)?;
        Self::from_layers(layers)
    }

    fn from_layers(layers: Vec<toml::Value>) -> Result<Self> {
        let mut value = toml::Value::try_from(RunConfig::default()).map_err(|e| LabError::Config(e.to_string()))?;
        for layer in layers {
            merge(&mut value, layer);
        }
        let config: RunConfig = value.try_into().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(LabError::Config("at least one seed is required".into()));
        }
        if self.eval.ensemble_members < 2 {
            return Err(LabError::Config("an ensemble needs at least 2 members".into()));
        }
        if self.eval.timing.iters == 0 {
            return Err(LabError::Config("timing needs at least one iteration".into()));
        }
        if !(self.maxent.lambda.is_finite() && self.maxent.lambda >= 0.0) {
            return Err(LabError::Config(format!("lambda must be finite and >= 0, got {}", self.maxent.lambda)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of everything that affects results, embedded in every artifact.
    /// The run directory is left out so identical runs in different
    /// places hash alike.
    pub fn hash(&self) -> String {
        hash_json(&RunConfig { run_dir: PathBuf::new(), ..self.clone() })
    }
}

/// SHA-256 over the JSON encoding of `value`, hex encoded.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    hex::encode(Sha256::digest(bytes))
}
