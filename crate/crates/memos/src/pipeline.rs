//! Experiment orchestration over a run directory.
//!
//! Every stage writes under the run directory and records a stage hash: a
//! hash of the config sections it depends on, chained with the hashes of
//! its inputs. A stage refuses inputs that are missing (dependency error)
//! or were built from a different config (staleness error).

use std::fs;
use std::path::{Path, PathBuf};

use memos_core::eval::{self, ConfusionMatrix, MetricsReport, PixelPool, ScoreMap, SeedMetrics};
use memos_core::maxent::{self, FinetuneReport};
use memos_core::metacog::{self, MetacogTrainParams};
use memos_core::rng::derive_seed;
use memos_core::seg::{self, CurvePoint, SegmentationModel};
use memos_core::synth::{build_synth_dataset, BlurParams, SynthConfig};
use memos_core::toy::{generate_toy_scenes, toy_taxonomy, ToySceneConfig};
use memos_core::{
    ClassTaxonomy, LabelMap, LabeledImage, MaxEntConfig, MetacogModelConfig, MetacogNet, ProbabilityMap, SegModelConfig,
    SegNet, SynthesizedSample, TrainParams,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{self, CheckpointMeta, ModelConfig, ModelKind};
use crate::config::{hash_json, RunConfig};
use crate::error::{LabError, Result};
use crate::io::{self, SynthManifest};
use crate::plot;
use crate::timing::{self, TimingReport, TimingSpec};

/// An OOD scoring method, as named in configs and on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    Softmax,
    Entropy,
    Ensemble,
    MetacogOnly,
    #[serde(rename = "maxent")]
    #[value(name = "maxent")]
    MaxEnt,
    Memos,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Softmax, Method::Entropy, Method::Ensemble, Method::MetacogOnly, Method::MaxEnt, Method::Memos];

    /// The rows of the ablation table.
    pub const ABLATION: [Method; 4] = [Method::Entropy, Method::MetacogOnly, Method::MaxEnt, Method::Memos];

    pub fn key(self) -> &'static str {
        match self {
            Method::Softmax => "softmax",
            Method::Entropy => "entropy",
            Method::Ensemble => "ensemble",
            Method::MetacogOnly => "metacog_only",
            Method::MaxEnt => "maxent",
            Method::Memos => "memos",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Softmax => "Softmax",
            Method::Entropy => "Entropy",
            Method::Ensemble => "Ensemble",
            Method::MetacogOnly => "Metacognitive-Only",
            Method::MaxEnt => "MaxEnt",
            Method::Memos => "MEMOS",
        }
    }

    /// Published AUPRC on Lost and Found with a full-scale backbone.
    pub fn reference_auprc(self) -> f64 {
        match self {
            Method::Softmax => 0.26,
            Method::Entropy => 0.44,
            Method::Ensemble => 0.07,
            Method::MetacogOnly => 0.48,
            Method::MaxEnt => 0.64,
            Method::Memos => 0.70,
        }
    }

    pub fn backbone(self) -> Backbone {
        match self {
            Method::MaxEnt | Method::Memos => Backbone::MaxEnt,
            _ => Backbone::Base,
        }
    }

    pub fn uses_metacog(self) -> bool {
        matches!(self, Method::MetacogOnly | Method::Memos)
    }
}

/// Which segmentation checkpoint a stage builds on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Backbone {
    Base,
    #[serde(rename = "maxent")]
    #[value(name = "maxent")]
    MaxEnt,
}

impl Backbone {
    pub fn key(self) -> &'static str {
        match self {
            Backbone::Base => "base",
            Backbone::MaxEnt => "maxent",
        }
    }

    fn command(self) -> &'static str {
        match self {
            Backbone::Base => "train-seg",
            Backbone::MaxEnt => "finetune-maxent",
        }
    }
}

pub const DATASET: &str = "toy-ood-test";
pub const STAGE_FILE: &str = "stage.json";
pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const LOSS_BREAKDOWN: &str = "loss_breakdown.csv";
pub const FINETUNE_REPORT: &str = "finetune_report.json";
pub const REPORT: &str = "report.json";
pub const SUMMARY: &str = "summary.csv";
pub const ABLATION: &str = "ablation.csv";

// Random streams split off each run seed.
const SEG_INIT: u64 = 1;
const SEG_TRAIN: u64 = 2;
const SYNTH: u64 = 3;
const MAXENT: u64 = 4;
const METACOG_INIT: u64 = 5;
const METACOG_TRAIN: u64 = 6;
const MEMBER: u64 = 100;

const SCORE_BINS: usize = 50;
const MAX_CURVE_POINTS: usize = 1000;

/// Record written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub stage_hash: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub seed: u64,
    pub stage_hash: String,
    pub config_hash: String,
    #[serde(flatten)]
    pub report: FinetuneReport,
}

/// One row of `summary.csv` / `ablation.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub auprc_mean: f64,
    pub auprc_std: Option<f64>,
    pub fpr95_mean: f64,
    pub fpr95_std: Option<f64>,
    pub val_miou_mean: f64,
    pub val_miou_std: Option<f64>,
    pub seeds: String,
    pub reference_auprc: f64,
}

impl TableRow {
    fn new(method: Method, report: &MetricsReport) -> Self {
        let m = &report.metrics;
        Self {
            method: method.label().into(),
            auprc_mean: m.auprc.mean,
            auprc_std: m.auprc.std,
            fpr95_mean: m.fpr95.mean,
            fpr95_std: m.fpr95.std,
            val_miou_mean: m.val_miou.mean,
            val_miou_std: m.val_miou.std,
            seeds: report.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
            reference_auprc: method.reference_auprc(),
        }
    }
}

#[derive(Serialize)]
struct BreakdownRow {
    epoch: usize,
    ce_term: f64,
    maxent_term: f64,
    total: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| LabError::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| LabError::format(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

fn clear_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    Ok(())
}

/// Reads the `stage_hash` field of a JSON record, if the record exists.
fn recorded_hash(path: &Path) -> Option<String> {
    let v: serde_json::Value = io::read_json(path).ok()?;
    v.get("stage_hash")?.as_str().map(str::to_owned)
}

fn check_hash(command: &str, path: &Path, expected: &str) -> Result<()> {
    match recorded_hash(path) {
        None if !path.exists() => Err(LabError::dependency(command, path)),
        None => Err(LabError::format(path, "no stage hash recorded")),
        Some(found) if found != expected => Err(LabError::Stale {
            command: command.into(),
            path: path.to_path_buf(),
            expected: expected.into(),
            found,
        }),
        Some(_) => Ok(()),
    }
}

fn thin(curve: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let step = curve.len().div_ceil(MAX_CURVE_POINTS).max(1);
    let last = curve.last().copied();
    let mut out: Vec<_> = curve.into_iter().step_by(step).collect();
    if let Some(l) = last {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

/// Loaded models that turn an image into an OOD score map and a
/// segmentation.
struct Scorer {
    method: Method,
    members: Vec<SegNet>,
    metacog: Option<MetacogNet>,
}

impl Scorer {
    fn score(&self, image: &memos_core::RgbImage) -> Result<(ScoreMap, LabelMap)> {
        let probs: Vec<ProbabilityMap> =
            self.members.iter().map(|m| seg::softmax(&m.forward(image)?)).collect::<memos_core::Result<_>>()?;
        let p = &probs[0];
        let out = match self.method {
            Method::Softmax => (eval::score_softmax(p)?, seg::predict_labels(p)),
            Method::Entropy | Method::MaxEnt => (eval::score_entropy(p)?, seg::predict_labels(p)),
            Method::Ensemble => (eval::score_ensemble(&probs)?, seg::predict_labels(&eval::mean_distribution(&probs)?)),
            Method::MetacogOnly | Method::Memos => {
                let net = self.metacog.as_ref().expect("metacognitive methods load a network");
                (ScoreMap(net.forward(&net.input_for(p)?)?.0), seg::predict_labels(p))
            }
        };
        Ok(out)
    }

    /// Upper end of the score range, for plotting.
    fn score_max(&self) -> f64 {
        match self.method {
            Method::Entropy | Method::MaxEnt | Method::Ensemble => (self.members[0].num_classes() as f64).ln(),
            _ => 1.0,
        }
    }
}

/// A run directory together with the config that governs it.
pub struct Lab {
    config: RunConfig,
    root: PathBuf,
    config_hash: String,
}

impl Lab {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let root = config.run_dir.clone();
        let config_hash = config.hash();
        Ok(Self { config, root, config_hash })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn seeds(&self) -> &[u64] {
        &self.config.seeds
    }

    // ---- layout

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn synth_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("synth")
    }

    pub fn backbone_dir(&self, seed: u64, backbone: Backbone) -> PathBuf {
        self.seed_dir(seed).join(match backbone {
            Backbone::Base => "seg",
            Backbone::MaxEnt => "maxent",
        })
    }

    /// Member 0 of the ensemble is the base backbone itself.
    pub fn member_dir(&self, seed: u64, member: usize) -> PathBuf {
        if member == 0 {
            self.backbone_dir(seed, Backbone::Base)
        } else {
            self.seed_dir(seed).join(format!("ensemble-{member}"))
        }
    }

    pub fn metacog_dir(&self, seed: u64, backbone: Backbone) -> PathBuf {
        self.seed_dir(seed).join(format!("metacog-{}", backbone.key()))
    }

    pub fn eval_dir(&self, method: Method) -> PathBuf {
        self.root.join("eval").join(method.key())
    }

    pub fn timing_path(&self) -> PathBuf {
        self.root.join("timing").join("timing.json")
    }

    pub fn infer_dir(&self) -> PathBuf {
        self.root.join("infer")
    }

    // ---- stage hashes

    fn data_hash(&self) -> String {
        hash_json(&("data", &self.config.data))
    }

    fn synth_hash(&self, seed: u64) -> String {
        hash_json(&("synth", self.data_hash(), &self.config.synth, seed))
    }

    fn member_hash(&self, seed: u64, member: usize) -> String {
        hash_json(&("seg", self.data_hash(), &self.config.seg, seed, member))
    }

    fn backbone_hash(&self, seed: u64, backbone: Backbone) -> String {
        match backbone {
            Backbone::Base => self.member_hash(seed, 0),
            Backbone::MaxEnt => hash_json(&(
                "maxent",
                self.member_hash(seed, 0),
                self.synth_hash(seed),
                &self.config.maxent,
                seed,
            )),
        }
    }

    fn metacog_hash(&self, seed: u64, backbone: Backbone) -> String {
        hash_json(&("metacog", self.backbone_hash(seed, backbone), &self.config.metacog, seed))
    }

    // ---- checked loading

    fn require_data(&self) -> Result<()> {
        check_hash("gen-data", &self.data_dir().join(STAGE_FILE), &self.data_hash())
    }

    fn taxonomy(&self) -> Result<ClassTaxonomy> {
        self.require_data()?;
        Ok(io::load_manifest(&self.data_dir())?.taxonomy()?)
    }

    fn split(&self, name: &str) -> Result<Vec<LabeledImage>> {
        self.require_data()?;
        io::load_dataset(&self.data_dir(), name)
    }

    fn load_synth(&self, seed: u64) -> Result<(SynthManifest, Vec<SynthesizedSample>)> {
        let dir = self.synth_dir(seed);
        check_hash("gen-synth", &dir.join(io::SYNTH_MANIFEST), &self.synth_hash(seed))?;
        io::load_synth(&dir)
    }

    fn load_seg_checked(&self, dir: &Path, command: &str, expected: &str) -> Result<SegNet> {
        check_hash(command, &dir.join(checkpoint::META), expected)?;
        Ok(checkpoint::load_seg(dir)?.0)
    }

    pub fn load_backbone(&self, seed: u64, backbone: Backbone) -> Result<SegNet> {
        self.load_seg_checked(&self.backbone_dir(seed, backbone), backbone.command(), &self.backbone_hash(seed, backbone))
    }

    pub fn load_metacog(&self, seed: u64, backbone: Backbone) -> Result<MetacogNet> {
        let dir = self.metacog_dir(seed, backbone);
        check_hash("train-metacog", &dir.join(checkpoint::META), &self.metacog_hash(seed, backbone))?;
        Ok(checkpoint::load_metacog(&dir)?.0)
    }

    fn is_fresh(&self, record: &Path, expected: &str) -> bool {
        recorded_hash(record).as_deref() == Some(expected)
    }

    fn meta(&self, kind: ModelKind, model: ModelConfig, seed: u64, epochs: usize, stage_hash: String, details: serde_json::Value) -> CheckpointMeta {
        CheckpointMeta {
            kind,
            model,
            seed,
            epochs,
            dataset_hash: self.data_hash(),
            stage_hash,
            config_hash: self.config_hash.clone(),
            details,
        }
    }

    // ---- stages

    /// Generates the train, val and OOD test splits.
    pub fn gen_data(&self) -> Result<()> {
        let d = &self.config.data;
        let taxonomy = toy_taxonomy(d.num_classes)?;
        let make = |count: usize, stream: u64, ood_mode: bool, prefix: &str| {
            let config = ToySceneConfig {
                num_images: count,
                height: d.height,
                width: d.width,
                num_classes: d.num_classes,
                seed: derive_seed(d.seed, stream),
                ood_mode,
                atypical_percent: d.atypical_percent,
            };
            generate_toy_scenes(&config, prefix)
        };
        let train = make(d.train_images, 1, false, "train-")?;
        let val = make(d.val_images, 2, false, "val-")?;
        let test = make(d.test_images, 3, true, "test-")?;
        let dir = self.data_dir();
        clear_dir(&dir)?;
        let provenance = format!("procedural toy scenes, config {}", self.config_hash);
        io::save_dataset(&dir, &taxonomy, d.seed, &provenance, &[("train", &train), ("val", &val), ("test", &test)])?;
        io::write_json(
            &dir.join(STAGE_FILE),
            &StageRecord { stage: "gen-data".into(), stage_hash: self.data_hash(), config_hash: self.config_hash.clone(), seed: d.seed },
        )?;
        log::info!("dataset written to {}", dir.display());
        Ok(())
    }

    fn blur(&self) -> Option<BlurParams> {
        let s = &self.config.synth;
        match (s.blur_sigma, s.kernel_size) {
            (None, None) => None,
            (Some(sigma), None) => Some(BlurParams::with_sigma(sigma)),
            (sigma, Some(kernel_size)) => Some(BlurParams {
                sigma: sigma.unwrap_or_else(|| BlurParams::default_for(self.config.data.height, self.config.data.width).sigma),
                kernel_size,
            }),
        }
    }

    fn synth_config(&self, seed: u64, sample_count: usize) -> SynthConfig {
        SynthConfig {
            subset_size: self.config.synth.subset_size,
            sample_count,
            blur: self.blur(),
            seed: derive_seed(seed, SYNTH),
        }
    }

    /// Builds the synthetic-OOD set for `seed` from the training split.
    pub fn gen_synth(&self, seed: u64) -> Result<()> {
        let taxonomy = self.taxonomy()?;
        let train = self.split("train")?;
        let data = build_synth_dataset(&train, &taxonomy, &self.synth_config(seed, self.config.synth.sample_count))?;
        let meta = SynthManifest {
            c_sub: data.c_sub.clone(),
            blur: data.blur,
            subset_size: self.config.synth.subset_size,
            seed,
            source_ids: data.samples.iter().map(|s| s.source_id.clone()).collect(),
            stage_hash: self.synth_hash(seed),
            config_hash: self.config_hash.clone(),
        };
        let dir = self.synth_dir(seed);
        clear_dir(&dir)?;
        io::save_synth(&dir, &taxonomy, &data, &meta)?;
        log::info!("seed {seed}: {} synthetic samples, C_sub = {:?}", data.samples.len(), data.c_sub);
        Ok(())
    }

    fn fit_member(&self, seed: u64, member: usize, train: &[LabeledImage], val: &[LabeledImage], taxonomy: &ClassTaxonomy) -> Result<()> {
        let s = &self.config.seg;
        let offset = 2 * member as u64;
        let (init, order) = if member == 0 { (SEG_INIT, SEG_TRAIN) } else { (MEMBER + offset, MEMBER + offset + 1) };
        let config = SegModelConfig {
            num_classes: taxonomy.num_classes(),
            input_channels: 3,
            depth: s.depth,
            base_width: s.base_width,
            seed: derive_seed(seed, init),
        };
        let mut net = SegNet::new(config.clone())?;
        let params = TrainParams { epochs: s.epochs, lr: s.lr, batch_size: s.batch_size, seed: derive_seed(seed, order) };
        let curve = seg::train_segmentation(&mut net, train, val, taxonomy, params)?;
        let dir = self.member_dir(seed, member);
        clear_dir(&dir)?;
        let meta = self.meta(
            ModelKind::Segmentation,
            ModelConfig::Segmentation(config),
            seed,
            s.epochs,
            self.member_hash(seed, member),
            json!({ "train": params, "ensemble_member": member }),
        );
        checkpoint::save_seg(&dir, &net, &meta)?;
        write_csv(&dir.join(LOSS_CURVE), &curve)?;
        if let Some(last) = curve.iter().rev().find(|c| c.split == "val") {
            log::info!("seed {seed} member {member}: val loss {:.4}, mIoU {:.4}", last.loss, last.miou.unwrap_or(f64::NAN));
        }
        Ok(())
    }

    fn wants_ensemble(&self) -> bool {
        self.config.eval.methods.contains(&Method::Ensemble)
    }

    /// Trains the base backbone and, when the ensemble baseline is
    /// configured, the extra ensemble members.
    pub fn train_seg(&self, seed: u64) -> Result<()> {
        let taxonomy = self.taxonomy()?;
        let (train, val) = (self.split("train")?, self.split("val")?);
        let members = if self.wants_ensemble() { self.config.eval.ensemble_members } else { 1 };
        for member in 0..members {
            self.fit_member(seed, member, &train, &val, &taxonomy)?;
        }
        Ok(())
    }

    /// Fine-tunes the base backbone on `D_id ∪ D_synth` and writes the
    /// before/after entropy report.
    pub fn finetune_maxent(&self, seed: u64) -> Result<()> {
        let taxonomy = self.taxonomy()?;
        let base = self.load_backbone(seed, Backbone::Base)?;
        let (synth_meta, synth) = self.load_synth(seed)?;
        let (train, val) = (self.split("train")?, self.split("val")?);
        let m = &self.config.maxent;
        let config = MaxEntConfig { lambda: m.lambda, epochs: m.epochs, lr: m.lr, batch_size: m.batch_size, seed: derive_seed(seed, MAXENT) };
        let outcome = maxent::finetune(&base, &train, &synth, &config, &taxonomy)?;

        let held_out = build_synth_dataset(&val, &taxonomy, &self.synth_config(seed, val.len()))?;
        if held_out.c_sub != synth_meta.c_sub {
            return Err(LabError::Config("held-out synthetic set drew a different class subset".into()));
        }
        let report = maxent::finetune_report(&base, &outcome.model, &val, &held_out.samples, &taxonomy, &config)?;

        let dir = self.backbone_dir(seed, Backbone::MaxEnt);
        clear_dir(&dir)?;
        let meta = self.meta(
            ModelKind::Segmentation,
            ModelConfig::Segmentation(outcome.model.config().clone()),
            seed,
            m.epochs,
            self.backbone_hash(seed, Backbone::MaxEnt),
            json!({ "finetune": config, "base_stage_hash": self.backbone_hash(seed, Backbone::Base) }),
        );
        checkpoint::save_seg(&dir, &outcome.model, &meta)?;
        let rows: Vec<BreakdownRow> = outcome
            .curve
            .iter()
            .map(|e| BreakdownRow { epoch: e.epoch, ce_term: e.ce_term, maxent_term: e.maxent_term, total: e.total })
            .collect();
        write_csv(&dir.join(LOSS_BREAKDOWN), &rows)?;
        plot::histogram_png(&dir.join("entropy_hist_id.png"), &[&report.base_id_entropy_hist, &report.id_entropy_hist])?;
        plot::histogram_png(&dir.join("entropy_hist_ood.png"), &[&report.base_ood_entropy_hist, &report.ood_entropy_hist])?;
        log::info!(
            "seed {seed}: OOD entropy {:.3} -> {:.3}, ID entropy {:.3} -> {:.3}, val mIoU {:.3} -> {:.3}",
            report.ood_mean_entropy_before,
            report.ood_mean_entropy_after,
            report.id_mean_entropy_before,
            report.id_mean_entropy_after,
            report.miou_before,
            report.miou_after
        );
        io::write_json(
            &dir.join(FINETUNE_REPORT),
            &FinetuneSummary { seed, stage_hash: self.backbone_hash(seed, Backbone::MaxEnt), config_hash: self.config_hash.clone(), report },
        )
    }

    pub fn read_finetune_report(&self, seed: u64) -> Result<FinetuneSummary> {
        let path = self.backbone_dir(seed, Backbone::MaxEnt).join(FINETUNE_REPORT);
        check_hash("finetune-maxent", &path, &self.backbone_hash(seed, Backbone::MaxEnt))?;
        io::read_json(&path)
    }

    /// Backbones whose metacognitive network the configured methods need.
    pub fn metacog_backbones(&self) -> Vec<Backbone> {
        let mut out = Vec::new();
        for b in [Backbone::Base, Backbone::MaxEnt] {
            if self.config.eval.methods.iter().any(|m| m.uses_metacog() && m.backbone() == b) {
                out.push(b);
            }
        }
        out
    }

    /// Trains a metacognitive network against the errors of `backbone`.
    pub fn train_metacog(&self, seed: u64, backbone: Backbone) -> Result<()> {
        let taxonomy = self.taxonomy()?;
        let seg = self.load_backbone(seed, backbone)?;
        let train = self.split("train")?;
        let c = &self.config.metacog;
        let config = MetacogModelConfig {
            depth: c.depth,
            base_width: c.base_width,
            seed: derive_seed(seed, METACOG_INIT),
            class_encoding: c.class_encoding,
            entropy_scaling: c.entropy_scaling,
        };
        let params = MetacogTrainParams {
            epochs: c.epochs,
            lr: c.lr,
            batch_size: c.batch_size,
            subset_size: c.subset_size,
            seed: derive_seed(seed, METACOG_TRAIN),
        };
        let (net, losses) = metacog::train_metacog(config.clone(), &seg, &train, &params, taxonomy.ignore_id)?;
        let dir = self.metacog_dir(seed, backbone);
        clear_dir(&dir)?;
        let meta = self.meta(
            ModelKind::Metacognitive,
            ModelConfig::Metacognitive { num_classes: taxonomy.num_classes(), metacog: config },
            seed,
            c.epochs,
            self.metacog_hash(seed, backbone),
            json!({ "train": params, "backbone": backbone, "backbone_stage_hash": self.backbone_hash(seed, backbone) }),
        );
        checkpoint::save_metacog(&dir, &net, &meta)?;
        let curve: Vec<CurvePoint> = losses
            .iter()
            .enumerate()
            .map(|(i, &loss)| CurvePoint { epoch: i + 1, split: "train".into(), loss, miou: None })
            .collect();
        write_csv(&dir.join(LOSS_CURVE), &curve)?;
        log::info!("seed {seed}: metacognitive network on {} backbone, final BCE {:.4}", backbone.key(), losses.last().copied().unwrap_or(f64::NAN));
        Ok(())
    }

    fn scorer(&self, method: Method, seed: u64) -> Result<Scorer> {
        let members = if method == Method::Ensemble {
            (0..self.config.eval.ensemble_members)
                .map(|i| self.load_seg_checked(&self.member_dir(seed, i), "train-seg", &self.member_hash(seed, i)))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![self.load_backbone(seed, method.backbone())?]
        };
        let metacog = if method.uses_metacog() { Some(self.load_metacog(seed, method.backbone())?) } else { None };
        Ok(Scorer { method, members, metacog })
    }

    /// Scores the OOD test split with `method` for every configured seed,
    /// writes `report.json` and figures under `eval/<method>/`, and
    /// refreshes `summary.csv`.
    pub fn evaluate(&self, method: Method) -> Result<MetricsReport> {
        let taxonomy = self.taxonomy()?;
        let test = self.split("test")?;
        if test.is_empty() || test.iter().any(|s| s.ood_map.is_none()) {
            return Err(LabError::Config("the `test` split needs ood_labels for every image".into()));
        }
        let val = self.split("val")?;
        let scorers = self.config.seeds.iter().map(|&s| self.scorer(method, s)).collect::<Result<Vec<_>>>()?;
        let dir = self.eval_dir(method);
        clear_dir(&dir)?;

        let mut per_seed = Vec::new();
        let mut curves = Vec::new();
        for (i, (&seed, scorer)) in self.config.seeds.iter().zip(&scorers).enumerate() {
            let mut pool = PixelPool::default();
            for (j, s) in test.iter().enumerate() {
                let (score, _) = scorer.score(&s.image)?;
                pool.add(&score, s.ood_map.as_ref().expect("checked above"))?;
                if i == 0 && j < self.config.eval.overlay_images {
                    let mask = score.map(|v| v / scorer.score_max());
                    let img = plot::overlay(&s.image, &mask)?;
                    io::write_rgb_png(&dir.join("overlays").join(format!("{}.png", s.id)), &img)?;
                }
            }
            let mut cm = ConfusionMatrix::new(taxonomy.num_classes());
            for s in &val {
                cm.accumulate(&scorer.score(&s.image)?.1, &s.label_map, taxonomy.ignore_id)?;
            }
            per_seed.push(SeedMetrics { seed, auprc: pool.auprc()?, fpr95: pool.fpr95()?, val_miou: cm.miou() });
            curves.push(thin(eval::pr_curve(&pool.scores, &pool.labels)?));
            if i == 0 {
                let max = scorer.score_max();
                let split = |want: u8| -> Vec<f64> {
                    pool.scores.iter().zip(&pool.labels).filter(|(_, &l)| l == want).map(|(&v, _)| v).collect()
                };
                let id = maxent::histogram(&split(0), SCORE_BINS, max);
                let ood = maxent::histogram(&split(1), SCORE_BINS, max);
                plot::histogram_png(&dir.join("score_hist.png"), &[&id, &ood])?;
            }
            log::info!("{} seed {seed}: AUPRC {:.4}, FPR-95 {:.4}", method.label(), per_seed[i].auprc, per_seed[i].fpr95);
        }
        plot::pr_curve_png(&dir.join("pr_curve.png"), &curves)?;
        let report = MetricsReport::from_seed_metrics(method.label(), DATASET, per_seed, self.config_hash.clone());
        io::write_json(&dir.join(REPORT), &report)?;
        self.write_summary()?;
        Ok(report)
    }

    pub fn read_report(&self, method: Method) -> Result<MetricsReport> {
        io::read_json(&self.eval_dir(method).join(REPORT))
    }

    /// Collects every method report present into `summary.csv`.
    fn write_summary(&self) -> Result<()> {
        let rows: Vec<TableRow> = Method::ALL
            .iter()
            .filter(|m| self.eval_dir(**m).join(REPORT).is_file())
            .map(|&m| Ok(TableRow::new(m, &self.read_report(m)?)))
            .collect::<Result<_>>()?;
        write_csv(&self.root.join("eval").join(SUMMARY), &rows)
    }

    fn ensure_stage(&self, record: &Path, expected: &str, run: impl FnOnce() -> Result<()>) -> Result<()> {
        if self.is_fresh(record, expected) {
            log::info!("reusing {}", record.parent().unwrap_or(record).display());
            Ok(())
        } else {
            run()
        }
    }

    /// Runs (or reuses) every stage the ablation rows need, evaluates them
    /// and writes `ablation.csv`.
    pub fn run_ablation(&self) -> Result<Vec<MetricsReport>> {
        self.ensure_stage(&self.data_dir().join(STAGE_FILE), &self.data_hash(), || self.gen_data())?;
        let taxonomy = self.taxonomy()?;
        let (train, val) = (self.split("train")?, self.split("val")?);
        for &seed in &self.config.seeds {
            let meta = |dir: PathBuf| dir.join(checkpoint::META);
            self.ensure_stage(&self.synth_dir(seed).join(io::SYNTH_MANIFEST), &self.synth_hash(seed), || self.gen_synth(seed))?;
            self.ensure_stage(&meta(self.member_dir(seed, 0)), &self.member_hash(seed, 0), || {
                self.fit_member(seed, 0, &train, &val, &taxonomy)
            })?;
            self.ensure_stage(&meta(self.backbone_dir(seed, Backbone::MaxEnt)), &self.backbone_hash(seed, Backbone::MaxEnt), || {
                self.finetune_maxent(seed)
            })?;
            for b in [Backbone::Base, Backbone::MaxEnt] {
                self.ensure_stage(&meta(self.metacog_dir(seed, b)), &self.metacog_hash(seed, b), || self.train_metacog(seed, b))?;
            }
        }
        let reports = Method::ABLATION.iter().map(|&m| self.evaluate(m)).collect::<Result<Vec<_>>>()?;
        let rows: Vec<TableRow> = Method::ABLATION.iter().zip(&reports).map(|(&m, r)| TableRow::new(m, r)).collect();
        write_csv(&self.root.join(ABLATION), &rows)?;
        Ok(reports)
    }

    /// Times the MEMOS path (MaxEnt backbone plus its metacognitive
    /// network) for `seed` and writes `timing/timing.json`.
    pub fn bench_time(&self, seed: u64) -> Result<TimingReport> {
        let seg = self.load_backbone(seed, Backbone::MaxEnt)?;
        let metacog = self.load_metacog(seed, Backbone::MaxEnt)?;
        let t = &self.config.eval.timing;
        let spec = TimingSpec {
            height: t.height.unwrap_or(self.config.data.height),
            width: t.width.unwrap_or(self.config.data.width),
            warmup: t.warmup,
            iters: t.iters,
        };
        let mut report = timing::benchmark_inference_time(&seg, &metacog, spec)?;
        report.config_hash = self.config_hash.clone();
        report.seed = seed;
        io::write_json(&self.timing_path(), &report)?;
        Ok(report)
    }

    /// Runs the MEMOS path on `images` (or, if none are given, the first
    /// overlay images of the test split) and writes a mask PNG, the raw
    /// mask as `.npy` and an overlay per image. Returns the written files.
    pub fn infer(&self, seed: u64, images: &[PathBuf]) -> Result<Vec<PathBuf>> {
        let seg = self.load_backbone(seed, Backbone::MaxEnt)?;
        let metacog = self.load_metacog(seed, Backbone::MaxEnt)?;
        let inputs: Vec<(String, memos_core::RgbImage)> = if images.is_empty() {
            self.split("test")?.into_iter().take(self.config.eval.overlay_images).map(|s| (s.id, s.image)).collect()
        } else {
            images
                .iter()
                .map(|p| {
                    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
                    let img = io::read_rgb_png(p).map_err(|message| LabError::Load { sample: stem.clone(), message })?;
                    Ok((stem, img))
                })
                .collect::<Result<_>>()?
        };
        let dir = self.infer_dir();
        let mut written = Vec::new();
        for (id, image) in &inputs {
            let mask = metacog::infer_ood_mask(&metacog, &seg, image)?;
            let files = [dir.join(format!("{id}_mask.png")), dir.join(format!("{id}_mask.npy")), dir.join(format!("{id}_overlay.png"))];
            plot::mask_png(&files[0], &mask)?;
            plot::write_npy(&files[1], &mask)?;
            io::write_rgb_png(&files[2], &plot::overlay(image, &mask)?)?;
            written.extend(files);
        }
        Ok(written)
    }
}
