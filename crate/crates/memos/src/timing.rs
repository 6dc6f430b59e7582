//! Stage-resolved inference timing.

use std::time::Instant;

use memos_core::rng;
use memos_core::seg::{self, SegmentationModel};
use memos_core::{MetacogNet, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Metacognitive overhead over backbone time for the full-scale model at
/// 1024×2048 (6.4 ms on top of 24.5 ms); logged next to the measured ratio.
pub const REFERENCE_RATIO: f64 = 6.4 / 24.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Backbone forward plus softmax, median milliseconds.
    pub backbone_ms: f64,
    /// Input stacking plus metacognitive forward, median milliseconds.
    pub metacog_ms: f64,
    /// Median of the per-iteration sum.
    pub total_ms: f64,
    pub height: usize,
    pub width: usize,
    pub device: String,
    pub warmup: usize,
    pub iters: usize,
    /// Set when fewer than 5 timed iterations back the medians.
    pub low_confidence: bool,
    pub metacog_to_backbone_ratio: f64,
    pub reference_ratio: f64,
    pub config_hash: String,
    pub seed: u64,
}

pub fn device_description() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("cpu {} ({} hardware threads, single-threaded inference)", std::env::consts::ARCH, threads)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// A fixed pseudo-random image, so every run times the same input.
pub fn timing_input(height: usize, width: usize) -> RgbImage {
    let data = (0..height * width * 3).map(|i| rng::splitmix64(0x7157 ^ i as u64) as u8).collect();
    RgbImage::from_raw(height, width, data).expect("buffer sized to image")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimingSpec {
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub iters: usize,
}

/// Times the full MEMOS path: `warmup` untimed runs, then medians over
/// `iters` timed runs (at least one). Provenance fields are left for the
/// caller to fill in.
pub fn benchmark_inference_time(
    seg: &dyn SegmentationModel,
    metacog: &MetacogNet,
    spec: TimingSpec,
) -> Result<TimingReport> {
    let image = timing_input(spec.height, spec.width);
    let run = || -> Result<(f64, f64)> {
        let t0 = Instant::now();
        let probs = seg::softmax(&seg.forward(&image)?)?;
        let t1 = Instant::now();
        let mask = metacog.forward(&metacog.input_for(&probs)?)?;
        let t2 = Instant::now();
        std::hint::black_box(mask);
        Ok(((t1 - t0).as_secs_f64() * 1e3, (t2 - t1).as_secs_f64() * 1e3))
    };
    for _ in 0..spec.warmup {
        run()?;
    }
    let iters = spec.iters.max(1);
    let mut backbone = Vec::with_capacity(iters);
    let mut meta = Vec::with_capacity(iters);
    let mut total = Vec::with_capacity(iters);
    for _ in 0..iters {
        let (b, m) = run()?;
        backbone.push(b);
        meta.push(m);
        total.push(b + m);
    }
    let (backbone_ms, metacog_ms) = (median(&mut backbone), median(&mut meta));
    Ok(TimingReport {
        backbone_ms,
        metacog_ms,
        total_ms: median(&mut total),
        height: spec.height,
        width: spec.width,
        device: device_description(),
        warmup: spec.warmup,
        iters,
        low_confidence: iters < 5,
        metacog_to_backbone_ratio: metacog_ms / backbone_ms,
        reference_ratio: REFERENCE_RATIO,
        config_hash: String::new(),
        seed: 0,
    })
}
