//! WebAssembly bindings for the static page in `www/`.
//!
//! Each exported function takes plain numbers and returns a JSON string, so
//! the page needs no bundler. The `*_report` functions hold the logic and are
//! what the native tests call.

use adaeval::data::{generate_synthetic, SplitSizes, SyntheticSpec};
use adaeval::evalkit::{CostMode, CostModel};
use adaeval::gumbel::{self, GumbelSample};
use adaeval::model::{infer_traces, ModelConfig, ModelParams};
use adaeval::rng::SplitMix64;
use adaeval::train;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest number of draws the sampler accepts in one call.
pub const MAX_DRAWS: usize = 200_000;
/// Upper bounds keeping in-page training under a few seconds.
pub const MAX_TRAIN_VIDEOS: usize = 1000;
pub const MAX_EPOCHS: usize = 30;

#[derive(Debug, Serialize)]
pub struct GumbelReport {
    pub draws: usize,
    /// Exact softmax of the logits.
    pub probs: [f64; 2],
    /// Fraction of draws whose hard sample picked each category.
    pub hard_freq: [f64; 2],
    /// Mean of the relaxed sample.
    pub soft_mean: [f64; 2],
    /// A few relaxed samples, for display.
    pub examples: Vec<[f64; 2]>,
}

pub fn gumbel_report(l0: f64, l1: f64, tau: f64, draws: usize, seed: u64) -> Result<GumbelReport, String> {
    if draws == 0 || draws > MAX_DRAWS {
        return Err(format!("draws must be in 1..={MAX_DRAWS}"));
    }
    let logits = [l0, l1];
    let mut rng = SplitMix64::new(seed);
    let mut counts = [0usize; 2];
    let mut soft_sum = [0.0; 2];
    let mut examples = Vec::new();
    for i in 0..draws {
        let s = GumbelSample::draw(logits, tau, &mut rng).map_err(|e| e.to_string())?;
        counts[s.hard_bit as usize] += 1;
        soft_sum[0] += s.soft[0];
        soft_sum[1] += s.soft[1];
        if i < 8 {
            examples.push(s.soft);
        }
    }
    let m = l0.max(l1);
    let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
    let n = draws as f64;
    Ok(GumbelReport {
        draws,
        probs: [e0 / (e0 + e1), e1 / (e0 + e1)],
        hard_freq: [counts[0] as f64 / n, counts[1] as f64 / n],
        soft_mean: [soft_sum[0] / n, soft_sum[1] / n],
        examples,
    })
}

#[derive(Debug, Serialize)]
pub struct CostReport {
    pub paper_gflops: f64,
    pub full_gflops: f64,
    pub always_fine_full_gflops: f64,
    pub saving: f64,
}

pub fn cost_report(steps: usize, reads: usize, coarse_hidden: usize, fine_hidden: usize) -> Result<CostReport, String> {
    if reads > steps {
        return Err(format!("reads ({reads}) cannot exceed steps ({steps})"));
    }
    let config = ModelConfig {
        seq_len: steps.max(1),
        coarse_hidden,
        fine_hidden,
        ..ModelConfig::default()
    };
    config.validate().map_err(|e| e.to_string())?;
    let paper = CostModel::from_mode(CostMode::Paper);
    let full = CostModel::from_mode(CostMode::Full);
    let full_gflops = full.gflops(steps, reads, &config);
    let always = full.gflops(steps, steps, &config);
    Ok(CostReport {
        paper_gflops: paper.gflops(steps, reads, &config),
        full_gflops,
        always_fine_full_gflops: always,
        saving: if always > 0.0 { 1.0 - full_gflops / always } else { 0.0 },
    })
}

#[derive(Debug, Serialize)]
pub struct VideoView {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    /// One entry per frame, 1 where the fine features were read.
    pub bits: Vec<u8>,
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub log: Vec<train::EpochLog>,
    pub val_top1: f64,
    pub val_usage: f64,
    pub videos: Vec<VideoView>,
}

/// Generates a small synthetic set, trains the gated model and reports the
/// gate's decisions on a handful of validation videos.
pub fn train_report(seed: u64, train_videos: usize, epochs: usize, gamma: f64) -> Result<TrainReport, String> {
    if train_videos == 0 || train_videos > MAX_TRAIN_VIDEOS {
        return Err(format!("train videos must be in 1..={MAX_TRAIN_VIDEOS}"));
    }
    if epochs == 0 || epochs > MAX_EPOCHS {
        return Err(format!("epochs must be in 1..={MAX_EPOCHS}"));
    }
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let sizes = SplitSizes {
        train: train_videos,
        val: 100,
        test: 0,
    };
    let ds = generate_synthetic(&spec, sizes).map_err(|e| e.to_string())?;
    let config = ModelConfig {
        gamma,
        epochs,
        seed,
        ..ModelConfig::for_dataset(&ds.info)
    };
    config.validate().map_err(|e| e.to_string())?;
    let mut params = ModelParams::init(&config).map_err(|e| e.to_string())?;
    let train_set = ds.split("train").map_err(|e| e.to_string())?;
    let val_set = ds.split("val").map_err(|e| e.to_string())?;
    let log = train::train(&mut params, &config, train_set, val_set, |_| {}).map_err(|e| e.to_string())?;
    let traces = infer_traces(&params, &config, val_set).map_err(|e| e.to_string())?;
    let n = traces.len() as f64;
    let correct = traces
        .iter()
        .filter(|t| adaeval::evalkit::argmax_first(t.final_prediction()) == t.label)
        .count();
    let usage = traces.iter().map(|t| t.usage()).sum::<f64>() / n;
    let videos = traces
        .iter()
        .take(12)
        .map(|t| VideoView {
            id: t.video_id.clone(),
            label: t.label,
            predicted: adaeval::evalkit::argmax_first(t.final_prediction()),
            bits: t.bits.clone(),
        })
        .collect();
    Ok(TrainReport {
        log,
        val_top1: correct as f64 / n,
        val_usage: usage,
        videos,
    })
}

/// Tau the schedule uses at `epoch`.
pub fn default_tau(epoch: usize) -> f64 {
    ModelConfig::default().tau.tau_at(epoch)
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn sample_gumbel(l0: f64, l1: f64, tau: f64, draws: usize, seed: u32) -> Result<String, JsValue> {
    to_js(gumbel_report(l0, l1, tau, draws, seed as u64))
}

#[wasm_bindgen]
pub fn cost(steps: usize, reads: usize, coarse_hidden: usize, fine_hidden: usize) -> Result<String, JsValue> {
    to_js(cost_report(steps, reads, coarse_hidden, fine_hidden))
}

#[wasm_bindgen]
pub fn train_small(seed: u32, train_videos: usize, epochs: usize, gamma: f64) -> Result<String, JsValue> {
    to_js(train_report(seed as u64, train_videos, epochs, gamma))
}

#[wasm_bindgen]
pub fn tau_at(epoch: usize) -> f64 {
    default_tau(epoch)
}

/// Hard decision at inference; ties go to reading.
#[wasm_bindgen]
pub fn gate_decision(l0: f64, l1: f64) -> u8 {
    gumbel::hard_decision([l0, l1])
}
