//! Cost accounting, metrics, the offline and budgeted online protocols,
//! and the Uniform-K / Seq-K / plain LSTM baselines.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::VideoSample;
use crate::error::{Error, Result};
use crate::model::{self, GatePolicy, ModelConfig, ModelParams, StepTrace};
use crate::train::{self, EpochLog};

/// Per-frame CNN costs and which terms are counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub coarse_gflops_per_frame: f64,
    pub fine_gflops_per_frame: f64,
    /// Off in the uniform-sampling accounting, which has no coarse path.
    pub include_coarse_cost: bool,
    pub include_recurrent_cost: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Fine CNN cost only.
    Paper,
    /// Coarse and fine CNN costs plus the recurrent networks.
    Full,
}

impl std::str::FromStr for CostMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(CostMode::Paper),
            "full" => Ok(CostMode::Full),
            other => Err(Error::Config(format!("unknown cost mode {other:?} (expected paper or full)"))),
        }
    }
}

pub const COARSE_GFLOPS: f64 = 0.08;
pub const FINE_GFLOPS: f64 = 7.82;

impl CostModel {
    pub fn paper() -> Self {
        Self {
            coarse_gflops_per_frame: COARSE_GFLOPS,
            fine_gflops_per_frame: FINE_GFLOPS,
            include_coarse_cost: false,
            include_recurrent_cost: false,
        }
    }

    pub fn full() -> Self {
        Self {
            coarse_gflops_per_frame: COARSE_GFLOPS,
            fine_gflops_per_frame: FINE_GFLOPS,
            include_coarse_cost: true,
            include_recurrent_cost: true,
        }
    }

    /// CNN costs for both streams, no recurrent term.
    pub fn cnn_only() -> Self {
        Self {
            include_recurrent_cost: false,
            ..Self::full()
        }
    }

    pub fn from_mode(mode: CostMode) -> Self {
        match mode {
            CostMode::Paper => Self::paper(),
            CostMode::Full => Self::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if ok(self.coarse_gflops_per_frame) && ok(self.fine_gflops_per_frame) {
            Ok(())
        } else {
            Err(Error::Config("per-frame costs must be finite and >= 0".into()))
        }
    }

    fn coarse(&self) -> f64 {
        if self.include_coarse_cost {
            self.coarse_gflops_per_frame
        } else {
            0.0
        }
    }

    /// GFLOPs for `steps` coarse steps of which `reads` also read fine
    /// features.
    pub fn gflops(&self, steps: usize, reads: usize, config: &ModelConfig) -> f64 {
        let mut g = steps as f64 * self.coarse() + reads as f64 * self.fine_gflops_per_frame;
        if self.include_recurrent_cost {
            let r = RecurrentCost::of(config);
            g += (steps as f64 * (r.coarse_step + r.gate + r.classifier) + reads as f64 * r.fine_step) * 1e-9;
        }
        g
    }
}

/// FLOPs of the recurrent parts for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecurrentCost {
    pub coarse_step: f64,
    pub fine_step: f64,
    pub gate: f64,
    pub classifier: f64,
}

impl RecurrentCost {
    pub fn lstm_flops(input_dim: usize, hidden: usize) -> f64 {
        8.0 * hidden as f64 * (input_dim + hidden) as f64
    }

    pub fn affine_flops(input_dim: usize, output_dim: usize) -> f64 {
        2.0 * (input_dim * output_dim) as f64
    }

    pub fn of(config: &ModelConfig) -> Self {
        Self {
            coarse_step: Self::lstm_flops(config.coarse_feat_dim, config.coarse_hidden),
            fine_step: Self::lstm_flops(config.coarse_feat_dim + config.fine_feat_dim, config.fine_hidden),
            gate: Self::affine_flops(config.coarse_feat_dim + 2 * config.fine_hidden, 2),
            classifier: Self::affine_flops(config.fine_hidden, config.num_classes),
        }
    }
}

pub fn flops_for_trace(trace: &StepTrace, config: &ModelConfig, cost: &CostModel) -> f64 {
    cost.gflops(trace.len(), trace.reads(), config)
}

/// Lowest index among the maxima.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn top1(predictions: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Contract("top1 of an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::dim("top1 labels", predictions.len(), labels.len()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &y)| argmax_first(p) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub positives: usize,
    /// `None` for classes without positives; they are left out of the mean.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub per_class: Vec<ClassAp>,
}

impl MapResult {
    pub fn excluded(&self) -> Vec<usize> {
        self.per_class.iter().filter(|c| c.ap.is_none()).map(|c| c.class).collect()
    }
}

/// Non-interpolated AP per class, ranking by descending score with ties
/// broken by ascending video id.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[usize], ids: &[String]) -> Result<MapResult> {
    if scores.is_empty() {
        return Err(Error::Contract("mAP of an empty set".into()));
    }
    if scores.len() != labels.len() || scores.len() != ids.len() {
        return Err(Error::dim("mAP inputs", scores.len(), labels.len().min(ids.len())));
    }
    let classes = scores[0].len();
    if let Some(bad) = scores.iter().position(|s| s.len() != classes) {
        return Err(Error::data(&ids[bad], format!("score row has {} classes, expected {classes}", scores[bad].len())));
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    for c in 0..classes {
        let positives = labels.iter().filter(|&&y| y == c).count();
        if positives == 0 {
            per_class.push(ClassAp {
                class: c,
                positives,
                ap: None,
            });
            continue;
        }
        order.sort_by(|&a, &b| scores[b][c].total_cmp(&scores[a][c]).then_with(|| ids[a].cmp(&ids[b])));
        let (mut hits, mut sum) = (0usize, 0.0);
        for (rank, &v) in order.iter().enumerate() {
            if labels[v] == c {
                hits += 1;
                sum += hits as f64 / (rank + 1) as f64;
            }
        }
        per_class.push(ClassAp {
            class: c,
            positives,
            ap: Some(sum / positives as f64),
        });
    }
    let included: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    if included.is_empty() {
        return Err(Error::Contract("no class has a positive video".into()));
    }
    Ok(MapResult {
        map: included.iter().sum::<f64>() / included.len() as f64,
        per_class,
    })
}

/// One video's outcome under some protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub fine_reads: usize,
    /// 1-based step at which the prediction was taken.
    pub stop_step: usize,
    pub gflops: f64,
    pub prediction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub method: String,
    /// `None` for offline evaluation.
    pub budget_k: Option<usize>,
    pub num_videos: usize,
    pub top1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub per_class_ap: Vec<ClassAp>,
    pub mean_gflops: f64,
    pub mean_fine_reads: f64,
    pub videos: Vec<VideoSummary>,
}

impl EvalResult {
    /// Aggregates in video-id order so the result does not depend on input
    /// order.
    pub fn from_videos(method: &str, budget_k: Option<usize>, mut videos: Vec<VideoSummary>) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::Contract(format!("{method}: nothing to evaluate")));
        }
        videos.sort_by(|a, b| a.id.cmp(&b.id));
        let preds: Vec<Vec<f64>> = videos.iter().map(|v| v.prediction.clone()).collect();
        let labels: Vec<usize> = videos.iter().map(|v| v.label).collect();
        let ids: Vec<String> = videos.iter().map(|v| v.id.clone()).collect();
        let map = mean_average_precision(&preds, &labels, &ids)?;
        let n = videos.len() as f64;
        Ok(Self {
            method: method.to_string(),
            budget_k,
            num_videos: videos.len(),
            top1: top1(&preds, &labels)?,
            map: map.map,
            per_class_ap: map.per_class,
            mean_gflops: videos.iter().map(|v| v.gflops).sum::<f64>() / n,
            mean_fine_reads: videos.iter().map(|v| v.fine_reads as f64).sum::<f64>() / n,
            videos,
        })
    }

    /// Mean fraction of steps that read fine features.
    pub fn usage(&self, seq_len: usize) -> f64 {
        self.mean_fine_reads / seq_len as f64
    }

    pub fn stop_steps(&self) -> BTreeMap<String, usize> {
        self.videos.iter().map(|v| (v.id.clone(), v.stop_step)).collect()
    }

    pub fn predictions(&self) -> Vec<(&str, &[f64])> {
        self.videos.iter().map(|v| (v.id.as_str(), v.prediction.as_slice())).collect()
    }
}

/// Offline protocol over precomputed traces: the prediction is `p_T`.
pub fn offline_from_traces(
    traces: &[StepTrace],
    config: &ModelConfig,
    cost: &CostModel,
    method: &str,
) -> Result<EvalResult> {
    let videos = traces
        .iter()
        .map(|t| summarize(t, t.len(), t.reads(), config, cost))
        .collect();
    EvalResult::from_videos(method, None, videos)
}

/// Online protocol over precomputed traces for `K ≥ 1`; stops at the step
/// of the K-th fine read or at the end of the sequence.
pub fn online_from_traces(
    traces: &[StepTrace],
    k: usize,
    config: &ModelConfig,
    cost: &CostModel,
    method: &str,
) -> Result<EvalResult> {
    if k == 0 {
        return Err(Error::Contract(
            "budget 0 is a different policy; use eval_online, which reruns with the gate closed".into(),
        ));
    }
    let videos = traces
        .iter()
        .map(|t| {
            let stop = t.step_of_read(k).unwrap_or(t.len());
            summarize(t, stop, t.cumulative_reads[stop - 1], config, cost)
        })
        .collect();
    EvalResult::from_videos(method, Some(k), videos)
}

fn summarize(t: &StepTrace, stop: usize, reads: usize, config: &ModelConfig, cost: &CostModel) -> VideoSummary {
    let prediction = t.predictions[stop - 1].clone();
    VideoSummary {
        id: t.video_id.clone(),
        label: t.label,
        predicted: argmax_first(&prediction),
        fine_reads: reads,
        stop_step: stop,
        gflops: cost.gflops(stop, reads, config),
        prediction,
    }
}

pub fn eval_offline(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[VideoSample],
    cost: &CostModel,
) -> Result<EvalResult> {
    params.validate(config)?;
    let traces = model::infer_traces(params, config, samples)?;
    offline_from_traces(&traces, config, cost, method_name(config))
}

/// Budgeted evaluation; `None` means unlimited. With `K = 0` the model runs
/// with the gate closed for all `T` steps.
pub fn eval_online(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[VideoSample],
    k: Option<usize>,
    cost: &CostModel,
) -> Result<EvalResult> {
    params.validate(config)?;
    match k {
        None => eval_offline(params, config, samples, cost),
        Some(0) => {
            let closed = ModelConfig {
                gate: GatePolicy::AlwaysCoarse,
                ..config.clone()
            };
            let traces = model::infer_traces(params, &closed, samples)?;
            let mut r = offline_from_traces(&traces, &closed, cost, method_name(config))?;
            r.budget_k = Some(0);
            Ok(r)
        }
        Some(k) => {
            let traces = model::infer_traces(params, config, samples)?;
            online_from_traces(&traces, k, config, cost, method_name(config))
        }
    }
}

pub fn method_name(config: &ModelConfig) -> &'static str {
    match (config.gate, config.sync) {
        (GatePolicy::AlwaysFine, _) => "lstm_fine_always",
        (GatePolicy::AlwaysCoarse, _) => "lstm_coarse_only",
        (GatePolicy::Learned, model::SyncMode::Copy) => "liteeval",
        (GatePolicy::Learned, model::SyncMode::Keep) => "liteeval_no_sync",
    }
}

/// 1-based indices of `k` frames spread uniformly over `1..=k_prime`:
/// `⌈(2i+1)·K′ / 2K⌉` for `i = 0..K`. `k` is clamped to `k_prime`.
pub fn uniform_indices(k: usize, k_prime: usize) -> Vec<usize> {
    let k = k.min(k_prime);
    (0..k).map(|i| ((2 * i + 1) * k_prime).div_ceil(2 * k)).collect()
}

fn mean_of(trace: &StepTrace, steps: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; trace.predictions[0].len()];
    for &s in steps {
        for (a, p) in acc.iter_mut().zip(&trace.predictions[s - 1]) {
            *a += p;
        }
    }
    let n = steps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Recurrent FLOPs a per-frame predictor spends on `frames` frames.
fn baseline_recurrent(frames: usize, config: &ModelConfig, cost: &CostModel) -> f64 {
    if !cost.include_recurrent_cost {
        return 0.0;
    }
    let r = RecurrentCost::of(config);
    frames as f64 * (r.fine_step + r.classifier) * 1e-9
}

/// Averages the per-frame predictor's `p_t` at `K` uniform frames within the
/// first `K′` frames of each video; `K′` comes from a LiteEval online run.
/// Cost: `K` fine frames plus `K′` coarse frames.
pub fn baseline_uniform_k(
    frame_traces: &[StepTrace],
    k: usize,
    stop_steps: &BTreeMap<String, usize>,
    config: &ModelConfig,
    cost: &CostModel,
) -> Result<EvalResult> {
    if k == 0 {
        return Err(Error::Contract("Uniform-K needs K >= 1".into()));
    }
    let mut videos = Vec::with_capacity(frame_traces.len());
    for t in frame_traces {
        let k_prime = *stop_steps
            .get(&t.video_id)
            .ok_or_else(|| Error::data(&t.video_id, "no stopping step for this video"))?;
        let k_prime = k_prime.clamp(1, t.len());
        let idx = uniform_indices(k, k_prime);
        let prediction = mean_of(t, &idx);
        let gflops = idx.len() as f64 * cost.fine_gflops_per_frame
            + k_prime as f64 * cost.coarse()
            + baseline_recurrent(idx.len(), config, cost);
        videos.push(VideoSummary {
            id: t.video_id.clone(),
            label: t.label,
            predicted: argmax_first(&prediction),
            fine_reads: idx.len(),
            stop_step: k_prime,
            gflops,
            prediction,
        });
    }
    EvalResult::from_videos("uniform_k", Some(k), videos)
}

/// Averages `p_t` over frames `1..=K` (clamped to `T`). Cost: `K` fine
/// frames.
pub fn baseline_seq_k(
    frame_traces: &[StepTrace],
    k: usize,
    config: &ModelConfig,
    cost: &CostModel,
) -> Result<EvalResult> {
    if k == 0 {
        return Err(Error::Contract("Seq-K needs K >= 1".into()));
    }
    let videos = frame_traces
        .iter()
        .map(|t| {
            let k = k.min(t.len());
            let idx: Vec<usize> = (1..=k).collect();
            let prediction = mean_of(t, &idx);
            VideoSummary {
                id: t.video_id.clone(),
                label: t.label,
                predicted: argmax_first(&prediction),
                fine_reads: k,
                stop_step: k,
                gflops: k as f64 * cost.fine_gflops_per_frame + baseline_recurrent(k, config, cost),
                prediction,
            }
        })
        .collect();
    EvalResult::from_videos("seq_k", Some(k), videos)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LstmBaseline {
    CoarseOnly,
    FineAlways,
}

impl LstmBaseline {
    /// The LiteEval config that realizes this baseline.
    pub fn config(self, base: &ModelConfig) -> ModelConfig {
        match self {
            LstmBaseline::CoarseOnly => ModelConfig {
                gate: GatePolicy::AlwaysCoarse,
                sync: model::SyncMode::Copy,
                lambda: 0.0,
                ..base.clone()
            },
            LstmBaseline::FineAlways => ModelConfig {
                gate: GatePolicy::AlwaysFine,
                lambda: 0.0,
                ..base.clone()
            },
        }
    }
}

pub struct BaselineRun {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub result: EvalResult,
}

/// Trains a plain LSTM baseline with the LiteEval trainer and evaluates it
/// offline on `eval_set`.
pub fn baseline_lstm(
    variant: LstmBaseline,
    base: &ModelConfig,
    train_set: &[VideoSample],
    eval_set: &[VideoSample],
    cost: &CostModel,
) -> Result<BaselineRun> {
    let config = variant.config(base);
    let mut params = ModelParams::init(&config)?;
    let log = train::train(&mut params, &config, train_set, eval_set, |_| {})?;
    let result = eval_offline(&params, &config, eval_set, cost)?;
    Ok(BaselineRun {
        config,
        params,
        log,
        result,
    })
}

/// Contents of `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub version: u32,
    pub mode: String,
    pub cost_model: CostModel,
    pub config: ModelConfig,
    pub results: Vec<EvalResult>,
}

pub fn write_results_json(path: &Path, file: &ResultsFile) -> Result<()> {
    let text = serde_json::to_string_pretty(file).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_results_json(path: &Path) -> Result<ResultsFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// One row of `curves.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// `inf` for offline rows.
    #[serde(rename = "budget_K")]
    pub budget_k: String,
    pub mean_gflops: f64,
    pub top1: f64,
    pub method: String,
}

impl From<&EvalResult> for CurvePoint {
    fn from(r: &EvalResult) -> Self {
        Self {
            budget_k: r.budget_k.map_or_else(|| "inf".to_string(), |k| k.to_string()),
            mean_gflops: r.mean_gflops,
            top1: r.top1,
            method: r.method.clone(),
        }
    }
}

pub fn write_curves_csv(path: &Path, results: &[EvalResult]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let fail = |e: csv::Error| Error::format(path, e.to_string());
    if results.is_empty() {
        w.write_record(["budget_K", "mean_gflops", "top1", "method"]).map_err(fail)?;
    }
    for r in results {
        w.serialize(CurvePoint::from(r)).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Plain-text table of results for terminals.
pub fn format_table(results: &[EvalResult], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{:<20} {:>8} {:>8} {:>8} {:>12} {:>8}", "method", "budget", "top1", "mAP", "gflops", "reads")?;
    for r in results {
        let budget = r.budget_k.map_or_else(|| "inf".to_string(), |k| k.to_string());
        writeln!(
            out,
            "{:<20} {:>8} {:>8.4} {:>8.4} {:>12.4} {:>8.3}",
            r.method, budget, r.top1, r.map, r.mean_gflops, r.mean_fine_reads
        )?;
    }
    Ok(())
}
