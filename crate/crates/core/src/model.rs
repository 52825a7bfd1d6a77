//! The coarse-to-fine recurrent classifier.
//!
//! Per step: the coarse LSTM always consumes the coarse features; the gate
//! reads the coarse features and the previous fine state and emits two
//! logits; on a read (`B_t = 1`) the fine LSTM consumes `[v_c, v_f]`,
//! otherwise the fine state is carried over with its first `H_c` coordinates
//! overwritten by the new coarse state. Predictions come from the fine
//! hidden state at every step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cells::{
    self, class_logits, gate_logits, lstm_step, AffineVars, ClassifierParams, GateParams, LstmParams, LstmState,
    LstmVars,
};
use crate::data::{DatasetInfo, VideoSample};
use crate::error::{Error, Result};
use crate::gumbel::{self, TauSchedule};
use crate::ndgrad::{Matrix, Tape, Var};
use crate::rng::{mix64, SplitMix64};

/// How the per-step decision is made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatePolicy {
    /// Gumbel-Softmax straight-through in training, argmax at inference.
    Learned,
    AlwaysFine,
    AlwaysCoarse,
}

/// What happens to the fine state when the gate skips a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    /// Copy the coarse state into the first `H_c` fine coordinates.
    Copy,
    /// Keep the previous fine state verbatim.
    Keep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(rename = "Dc_feat")]
    pub coarse_feat_dim: usize,
    #[serde(rename = "Df_feat")]
    pub fine_feat_dim: usize,
    #[serde(rename = "Hc")]
    pub coarse_hidden: usize,
    #[serde(rename = "Hf")]
    pub fine_hidden: usize,
    pub num_classes: usize,
    #[serde(rename = "T")]
    pub seq_len: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub tau: TauSchedule,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub gate: GatePolicy,
    pub sync: SyncMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            coarse_feat_dim: 16,
            fine_feat_dim: 64,
            coarse_hidden: 8,
            fine_hidden: 32,
            num_classes: 10,
            seq_len: 16,
            gamma: 0.05,
            lambda: 2.0,
            tau: TauSchedule::default(),
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 50,
            seed: 0,
            gate: GatePolicy::Learned,
            sync: SyncMode::Copy,
        }
    }
}

impl ModelConfig {
    /// Default hyperparameters with dims taken from a dataset.
    pub fn for_dataset(info: &DatasetInfo) -> Self {
        Self {
            coarse_feat_dim: info.coarse_dim,
            fine_feat_dim: info.fine_dim,
            num_classes: info.num_classes,
            seq_len: info.seq_len,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.fine_hidden < self.coarse_hidden {
            return bad(format!(
                "Hf ({}) must be >= Hc ({}) for the sync copy",
                self.fine_hidden, self.coarse_hidden
            ));
        }
        if self.coarse_hidden == 0 || self.coarse_feat_dim == 0 || self.fine_feat_dim == 0 {
            return bad("hidden and feature dims must be >= 1".into());
        }
        if self.seq_len == 0 {
            return bad("T must be >= 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        self.tau.validate()
    }

    /// Independent random stream `k` derived from the seed.
    pub fn stream(&self, k: u64) -> SplitMix64 {
        SplitMix64::new(mix64(self.seed.wrapping_add(k.wrapping_mul(0x9E37_79B9))))
    }
}

/// Stream indices used with [`ModelConfig::stream`].
pub mod streams {
    pub const INIT: u64 = 0;
    pub const DATA_ORDER: u64 = 1;
    pub const GATE_NOISE: u64 = 2;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub coarse_cell: LstmParams,
    pub fine_cell: LstmParams,
    pub gate: GateParams,
    pub classifier: ClassifierParams,
}

pub const BLOCK_NAMES: [&str; 8] = [
    "coarse_cell.w",
    "coarse_cell.b",
    "fine_cell.w",
    "fine_cell.b",
    "gate.w",
    "gate.b",
    "classifier.w",
    "classifier.b",
];

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = config.stream(streams::INIT);
        let coarse_cell = LstmParams::init(config.coarse_feat_dim, config.coarse_hidden, &mut rng);
        let fine_cell = LstmParams::init(
            config.coarse_feat_dim + config.fine_feat_dim,
            config.fine_hidden,
            &mut rng,
        );
        let gate = GateParams::init(config.coarse_feat_dim, config.fine_hidden, &mut rng);
        let classifier = ClassifierParams::zeros(config.fine_hidden, config.num_classes);
        Ok(Self {
            coarse_cell,
            fine_cell,
            gate,
            classifier,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            coarse_cell: LstmParams::zeros(config.coarse_feat_dim, config.coarse_hidden),
            fine_cell: LstmParams::zeros(config.coarse_feat_dim + config.fine_feat_dim, config.fine_hidden),
            gate: GateParams::zeros(config.coarse_feat_dim, config.fine_hidden),
            classifier: ClassifierParams::zeros(config.fine_hidden, config.num_classes),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let expect = Self::zeros(config);
        if self.coarse_cell.input_dim != expect.coarse_cell.input_dim
            || self.coarse_cell.hidden != expect.coarse_cell.hidden
        {
            return Err(Error::Checkpoint("coarse cell dims disagree with config".into()));
        }
        if self.fine_cell.input_dim != expect.fine_cell.input_dim || self.fine_cell.hidden != expect.fine_cell.hidden {
            return Err(Error::Checkpoint("fine cell dims disagree with config".into()));
        }
        self.coarse_cell.validate("coarse_cell")?;
        self.fine_cell.validate("fine_cell")?;
        self.gate.validate(config.coarse_feat_dim, config.fine_hidden)?;
        self.classifier.validate(config.fine_hidden, config.num_classes)
    }

    pub fn blocks(&self) -> [&Matrix; 8] {
        [
            &self.coarse_cell.w,
            &self.coarse_cell.b,
            &self.fine_cell.w,
            &self.fine_cell.b,
            &self.gate.w,
            &self.gate.b,
            &self.classifier.w,
            &self.classifier.b,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.coarse_cell.w,
            &mut self.coarse_cell.b,
            &mut self.fine_cell.w,
            &mut self.fine_cell.b,
            &mut self.gate.w,
            &mut self.gate.b,
            &mut self.classifier.w,
            &mut self.classifier.b,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|m| m.len()).sum()
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            coarse: self.coarse_cell.register(tape),
            fine: self.fine_cell.register(tape),
            gate: self.gate.register(tape),
            classifier: self.classifier.register(tape),
        }
    }
}

/// Model parameters as recorded on one tape.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub coarse: LstmVars,
    pub fine: LstmVars,
    pub gate: AffineVars,
    pub classifier: AffineVars,
}

impl ModelVars {
    /// Same order as [`BLOCK_NAMES`].
    pub fn all(&self) -> [Var; 8] {
        [
            self.coarse.w,
            self.coarse.b,
            self.fine.w,
            self.fine.b,
            self.gate.w,
            self.gate.b,
            self.classifier.w,
            self.classifier.b,
        ]
    }

    /// Rebuilds handles from parameter leaves in [`BLOCK_NAMES`] order.
    pub fn from_slice(vars: &[Var], config: &ModelConfig) -> Self {
        Self {
            coarse: LstmVars {
                w: vars[0],
                b: vars[1],
                input_dim: config.coarse_feat_dim,
                hidden: config.coarse_hidden,
            },
            fine: LstmVars {
                w: vars[2],
                b: vars[3],
                input_dim: config.coarse_feat_dim + config.fine_feat_dim,
                hidden: config.fine_hidden,
            },
            gate: AffineVars { w: vars[4], b: vars[5] },
            classifier: AffineVars { w: vars[6], b: vars[7] },
        }
    }
}

/// How the gate decides at one step.
#[derive(Debug, Clone, Copy)]
pub enum StepGate<'a> {
    /// Relaxed sample with the given `rows × 2` Gumbel noise, hard forward.
    Train { tau: f64, noise: &'a Matrix },
    /// Argmax of the logits, no noise.
    Infer,
    /// Soft sample used directly as `B_t`; smooth in the parameters, which
    /// is what finite-difference checks need.
    Relaxed { tau: f64, noise: &'a Matrix },
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub coarse: LstmState,
    pub fine: LstmState,
    /// `rows × 2` gate logits.
    pub gate_logits: Var,
    /// `rows × 1` decision `B_t`; exactly 0 or 1 except in relaxed mode.
    pub decision: Var,
    pub bits: Vec<u8>,
    pub class_logits: Var,
    /// `rows × classes` prediction `p_t`.
    pub probs: Var,
}

/// One recurrent step over a batch of rows.
#[allow(clippy::too_many_arguments)]
pub fn step(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    v_c: Var,
    v_f: Var,
    coarse: &LstmState,
    fine: &LstmState,
    gate_mode: StepGate<'_>,
) -> Result<StepOutput> {
    let rows = tape.shape(v_c)?[0];
    let coarse_next = lstm_step(tape, &vars.coarse, v_c, coarse)?;
    let logits = gate_logits(tape, &vars.gate, v_c, fine.h, fine.c)?;

    let (decision, bits) = match (config.gate, gate_mode) {
        (GatePolicy::AlwaysFine, _) => constant_decision(tape, vec![1; rows]),
        (GatePolicy::AlwaysCoarse, _) => constant_decision(tape, vec![0; rows]),
        (GatePolicy::Learned, StepGate::Infer) => {
            let lv = tape.value(logits)?;
            let bits = (0..rows)
                .map(|r| gumbel::hard_decision([lv.get(r, 0), lv.get(r, 1)]))
                .collect();
            constant_decision(tape, bits)
        }
        (GatePolicy::Learned, StepGate::Train { tau, noise }) => {
            if noise.shape() != [rows, 2] {
                return Err(Error::dim("gate noise rows", rows, noise.rows()));
            }
            let soft = gumbel::relaxed_sample(tape, logits, noise, tau)?;
            let hard = gumbel::straight_through_var(tape, soft)?;
            let b = tape.slice(hard, 1, 1, 2)?;
            let bits = tape.value(b)?.data().iter().map(|&v| v as u8).collect();
            (b, bits)
        }
        (GatePolicy::Learned, StepGate::Relaxed { tau, noise }) => {
            if noise.shape() != [rows, 2] {
                return Err(Error::dim("gate noise rows", rows, noise.rows()));
            }
            let soft = gumbel::relaxed_sample(tape, logits, noise, tau)?;
            let b = tape.slice(soft, 1, 1, 2)?;
            let bits = tape.value(b)?.data().iter().map(|&v| u8::from(v >= 0.5)).collect();
            (b, bits)
        }
    };

    let x = tape.concat(v_c, v_f, 1)?;
    let candidate = lstm_step(tape, &vars.fine, x, fine)?;
    let fallback = match config.sync {
        SyncMode::Copy => LstmState {
            h: sync_copy(tape, coarse_next.h, fine.h, config)?,
            c: sync_copy(tape, coarse_next.c, fine.c, config)?,
        },
        SyncMode::Keep => *fine,
    };
    let keep = tape.scalar_mul(decision, -1.0)?;
    let keep = tape.add_scalar(keep, 1.0)?;
    let fine_next = LstmState {
        h: blend(tape, decision, candidate.h, keep, fallback.h)?,
        c: blend(tape, decision, candidate.c, keep, fallback.c)?,
    };
    let class_logits = class_logits(tape, &vars.classifier, fine_next.h)?;
    let probs = tape.softmax(class_logits, 1)?;
    Ok(StepOutput {
        coarse: coarse_next,
        fine: fine_next,
        gate_logits: logits,
        decision,
        bits,
        class_logits,
        probs,
    })
}

fn constant_decision(tape: &mut Tape, bits: Vec<u8>) -> (Var, Vec<u8>) {
    let col = Matrix::from_vec(bits.len(), 1, bits.iter().map(|&b| b as f64).collect()).expect("rows × 1");
    (tape.constant(col), bits)
}

/// `[coarse, previous_fine[H_c..H_f]]`.
fn sync_copy(tape: &mut Tape, coarse: Var, previous_fine: Var, config: &ModelConfig) -> Result<Var> {
    if config.coarse_hidden == config.fine_hidden {
        return Ok(coarse);
    }
    let tail = tape.slice(previous_fine, 1, config.coarse_hidden, config.fine_hidden)?;
    Ok(tape.concat(coarse, tail, 1)?)
}

/// `B ⊙ on + (1 − B) ⊙ off`, row-wise.
fn blend(tape: &mut Tape, b: Var, on: Var, keep: Var, off: Var) -> Result<Var> {
    let x = tape.scale_rows(on, b)?;
    let y = tape.scale_rows(off, keep)?;
    Ok(tape.add(x, y)?)
}

/// Features of several videos arranged per time step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    /// `T` matrices of `rows × D_c`.
    pub coarse: Vec<Matrix>,
    /// `T` matrices of `rows × D_f`.
    pub fine: Vec<Matrix>,
}

impl Batch {
    pub fn from_samples(samples: &[&VideoSample], config: &ModelConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        for s in samples {
            s.validate(config.seq_len, config.coarse_feat_dim, config.fine_feat_dim, config.num_classes)?;
        }
        let rows = samples.len();
        let gather = |dim: usize, t: usize, fine: bool| {
            let mut data = Vec::with_capacity(rows * dim);
            for s in samples {
                let row = if fine { s.fine_row(t) } else { s.coarse_row(t) };
                data.extend(row.iter().map(|&v| v as f64));
            }
            Matrix::from_vec(rows, dim, data).expect("rows × dim")
        };
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            coarse: (0..config.seq_len).map(|t| gather(config.coarse_feat_dim, t, false)).collect(),
            fine: (0..config.seq_len).map(|t| gather(config.fine_feat_dim, t, true)).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn one_hot(&self, num_classes: usize) -> Matrix {
        let mut m = Matrix::zeros(self.rows(), num_classes);
        for (r, &y) in self.labels.iter().enumerate() {
            m.set(r, y, 1.0);
        }
        m
    }
}

/// Gate behaviour over a whole sequence.
#[derive(Debug, Clone, Copy)]
pub enum SequenceGate<'a> {
    /// One `rows × 2` noise matrix per step.
    Train { tau: f64, noise: &'a [Matrix] },
    Infer,
    Relaxed { tau: f64, noise: &'a [Matrix] },
}

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    pub steps: Vec<StepOutput>,
    /// `rows × 1` fraction of steps with `B_t = 1`, differentiable through
    /// the relaxed samples.
    pub usage: Var,
}

impl SequenceOutput {
    pub fn last(&self) -> &StepOutput {
        self.steps.last().expect("T >= 1")
    }
}

/// Runs `T` steps from zero states.
pub fn forward_sequence(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    batch: &Batch,
    gate: SequenceGate<'_>,
) -> Result<SequenceOutput> {
    let rows = batch.rows();
    if batch.coarse.len() != config.seq_len || batch.fine.len() != config.seq_len {
        return Err(Error::dim("sequence length", config.seq_len, batch.coarse.len()));
    }
    if let SequenceGate::Train { noise, .. } | SequenceGate::Relaxed { noise, .. } = gate {
        if noise.len() != config.seq_len {
            return Err(Error::dim("gate noise steps", config.seq_len, noise.len()));
        }
    }
    let mut coarse = LstmState::zeros(tape, rows, config.coarse_hidden);
    let mut fine = LstmState::zeros(tape, rows, config.fine_hidden);
    let mut steps = Vec::with_capacity(config.seq_len);
    let mut reads: Option<Var> = None;
    for t in 0..config.seq_len {
        let v_c = tape.constant(batch.coarse[t].clone());
        let v_f = tape.constant(batch.fine[t].clone());
        let mode = match gate {
            SequenceGate::Train { tau, noise } => StepGate::Train { tau, noise: &noise[t] },
            SequenceGate::Infer => StepGate::Infer,
            SequenceGate::Relaxed { tau, noise } => StepGate::Relaxed { tau, noise: &noise[t] },
        };
        let out = step(tape, vars, config, v_c, v_f, &coarse, &fine, mode)?;
        reads = Some(match reads {
            None => out.decision,
            Some(acc) => tape.add(acc, out.decision)?,
        });
        coarse = out.coarse;
        fine = out.fine;
        steps.push(out);
    }
    let usage = tape.scalar_mul(reads.expect("T >= 1"), 1.0 / config.seq_len as f64)?;
    Ok(SequenceOutput { steps, usage })
}

/// Batch mean of `−log p_T[y] + λ (usage − γ)²`.
pub fn objective(tape: &mut Tape, out: &SequenceOutput, batch: &Batch, config: &ModelConfig) -> Result<Var> {
    let target = tape.constant(batch.one_hot(config.num_classes));
    let ce = tape.cross_entropy(out.last().class_logits, target)?;
    let dev = tape.add_scalar(out.usage, -config.gamma)?;
    let sq = tape.square(dev)?;
    let penalty = tape.mean(sq)?;
    let penalty = tape.scalar_mul(penalty, config.lambda)?;
    Ok(tape.add(ce, penalty)?)
}

/// Scalar form of the per-video objective.
pub fn loss_value(p_final: &[f64], label: usize, usage: f64, gamma: f64, lambda: f64) -> f64 {
    -p_final[label].max(crate::ndgrad::LOG_CLAMP).ln() + lambda * (usage - gamma).powi(2)
}

/// Per-video record of one inference pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub video_id: String,
    pub label: usize,
    pub bits: Vec<u8>,
    pub gate_logits: Vec<[f64; 2]>,
    pub predictions: Vec<Vec<f64>>,
    pub cumulative_reads: Vec<usize>,
}

impl StepTrace {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn reads(&self) -> usize {
        self.cumulative_reads.last().copied().unwrap_or(0)
    }

    pub fn usage(&self) -> f64 {
        self.reads() as f64 / self.len() as f64
    }

    pub fn final_prediction(&self) -> &[f64] {
        self.predictions.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// 1-based step at which the `k`-th read happens, if it does.
    pub fn step_of_read(&self, k: usize) -> Option<usize> {
        if k == 0 {
            return None;
        }
        self.cumulative_reads.iter().position(|&c| c >= k).map(|i| i + 1)
    }
}

/// Splits a sequence output into per-row traces.
pub fn collect_traces(tape: &Tape, out: &SequenceOutput, batch: &Batch) -> Result<Vec<StepTrace>> {
    let rows = batch.rows();
    let mut traces: Vec<StepTrace> = (0..rows)
        .map(|r| StepTrace {
            video_id: batch.ids[r].clone(),
            label: batch.labels[r],
            bits: Vec::with_capacity(out.steps.len()),
            gate_logits: Vec::with_capacity(out.steps.len()),
            predictions: Vec::with_capacity(out.steps.len()),
            cumulative_reads: Vec::with_capacity(out.steps.len()),
        })
        .collect();
    for s in &out.steps {
        let logits = tape.value(s.gate_logits)?;
        let probs = tape.value(s.probs)?;
        for (r, tr) in traces.iter_mut().enumerate() {
            let bit = s.bits[r];
            let prev = tr.cumulative_reads.last().copied().unwrap_or(0);
            tr.bits.push(bit);
            tr.cumulative_reads.push(prev + bit as usize);
            tr.gate_logits.push([logits.get(r, 0), logits.get(r, 1)]);
            tr.predictions.push(probs.row(r).to_vec());
        }
    }
    Ok(traces)
}

/// Deterministic inference over one chunk of videos.
fn infer_chunk(params: &ModelParams, config: &ModelConfig, samples: &[VideoSample]) -> Result<Vec<StepTrace>> {
    let refs: Vec<&VideoSample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, config)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = forward_sequence(&mut tape, &vars, config, &batch, SequenceGate::Infer)?;
    collect_traces(&tape, &out, &batch)
}

const INFER_CHUNK: usize = 64;

/// Inference traces for every sample, in input order. Chunks run on
/// separate threads where available; results do not depend on the split.
pub fn infer_traces(params: &ModelParams, config: &ModelConfig, samples: &[VideoSample]) -> Result<Vec<StepTrace>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let chunks: Vec<&[VideoSample]> = samples.chunks(INFER_CHUNK).collect();
    let results: Vec<Result<Vec<StepTrace>>> = parallel_map(&chunks, |c| infer_chunk(params, config, c));
    let mut out = Vec::with_capacity(samples.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(not(target_arch = "wasm32"))]
pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let per = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(per)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(target_arch = "wasm32")]
pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Runs one video; returns `p_T` and the trace.
pub fn forward_video(
    params: &ModelParams,
    config: &ModelConfig,
    sample: &VideoSample,
    gate: SequenceGate<'_>,
) -> Result<(Vec<f64>, StepTrace)> {
    let batch = Batch::from_samples(&[sample], config)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = forward_sequence(&mut tape, &vars, config, &batch, gate)?;
    let trace = collect_traces(&tape, &out, &batch)?.pop().expect("one row");
    Ok((trace.final_prediction().to_vec(), trace))
}

/// Writes `header.json` (with the config) and `params.bin` into `dir`.
pub fn save_checkpoint(params: &ModelParams, config: &ModelConfig, dir: &Path) -> Result<()> {
    params.validate(config)?;
    let blocks: Vec<(String, &Matrix)> = BLOCK_NAMES
        .iter()
        .zip(params.blocks())
        .map(|(n, m)| (n.to_string(), m))
        .collect();
    let cfg = serde_json::to_value(config).map_err(|e| Error::Json {
        path: dir.to_path_buf(),
        source: e,
    })?;
    cells::write_param_blocks(dir, &blocks, cfg)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, ModelConfig)> {
    let (header, blocks) = cells::read_param_blocks(dir)?;
    let config: ModelConfig = serde_json::from_value(header.config).map_err(|e| Error::Json {
        path: dir.join(cells::HEADER_FILE),
        source: e,
    })?;
    config.validate()?;
    let names: Vec<&str> = blocks.iter().map(|(n, _)| n.as_str()).collect();
    if names != BLOCK_NAMES {
        return Err(Error::Checkpoint(format!("expected blocks {BLOCK_NAMES:?}, found {names:?}")));
    }
    let mut params = ModelParams::zeros(&config);
    for (slot, (name, m)) in params.blocks_mut().into_iter().zip(blocks) {
        if slot.shape() != m.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: config implies {:?}, file has {:?}",
                slot.shape(),
                m.shape()
            )));
        }
        *slot = m;
    }
    params.validate(&config)?;
    Ok((params, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            coarse_feat_dim: 3,
            fine_feat_dim: 5,
            coarse_hidden: 2,
            fine_hidden: 4,
            num_classes: 3,
            seq_len: 3,
            ..ModelConfig::default()
        }
    }

    fn random(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn sample(cfg: &ModelConfig, rng: &mut SplitMix64, id: &str, label: usize) -> VideoSample {
        VideoSample {
            id: id.into(),
            label,
            seq_len: cfg.seq_len,
            coarse_dim: cfg.coarse_feat_dim,
            fine_dim: cfg.fine_feat_dim,
            coarse: (0..cfg.seq_len * cfg.coarse_feat_dim).map(|_| rng.normal() as f32).collect(),
            fine: (0..cfg.seq_len * cfg.fine_feat_dim).map(|_| rng.normal() as f32).collect(),
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let err = ModelConfig {
            coarse_hidden: 8,
            fine_hidden: 4,
            ..ModelConfig::default()
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("Hf"));
        assert!(ModelConfig { gamma: 1.5, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { seq_len: 0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelParams::init(&ModelConfig {
            coarse_hidden: 9,
            fine_hidden: 4,
            ..ModelConfig::default()
        })
        .is_err());
    }

    fn run_step(cfg: &ModelConfig, params: &ModelParams, seed: u64) -> (Tape, StepOutput, LstmState, LstmState) {
        let mut rng = SplitMix64::new(seed);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let v_c = tape.constant(random(&mut rng, 2, cfg.coarse_feat_dim));
        let v_f = tape.constant(random(&mut rng, 2, cfg.fine_feat_dim));
        let coarse = LstmState {
            h: tape.constant(random(&mut rng, 2, cfg.coarse_hidden).map(|v| v * 0.3)),
            c: tape.constant(random(&mut rng, 2, cfg.coarse_hidden)),
        };
        let fine = LstmState {
            h: tape.constant(random(&mut rng, 2, cfg.fine_hidden).map(|v| v * 0.3)),
            c: tape.constant(random(&mut rng, 2, cfg.fine_hidden)),
        };
        let out = step(&mut tape, &vars, cfg, v_c, v_f, &coarse, &fine, StepGate::Infer).unwrap();
        (tape, out, coarse, fine)
    }

    #[test]
    fn forced_read_equals_plain_fine_step() {
        let cfg = ModelConfig {
            gate: GatePolicy::AlwaysFine,
            ..tiny_config()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let (mut tape, out, _, fine) = run_step(&cfg, &params, 3);
        assert_eq!(out.bits, vec![1, 1]);
        // recompute the fLSTM step alone on the same tape inputs
        let vars = params.register(&mut tape);
        let mut rng = SplitMix64::new(3);
        let v_c = tape.constant(random(&mut rng, 2, cfg.coarse_feat_dim));
        let v_f = tape.constant(random(&mut rng, 2, cfg.fine_feat_dim));
        let x = tape.concat(v_c, v_f, 1).unwrap();
        let plain = lstm_step(&mut tape, &vars.fine, x, &fine).unwrap();
        assert_eq!(tape.value(out.fine.h).unwrap(), tape.value(plain.h).unwrap());
        assert_eq!(tape.value(out.fine.c).unwrap(), tape.value(plain.c).unwrap());
    }

    #[test]
    fn learned_gate_with_huge_bias_reads() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg).unwrap();
        params.gate.w = Matrix::zeros(params.gate.w.rows(), 2);
        params.gate.b = Matrix::row_vector(vec![0.0, 10.0]);
        let (_, out, _, _) = run_step(&cfg, &params, 4);
        assert_eq!(out.bits, vec![1, 1]);
    }

    #[test]
    fn skip_copies_coarse_state_bitwise() {
        let cfg = ModelConfig {
            gate: GatePolicy::AlwaysCoarse,
            ..tiny_config()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let (tape, out, _, fine) = run_step(&cfg, &params, 5);
        assert_eq!(out.bits, vec![0, 0]);
        let hc = tape.value(out.coarse.h).unwrap();
        let cc = tape.value(out.coarse.c).unwrap();
        let hf = tape.value(out.fine.h).unwrap();
        let cf = tape.value(out.fine.c).unwrap();
        let (hprev, cprev) = (tape.value(fine.h).unwrap(), tape.value(fine.c).unwrap());
        for r in 0..2 {
            for j in 0..cfg.coarse_hidden {
                assert_eq!(hf.get(r, j).to_bits(), hc.get(r, j).to_bits());
                assert_eq!(cf.get(r, j).to_bits(), cc.get(r, j).to_bits());
            }
            for j in cfg.coarse_hidden..cfg.fine_hidden {
                assert_eq!(hf.get(r, j).to_bits(), hprev.get(r, j).to_bits());
                assert_eq!(cf.get(r, j).to_bits(), cprev.get(r, j).to_bits());
            }
        }
    }

    #[test]
    fn skip_without_sync_keeps_state() {
        let cfg = ModelConfig {
            gate: GatePolicy::AlwaysCoarse,
            sync: SyncMode::Keep,
            ..tiny_config()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let (tape, out, _, fine) = run_step(&cfg, &params, 6);
        assert_eq!(tape.value(out.fine.h).unwrap(), tape.value(fine.h).unwrap());
        assert_eq!(tape.value(out.fine.c).unwrap(), tape.value(fine.c).unwrap());
    }

    #[test]
    fn all_reads_give_full_usage_and_t_predictions() {
        let cfg = ModelConfig {
            gate: GatePolicy::AlwaysFine,
            ..tiny_config()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let mut rng = SplitMix64::new(1);
        let s = sample(&cfg, &mut rng, "v0", 1);
        let (p, trace) = forward_video(&params, &cfg, &s, SequenceGate::Infer).unwrap();
        assert_eq!(trace.usage(), 1.0);
        assert_eq!(trace.predictions.len(), cfg.seq_len);
        assert_eq!(trace.cumulative_reads, vec![1, 2, 3]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_dims_name_the_video() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg).unwrap();
        let mut rng = SplitMix64::new(1);
        let mut s = sample(&cfg, &mut rng, "broken-7", 0);
        s.fine.pop();
        let err = forward_video(&params, &cfg, &s, SequenceGate::Infer).unwrap_err();
        assert!(err.to_string().contains("broken-7"), "{err}");
    }

    #[test]
    fn loss_value_examples() {
        let p = [0.25; 4];
        let v = loss_value(&p, 2, 0.5, 0.05, 2.0);
        assert!((v - 1.791294).abs() < 1e-6, "{v}");
        assert_eq!(loss_value(&[0.0, 1.0], 1, 0.3, 0.3, 2.0), 0.0);
        let ce = -(0.7f64).ln();
        assert_eq!(loss_value(&[0.3, 0.7], 1, 0.9, 0.1, 0.0), ce);
    }

    #[test]
    fn objective_matches_scalar_form() {
        let cfg = ModelConfig {
            lambda: 2.0,
            gamma: 0.2,
            ..tiny_config()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let mut rng = SplitMix64::new(8);
        let samples: Vec<VideoSample> = (0..3).map(|i| sample(&cfg, &mut rng, &format!("v{i}"), i % 3)).collect();
        let refs: Vec<&VideoSample> = samples.iter().collect();
        let batch = Batch::from_samples(&refs, &cfg).unwrap();
        let noise: Vec<Matrix> = (0..cfg.seq_len)
            .map(|_| gumbel::sample_noise_matrix(&mut rng, 3))
            .collect();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let out = forward_sequence(&mut tape, &vars, &cfg, &batch, SequenceGate::Train { tau: 1.0, noise: &noise }).unwrap();
        let loss = objective(&mut tape, &out, &batch, &cfg).unwrap();
        let traces = collect_traces(&tape, &out, &batch).unwrap();
        let want: f64 = traces
            .iter()
            .map(|t| loss_value(t.final_prediction(), t.label, t.usage(), cfg.gamma, cfg.lambda))
            .sum::<f64>()
            / 3.0;
        assert!((tape.value(loss).unwrap().item() - want).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg).unwrap();
        save_checkpoint(&params, &cfg, dir.path()).unwrap();
        let (back, cfg2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg, cfg2);
        for (a, b) in params.blocks().iter().zip(back.blocks()) {
            let x: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let y: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn checkpoint_with_edited_hidden_size_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        save_checkpoint(&ModelParams::init(&cfg).unwrap(), &cfg, dir.path()).unwrap();
        let hpath = dir.path().join(cells::HEADER_FILE);
        let text = std::fs::read_to_string(&hpath).unwrap();
        std::fs::write(&hpath, text.replace("\"Hf\": 4", "\"Hf\": 6")).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("shape mismatch"), "{err}");
    }
}
