//! Mini-batch Adam training of the full model.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::VideoSample;
use crate::error::{Error, Result};
use crate::evalkit;
use crate::gumbel;
use crate::model::{self, streams, Batch, GatePolicy, ModelConfig, ModelParams, ModelVars, SequenceGate};
use crate::ndgrad::{Matrix, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[[usize; 2]]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|s| Matrix::zeros(s[0], s[1])).collect(),
            v: shapes.iter().map(|s| Matrix::zeros(s[0], s[1])).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("adam blocks", self.m.len(), params.len().min(grads.len())));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim(format!("adam block {i}"), p.len(), g.len()));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                *w -= c.learning_rate * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub tau: f64,
    pub train_loss: f64,
    pub train_usage: f64,
    pub val_top1: f64,
    pub val_usage: f64,
}

/// Loss, usage and gradients for one batch.
pub struct BatchStep {
    pub loss: f64,
    pub mean_usage: f64,
    pub grads: Vec<Matrix>,
}

/// Forward and backward pass for one batch with the given gate noise.
pub fn batch_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &Batch,
    tau: f64,
    noise: &[Matrix],
) -> Result<BatchStep> {
    let mut tape = Tape::new();
    let vars: ModelVars = params.register(&mut tape);
    let gate = SequenceGate::Train { tau, noise };
    let out = model::forward_sequence(&mut tape, &vars, config, batch, gate)?;
    let loss = model::objective(&mut tape, &out, batch, config)?;
    let loss_value = tape.value(loss)?.item();
    let usage = tape.value(out.usage)?;
    let mean_usage = usage.data().iter().sum::<f64>() / usage.rows() as f64;
    if !loss_value.is_finite() {
        return Ok(BatchStep {
            loss: loss_value,
            mean_usage,
            grads: Vec::new(),
        });
    }
    tape.backward(loss)?;
    let grads = vars.all().iter().map(|&v| tape.grad(v)).collect::<std::result::Result<_, _>>()?;
    Ok(BatchStep {
        loss: loss_value,
        mean_usage,
        grads,
    })
}

/// Trains `params` in place and returns the per-epoch log. `on_epoch` sees
/// each entry as soon as it is computed. Results depend only on the seed.
pub fn train(
    params: &mut ModelParams,
    config: &ModelConfig,
    train_set: &[VideoSample],
    val_set: &[VideoSample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    params.validate(config)?;
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    for s in train_set.iter().chain(val_set) {
        s.validate(config.seq_len, config.coarse_feat_dim, config.fine_feat_dim, config.num_classes)?;
    }

    let shapes: Vec<[usize; 2]> = params.blocks().iter().map(|m| m.shape()).collect();
    let mut adam = Adam::new(AdamConfig::with_rate(config.learning_rate), &shapes);
    let mut order_rng = config.stream(streams::DATA_ORDER);
    let mut noise_rng = config.stream(streams::GATE_NOISE);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let tau = config.tau.tau_at(epoch);
        order_rng.shuffle(&mut order);
        let (mut loss_sum, mut usage_sum, mut seen) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<&VideoSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::from_samples(&samples, config)?;
            let noise: Vec<Matrix> = if config.gate == GatePolicy::Learned {
                (0..config.seq_len)
                    .map(|_| gumbel::sample_noise_matrix(&mut noise_rng, batch.rows()))
                    .collect()
            } else {
                vec![Matrix::zeros(batch.rows(), 2); config.seq_len]
            };
            let step = batch_gradients(params, config, &batch, tau, &noise)?;
            if !step.loss.is_finite() || step.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: step.loss,
                });
            }
            adam.update(&mut params.blocks_mut(), &step.grads)?;
            loss_sum += step.loss * batch.rows() as f64;
            usage_sum += step.mean_usage * batch.rows() as f64;
            seen += batch.rows();
        }
        let traces = model::infer_traces(params, config, val_set)?;
        let preds: Vec<Vec<f64>> = traces.iter().map(|t| t.final_prediction().to_vec()).collect();
        let labels: Vec<usize> = traces.iter().map(|t| t.label).collect();
        let entry = EpochLog {
            epoch,
            tau,
            train_loss: loss_sum / seen as f64,
            train_usage: usage_sum / seen as f64,
            val_top1: evalkit::top1(&preds, &labels)?,
            val_usage: traces.iter().map(|t| t.usage()).sum::<f64>() / traces.len() as f64,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Writes the log as JSON lines.
pub fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for entry in log {
        let line = serde_json::to_string(entry).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })
        })
        .collect()
}
