//! Gumbel-Max sampling of the two-way gate, its Gumbel-Softmax relaxation,
//! straight-through hard decisions, and the temperature schedule.
//!
//! Gate logits are used directly in place of `log b_k`. Index 1 means "read
//! fine features"; every argmax in this module breaks ties toward it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{self, Matrix, Tape, Var};
use crate::rng::SplitMix64;

/// Uniform draws are clamped to `[UNIFORM_CLAMP, 1 − UNIFORM_CLAMP]`.
pub const UNIFORM_CLAMP: f64 = 1e-12;

/// `G = −log(−log U)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

pub fn sample_gumbel_noise(rng: &mut SplitMix64) -> [f64; 2] {
    [gumbel_from_uniform(rng.open01()), gumbel_from_uniform(rng.open01())]
}

/// `rows × 2` matrix of independent Gumbel noise, drawn row by row.
pub fn sample_noise_matrix(rng: &mut SplitMix64, rows: usize) -> Matrix {
    let mut data = Vec::with_capacity(rows * 2);
    for _ in 0..rows {
        data.extend_from_slice(&sample_gumbel_noise(rng));
    }
    Matrix::from_vec(rows, 2, data).expect("rows × 2")
}

/// `argmax_k (log_b[k] + g[k])`.
pub fn gumbel_max(log_b: [f64; 2], g: [f64; 2]) -> usize {
    if log_b[1] + g[1] >= log_b[0] + g[0] {
        1
    } else {
        0
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("temperature must be > 0, got {tau}")))
    }
}

/// `softmax((log_b + g) / τ)`.
pub fn gumbel_softmax(log_b: [f64; 2], g: [f64; 2], tau: f64) -> Result<[f64; 2]> {
    check_tau(tau)?;
    let z = [(log_b[0] + g[0]) / tau, (log_b[1] + g[1]) / tau];
    let mut out = [0.0; 2];
    ndgrad::softmax_slice(&z, &mut out);
    Ok(out)
}

/// Hard decision from a relaxed sample: `(bit, one_hot)`.
pub fn straight_through(soft: [f64; 2]) -> (u8, [f64; 2]) {
    if soft[1] >= soft[0] {
        (1, [0.0, 1.0])
    } else {
        (0, [1.0, 0.0])
    }
}

/// Deterministic inference decision: argmax of the raw logits.
pub fn hard_decision(logits: [f64; 2]) -> u8 {
    gumbel_max(logits, [0.0, 0.0]) as u8
}

/// Every intermediate of one relaxed gate draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GumbelSample {
    pub uniforms: [f64; 2],
    pub noise: [f64; 2],
    pub logits: [f64; 2],
    pub tau: f64,
    pub soft: [f64; 2],
    pub hard_bit: u8,
}

impl GumbelSample {
    pub fn draw(logits: [f64; 2], tau: f64, rng: &mut SplitMix64) -> Result<Self> {
        let uniforms = [rng.open01(), rng.open01()];
        Self::from_uniforms(logits, tau, uniforms)
    }

    pub fn from_uniforms(logits: [f64; 2], tau: f64, uniforms: [f64; 2]) -> Result<Self> {
        let noise = uniforms.map(gumbel_from_uniform);
        let soft = gumbel_softmax(logits, noise, tau)?;
        let (hard_bit, _) = straight_through(soft);
        Ok(Self {
            uniforms,
            noise,
            logits,
            tau,
            soft,
            hard_bit,
        })
    }
}

/// Relaxed sample on the tape: `softmax((logits + noise) / τ)` per row.
pub fn relaxed_sample(tape: &mut Tape, logits: Var, noise: &Matrix, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let g = tape.constant(noise.clone());
    let z = tape.add(logits, g)?;
    let z = tape.scalar_mul(z, 1.0 / tau)?;
    Ok(tape.softmax(z, 1)?)
}

/// Straight-through gate on the tape: forward one-hot, backward through
/// the relaxed sample.
pub fn straight_through_var(tape: &mut Tape, soft: Var) -> Result<Var> {
    Ok(tape.straight_through(soft)?)
}

/// Exponential temperature decay with a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub tau0: f64,
    pub tau_min: f64,
    pub decay_rate: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self {
            tau0: 5.0,
            tau_min: 0.5,
            decay_rate: 0.9,
        }
    }
}

impl TauSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau0 >= self.tau_min) {
            return Err(Error::Config(format!(
                "tau schedule needs tau0 >= tau_min > 0, got tau0={} tau_min={}",
                self.tau0, self.tau_min
            )));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!(
                "tau decay_rate must be in (0, 1], got {}",
                self.decay_rate
            )));
        }
        Ok(())
    }

    /// `max(tau_min, tau0 · decay_rate^epoch)`.
    pub fn tau_at(&self, epoch: usize) -> f64 {
        let e = i32::try_from(epoch).unwrap_or(i32::MAX);
        (self.tau0 * self.decay_rate.powi(e)).max(self.tau_min)
    }
}
