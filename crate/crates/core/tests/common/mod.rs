#![allow(dead_code)]

use adaeval::data::VideoSample;
use adaeval::gumbel;
use adaeval::model::{self, Batch, ModelConfig, ModelParams, ModelVars, SequenceGate};
use adaeval::ndgrad::{grad_check, GradError, Matrix, Tape, Var};
use adaeval::rng::SplitMix64;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

pub fn random(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

pub fn positive(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(0.5, 2.0)).collect()).unwrap()
}

/// Rows on the probability simplex.
pub fn simplex(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
    let mut m = positive(rng, rows, cols);
    for r in 0..rows {
        let s: f64 = m.row(r).iter().sum();
        m.row_mut(r).iter_mut().for_each(|x| *x /= s);
    }
    m
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var, GradError>;

/// Reduces `out` to a scalar with fixed random weights so every output
/// entry carries a distinct gradient.
fn weigh(t: &mut Tape, out: Var, seed: u64) -> Result<Var, GradError> {
    let [r, c] = t.shape(out)?;
    let w = random(&mut SplitMix64::new(seed ^ 0xABCD), r, c);
    let w = t.constant(w);
    let p = t.hadamard(out, w)?;
    t.sum(p)
}

pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: fn(&mut SplitMix64) -> Vec<Matrix>,
    pub build: Build,
}

pub fn primitive_cases() -> Vec<PrimitiveCase> {
    fn two(rng: &mut SplitMix64) -> Vec<Matrix> {
        vec![random(rng, 3, 4), random(rng, 3, 4)]
    }
    vec![
        PrimitiveCase {
            name: "matmul",
            inputs: |r| vec![random(r, 3, 4), random(r, 4, 2)],
            build: |t, v| {
                let o = t.matmul(v[0], v[1])?;
                weigh(t, o, 1)
            },
        },
        PrimitiveCase {
            name: "matmul_t",
            inputs: |r| vec![random(r, 3, 4), random(r, 5, 4)],
            build: |t, v| {
                let o = t.matmul_t(v[0], v[1])?;
                weigh(t, o, 2)
            },
        },
        PrimitiveCase {
            name: "add",
            inputs: two,
            build: |t, v| {
                let o = t.add(v[0], v[1])?;
                weigh(t, o, 3)
            },
        },
        PrimitiveCase {
            name: "add_row_broadcast",
            inputs: |r| vec![random(r, 3, 4), random(r, 1, 4)],
            build: |t, v| {
                let o = t.add(v[0], v[1])?;
                weigh(t, o, 4)
            },
        },
        PrimitiveCase {
            name: "sub",
            inputs: two,
            build: |t, v| {
                let o = t.sub(v[0], v[1])?;
                weigh(t, o, 5)
            },
        },
        PrimitiveCase {
            name: "hadamard",
            inputs: two,
            build: |t, v| {
                let o = t.hadamard(v[0], v[1])?;
                weigh(t, o, 6)
            },
        },
        PrimitiveCase {
            name: "scale_rows",
            inputs: |r| vec![random(r, 3, 4), random(r, 3, 1)],
            build: |t, v| {
                let o = t.scale_rows(v[0], v[1])?;
                weigh(t, o, 7)
            },
        },
        PrimitiveCase {
            name: "concat_cols",
            inputs: |r| vec![random(r, 3, 2), random(r, 3, 4)],
            build: |t, v| {
                let o = t.concat(v[0], v[1], 1)?;
                weigh(t, o, 8)
            },
        },
        PrimitiveCase {
            name: "concat_rows",
            inputs: |r| vec![random(r, 2, 3), random(r, 4, 3)],
            build: |t, v| {
                let o = t.concat(v[0], v[1], 0)?;
                weigh(t, o, 9)
            },
        },
        PrimitiveCase {
            name: "slice_cols",
            inputs: |r| vec![random(r, 3, 6)],
            build: |t, v| {
                let o = t.slice(v[0], 1, 2, 5)?;
                weigh(t, o, 10)
            },
        },
        PrimitiveCase {
            name: "slice_rows",
            inputs: |r| vec![random(r, 5, 3)],
            build: |t, v| {
                let o = t.slice(v[0], 0, 1, 4)?;
                weigh(t, o, 11)
            },
        },
        PrimitiveCase {
            name: "sigmoid",
            inputs: |r| vec![random(r, 3, 4)],
            build: |t, v| {
                let o = t.sigmoid(v[0])?;
                weigh(t, o, 12)
            },
        },
        PrimitiveCase {
            name: "tanh",
            inputs: |r| vec![random(r, 3, 4)],
            build: |t, v| {
                let o = t.tanh(v[0])?;
                weigh(t, o, 13)
            },
        },
        PrimitiveCase {
            name: "softmax_rows",
            inputs: |r| vec![random(r, 3, 4)],
            build: |t, v| {
                let o = t.softmax(v[0], 1)?;
                weigh(t, o, 14)
            },
        },
        PrimitiveCase {
            name: "softmax_cols",
            inputs: |r| vec![random(r, 3, 4)],
            build: |t, v| {
                let o = t.softmax(v[0], 0)?;
                weigh(t, o, 15)
            },
        },
        PrimitiveCase {
            name: "log",
            inputs: |r| vec![positive(r, 3, 4)],
            build: |t, v| {
                let o = t.log(v[0])?;
                weigh(t, o, 16)
            },
        },
        PrimitiveCase {
            name: "mean",
            inputs: |r| vec![random(r, 3, 4)],
            build: |t, v| {
                let s = t.square(v[0])?;
                t.mean(s)
            },
        },
        PrimitiveCase {
            name: "sum",
            inputs: |r| vec![random(r, 3, 4)],
            build: |t, v| {
                let s = t.tanh(v[0])?;
                t.sum(s)
            },
        },
        PrimitiveCase {
            name: "square",
            inputs: |r| vec![random(r, 3, 4)],
            build: |t, v| {
                let o = t.square(v[0])?;
                weigh(t, o, 17)
            },
        },
        PrimitiveCase {
            name: "scalar_mul",
            inputs: |r| vec![random(r, 3, 4)],
            build: |t, v| {
                let o = t.scalar_mul(v[0], -2.5)?;
                weigh(t, o, 18)
            },
        },
        PrimitiveCase {
            name: "add_scalar",
            inputs: |r| vec![random(r, 3, 4)],
            build: |t, v| {
                let o = t.add_scalar(v[0], 0.75)?;
                let o = t.square(o)?;
                weigh(t, o, 19)
            },
        },
        PrimitiveCase {
            name: "cross_entropy",
            inputs: |r| vec![random(r, 3, 4)],
            build: |t, v| {
                // the target is data, not a parameter
                let target = simplex(&mut SplitMix64::new(77), 3, 4);
                let target = t.constant(target);
                t.cross_entropy(v[0], target)
            },
        },
    ]
}

/// Worst relative error of one primitive case at one seed.
pub fn check_primitive(case: &PrimitiveCase, seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let inputs = (case.inputs)(&mut rng);
    grad_check(case.build, &inputs, GRAD_EPS).unwrap_or_else(|e| panic!("{}: {e}", case.name))
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        coarse_feat_dim: 3,
        fine_feat_dim: 5,
        coarse_hidden: 2,
        fine_hidden: 4,
        num_classes: 3,
        seq_len: 3,
        gamma: 0.2,
        lambda: 2.0,
        ..ModelConfig::default()
    }
}

pub fn random_sample(cfg: &ModelConfig, rng: &mut SplitMix64, id: &str, label: usize) -> VideoSample {
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

/// Tiny model with every block randomised, including the zero-initialised
/// classifier, so no gradient vanishes by construction.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut params = ModelParams::init(&ModelConfig { seed, ..cfg.clone() }).unwrap();
    let mut rng = SplitMix64::new(seed ^ 0x5EED);
    for m in params.blocks_mut() {
        m.data_mut().iter_mut().for_each(|x| *x = 0.3 * rng.normal());
    }
    params
}

/// Full-model objective with the relaxed gate and frozen noise, checked
/// against central differences over every parameter.
pub fn model_grad_check(seed: u64, seq_len: usize) -> f64 {
    let cfg = ModelConfig {
        seq_len,
        ..tiny_config()
    };
    let params = random_params(&cfg, seed);
    let mut rng = SplitMix64::new(seed.wrapping_mul(31));
    let samples: Vec<VideoSample> = (0..2).map(|i| random_sample(&cfg, &mut rng, &format!("v{i}"), i % 3)).collect();
    let refs: Vec<&VideoSample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, &cfg).unwrap();
    let noise: Vec<Matrix> = (0..cfg.seq_len)
        .map(|_| gumbel::sample_noise_matrix(&mut rng, 2))
        .collect();
    let blocks: Vec<Matrix> = params.blocks().iter().map(|m| (*m).clone()).collect();
    grad_check(
        |t: &mut Tape, v: &[Var]| {
            let vars = ModelVars::from_slice(v, &cfg);
            let gate = SequenceGate::Relaxed { tau: 0.9, noise: &noise };
            let out = model::forward_sequence(t, &vars, &cfg, &batch, gate)?;
            model::objective(t, &out, &batch, &cfg)
        },
        &blocks,
        GRAD_EPS,
    )
    .unwrap()
}

// ---- scalar oracle ------------------------------------------------------

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM step written with plain loops over the `4H × (D + H)` layout.
pub fn oracle_lstm(w: &Matrix, b: &Matrix, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hid = h.len();
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let mut z = vec![0.0; 4 * hid];
    for (j, zj) in z.iter_mut().enumerate() {
        let mut acc = b.get(0, j);
        for (k, v) in xh.iter().enumerate() {
            acc += w.get(j, k) * v;
        }
        *zj = acc;
    }
    let mut h2 = vec![0.0; hid];
    let mut c2 = vec![0.0; hid];
    for u in 0..hid {
        let i = sig(z[u]);
        let f = sig(z[hid + u]);
        let o = sig(z[2 * hid + u]);
        let g = z[3 * hid + u].tanh();
        c2[u] = f * c[u] + i * g;
        h2[u] = o * c2[u].tanh();
    }
    (h2, c2)
}

fn oracle_affine(w: &Matrix, b: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.cols())
        .map(|j| b.get(0, j) + x.iter().enumerate().map(|(k, v)| v * w.get(k, j)).sum::<f64>())
        .collect()
}

pub struct OracleStep {
    pub coarse_h: Vec<f64>,
    pub coarse_c: Vec<f64>,
    pub fine_h: Vec<f64>,
    pub fine_c: Vec<f64>,
    pub logits: [f64; 2],
    pub bit: u8,
    pub probs: Vec<f64>,
}

/// Deterministic-inference forward pass of one video, scalar arithmetic
/// only. `sync = false` keeps the fine state on skips.
pub fn oracle_forward(p: &ModelParams, cfg: &ModelConfig, s: &VideoSample, sync: bool) -> Vec<OracleStep> {
    let (hc, hf) = (cfg.coarse_hidden, cfg.fine_hidden);
    let (mut ch, mut cc) = (vec![0.0; hc], vec![0.0; hc]);
    let (mut fh, mut fc) = (vec![0.0; hf], vec![0.0; hf]);
    let mut out = Vec::new();
    for t in 0..cfg.seq_len {
        let vc: Vec<f64> = s.coarse_row(t).iter().map(|&v| v as f64).collect();
        let vf: Vec<f64> = s.fine_row(t).iter().map(|&v| v as f64).collect();
        let (nch, ncc) = oracle_lstm(&p.coarse_cell.w, &p.coarse_cell.b, &vc, &ch, &cc);
        let gin: Vec<f64> = vc.iter().chain(&fh).chain(&fc).copied().collect();
        let l = oracle_affine(&p.gate.w, &p.gate.b, &gin);
        let bit = match cfg.gate {
            model::GatePolicy::AlwaysFine => 1,
            model::GatePolicy::AlwaysCoarse => 0,
            model::GatePolicy::Learned => u8::from(l[1] >= l[0]),
        };
        if bit == 1 {
            let x: Vec<f64> = vc.iter().chain(&vf).copied().collect();
            let (h2, c2) = oracle_lstm(&p.fine_cell.w, &p.fine_cell.b, &x, &fh, &fc);
            fh = h2;
            fc = c2;
        } else if sync {
            fh[..hc].copy_from_slice(&nch);
            fc[..hc].copy_from_slice(&ncc);
        }
        ch = nch;
        cc = ncc;
        let z = oracle_affine(&p.classifier.w, &p.classifier.b, &fh);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        out.push(OracleStep {
            coarse_h: ch.clone(),
            coarse_c: cc.clone(),
            fine_h: fh.clone(),
            fine_c: fc.clone(),
            logits: [l[0], l[1]],
            bit,
            probs: e.iter().map(|v| v / sum).collect(),
        });
    }
    out
}
