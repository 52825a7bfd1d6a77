//! Parameterized building blocks over the tape: a standard LSTM cell, the
//! two-logit gate, and the linear classifier.
//!
//! All blocks take batched row inputs (`batch × dim`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Matrix, Tape, Var};
use crate::rng::SplitMix64;

/// LSTM weights. `w` is `4H × (D_in + H)` with row blocks in the order
/// input, forget, output, candidate; `b` is `1 × 4H`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w: Matrix,
    pub b: Matrix,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w: Matrix::zeros(4 * hidden, input_dim + hidden),
            b: Matrix::zeros(1, 4 * hidden),
            input_dim,
            hidden,
        }
    }

    /// Uniform weights in ±1/√D_in, zero bias except the forget block at +1.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        let bound = 1.0 / (input_dim as f64).sqrt();
        p.w.data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.uniform(-bound, bound));
        p.b.data_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|x| *x = 1.0);
        p
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let h = self.hidden;
        check_shape(&format!("{name}.w"), &self.w, [4 * h, self.input_dim + h])?;
        check_shape(&format!("{name}.b"), &self.b, [1, 4 * h])
    }

    pub fn register(&self, tape: &mut Tape) -> LstmVars {
        LstmVars {
            w: tape.param(self.w.clone()),
            b: tape.param(self.b.clone()),
            input_dim: self.input_dim,
            hidden: self.hidden,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w: Var,
    pub b: Var,
    pub input_dim: usize,
    pub hidden: usize,
}

/// Hidden and cell state of one recurrent path, `batch × H` each.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, batch: usize, hidden: usize) -> Self {
        Self {
            h: tape.constant(Matrix::zeros(batch, hidden)),
            c: tape.constant(Matrix::zeros(batch, hidden)),
        }
    }
}

/// `i, f, o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_step(tape: &mut Tape, cell: &LstmVars, x: Var, state: &LstmState) -> Result<LstmState> {
    let [batch, d] = tape.shape(x)?;
    if d != cell.input_dim {
        return Err(Error::dim("lstm_step input", cell.input_dim, d));
    }
    let hshape = tape.shape(state.h)?;
    if hshape != [batch, cell.hidden] || tape.shape(state.c)? != hshape {
        return Err(Error::dim("lstm_step state", cell.hidden, hshape[1]));
    }
    let h = cell.hidden;
    let xh = tape.concat(x, state.h, 1)?;
    let z = tape.matmul_t(xh, cell.w)?;
    let z = tape.add(z, cell.b)?;
    let zi = tape.slice(z, 1, 0, h)?;
    let zf = tape.slice(z, 1, h, 2 * h)?;
    let zo = tape.slice(z, 1, 2 * h, 3 * h)?;
    let zg = tape.slice(z, 1, 3 * h, 4 * h)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let o = tape.sigmoid(zo)?;
    let g = tape.tanh(zg)?;
    let fc = tape.hadamard(f, state.c)?;
    let ig = tape.hadamard(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.hadamard(o, tc)?;
    Ok(LstmState { h, c })
}

/// Gate weights: `w` is `(D_c + 2·H_f) × 2`, `b` is `1 × 2`.
/// Column 1 is "read fine features", column 0 is "skip".
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w: Matrix,
    pub b: Matrix,
}

impl GateParams {
    pub fn zeros(coarse_dim: usize, fine_hidden: usize) -> Self {
        Self {
            w: Matrix::zeros(coarse_dim + 2 * fine_hidden, 2),
            b: Matrix::zeros(1, 2),
        }
    }

    /// Uniform weights, bias `(0, +1)` so early training leans toward reading.
    pub fn init(coarse_dim: usize, fine_hidden: usize, rng: &mut SplitMix64) -> Self {
        let mut p = Self::zeros(coarse_dim, fine_hidden);
        let bound = 1.0 / ((coarse_dim + 2 * fine_hidden) as f64).sqrt();
        p.w.data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.uniform(-bound, bound));
        p.b.set(0, 1, 1.0);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn validate(&self, coarse_dim: usize, fine_hidden: usize) -> Result<()> {
        check_shape("gate.w", &self.w, [coarse_dim + 2 * fine_hidden, 2])?;
        check_shape("gate.b", &self.b, [1, 2])
    }

    pub fn register(&self, tape: &mut Tape) -> AffineVars {
        AffineVars {
            w: tape.param(self.w.clone()),
            b: tape.param(self.b.clone()),
        }
    }
}

/// Classifier weights: `w` is `H_f × classes`, `b` is `1 × classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w: Matrix,
    pub b: Matrix,
}

impl ClassifierParams {
    pub fn zeros(hidden: usize, classes: usize) -> Self {
        Self {
            w: Matrix::zeros(hidden, classes),
            b: Matrix::zeros(1, classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w.cols()
    }

    pub fn validate(&self, hidden: usize, classes: usize) -> Result<()> {
        check_shape("classifier.w", &self.w, [hidden, classes])?;
        check_shape("classifier.b", &self.b, [1, classes])
    }

    pub fn register(&self, tape: &mut Tape) -> AffineVars {
        AffineVars {
            w: tape.param(self.w.clone()),
            b: tape.param(self.b.clone()),
        }
    }
}

/// `x · w + b` weights as recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AffineVars {
    pub w: Var,
    pub b: Var,
}

fn affine(tape: &mut Tape, p: &AffineVars, x: Var, what: &str) -> Result<Var> {
    let [din, _] = tape.shape(p.w)?;
    let [_, got] = tape.shape(x)?;
    if din != got {
        return Err(Error::dim(what, din, got));
    }
    let y = tape.matmul(x, p.w)?;
    Ok(tape.add(y, p.b)?)
}

/// `b_t = [v_c, h_f, c_f] · W_g + b_g`, one `1 × 2` logit row per batch row.
pub fn gate_logits(tape: &mut Tape, gate: &AffineVars, v_c: Var, h_f: Var, c_f: Var) -> Result<Var> {
    let vh = tape.concat(v_c, h_f, 1)?;
    let x = tape.concat(vh, c_f, 1)?;
    affine(tape, gate, x, "gate_logits input")
}

/// Unnormalized class scores `h_f · W_p + b_p`.
pub fn class_logits(tape: &mut Tape, classifier: &AffineVars, h_f: Var) -> Result<Var> {
    affine(tape, classifier, h_f, "classifier input")
}

/// Class probabilities `softmax(h_f · W_p + b_p)`.
pub fn classify(tape: &mut Tape, classifier: &AffineVars, h_f: Var) -> Result<Var> {
    let logits = class_logits(tape, classifier, h_f)?;
    Ok(tape.softmax(logits, 1)?)
}

fn check_shape(name: &str, m: &Matrix, want: [usize; 2]) -> Result<()> {
    if m.shape() != want {
        return Err(Error::Checkpoint(format!(
            "block {name}: expected shape {want:?}, got {:?}",
            m.shape()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Checkpoint(format!("block {name}: non-finite entries")));
    }
    Ok(())
}

pub const PARAMS_FORMAT: &str = "adaeval-params";
pub const PARAMS_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";
pub const PARAMS_FILE: &str = "params.bin";

/// One entry of `header.json`: where a named block lives in `params.bin`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamHeader {
    pub format: String,
    pub version: u32,
    pub blocks: Vec<BlockEntry>,
    /// Model configuration, stored verbatim by the caller.
    pub config: serde_json::Value,
}

/// Writes `header.json` and `params.bin` (little-endian f64, blocks in order)
/// into `dir`.
pub fn write_param_blocks(dir: &Path, blocks: &[(String, &Matrix)], config: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bin = Vec::new();
    let mut entries = Vec::with_capacity(blocks.len());
    for (name, m) in blocks {
        let offset = bin.len() as u64;
        for v in m.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(BlockEntry {
            name: name.clone(),
            shape: m.shape(),
            offset,
            bytes: bin.len() as u64 - offset,
        });
    }
    let header = ParamHeader {
        format: PARAMS_FORMAT.into(),
        version: PARAMS_VERSION,
        blocks: entries,
        config,
    };
    let hpath = dir.join(HEADER_FILE);
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::Json {
        path: hpath.clone(),
        source: e,
    })?;
    fs::write(&hpath, text).map_err(|e| Error::io(&hpath, e))?;
    let bpath = dir.join(PARAMS_FILE);
    fs::write(&bpath, bin).map_err(|e| Error::io(&bpath, e))
}

/// Reads blocks written by [`write_param_blocks`], checking format, version
/// and byte ranges. Shapes are checked against the model by the caller.
pub fn read_param_blocks(dir: &Path) -> Result<(ParamHeader, Vec<(String, Matrix)>)> {
    let hpath = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: ParamHeader = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: hpath.clone(),
        source: e,
    })?;
    if header.format != PARAMS_FORMAT || header.version != PARAMS_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{} (expected {PARAMS_FORMAT} v{PARAMS_VERSION})",
            header.format, header.version
        )));
    }
    let bpath = dir.join(PARAMS_FILE);
    let bin = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for entry in &header.blocks {
        let [r, c] = entry.shape;
        let want = (r * c * 8) as u64;
        if entry.bytes != want {
            return Err(Error::Checkpoint(format!(
                "block {}: shape {:?} needs {want} bytes, header says {}",
                entry.name, entry.shape, entry.bytes
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.bytes as usize;
        if end > bin.len() {
            return Err(Error::Checkpoint(format!(
                "block {}: bytes {start}..{end} beyond params.bin length {}",
                entry.name,
                bin.len()
            )));
        }
        let data = bin[start..end]
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().expect("8-byte chunk")))
            .collect();
        blocks.push((entry.name.clone(), Matrix::from_vec(r, c, data)?));
    }
    Ok((header, blocks))
}
