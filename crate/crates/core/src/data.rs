//! Feature-sequence datasets: the LEFX binary format, `manifest.json`, the
//! synthetic generator, and import of externally extracted features.
//!
//! LEFX layout (all little-endian):
//!
//! ```text
//! offset 0   4 bytes  magic "LEFX"
//! offset 4   u32      version = 1
//! offset 8   u32      T (rows)
//! offset 12  u32      D (columns)
//! offset 16  T·D f32  row-major features
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{mix64, SplitMix64};

pub const LEFX_MAGIC: &[u8; 4] = b"LEFX";
pub const LEFX_VERSION: u32 = 1;
pub const LEFX_HEADER_BYTES: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Split names produced by the generator, in generation order.
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// One video: `T × D_c` coarse rows and `T × D_f` fine rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub label: usize,
    pub seq_len: usize,
    pub coarse_dim: usize,
    pub fine_dim: usize,
    pub coarse: Vec<f32>,
    pub fine: Vec<f32>,
}

impl VideoSample {
    pub fn coarse_row(&self, t: usize) -> &[f32] {
        &self.coarse[t * self.coarse_dim..(t + 1) * self.coarse_dim]
    }

    pub fn fine_row(&self, t: usize) -> &[f32] {
        &self.fine[t * self.fine_dim..(t + 1) * self.fine_dim]
    }

    /// Checks lengths and finiteness against the expected dims.
    pub fn validate(&self, seq_len: usize, coarse_dim: usize, fine_dim: usize, num_classes: usize) -> Result<()> {
        let ctx = |msg: String| Error::data(format!("video {}", self.id), msg);
        if self.seq_len != seq_len {
            return Err(ctx(format!("sequence length {} != expected {seq_len}", self.seq_len)));
        }
        if self.coarse_dim != coarse_dim || self.coarse.len() != seq_len * coarse_dim {
            return Err(ctx(format!(
                "coarse features are {}x{} ({} values), expected {seq_len}x{coarse_dim}",
                self.seq_len,
                self.coarse_dim,
                self.coarse.len()
            )));
        }
        if self.fine_dim != fine_dim || self.fine.len() != seq_len * fine_dim {
            return Err(ctx(format!(
                "fine features are {}x{} ({} values), expected {seq_len}x{fine_dim}",
                self.seq_len,
                self.fine_dim,
                self.fine.len()
            )));
        }
        if self.label >= num_classes {
            return Err(ctx(format!("label {} >= num_classes {num_classes}", self.label)));
        }
        if !self.coarse.iter().chain(&self.fine).all(|v| v.is_finite()) {
            return Err(ctx("non-finite feature value".into()));
        }
        Ok(())
    }
}

pub fn encode_lefx(rows: usize, cols: usize, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(LEFX_HEADER_BYTES + values.len() * 4);
    out.extend_from_slice(LEFX_MAGIC);
    out.extend_from_slice(&LEFX_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses LEFX bytes into `(T, D, values)`. `path` only labels errors.
pub fn decode_lefx(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < LEFX_HEADER_BYTES {
        return Err(Error::format(
            path,
            format!("expected at least {LEFX_HEADER_BYTES} header bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != LEFX_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}, expected \"LEFX\"", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != LEFX_VERSION {
        return Err(Error::format(path, format!("unsupported LEFX version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let expected = LEFX_HEADER_BYTES + rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("{rows}x{cols} LEFX needs {expected} bytes, found {}", bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes[LEFX_HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::data(
            path.display().to_string(),
            format!("non-finite value at row {}, column {}", i / cols.max(1), i % cols.max(1)),
        ));
    }
    Ok((rows, cols, values))
}

pub fn read_lefx(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_lefx(path, &bytes)
}

pub fn write_lefx(path: &Path, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_lefx(rows, cols, values)).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters of the synthetic generator.
///
/// Each video has `k_informative` frames whose fine row carries
/// `fine_snr · prototype_y` plus a class-independent `saliency · u`; all
/// other frames carry `distractor_scale · distractor_j`. Every fine row gets
/// unit Gaussian noise. Coarse rows are a fixed random projection of the fine
/// row, scaled so the projected class signal has norm `coarse_snr` on
/// average, plus unit noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    #[serde(rename = "T")]
    pub seq_len: usize,
    #[serde(rename = "Dc_feat")]
    pub coarse_dim: usize,
    #[serde(rename = "Df_feat")]
    pub fine_dim: usize,
    pub k_informative: usize,
    pub fine_snr: f64,
    pub coarse_snr: f64,
    pub distractor_scale: f64,
    /// Zero when omitted from a spec file.
    #[serde(default)]
    pub saliency: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            seq_len: 16,
            coarse_dim: 16,
            fine_dim: 64,
            k_informative: 3,
            fine_snr: 6.0,
            coarse_snr: 1.5,
            distractor_scale: 1.0,
            saliency: 24.0,
            seed: 0,
        }
    }
}

/// Below this fine SNR the per-video signal-placement check is not enforced.
pub const PLACEMENT_CHECK_MIN_SNR: f64 = 3.0;
const PLACEMENT_MAX_ATTEMPTS: usize = 100;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.num_classes < 2 {
            return bad("num_classes", format!("need at least 2, got {}", self.num_classes));
        }
        if self.seq_len == 0 {
            return bad("T", "must be >= 1".into());
        }
        if self.coarse_dim == 0 || self.fine_dim == 0 {
            return bad("Dc_feat/Df_feat", "feature dims must be >= 1".into());
        }
        if self.k_informative == 0 || self.k_informative > self.seq_len {
            return bad(
                "k_informative",
                format!("must be in 1..={}, got {}", self.seq_len, self.k_informative),
            );
        }
        for (name, v) in [
            ("fine_snr", self.fine_snr),
            ("coarse_snr", self.coarse_snr),
            ("distractor_scale", self.distractor_scale),
            ("saliency", self.saliency),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(name, format!("must be finite and >= 0, got {v}"));
            }
        }
        if self.coarse_snr >= self.fine_snr && self.fine_snr > 0.0 {
            return bad(
                "coarse_snr",
                format!("must be below fine_snr ({} >= {})", self.coarse_snr, self.fine_snr),
            );
        }
        if self.num_classes + 1 > self.fine_dim && self.saliency > 0.0 {
            return bad(
                "saliency",
                format!("needs Df_feat > num_classes to stay orthogonal, Df_feat={}", self.fine_dim),
            );
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Dataset-level metadata shared by the in-memory and on-disk forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub num_classes: usize,
    #[serde(rename = "T")]
    pub seq_len: usize,
    #[serde(rename = "Dc_feat")]
    pub coarse_dim: usize,
    #[serde(rename = "Df_feat")]
    pub fine_dim: usize,
    pub class_names: Vec<String>,
    pub generator_spec: Option<SyntheticSpec>,
}

/// Samples grouped by split name.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub splits: BTreeMap<String, Vec<VideoSample>>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[VideoSample]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::data("dataset", format!("no split named {name:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub id: String,
    pub label: usize,
    /// Relative to the manifest's directory unless absolute.
    pub coarse: String,
    pub fine: String,
    pub coarse_sha256: String,
    pub fine_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(flatten)]
    pub info: DatasetInfo,
    pub splits: BTreeMap<String, Vec<SplitEntry>>,
    /// SHA-256 of this manifest serialized with `checksum` set to "".
    pub checksum: String,
}

impl DatasetManifest {
    pub fn compute_checksum(&self) -> String {
        let mut blank = self.clone();
        blank.checksum.clear();
        sha256_hex(&serde_json::to_vec(&blank).expect("manifest serializes"))
    }

    pub fn seal(&mut self) {
        self.checksum = self.compute_checksum();
    }

    /// Structural checks: version, checksum, disjoint ids, label range.
    pub fn validate(&self, path: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest version {}", self.version)));
        }
        let want = self.compute_checksum();
        if want != self.checksum {
            return Err(Error::format(
                path,
                format!("checksum mismatch: recorded {}, computed {want}", self.checksum),
            ));
        }
        let mut seen = BTreeSet::new();
        for (split, entries) in &self.splits {
            for e in entries {
                if !seen.insert(e.id.as_str()) {
                    return Err(Error::format(path, format!("id {} appears twice (split {split})", e.id)));
                }
                if e.label >= self.info.num_classes {
                    return Err(Error::format(
                        path,
                        format!("id {}: label {} >= num_classes {}", e.id, e.label, self.info.num_classes),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        m.validate(path)?;
        Ok(m)
    }
}

fn unit_gaussian(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-dataset random structure drawn once from the seed.
#[derive(Debug, Clone)]
pub struct GeneratorState {
    pub prototypes: Vec<Vec<f64>>,
    pub distractors: Vec<Vec<f64>>,
    pub saliency_dir: Vec<f64>,
    /// `D_c × D_f`, row-major.
    pub projection: Vec<f64>,
    pub coarse_scale: f64,
}

impl GeneratorState {
    pub fn new(spec: &SyntheticSpec, rng: &mut SplitMix64) -> Self {
        let (c, df, dc) = (spec.num_classes, spec.fine_dim, spec.coarse_dim);
        let prototypes: Vec<Vec<f64>> = (0..c).map(|_| unit_gaussian(rng, df)).collect();
        let distractors: Vec<Vec<f64>> = (0..c).map(|_| unit_gaussian(rng, df)).collect();

        // Gram–Schmidt against the class prototypes.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for p in &prototypes {
            let mut q = p.clone();
            for b in &basis {
                let k = dot(&q, b);
                q.iter_mut().zip(b).for_each(|(x, y)| *x -= k * y);
            }
            normalize(&mut q);
            basis.push(q);
        }
        let mut saliency_dir = unit_gaussian(rng, df);
        for b in &basis {
            let k = dot(&saliency_dir, b);
            saliency_dir.iter_mut().zip(b).for_each(|(x, y)| *x -= k * y);
        }
        normalize(&mut saliency_dir);

        let inv = 1.0 / (dc as f64).sqrt();
        let projection: Vec<f64> = (0..dc * df).map(|_| rng.normal() * inv).collect();

        let mean_proj_norm = prototypes
            .iter()
            .map(|p| {
                let pp = project(&projection, dc, df, p);
                dot(&pp, &pp).sqrt()
            })
            .sum::<f64>()
            / c as f64;
        let coarse_scale = spec.coarse_snr / (spec.fine_snr.max(1.0) * mean_proj_norm);
        Self {
            prototypes,
            distractors,
            saliency_dir,
            projection,
            coarse_scale,
        }
    }
}

fn project(p: &[f64], dc: usize, df: usize, x: &[f64]) -> Vec<f64> {
    (0..dc).map(|i| dot(&p[i * df..(i + 1) * df], x)).collect()
}

/// Generates one video; deterministic in `(spec, state, label, video_seed)`.
pub fn generate_video(
    spec: &SyntheticSpec,
    state: &GeneratorState,
    id: String,
    label: usize,
    video_seed: u64,
) -> Result<VideoSample> {
    let (t_len, dc, df) = (spec.seq_len, spec.coarse_dim, spec.fine_dim);
    let mut rng = SplitMix64::new(video_seed);
    let proto = &state.prototypes[label];
    for _attempt in 0..PLACEMENT_MAX_ATTEMPTS {
        let informative = rng.choose_distinct(t_len, spec.k_informative);
        let mut fine = Vec::with_capacity(t_len * df);
        let mut coarse = Vec::with_capacity(t_len * dc);
        let mut row = vec![0.0; df];
        for t in 0..t_len {
            if informative.binary_search(&t).is_ok() {
                for (k, r) in row.iter_mut().enumerate() {
                    *r = spec.fine_snr * proto[k] + spec.saliency * state.saliency_dir[k];
                }
            } else {
                let d = &state.distractors[rng.below(state.distractors.len())];
                for (k, r) in row.iter_mut().enumerate() {
                    *r = spec.distractor_scale * d[k];
                }
            }
            row.iter_mut().for_each(|r| *r += rng.normal());
            let projected = project(&state.projection, dc, df, &row);
            fine.extend(row.iter().map(|&v| v as f32));
            coarse.extend(
                projected
                    .iter()
                    .map(|&v| (state.coarse_scale * v + rng.normal()) as f32),
            );
        }
        let sample = VideoSample {
            id: id.clone(),
            label,
            seq_len: t_len,
            coarse_dim: dc,
            fine_dim: df,
            coarse,
            fine,
        };
        if placement_holds(spec, &sample, proto, &informative) {
            return Ok(sample);
        }
    }
    Err(Error::data(
        format!("video {id}"),
        format!("signal placement check failed {PLACEMENT_MAX_ATTEMPTS} times; raise fine_snr"),
    ))
}

/// Inner products with the class prototype: exactly the informative rows
/// exceed 3× the distractor rows' mean absolute inner product.
fn placement_holds(spec: &SyntheticSpec, s: &VideoSample, proto: &[f64], informative: &[usize]) -> bool {
    if spec.fine_snr < PLACEMENT_CHECK_MIN_SNR || informative.len() == s.seq_len {
        return true;
    }
    let ips: Vec<f64> = (0..s.seq_len)
        .map(|t| {
            s.fine_row(t)
                .iter()
                .zip(proto)
                .map(|(&x, &p)| x as f64 * p)
                .sum()
        })
        .collect();
    let distractor: Vec<f64> = (0..s.seq_len)
        .filter(|t| informative.binary_search(t).is_err())
        .map(|t| ips[t].abs())
        .collect();
    let threshold = 3.0 * distractor.iter().sum::<f64>() / distractor.len() as f64;
    let above: Vec<usize> = (0..s.seq_len).filter(|&t| ips[t] > threshold).collect();
    above == informative
}

/// Per-split video counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    fn get(&self, name: &str) -> usize {
        match name {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }
}

/// Builds a synthetic dataset in memory.
///
/// Labels within each split cycle through the classes and are then
/// shuffled, so per-split class counts differ by at most one. Video `g`
/// (numbered across train, val, test in that order) is drawn from the
/// stream seeded with `seed ⊕ g`; dataset-level structure uses the stream
/// seeded with `mix64(seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, sizes: SplitSizes) -> Result<Dataset> {
    spec.validate()?;
    let mut ds_rng = SplitMix64::new(mix64(spec.seed));
    let state = GeneratorState::new(spec, &mut ds_rng);
    let mut splits = BTreeMap::new();
    let mut global = 0u64;
    for name in SPLITS {
        let n = sizes.get(name);
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
        ds_rng.shuffle(&mut labels);
        let mut videos = Vec::with_capacity(n);
        for (i, label) in labels.into_iter().enumerate() {
            let id = format!("{name}-{i:05}");
            videos.push(generate_video(spec, &state, id, label, spec.seed ^ global)?);
            global += 1;
        }
        splits.insert(name.to_string(), videos);
    }
    Ok(Dataset {
        info: DatasetInfo {
            num_classes: spec.num_classes,
            seq_len: spec.seq_len,
            coarse_dim: spec.coarse_dim,
            fine_dim: spec.fine_dim,
            class_names: (0..spec.num_classes).map(|c| format!("class_{c:02}")).collect(),
            generator_spec: Some(spec.clone()),
        },
        splits,
    })
}

/// Writes `manifest.json`, `coarse/<id>.lefx`, `fine/<id>.lefx` and a
/// `labels.csv` (id,label,split) under `root`.
pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut splits = BTreeMap::new();
    let mut labels = csv::Writer::from_writer(Vec::new());
    labels
        .write_record(["id", "label", "split"])
        .map_err(|e| Error::format(root.join("labels.csv"), e.to_string()))?;
    for (name, videos) in &dataset.splits {
        let mut entries = Vec::with_capacity(videos.len());
        for v in videos {
            let coarse_rel = format!("coarse/{}.lefx", v.id);
            let fine_rel = format!("fine/{}.lefx", v.id);
            let cbytes = encode_lefx(v.seq_len, v.coarse_dim, &v.coarse);
            let fbytes = encode_lefx(v.seq_len, v.fine_dim, &v.fine);
            for (rel, bytes) in [(&coarse_rel, &cbytes), (&fine_rel, &fbytes)] {
                let path = root.join(rel);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            }
            labels
                .write_record([v.id.as_str(), &v.label.to_string(), name.as_str()])
                .map_err(|e| Error::format(root.join("labels.csv"), e.to_string()))?;
            entries.push(SplitEntry {
                id: v.id.clone(),
                label: v.label,
                coarse: coarse_rel,
                fine: fine_rel,
                coarse_sha256: sha256_hex(&cbytes),
                fine_sha256: sha256_hex(&fbytes),
            });
        }
        splits.insert(name.clone(), entries);
    }
    let csv_path = root.join("labels.csv");
    let csv_bytes = labels
        .into_inner()
        .map_err(|e| Error::format(&csv_path, e.to_string()))?;
    fs::write(&csv_path, csv_bytes).map_err(|e| Error::io(&csv_path, e))?;

    let mut manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        info: dataset.info.clone(),
        splits,
        checksum: String::new(),
    };
    manifest.seal();
    manifest.write(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A dataset on disk; samples are read on demand.
#[derive(Debug, Clone)]
pub struct DatasetReader {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

/// Opens `root/manifest.json` (or `root` itself if it names a file).
pub fn read_dataset(root: &Path) -> Result<DatasetReader> {
    let (dir, path) = if root.is_file() {
        (root.parent().unwrap_or(Path::new(".")).to_path_buf(), root.to_path_buf())
    } else {
        (root.to_path_buf(), root.join(MANIFEST_FILE))
    };
    Ok(DatasetReader {
        root: dir,
        manifest: DatasetManifest::read(&path)?,
    })
}

impl DatasetReader {
    fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn load_sample(&self, entry: &SplitEntry) -> Result<VideoSample> {
        let info = &self.manifest.info;
        let load = |rel: &str, want_sha: &str, want_dim: usize| -> Result<Vec<f32>> {
            let path = self.resolve(rel);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (rows, cols, values) = decode_lefx(&path, &bytes)?;
            let got = sha256_hex(&bytes);
            if got != want_sha {
                return Err(Error::format(&path, format!("sha256 {got} does not match manifest {want_sha}")));
            }
            if rows != info.seq_len || cols != want_dim {
                return Err(Error::format(
                    &path,
                    format!("shape {rows}x{cols}, manifest declares {}x{want_dim}", info.seq_len),
                ));
            }
            Ok(values)
        };
        let coarse = load(&entry.coarse, &entry.coarse_sha256, info.coarse_dim)?;
        let fine = load(&entry.fine, &entry.fine_sha256, info.fine_dim)?;
        Ok(VideoSample {
            id: entry.id.clone(),
            label: entry.label,
            seq_len: info.seq_len,
            coarse_dim: info.coarse_dim,
            fine_dim: info.fine_dim,
            coarse,
            fine,
        })
    }

    pub fn split_names(&self) -> Vec<String> {
        self.manifest.splits.keys().cloned().collect()
    }

    pub fn load_split(&self, name: &str) -> Result<Vec<VideoSample>> {
        let entries = self
            .manifest
            .splits
            .get(name)
            .ok_or_else(|| Error::data("manifest", format!("no split named {name:?}")))?;
        entries.iter().map(|e| self.load_sample(e)).collect()
    }

    pub fn load_all(&self) -> Result<Dataset> {
        let mut splits = BTreeMap::new();
        for name in self.manifest.splits.keys() {
            splits.insert(name.clone(), self.load_split(name)?);
        }
        Ok(Dataset {
            info: self.manifest.info.clone(),
            splits,
        })
    }
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    id: String,
    label: usize,
    #[serde(default)]
    split: Option<String>,
}

/// Split used for label rows without a `split` column.
pub const DEFAULT_IMPORT_SPLIT: &str = "all";

/// Builds a manifest over `<coarse_dir>/<id>.lefx` and `<fine_dir>/<id>.lefx`
/// for every row of `labels_file` (CSV, header `id,label[,split]`). Files are
/// referenced by absolute path, not copied.
pub fn import_external(
    coarse_dir: &Path,
    fine_dir: &Path,
    labels_file: &Path,
    num_classes: Option<usize>,
) -> Result<DatasetManifest> {
    let mut reader = csv::Reader::from_path(labels_file)
        .map_err(|e| Error::format(labels_file, e.to_string()))?;
    let rows: Vec<LabelRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(labels_file, e.to_string()))?;
    if rows.is_empty() {
        return Err(Error::format(labels_file, "no label rows"));
    }
    let abs = |p: &Path| fs::canonicalize(p).map_err(|e| Error::io(p, e));
    let (coarse_dir, fine_dir) = (abs(coarse_dir)?, abs(fine_dir)?);

    let mut shapes: BTreeMap<(usize, usize, usize), Vec<String>> = BTreeMap::new();
    let mut splits: BTreeMap<String, Vec<SplitEntry>> = BTreeMap::new();
    for row in &rows {
        let cpath = coarse_dir.join(format!("{}.lefx", row.id));
        let fpath = fine_dir.join(format!("{}.lefx", row.id));
        let read = |p: &Path| -> Result<(usize, usize, String)> {
            let bytes = fs::read(p).map_err(|_| {
                Error::data(
                    labels_file.display().to_string(),
                    format!("unknown id {}: no feature file {}", row.id, p.display()),
                )
            })?;
            let (r, c, _) = decode_lefx(p, &bytes)?;
            Ok((r, c, sha256_hex(&bytes)))
        };
        let (ct, cd, csha) = read(&cpath)?;
        let (ft, fd, fsha) = read(&fpath)?;
        if ct != ft {
            return Err(Error::data(
                format!("video {}", row.id),
                format!("coarse has {ct} rows but fine has {ft}"),
            ));
        }
        shapes.entry((ct, cd, fd)).or_default().push(row.id.clone());
        splits
            .entry(row.split.clone().unwrap_or_else(|| DEFAULT_IMPORT_SPLIT.to_string()))
            .or_default()
            .push(SplitEntry {
                id: row.id.clone(),
                label: row.label,
                coarse: cpath.display().to_string(),
                fine: fpath.display().to_string(),
                coarse_sha256: csha,
                fine_sha256: fsha,
            });
    }
    if shapes.len() > 1 {
        // the most common shape is taken as the reference
        let (reference, _) = shapes.iter().max_by_key(|(_, ids)| ids.len()).expect("nonempty");
        let reference = *reference;
        let offenders: Vec<String> = shapes
            .iter()
            .filter(|(k, _)| **k != reference)
            .flat_map(|((t, c, f), ids)| ids.iter().map(move |id| format!("{id} (T={t}, Dc={c}, Df={f})")))
            .collect();
        return Err(Error::data(
            labels_file.display().to_string(),
            format!(
                "inconsistent feature dims; expected T={}, Dc={}, Df={}; offenders: {}",
                reference.0,
                reference.1,
                reference.2,
                offenders.join(", ")
            ),
        ));
    }
    let (seq_len, coarse_dim, fine_dim) = *shapes.keys().next().expect("nonempty");
    let max_label = rows.iter().map(|r| r.label).max().unwrap_or(0);
    let num_classes = num_classes.unwrap_or(max_label + 1);
    if max_label >= num_classes {
        return Err(Error::data(
            labels_file.display().to_string(),
            format!("label {max_label} >= num_classes {num_classes}"),
        ));
    }
    let mut manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        info: DatasetInfo {
            num_classes,
            seq_len,
            coarse_dim,
            fine_dim,
            class_names: (0..num_classes).map(|c| format!("class_{c:02}")).collect(),
            generator_spec: None,
        },
        splits,
        checksum: String::new(),
    };
    manifest.validate_ids(labels_file)?;
    manifest.seal();
    Ok(manifest)
}

impl DatasetManifest {
    fn validate_ids(&self, path: &Path) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in self.splits.values().flatten() {
            if !seen.insert(&e.id) {
                return Err(Error::format(path, format!("duplicate id {}", e.id)));
            }
        }
        Ok(())
    }
}
