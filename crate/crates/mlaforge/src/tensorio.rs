//! Bit-exact checkpoint and calibration-corpus file formats.
//!
//! Checkpoint layout: 8-byte magic `MLAFORGE`, little-endian u32 version,
//! u64 header length, canonical JSON header (config + tensor manifest), then
//! raw little-endian tensor data with every tensor offset 64-byte aligned.
//! Offsets in the manifest are relative to the (aligned) start of the data
//! section, so identical stores serialize to identical bytes.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lowrank::SvdMode;
use crate::rope::Strategy;
use crate::{Mat32, Mat64};

pub const MAGIC: &[u8; 8] = b"MLAFORGE";
pub const VERSION: u32 = 1;
pub const CORPUS_MAGIC: &[u8; 4] = b"TOKC";
const ALIGN: usize = 64;

/// Ratio of the MLP hidden width to the model width in the toy decoder.
pub const MLP_RATIO: usize = 4;

// ---------------------------------------------------------------------------
// Model configuration

/// Architecture hyperparameters plus the conversion block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    /// Query head count.
    pub n_h: usize,
    /// Key/value head (group) count.
    pub n_g: usize,
    /// Head dimension.
    pub d_h: usize,
    pub n_layers: usize,
    pub rope_base: f64,
    pub vocab: usize,
    /// Partial-RoPE subspace selection strategy.
    pub strategy: Strategy,
    /// Retained rotational subspaces per head.
    pub r: usize,
    /// Latent width allocated per kv head.
    pub d_kv_per_head: usize,
    pub svd_mode: SvdMode,
}

#[derive(Deserialize)]
struct ModelConfigDe {
    d: usize,
    n_h: usize,
    n_g: usize,
    d_h: usize,
    n_layers: usize,
    #[serde(default = "default_rope_base")]
    rope_base: f64,
    vocab: usize,
    #[serde(default = "default_strategy")]
    strategy: Strategy,
    #[serde(default)]
    r: Option<usize>,
    #[serde(default)]
    d_kv_per_head: Option<usize>,
    #[serde(default = "default_svd_mode")]
    svd_mode: SvdMode,
}

fn default_rope_base() -> f64 {
    1e4
}
fn default_strategy() -> Strategy {
    Strategy::TwoNorm
}
fn default_svd_mode() -> SvdMode {
    SvdMode::Joint
}

impl<'de> Deserialize<'de> for ModelConfig {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = ModelConfigDe::deserialize(de)?;
        Ok(ModelConfig {
            d: raw.d,
            n_h: raw.n_h,
            n_g: raw.n_g,
            d_h: raw.d_h,
            n_layers: raw.n_layers,
            rope_base: raw.rope_base,
            vocab: raw.vocab,
            strategy: raw.strategy,
            r: raw.r.unwrap_or_else(|| default_r(raw.d_h)),
            d_kv_per_head: raw.d_kv_per_head.unwrap_or(raw.d_h / 2),
            svd_mode: raw.svd_mode,
        })
    }
}

/// The default retained-subspace count, `d_h/16` clamped to at least one.
pub fn default_r(d_h: usize) -> usize {
    (d_h / 16).max(1)
}

impl ModelConfig {
    pub fn from_json(json: &str) -> Result<ModelConfig> {
        let cfg: ModelConfig =
            serde_json::from_str(json).map_err(|e| Error::Format(format!("config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.n_layers == 0 || self.vocab < 2 {
            return fail("d, n_layers must be positive and vocab >= 2".into());
        }
        if self.n_g == 0 || self.n_h < self.n_g || self.n_h % self.n_g != 0 {
            return fail(format!("n_h = {} must be a positive multiple of n_g = {}", self.n_h, self.n_g));
        }
        if self.d_h < 2 || self.d_h % 2 != 0 {
            return fail(format!("d_h = {} must be even and >= 2", self.d_h));
        }
        if self.rope_base <= 1.0 {
            return fail(format!("rope_base = {} must exceed 1", self.rope_base));
        }
        if self.r > self.d_h / 2 {
            return fail(format!("r = {} exceeds d_h/2 = {}", self.r, self.d_h / 2));
        }
        if self.d_kv_per_head == 0 {
            return fail("d_kv_per_head must be positive".into());
        }
        match self.svd_mode {
            // The latent cannot exceed the width of the per-head block it
            // reconstructs: [k_nope, v] is d_c + d_h wide for joint, and the
            // split key factorization caps each half at d_c.
            SvdMode::Joint => {
                let cap = 2 * self.d_h - 2 * self.r;
                if self.d_kv_per_head > cap {
                    return fail(format!(
                        "d_kv_per_head = {} exceeds joint cap 2*d_h - 2r = {cap}",
                        self.d_kv_per_head
                    ));
                }
            }
            SvdMode::Split => {
                if self.d_kv_per_head % 2 != 0 {
                    return fail(format!(
                        "split mode needs even d_kv_per_head, got {}",
                        self.d_kv_per_head
                    ));
                }
                let cap = 2 * (self.d_h - 2 * self.r);
                if self.d_kv_per_head > cap {
                    return fail(format!(
                        "d_kv_per_head = {} exceeds split cap 2*(d_h - 2r) = {cap}",
                        self.d_kv_per_head
                    ));
                }
            }
        }
        Ok(())
    }

    /// NoPE dims per head.
    pub fn d_c(&self) -> usize {
        self.d_h - 2 * self.r
    }

    /// RoPE dims per head.
    pub fn d_r(&self) -> usize {
        2 * self.r
    }

    /// Total latent width `n_g * d_kv_per_head`.
    pub fn d_kv_total(&self) -> usize {
        self.n_g * self.d_kv_per_head
    }

    pub fn subspaces(&self) -> usize {
        self.d_h / 2
    }

    pub fn mlp_hidden(&self) -> usize {
        MLP_RATIO * self.d
    }

    /// KV group of query head `h`.
    pub fn group_of(&self, h: usize) -> usize {
        h * self.n_g / self.n_h
    }

    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let bytes = serde_json::to_vec(&value).expect("config serializes");
        hex_digest(&bytes)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Tensors and stores

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U32,
}

impl Dtype {
    pub fn byte_width(&self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Row-major u32 tensor; carries retained-subspace indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct U32Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(Mat32),
    F64(Mat64),
    U32(U32Tensor),
}

impl Tensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            Tensor::F32(_) => Dtype::F32,
            Tensor::F64(_) => Dtype::F64,
            Tensor::U32(_) => Dtype::U32,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        match self {
            Tensor::F32(m) => [m.rows(), m.cols()],
            Tensor::F64(m) => [m.rows(), m.cols()],
            Tensor::U32(t) => [t.rows, t.cols],
        }
    }

    pub fn byte_len(&self) -> usize {
        let [r, c] = self.shape();
        r * c * self.dtype().byte_width()
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            Tensor::F32(m) => {
                for &v in m.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Tensor::F64(m) => {
                for &v in m.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Tensor::U32(t) => {
                for &v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }

    fn read_le(dtype: Dtype, shape: [usize; 2], bytes: &[u8], name: &str) -> Result<Tensor> {
        let n = shape[0] * shape[1];
        let expected = n * dtype.byte_width();
        if bytes.len() != expected {
            return Err(Error::Truncated(format!(
                "tensor `{name}` needs {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let tensor = match dtype {
            Dtype::F32 => {
                let data: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::F32(Matrix::from_vec(shape[0], shape[1], data)?)
            }
            Dtype::F64 => {
                let data: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::F64(Matrix::from_vec(shape[0], shape[1], data)?)
            }
            Dtype::U32 => {
                let data: Vec<u32> = bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::U32(U32Tensor { rows: shape[0], cols: shape[1], data })
            }
        };
        let finite = match &tensor {
            Tensor::F32(m) => m.is_finite(),
            Tensor::F64(m) => m.is_finite(),
            Tensor::U32(_) => true,
        };
        if !finite {
            return Err(Error::Format(format!("tensor `{name}` contains non-finite values")));
        }
        Ok(tensor)
    }
}

/// Ordered name -> tensor mapping; the unit of checkpoint I/O.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    tensors: IndexMap<String, Tensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, m: Mat32) {
        self.insert(name, Tensor::F32(m));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Manifest { name: name.to_string(), detail: "missing".into() })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get_f32(&self, name: &str) -> Result<&Mat32> {
        match self.get(name)? {
            Tensor::F32(m) => Ok(m),
            t => Err(Error::Manifest {
                name: name.to_string(),
                detail: format!("expected f32 tensor, found {:?}", t.dtype()),
            }),
        }
    }

    /// f64 view of a float tensor (upcast is lossless).
    pub fn get_as_f64(&self, name: &str) -> Result<Mat64> {
        match self.get(name)? {
            Tensor::F32(m) => Ok(m.cast()),
            Tensor::F64(m) => Ok(m.clone()),
            t => Err(Error::Manifest {
                name: name.to_string(),
                detail: format!("expected float tensor, found {:?}", t.dtype()),
            }),
        }
    }

    pub fn get_u32(&self, name: &str) -> Result<&U32Tensor> {
        match self.get(name)? {
            Tensor::U32(t) => Ok(t),
            t => Err(Error::Manifest {
                name: name.to_string(),
                detail: format!("expected u32 tensor, found {:?}", t.dtype()),
            }),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Checkpoint kinds, manifests, headers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Unconverted full-RoPE MHA/GQA weights.
    Full,
    /// Converted latent-attention weights.
    Mla,
}

/// Conversion bookkeeping embedded in converted checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionMeta {
    /// One factorization per layer (merged heads) unless the per-head
    /// ablation route was taken.
    pub per_head: bool,
    /// Per layer: squared singular values discarded by each truncated SVD.
    pub discarded_sq: Vec<Vec<f64>>,
    /// Per layer: squared Frobenius norms of the factorized inputs.
    pub input_sq: Vec<Vec<f64>>,
    /// Digest of the calibration corpus behind a two-norm selection.
    pub stats_corpus_digest: Option<String>,
}

impl ConversionMeta {
    /// Total discarded energy relative to total input energy.
    pub fn relative_discarded(&self) -> f64 {
        let num: f64 = self.discarded_sq.iter().flatten().sum();
        let den: f64 = self.input_sq.iter().flatten().sum();
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }
}

/// A checkpoint in memory: config, kind, optional conversion metadata, and
/// the tensor store itself.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub kind: CheckpointKind,
    pub conversion: Option<ConversionMeta>,
    pub store: TensorStore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: Dtype,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    kind: CheckpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conversion: Option<ConversionMeta>,
    tensors: Vec<ManifestEntry>,
}

/// Canonical tensor names and shapes for a config, in serialization order.
pub fn expected_manifest(cfg: &ModelConfig, kind: CheckpointKind) -> Vec<(String, Dtype, [usize; 2])> {
    let mut out = Vec::new();
    out.push(("embed".to_string(), Dtype::F32, [cfg.vocab, cfg.d]));
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("L{l}.{s}");
        out.push((p("norm1"), Dtype::F32, [1, cfg.d]));
        match kind {
            CheckpointKind::Full => {
                out.push((p("Wq"), Dtype::F32, [cfg.d, cfg.n_h * cfg.d_h]));
                out.push((p("Wk"), Dtype::F32, [cfg.d, cfg.n_g * cfg.d_h]));
                out.push((p("Wv"), Dtype::F32, [cfg.d, cfg.n_g * cfg.d_h]));
            }
            CheckpointKind::Mla => {
                out.push((p("Wq_rope"), Dtype::F32, [cfg.d, cfg.n_h * cfg.d_r()]));
                out.push((p("Wq_nope"), Dtype::F32, [cfg.d, cfg.n_h * cfg.d_c()]));
                out.push((p("Wk_rope"), Dtype::F32, [cfg.d, cfg.n_g * cfg.d_r()]));
                out.push((p("Wdkv"), Dtype::F32, [cfg.d, cfg.d_kv_total()]));
                out.push((p("Wuk"), Dtype::F32, [cfg.d_kv_total(), cfg.n_g * cfg.d_c()]));
                out.push((p("Wuv"), Dtype::F32, [cfg.d_kv_total(), cfg.n_g * cfg.d_h]));
                out.push((p("S"), Dtype::U32, [cfg.n_g, cfg.r]));
            }
        }
        out.push((p("Wo"), Dtype::F32, [cfg.n_h * cfg.d_h, cfg.d]));
        out.push((p("norm2"), Dtype::F32, [1, cfg.d]));
        out.push((p("mlp.up"), Dtype::F32, [cfg.d, cfg.mlp_hidden()]));
        out.push((p("mlp.down"), Dtype::F32, [cfg.mlp_hidden(), cfg.d]));
    }
    out.push(("lm_head".to_string(), Dtype::F32, [cfg.d, cfg.vocab]));
    out
}

fn validate_store(cfg: &ModelConfig, kind: CheckpointKind, store: &TensorStore) -> Result<()> {
    let expected = expected_manifest(cfg, kind);
    for (name, dtype, shape) in &expected {
        let t = store.get(name)?;
        if t.dtype() != *dtype || t.shape() != *shape {
            return Err(Error::Manifest {
                name: name.clone(),
                detail: format!(
                    "expected {:?} {:?}, found {:?} {:?}",
                    dtype,
                    shape,
                    t.dtype(),
                    t.shape()
                ),
            });
        }
    }
    if store.len() != expected.len() {
        let names: std::collections::HashSet<&str> =
            expected.iter().map(|(n, _, _)| n.as_str()).collect();
        for (name, _) in store.iter() {
            if !names.contains(name.as_str()) {
                return Err(Error::Manifest {
                    name: name.clone(),
                    detail: "not part of the manifest for this config".into(),
                });
            }
        }
    }
    Ok(())
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

/// Canonical JSON bytes: routes through `serde_json::Value` so object keys
/// come out sorted while arrays keep their order.
fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("header serializes");
    serde_json::to_vec(&v).expect("header serializes")
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.config.validate()?;
    validate_store(&ckpt.config, ckpt.kind, &ckpt.store)?;

    let mut entries = Vec::with_capacity(ckpt.store.len());
    let mut cursor = 0usize;
    for (name, tensor) in ckpt.store.iter() {
        let offset = align_up(cursor);
        entries.push(ManifestEntry {
            name: name.clone(),
            dtype: tensor.dtype(),
            shape: tensor.shape(),
            offset: offset as u64,
        });
        cursor = offset + tensor.byte_len();
    }
    let header = Header {
        config: ckpt.config.clone(),
        kind: ckpt.kind,
        conversion: ckpt.conversion.clone(),
        tensors: entries,
    };
    let header_bytes = canonical_json(&header);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    let data_start = align_up(out.len());
    out.resize(data_start, 0);
    for (entry, (_, tensor)) in header.tensors.iter().zip(ckpt.store.iter()) {
        let absolute = data_start + entry.offset as usize;
        out.resize(absolute, 0);
        tensor.write_le(&mut out);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 {
        return Err(Error::Truncated(format!("{} byte file is shorter than the fixed header", bytes.len())));
    }
    if &bytes[0..8] != MAGIC {
        return Err(Error::Magic { found: bytes[0..8].to_vec() });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + header_len {
        return Err(Error::Truncated("header extends past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[20..20 + header_len])
        .map_err(|e| Error::Format(format!("header JSON: {e}")))?;
    header.config.validate()?;

    let data_start = align_up(20 + header_len);
    let mut store = TensorStore::new();
    for entry in &header.tensors {
        let lo = data_start + entry.offset as usize;
        let hi = lo + entry.shape[0] * entry.shape[1] * entry.dtype.byte_width();
        if hi > bytes.len() {
            return Err(Error::Truncated(format!(
                "tensor `{}` extends past end of file",
                entry.name
            )));
        }
        let tensor = Tensor::read_le(entry.dtype, entry.shape, &bytes[lo..hi], &entry.name)?;
        store.insert(entry.name.clone(), tensor);
    }
    validate_store(&header.config, header.kind, &store)?;
    Ok(Checkpoint {
        config: header.config,
        kind: header.kind,
        conversion: header.conversion,
        store,
    })
}

// ---------------------------------------------------------------------------
// Token corpus

/// Fixed-length token-id sequences used for calibration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCorpus {
    pub seq_len: usize,
    pub sequences: Vec<Vec<u32>>,
}

impl TokenCorpus {
    /// Build from raw sequences, truncating or zero-padding to `seq_len`.
    pub fn ingest(raw: Vec<Vec<u32>>, seq_len: usize) -> TokenCorpus {
        let sequences = raw
            .into_iter()
            .map(|mut s| {
                s.resize(seq_len, 0);
                s
            })
            .collect();
        TokenCorpus { seq_len, sequences }
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        for seq in &self.sequences {
            if let Some(&bad) = seq.iter().find(|&&id| id as usize >= vocab) {
                return Err(Error::Format(format!("token id {bad} exceeds vocab {vocab}")));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.seq_len as u32).to_le_bytes());
        hasher.update((self.sequences.len() as u32).to_le_bytes());
        for seq in &self.sequences {
            for &id in seq {
                hasher.update(id.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn save_corpus(corpus: &TokenCorpus, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&(corpus.seq_len as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.sequences.len() as u32).to_le_bytes());
    for seq in &corpus.sequences {
        debug_assert_eq!(seq.len(), corpus.seq_len);
        for &id in seq {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<TokenCorpus> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(Error::Truncated("corpus file shorter than its header".into()));
    }
    if &bytes[0..4] != CORPUS_MAGIC {
        return Err(Error::Magic { found: bytes[0..4].to_vec() });
    }
    let seq_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = 12 + 4 * seq_len * count;
    if bytes.len() < need {
        return Err(Error::Truncated(format!(
            "corpus needs {need} bytes for {count} sequences of length {seq_len}, found {}",
            bytes.len()
        )));
    }
    let mut sequences = Vec::with_capacity(count);
    let mut cursor = 12;
    for _ in 0..count {
        let mut seq = Vec::with_capacity(seq_len);
        for _ in 0..seq_len {
            seq.push(u32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap()));
            cursor += 4;
        }
        sequences.push(seq);
    }
    Ok(TokenCorpus { seq_len, sequences })
}

// ---------------------------------------------------------------------------
// Toy initialization

/// Deterministic Gaussian toy checkpoint: projections and embeddings drawn
/// at scale `1/sqrt(d)`, norm weights at one.
pub fn init_toy(cfg: &ModelConfig, seed: u64) -> Result<TensorStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (cfg.d as f64).sqrt();
    let normal = rand_distr::StandardNormal;
    let mut gauss = |rows: usize, cols: usize| -> Tensor {
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| {
                let z: f64 = normal.sample(&mut rng);
                (z * scale) as f32
            })
            .collect();
        Tensor::F32(Matrix::from_vec(rows, cols, data).expect("sized by construction"))
    };
    let ones = |cols: usize| Tensor::F32(Matrix::from_vec(1, cols, vec![1.0f32; cols]).unwrap());

    let mut store = TensorStore::new();
    store.insert("embed", gauss(cfg.vocab, cfg.d));
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("L{l}.{s}");
        store.insert(p("norm1"), ones(cfg.d));
        store.insert(p("Wq"), gauss(cfg.d, cfg.n_h * cfg.d_h));
        store.insert(p("Wk"), gauss(cfg.d, cfg.n_g * cfg.d_h));
        store.insert(p("Wv"), gauss(cfg.d, cfg.n_g * cfg.d_h));
        store.insert(p("Wo"), gauss(cfg.n_h * cfg.d_h, cfg.d));
        store.insert(p("norm2"), ones(cfg.d));
        store.insert(p("mlp.up"), gauss(cfg.d, cfg.mlp_hidden()));
        store.insert(p("mlp.down"), gauss(cfg.mlp_hidden(), cfg.d));
    }
    store.insert("lm_head", gauss(cfg.d, cfg.vocab));
    Ok(store)
}

/// Deterministic synthetic calibration corpus with uniform token ids.
pub fn gen_corpus(vocab: usize, seed: u64, n_seqs: usize, seq_len: usize) -> TokenCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..n_seqs)
        .map(|_| (0..seq_len).map(|_| rng.gen_range(0..vocab as u32)).collect())
        .collect();
    TokenCorpus { seq_len, sequences }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn toy_config(n_g: usize) -> ModelConfig {
        ModelConfig {
            d: 64,
            n_h: 4,
            n_g,
            d_h: 16,
            n_layers: 2,
            rope_base: 1e4,
            vocab: 256,
            strategy: Strategy::TwoNorm,
            r: 1,
            d_kv_per_head: 8,
            svd_mode: SvdMode::Joint,
        }
    }

    #[test]
    fn config_json_defaults() {
        let cfg = ModelConfig::from_json(
            r#"{"d":64,"n_h":4,"n_g":2,"d_h":16,"n_layers":2,"vocab":256}"#,
        )
        .unwrap();
        assert_eq!(cfg.rope_base, 1e4);
        assert_eq!(cfg.strategy, Strategy::TwoNorm);
        assert_eq!(cfg.svd_mode, SvdMode::Joint);
        assert_eq!(cfg.r, 1); // d_h/16
        assert_eq!(cfg.d_kv_per_head, 8); // d_h/2
    }

    #[test]
    fn config_rejects_odd_head_dim() {
        let err = ModelConfig::from_json(
            r#"{"d":64,"n_h":4,"n_g":2,"d_h":15,"n_layers":2,"vocab":256}"#,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn config_latent_caps_by_mode() {
        let mut cfg = toy_config(2);
        cfg.r = 1;
        cfg.d_kv_per_head = 30; // 2*d_h - 2r = 30
        assert!(cfg.validate().is_ok());
        cfg.d_kv_per_head = 31;
        assert!(cfg.validate().is_err());

        cfg.svd_mode = SvdMode::Split;
        cfg.d_kv_per_head = 28; // 2*(d_h - 2r) = 28
        assert!(cfg.validate().is_ok());
        cfg.d_kv_per_head = 30;
        assert!(cfg.validate().is_err());
        cfg.d_kv_per_head = 27; // odd
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = toy_config(2);
        let store = init_toy(&cfg, 7).unwrap();
        let ckpt = Checkpoint { config: cfg, kind: CheckpointKind::Full, conversion: None, store };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.mlaf");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.kind, ckpt.kind);
        assert_eq!(loaded.store, ckpt.store);
        // Identical stores -> identical bytes.
        let path2 = dir.path().join("toy2.mlaf");
        save_checkpoint(&ckpt, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn wrong_shape_names_offending_tensor() {
        let cfg = toy_config(2);
        let mut store = init_toy(&cfg, 0).unwrap();
        // GQA config but an MHA-shaped key projection.
        store.insert("L0.Wk", Tensor::F32(Matrix::zeros(cfg.d, cfg.n_h * cfg.d_h)));
        let ckpt = Checkpoint { config: cfg, kind: CheckpointKind::Full, conversion: None, store };
        let dir = tempfile::tempdir().unwrap();
        let err = save_checkpoint(&ckpt, dir.path().join("bad.mlaf")).unwrap_err();
        match err {
            Error::Manifest { name, .. } => assert_eq!(name, "L0.Wk"),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn byte_swapped_version_is_version_error() {
        let cfg = toy_config(4);
        let store = init_toy(&cfg, 1).unwrap();
        let ckpt = Checkpoint { config: cfg, kind: CheckpointKind::Full, conversion: None, store };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mlaf");
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].reverse();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Version { .. })));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let cfg = toy_config(4);
        let store = init_toy(&cfg, 1).unwrap();
        let ckpt = Checkpoint { config: cfg, kind: CheckpointKind::Full, conversion: None, store };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mlaf");
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Magic { .. })));

        fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn trailing_padding_is_ignored() {
        let cfg = toy_config(4);
        let store = init_toy(&cfg, 3).unwrap();
        let ckpt =
            Checkpoint { config: cfg, kind: CheckpointKind::Full, conversion: None, store };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pad.mlaf");
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 1234]);
        fs::write(&path, &bytes).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.store, ckpt.store);
    }

    #[test]
    fn init_toy_deterministic_and_seed_sensitive() {
        let cfg = toy_config(2);
        let a = init_toy(&cfg, 0).unwrap();
        let b = init_toy(&cfg, 0).unwrap();
        assert_eq!(a, b);
        let c = init_toy(&cfg, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn embed_variance_near_one_over_d() {
        let cfg = toy_config(2);
        let store = init_toy(&cfg, 5).unwrap();
        let embed = store.get_f32("embed").unwrap();
        let n = embed.data().len() as f64;
        let mean: f64 = embed.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 =
            embed.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let target = 1.0 / cfg.d as f64;
        assert!((var - target).abs() / target < 0.2, "var {var} vs {target}");
    }

    #[test]
    fn corpus_roundtrip_and_digest() {
        let corpus = gen_corpus(256, 9, 8, 32);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tok");
        save_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded, corpus);
        assert_eq!(loaded.digest(), corpus.digest());
        assert!(corpus.check_vocab(256).is_ok());
        assert!(corpus.check_vocab(16).is_err());
    }

    #[test]
    fn corpus_ingest_pads_and_truncates() {
        let c = TokenCorpus::ingest(vec![vec![1, 2, 3, 4, 5], vec![9]], 3);
        assert_eq!(c.sequences[0], vec![1, 2, 3]);
        assert_eq!(c.sequences[1], vec![9, 0, 0]);
    }
}
