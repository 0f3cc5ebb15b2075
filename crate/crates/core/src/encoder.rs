//! Narrative text → 768-d document embedding.
//!
//! Text is tokenized into hashed ids, cut into overlapping windows, each
//! window is embedded on its own, and the window embeddings are pooled into
//! one vector. There is no positional signal across windows; the overlap is
//! the only shared context.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;
use crate::tensor::{self, Bag, ParamId, ParamStore, Segment, Tape, Tensor, TensorError, Var};

pub const TEXT_DIM: usize = 768;
pub const MIN_BUCKETS: usize = 64;
pub const PRECOMPUTED_MAGIC: &[u8; 4] = b"HEV1";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("narrative is empty")]
    EmptyNarrative,
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("invalid window: size {window}, stride {stride} (need 0 < stride <= size)")]
    InvalidWindow { window: usize, stride: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("embedding file format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("embedding dimension {got}, expected {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("text input does not match encoder mode {0:?}")]
    ModeMismatch(EncoderMode),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Trainable embedding table over hashed tokens.
    HashedBag,
    /// Chunk embeddings produced offline by an external encoder.
    Precomputed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Max,
    Mean,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub bucket_count: usize,
    pub embed_dim: usize,
    pub aggregation: Aggregation,
    pub post_norm: bool,
    pub window: usize,
    pub stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::HashedBag,
            bucket_count: 4096,
            embed_dim: TEXT_DIM,
            aggregation: Aggregation::Max,
            post_norm: true,
            window: 512,
            stride: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.embed_dim != TEXT_DIM {
            return Err(EncoderError::Config(format!("embed_dim must be {TEXT_DIM}, got {}", self.embed_dim)));
        }
        if self.bucket_count < MIN_BUCKETS {
            return Err(EncoderError::Config(format!(
                "bucket_count must be at least {MIN_BUCKETS}, got {}",
                self.bucket_count
            )));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(EncoderError::InvalidWindow {
                window: self.window,
                stride: self.stride,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub source_length: usize,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Lowercases, splits on runs of non-alphanumeric characters and hashes each
/// token into `buckets` ids.
pub fn tokenize(text: &str, buckets: usize) -> Result<TokenSequence, EncoderError> {
    if text.trim().is_empty() {
        return Err(EncoderError::EmptyNarrative);
    }
    let lower = text.to_lowercase();
    let tokens: Vec<u32> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| (fnv1a(t.as_bytes()) % buckets as u64) as u32)
        .collect();
    if tokens.is_empty() {
        return Err(EncoderError::EmptyNarrative);
    }
    Ok(TokenSequence {
        tokens,
        source_length: text.chars().count(),
    })
}

/// Half-open token range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkSet {
    pub windows: Vec<Window>,
    pub window_size: usize,
    pub stride: usize,
}

/// Windows start at `0, S, 2S, …`; generation stops at the first window
/// reaching the end of the sequence, which is clipped rather than padded.
pub fn chunk(len: usize, window: usize, stride: usize) -> Result<ChunkSet, EncoderError> {
    if stride == 0 || stride > window {
        return Err(EncoderError::InvalidWindow { window, stride });
    }
    if len == 0 {
        return Err(EncoderError::EmptySequence);
    }
    let mut windows = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + window).min(len);
        windows.push(Window { start, end });
        if end == len {
            break;
        }
        start += stride;
    }
    Ok(ChunkSet {
        windows,
        window_size: window,
        stride,
    })
}

/// Token-count multiset of one window, sorted by token id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkBag {
    pub counts: Vec<(u32, u32)>,
    pub len: usize,
}

impl ChunkBag {
    pub fn from_tokens(tokens: &[u32]) -> Self {
        let mut counts = BTreeMap::new();
        for &t in tokens {
            *counts.entry(t).or_insert(0u32) += 1;
        }
        Self {
            counts: counts.into_iter().collect(),
            len: tokens.len(),
        }
    }

    /// Bag whose embedding is the mean of the window's token rows.
    pub fn mean_bag<F: Real>(&self) -> Bag<F> {
        let inv = 1.0 / self.len as f64;
        Bag {
            entries: self
                .counts
                .iter()
                .map(|&(t, c)| (t as usize, F::lit(f64::from(c) * inv)))
                .collect(),
        }
    }
}

/// A narrative after the parameter-free part of encoding.
#[derive(Clone, Debug, PartialEq)]
pub enum PreparedText {
    Hashed { chunks: Vec<ChunkBag>, token_count: usize },
    Precomputed { chunks: Vec<Vec<f32>> },
}

impl PreparedText {
    pub fn chunk_count(&self) -> usize {
        match self {
            PreparedText::Hashed { chunks, .. } => chunks.len(),
            PreparedText::Precomputed { chunks } => chunks.len(),
        }
    }

    pub fn from_precomputed(chunks: Vec<Vec<f32>>) -> Result<Self, EncoderError> {
        if chunks.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        if let Some(c) = chunks.iter().find(|c| c.len() != TEXT_DIM) {
            return Err(EncoderError::DimensionMismatch {
                got: c.len(),
                want: TEXT_DIM,
            });
        }
        if chunks.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EncoderError::Tensor(TensorError::NonFinite { op: "precomputed embeddings" }));
        }
        Ok(PreparedText::Precomputed { chunks })
    }
}

/// Tokenizes and chunks a narrative for the hashed-bag encoder.
pub fn prepare(text: &str, config: &EncoderConfig) -> Result<PreparedText, EncoderError> {
    let seq = tokenize(text, config.bucket_count)?;
    let set = chunk(seq.tokens.len(), config.window, config.stride)?;
    let chunks = set
        .windows
        .iter()
        .map(|w| ChunkBag::from_tokens(&seq.tokens[w.start..w.end]))
        .collect();
    Ok(PreparedText::Hashed {
        chunks,
        token_count: seq.tokens.len(),
    })
}

/// Reads a precomputed chunk-embedding file.
pub fn ingest_precomputed(path: impl AsRef<Path>) -> Result<Vec<Vec<f32>>, EncoderError> {
    parse_precomputed(&std::fs::read(path)?)
}

/// Layout: `HEV1`, u32 chunk count, u32 dim, then `count·dim` f32, all
/// little-endian.
pub fn parse_precomputed(bytes: &[u8]) -> Result<Vec<Vec<f32>>, EncoderError> {
    let format = |offset: usize, message: &str| EncoderError::Format {
        offset,
        message: message.to_string(),
    };
    if bytes.len() < 12 {
        return Err(format(bytes.len(), "header truncated"));
    }
    if &bytes[..4] != PRECOMPUTED_MAGIC {
        return Err(format(0, "bad magic"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim != TEXT_DIM {
        return Err(EncoderError::DimensionMismatch { got: dim, want: TEXT_DIM });
    }
    if count == 0 {
        return Err(format(4, "chunk count is zero"));
    }
    let want = 12 + count * dim * 4;
    if bytes.len() < want {
        return Err(format(bytes.len(), &format!("payload truncated, expected {want} bytes")));
    }
    if bytes.len() > want {
        return Err(format(want, "trailing bytes after payload"));
    }
    Ok(bytes[12..]
        .chunks_exact(dim * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect())
}

pub fn write_precomputed(mut out: impl Write, chunks: &[Vec<f32>]) -> Result<(), EncoderError> {
    let dim = chunks.first().map_or(TEXT_DIM, Vec::len);
    out.write_all(PRECOMPUTED_MAGIC)?;
    out.write_all(&(chunks.len() as u32).to_le_bytes())?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    for c in chunks {
        if c.len() != dim {
            return Err(EncoderError::DimensionMismatch { got: c.len(), want: dim });
        }
        for v in c {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Pooled document vector with the number of windows it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentEmbedding<F> {
    pub vector: Tensor<F>,
    pub chunk_count: usize,
}

/// Parameters of the text side: embedding table, optional attention query,
/// optional post-pooling LayerNorm.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: EncoderConfig,
    table: Option<ParamId>,
    query: Option<ParamId>,
    norm: Option<(ParamId, ParamId)>,
}

pub(crate) fn init_norm<F: Real>(store: &mut ParamStore<F>, prefix: &str, d: usize) -> tensor::Result<(ParamId, ParamId)> {
    let g = store.insert(format!("{prefix}.gamma"), Tensor::full(&[d], F::one()), false)?;
    let b = store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]), false)?;
    Ok((g, b))
}

pub(crate) fn bind_norm<F: Real>(store: &ParamStore<F>, prefix: &str) -> tensor::Result<(ParamId, ParamId)> {
    Ok((store.id(&format!("{prefix}.gamma"))?, store.id(&format!("{prefix}.beta"))?))
}

pub const LN_EPS: f64 = 1e-5;

impl TextEncoder {
    pub fn register<F: Real>(store: &mut ParamStore<F>, config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self, EncoderError> {
        config.validate()?;
        let d = config.embed_dim;
        let table = match config.mode {
            EncoderMode::HashedBag => {
                let data = (0..config.bucket_count * d)
                    .map(|_| F::lit(rng.gen_range(-0.1..0.1)))
                    .collect();
                Some(store.insert("encoder.table", Tensor::new(vec![config.bucket_count, d], data)?, false)?)
            }
            EncoderMode::Precomputed => None,
        };
        let query = match config.aggregation {
            Aggregation::Attention => Some(store.insert("encoder.attn_query", Tensor::zeros(&[d]), false)?),
            _ => None,
        };
        let norm = if config.post_norm {
            Some(init_norm(store, "encoder.norm", d)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            table,
            query,
            norm,
        })
    }

    pub fn bind<F: Real>(store: &ParamStore<F>, config: &EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let table = match config.mode {
            EncoderMode::HashedBag => Some(store.id("encoder.table")?),
            EncoderMode::Precomputed => None,
        };
        let query = match config.aggregation {
            Aggregation::Attention => Some(store.id("encoder.attn_query")?),
            _ => None,
        };
        let norm = if config.post_norm {
            Some(bind_norm(store, "encoder.norm")?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            table,
            query,
            norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn prepare(&self, text: &str) -> Result<PreparedText, EncoderError> {
        prepare(text, &self.config)
    }

    /// Embeds every window of every text: `[R×768]` plus each text's rows.
    pub fn encode_chunks<F: Real>(&self, tape: &mut Tape<'_, F>, texts: &[&PreparedText]) -> Result<(Var, Vec<Segment>), EncoderError> {
        let mut segments = Vec::with_capacity(texts.len());
        let mut start = 0;
        for t in texts {
            let len = t.chunk_count();
            if len == 0 {
                return Err(EncoderError::EmptySequence);
            }
            segments.push(Segment { start, len });
            start += len;
        }
        let chunks = match self.config.mode {
            EncoderMode::HashedBag => {
                let mut bags = Vec::with_capacity(start);
                for t in texts {
                    match t {
                        PreparedText::Hashed { chunks, .. } => bags.extend(chunks.iter().map(ChunkBag::mean_bag)),
                        PreparedText::Precomputed { .. } => return Err(EncoderError::ModeMismatch(self.config.mode)),
                    }
                }
                let table = tape.param(self.table.expect("hashed mode has a table"));
                tape.embedding_bag(table, bags)?
            }
            EncoderMode::Precomputed => {
                let mut data = Vec::with_capacity(start * TEXT_DIM);
                for t in texts {
                    match t {
                        PreparedText::Precomputed { chunks } => {
                            data.extend(chunks.iter().flatten().map(|&v| F::lit(f64::from(v))))
                        }
                        PreparedText::Hashed { .. } => return Err(EncoderError::ModeMismatch(self.config.mode)),
                    }
                }
                tape.constant(Tensor::new(vec![start, TEXT_DIM], data)?)
            }
        };
        Ok((chunks, segments))
    }

    /// Pools window embeddings per text (`[R×768] → [b×768]`) and applies the
    /// post-pooling LayerNorm when enabled.
    pub fn aggregate<F: Real>(&self, tape: &mut Tape<'_, F>, chunks: Var, segments: &[Segment]) -> Result<Var, EncoderError> {
        let pooled = match self.config.aggregation {
            Aggregation::Max => tape.segment_max(chunks, segments)?,
            Aggregation::Mean => tape.segment_mean(chunks, segments)?,
            Aggregation::Attention => {
                let q = tape.param(self.query.expect("attention pooling has a query"));
                tape.segment_attention(chunks, q, segments)?
            }
        };
        Ok(match self.norm {
            Some((g, b)) => {
                let (g, b) = (tape.param(g), tape.param(b));
                tape.layer_norm(pooled, g, b, F::lit(LN_EPS))?
            }
            None => pooled,
        })
    }

    /// Text embeddings `[b×768]` for a batch.
    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, texts: &[&PreparedText]) -> Result<Var, EncoderError> {
        let (chunks, segments) = self.encode_chunks(tape, texts)?;
        self.aggregate(tape, chunks, &segments)
    }

    /// Inference-only document embedding for one text.
    pub fn embed<F: Real>(&self, store: &ParamStore<F>, text: &PreparedText) -> Result<DocumentEmbedding<F>, EncoderError> {
        let mut tape = Tape::new(store);
        let v = self.forward(&mut tape, &[text])?;
        let vector = tape.value(v).clone().reshape(vec![TEXT_DIM])?;
        Ok(DocumentEmbedding {
            vector,
            chunk_count: text.chunk_count(),
        })
    }
}
