//! Language-conditioned attention over dense feature maps.
//!
//! A [`FeatureMap`] holds one embedding per image cell. Comparing every cell
//! with a [`TextEmbedding`] by cosine similarity yields an [`AttentionMap`]
//! that behaves like a per-cell likelihood of the queried text.
//!
//! # Embedding bank file format
//!
//! ```text
//! LOCOMAN-EMBEDDINGS 1 <dim> <count>\n      header line, ASCII
//! <dim_0> <label_0>\n                       one line per entry, UTF-8 label
//! ...                                       (labels may contain spaces, not '\n')
//! <dim_{count-1}> <label_{count-1}>\n
//! <count * dim little-endian f32>           row-major, entry order
//! ```
//!
//! The file ends exactly after the last float. Every per-entry dimension
//! must equal the header dimension.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Read};
use std::path::Path;
use thiserror::Error;

/// Norm below which a vector counts as zero.
pub const ZERO_NORM: f64 = 1e-9;

/// Maximum pairwise |cos| between synthesized label embeddings.
pub const SYNTH_MAX_COSINE: f64 = 0.3;

const SYNTH_MAX_DRAWS: usize = 100_000;
const BANK_MAGIC: &str = "LOCOMAN-EMBEDDINGS";
const BANK_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("text embedding `{0}` has zero norm")]
    ZeroText(String),
    #[error("empty attention map")]
    EmptyMap,
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("label `{0}` not present in embedding bank")]
    UnknownLabel(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("could not draw embedding for `{label}` with |cos| < {SYNTH_MAX_COSINE} after {SYNTH_MAX_DRAWS} draws")]
    SynthesisFailed { label: String },
    #[error("malformed embedding file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense `H×W×C` feature map, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, AttentionError> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(AttentionError::DimensionMismatch {
                expected,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AttentionError::NonFinite("feature map"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Map with the same vector in every cell.
    pub fn filled(height: usize, width: usize, vector: &[f64]) -> Self {
        let mut data = Vec::with_capacity(height * width * vector.len());
        for _ in 0..height * width {
            data.extend_from_slice(vector);
        }
        Self {
            height,
            width,
            channels: vector.len(),
            data,
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub label: String,
    pub vector: Vec<f64>,
}

impl TextEmbedding {
    pub fn new(label: impl Into<String>, vector: Vec<f64>) -> Result<Self, AttentionError> {
        let label = label.into();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(AttentionError::NonFinite("text embedding"));
        }
        if norm(&vector) <= ZERO_NORM {
            return Err(AttentionError::ZeroText(label));
        }
        Ok(Self { label, vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Per-cell similarity in `[-1, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity between every feature cell and the text vector.
/// Cells with near-zero norm score 0.
pub fn cross_attention(features: &FeatureMap, text: &TextEmbedding) -> Result<AttentionMap, AttentionError> {
    if features.channels != text.dim() {
        return Err(AttentionError::DimensionMismatch {
            expected: features.channels,
            found: text.dim(),
        });
    }
    let text_norm = norm(&text.vector);
    if !(text_norm > ZERO_NORM) {
        return Err(AttentionError::ZeroText(text.label.clone()));
    }
    let values = features
        .data
        .chunks_exact(features.channels.max(1))
        .take(features.height * features.width)
        .map(|cell| {
            let cell_norm = norm(cell);
            if cell_norm < ZERO_NORM {
                0.0
            } else {
                (dot(cell, &text.vector) / (cell_norm * text_norm)).clamp(-1.0, 1.0)
            }
        })
        .collect();
    Ok(AttentionMap {
        height: features.height,
        width: features.width,
        values,
    })
}

/// Inverted dropout on the attention cells. Identity when not training.
///
/// # Panics
///
/// If `rate` is outside `[0, 1)`.
pub fn attention_dropout(att: &AttentionMap, rate: f64, training: bool, seed: u64) -> AttentionMap {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1), got {rate}");
    if !training || rate == 0.0 {
        return att.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_scale = 1.0 / (1.0 - rate);
    let values = att
        .values
        .iter()
        .map(|&v| if rng.gen::<f64>() < rate { 0.0 } else { v * keep_scale })
        .collect();
    AttentionMap {
        values,
        ..att.clone()
    }
}

/// Argmax cell `(row, col)` and its value; ties resolve to the first cell
/// in row-major order.
pub fn localize(att: &AttentionMap) -> Result<((usize, usize), f64), AttentionError> {
    if att.values.is_empty() || att.width == 0 {
        return Err(AttentionError::EmptyMap);
    }
    let mut best = 0;
    for (i, &v) in att.values.iter().enumerate() {
        if v > att.values[best] {
            best = i;
        }
    }
    Ok(((best / att.width, best % att.width), att.values[best]))
}

/// Sub-cell peak location by separable parabolic interpolation around the
/// argmax. Returns fractional `(row, col)` in cell units (cell centres at
/// integer coordinates).
pub fn refine_peak(att: &AttentionMap, (row, col): (usize, usize)) -> (f64, f64) {
    let offset = |left: Option<f64>, centre: f64, right: Option<f64>| -> f64 {
        match (left, right) {
            (Some(l), Some(r)) => {
                let denom = l - 2.0 * centre + r;
                if denom < 0.0 {
                    (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    };
    let c = att.get(row, col);
    let up = (row > 0).then(|| att.get(row - 1, col));
    let down = (row + 1 < att.height).then(|| att.get(row + 1, col));
    let left = (col > 0).then(|| att.get(row, col - 1));
    let right = (col + 1 < att.width).then(|| att.get(row, col + 1));
    (row as f64 + offset(up, c, down), col as f64 + offset(left, c, right))
}

/// Average-pools the map onto an `out_h × out_w` grid, row-major.
pub fn pool(att: &AttentionMap, out_h: usize, out_w: usize) -> Vec<f64> {
    let bins = |n: usize, out: usize, i: usize| {
        let start = (i * n / out).min(n.saturating_sub(1));
        let end = ((i + 1) * n / out).max(start + 1).min(n);
        start..end
    };
    let mut pooled = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        for j in 0..out_w {
            let mut sum = 0.0;
            let mut count = 0usize;
            for r in bins(att.height, out_h, i) {
                for c in bins(att.width, out_w, j) {
                    sum += att.get(r, c);
                    count += 1;
                }
            }
            pooled.push(if count == 0 { 0.0 } else { sum / count as f64 });
        }
    }
    pooled
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Imported,
    Synthetic { seed: u64 },
}

/// Label → embedding table. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBank {
    dim: usize,
    labels: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: BTreeMap<String, usize>,
    provenance: Provenance,
}

impl EmbeddingBank {
    fn from_entries(
        dim: usize,
        entries: Vec<(String, Vec<f64>)>,
        provenance: Provenance,
    ) -> Result<Self, AttentionError> {
        let mut index = BTreeMap::new();
        let mut labels = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        for (i, (label, vector)) in entries.into_iter().enumerate() {
            if vector.len() != dim {
                return Err(AttentionError::DimensionMismatch {
                    expected: dim,
                    found: vector.len(),
                });
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(AttentionError::NonFinite("embedding bank"));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(AttentionError::DuplicateLabel(label));
            }
            labels.push(label);
            vectors.push(vector);
        }
        Ok(Self {
            dim,
            labels,
            vectors,
            index,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn vector(&self, label: &str) -> Option<&[f64]> {
        self.index.get(label).map(|&i| self.vectors[i].as_slice())
    }

    pub fn embedding(&self, label: &str) -> Result<TextEmbedding, AttentionError> {
        let vector = self
            .vector(label)
            .ok_or_else(|| AttentionError::UnknownLabel(label.to_string()))?;
        TextEmbedding::new(label, vector.to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{BANK_MAGIC} {BANK_VERSION} {} {}\n", self.dim, self.len()).into_bytes();
        for label in &self.labels {
            out.extend_from_slice(format!("{} {}\n", self.dim, label).as_bytes());
        }
        for vector in &self.vectors {
            for &v in vector {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AttentionError> {
        let mut reader = std::io::Cursor::new(bytes);
        let mut line = String::new();
        let malformed = |msg: &str| AttentionError::Malformed(msg.to_string());

        reader.read_line(&mut line)?;
        let header: Vec<&str> = line.trim_end_matches('\n').split(' ').collect();
        if header.len() != 4 || header[0] != BANK_MAGIC {
            return Err(malformed("bad header line"));
        }
        let version: u32 = header[1].parse().map_err(|_| malformed("bad version"))?;
        if version != BANK_VERSION {
            return Err(AttentionError::Malformed(format!("unsupported version {version}")));
        }
        let dim: usize = header[2].parse().map_err(|_| malformed("bad dimension"))?;
        let count: usize = header[3].parse().map_err(|_| malformed("bad count"))?;

        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            line.clear();
            if reader.read_line(&mut line)? == 0 || !line.ends_with('\n') {
                return Err(malformed("truncated label table"));
            }
            let entry = line.trim_end_matches('\n');
            let (entry_dim, label) = entry.split_once(' ').ok_or_else(|| malformed("bad label line"))?;
            let entry_dim: usize = entry_dim.parse().map_err(|_| malformed("bad entry dimension"))?;
            if entry_dim != dim {
                return Err(AttentionError::DimensionMismatch {
                    expected: dim,
                    found: entry_dim,
                });
            }
            labels.push(label.to_string());
        }

        let mut body = Vec::new();
        reader.read_to_end(&mut body)?;
        if body.len() != count * dim * 4 {
            return Err(AttentionError::Malformed(format!(
                "expected {} float bytes, found {}",
                count * dim * 4,
                body.len()
            )));
        }
        let floats: Vec<f64> = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let entries = labels
            .into_iter()
            .zip(floats.chunks(dim.max(1)).map(<[f64]>::to_vec).chain(std::iter::repeat(Vec::new())))
            .collect();
        Self::from_entries(dim, entries, Provenance::Imported)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AttentionError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

pub fn load_embedding_bank(path: impl AsRef<Path>) -> Result<EmbeddingBank, AttentionError> {
    EmbeddingBank::from_bytes(&std::fs::read(path)?)
}

/// Pseudo-random unit vectors, one per label, with pairwise |cos| below
/// [`SYNTH_MAX_COSINE`] (rejection sampling). Components are rounded to f32
/// so a saved bank reloads bit-identically.
pub fn synth_embedding_bank<S: AsRef<str>>(labels: &[S], dim: usize, seed: u64) -> Result<EmbeddingBank, AttentionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(labels.len());
    let mut seen = std::collections::BTreeSet::new();
    for label in labels {
        let label = label.as_ref();
        if !seen.insert(label) {
            return Err(AttentionError::DuplicateLabel(label.to_string()));
        }
        let mut drawn = None;
        for _ in 0..SYNTH_MAX_DRAWS {
            let raw: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = norm(&raw);
            if n <= ZERO_NORM {
                continue;
            }
            let candidate: Vec<f64> = raw.iter().map(|v| ((v / n) as f32) as f64).collect();
            let cn = norm(&candidate);
            let ok = accepted
                .iter()
                .all(|other| (dot(other, &candidate) / (norm(other) * cn)).abs() < SYNTH_MAX_COSINE);
            if ok {
                drawn = Some(candidate);
                break;
            }
        }
        accepted.push(drawn.ok_or_else(|| AttentionError::SynthesisFailed {
            label: label.to_string(),
        })?);
    }
    let entries = labels
        .iter()
        .map(|l| l.as_ref().to_string())
        .zip(accepted)
        .collect();
    EmbeddingBank::from_entries(dim, entries, Provenance::Synthetic { seed })
}
