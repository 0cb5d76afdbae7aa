//! Feature extraction from schedule-primitive sequences.
//!
//! Each primitive becomes one fixed-width row: a one-hot of its type followed
//! by its arguments in order (numbers kept as-is, names mapped to tokens).
//! Rows are concatenated in sequence order, then cropped/padded to the
//! configured `sequence_length x embedding_size` shape. Normalization is
//! per-column max-abs fitted on the training split.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::primitive::{Arg, Primitive, PrimitiveSequence};

/// Token reserved for padding slots.
pub const PAD_TOKEN: u32 = 0;
/// Token assigned to names not present in the table.
pub const UNKNOWN_TOKEN: u32 = 1;

/// Shape and layout of extracted features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Width of the type one-hot prefix; must match the registry size.
    pub num_types: usize,
    /// Rows per matrix; longer sequences are cropped from the tail.
    pub sequence_length: usize,
    /// Features per primitive (one-hot plus argument slots).
    pub embedding_size: usize,
    /// Consumed by the model stage; kept here so one config describes the
    /// whole input surface.
    pub positional_encoding: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            num_types: crate::primitive::DEFAULT_TYPE_NAMES.len(),
            sequence_length: 25,
            embedding_size: 22,
            positional_encoding: false,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequence_length == 0 {
            return Err(Error::Config("sequence_length must be >= 1".into()));
        }
        if self.embedding_size <= self.num_types {
            return Err(Error::Config(format!(
                "embedding_size ({}) must exceed num_types ({}) to leave room for arguments",
                self.embedding_size, self.num_types
            )));
        }
        Ok(())
    }

    /// Argument slots available per primitive.
    pub fn arg_capacity(&self) -> usize {
        self.embedding_size - self.num_types
    }

    /// Truncated content digest, stored on extracted matrices as provenance.
    pub fn digest(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        digest64(json.as_bytes())
    }
}

fn digest64(bytes: &[u8]) -> u64 {
    let hash = Sha256::digest(bytes);
    u64::from_le_bytes(hash[..8].try_into().unwrap())
}

/// Name -> token mapping. Tokens are assigned densely starting at 2 in
/// first-occurrence order; 0 is padding and 1 means unknown. The table is
/// frozen once built: lookups for unseen names return [`UNKNOWN_TOKEN`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(into = "Vec<String>", from = "Vec<String>")]
pub struct TokenTable {
    names: Vec<String>,
    index: std::collections::HashMap<String, u32>,
}

impl TokenTable {
    /// Reconstructs a table from names in token order (token = position + 2).
    pub fn from_ordered_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32 + 2))
            .collect();
        Self { names, index }
    }

    pub fn token(&self, name: &str) -> u32 {
        self.index.get(name).copied().unwrap_or(UNKNOWN_TOKEN)
    }

    /// Name for a token, if the token is in the table.
    pub fn name(&self, token: u32) -> Option<&str> {
        if token < 2 {
            return None;
        }
        self.names.get(token as usize - 2).map(String::as_str)
    }

    /// Number of named tokens (reserved tokens excluded).
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn digest(&self) -> u64 {
        let mut hasher = Sha256::new();
        for name in &self.names {
            hasher.update((name.len() as u32).to_le_bytes());
            hasher.update(name.as_bytes());
        }
        let hash = hasher.finalize();
        u64::from_le_bytes(hash[..8].try_into().unwrap())
    }

    fn insert(&mut self, name: &str) {
        if !self.index.contains_key(name) {
            let token = self.names.len() as u32 + 2;
            self.names.push(name.to_string());
            self.index.insert(name.to_string(), token);
        }
    }
}

impl From<TokenTable> for Vec<String> {
    fn from(tt: TokenTable) -> Self {
        tt.names
    }
}

impl From<Vec<String>> for TokenTable {
    fn from(names: Vec<String>) -> Self {
        Self::from_ordered_names(names)
    }
}

/// Builds the token table from training sequences in stream order.
pub fn build_token_table<'a, I>(sequences: I) -> TokenTable
where
    I: IntoIterator<Item = &'a PrimitiveSequence>,
{
    let mut table = TokenTable::default();
    for seq in sequences {
        for p in &seq.primitives {
            for arg in &p.args {
                if let Arg::Name(name) = arg {
                    table.insert(name);
                }
            }
        }
    }
    table
}

/// Fixed-shape feature matrix for one sequence, row-major
/// `sequence_length x embedding_size`, with provenance digests of the config
/// and token table that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    pub config_digest: u64,
    pub token_digest: u64,
}

impl FeatureMatrix {
    /// Builds a matrix from raw values with empty provenance digests. Meant
    /// for synthetic model inputs (tests, gradient checks); matrices from
    /// real sequences come out of [`extract_features`].
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len(), "shape does not match data");
        Self {
            data: values,
            rows,
            cols,
            config_digest: 0,
            token_digest: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Bit-level content digest, used for duplicate detection.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update((self.rows as u32).to_le_bytes());
        hasher.update((self.cols as u32).to_le_bytes());
        for v in &self.data {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hasher.finalize().into()
    }
}

/// Embeds one primitive as an `embedding_size` vector: type one-hot, then
/// arguments in order. Excess arguments are cropped silently; missing slots
/// stay zero.
pub fn embed_primitive(p: &Primitive, cfg: &FeatureConfig, tt: &TokenTable) -> Vec<f64> {
    let mut row = vec![0.0; cfg.embedding_size];
    debug_assert!(p.type_id < cfg.num_types, "type_id outside one-hot width");
    if p.type_id < cfg.num_types {
        row[p.type_id] = 1.0;
    }
    for (i, arg) in p.args.iter().take(cfg.arg_capacity()).enumerate() {
        row[cfg.num_types + i] = match arg {
            Arg::Number(v) => *v,
            Arg::Name(name) => f64::from(tt.token(name)),
        };
    }
    row
}

/// Extracts the full feature matrix for a sequence: one embedded row per
/// primitive (tail-cropped at `sequence_length`), remaining rows zero.
pub fn extract_features(
    seq: &PrimitiveSequence,
    cfg: &FeatureConfig,
    tt: &TokenTable,
) -> Result<FeatureMatrix> {
    if seq.is_empty() {
        return Err(Error::Validation(
            "cannot featurize an empty primitive sequence".into(),
        ));
    }
    let mut data = vec![0.0; cfg.sequence_length * cfg.embedding_size];
    for (i, p) in seq.primitives.iter().take(cfg.sequence_length).enumerate() {
        let row = embed_primitive(p, cfg, tt);
        data[i * cfg.embedding_size..(i + 1) * cfg.embedding_size].copy_from_slice(&row);
    }
    Ok(FeatureMatrix {
        data,
        rows: cfg.sequence_length,
        cols: cfg.embedding_size,
        config_digest: cfg.digest(),
        token_digest: tt.digest(),
    })
}

/// Per-column max-abs scales fitted on the training split. Columns that are
/// identically zero keep scale 1 so padding stays zero and one-hot columns
/// are preserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub scale: Vec<f64>,
}

impl NormalizationStats {
    /// Identity scales (all 1.0).
    pub fn identity(embedding_size: usize) -> Self {
        Self {
            scale: vec![1.0; embedding_size],
        }
    }
}

/// Fits per-column max-abs scales over a stream of training matrices.
pub fn fit_normalization<'a, I>(matrices: I, embedding_size: usize) -> NormalizationStats
where
    I: IntoIterator<Item = &'a FeatureMatrix>,
{
    let mut max_abs = vec![0.0f64; embedding_size];
    for m in matrices {
        debug_assert_eq!(m.cols(), embedding_size);
        for r in 0..m.rows() {
            for (c, v) in m.row(r).iter().enumerate() {
                let a = v.abs();
                if a > max_abs[c] {
                    max_abs[c] = a;
                }
            }
        }
    }
    NormalizationStats {
        scale: max_abs.into_iter().map(|m| if m > 0.0 { m } else { 1.0 }).collect(),
    }
}

/// Divides each column by its fitted scale. Not idempotent: applying twice
/// rescales twice.
pub fn apply_normalization(m: &FeatureMatrix, stats: &NormalizationStats) -> Result<FeatureMatrix> {
    if stats.scale.len() != m.cols() {
        return Err(Error::Config(format!(
            "normalization stats length {} does not match embedding size {}",
            stats.scale.len(),
            m.cols()
        )));
    }
    let mut out = m.clone();
    for r in 0..out.rows {
        let base = r * out.cols;
        for c in 0..out.cols {
            out.data[base + c] /= stats.scale[c];
        }
    }
    Ok(out)
}

/// Featurizes and normalizes a batch of sequences in parallel. Output order
/// matches input order; each item is computed independently, so results do
/// not depend on the thread count.
pub fn extract_normalized_batch(
    seqs: &[&PrimitiveSequence],
    cfg: &FeatureConfig,
    tt: &TokenTable,
    stats: &NormalizationStats,
) -> Result<Vec<FeatureMatrix>> {
    use rayon::prelude::*;
    seqs.par_iter()
        .map(|seq| extract_features(seq, cfg, tt).and_then(|m| apply_normalization(&m, stats)))
        .collect()
}
