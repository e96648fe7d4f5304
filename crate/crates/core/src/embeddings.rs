//! Pre-trained symbol embeddings and the mapping from symbol sequences to
//! real-valued multivariate series.
//!
//! Embedding files use the GloVe text convention: one token per line
//! followed by its `p` whitespace-separated components.

use std::collections::HashMap;
use std::io::BufRead;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("I/O error while reading embeddings: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: cannot parse {value:?} as a number")]
    Parse { line: usize, value: String },
    #[error("line {line}: token {token:?} has no vector components")]
    MissingVector { line: usize, token: String },
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: non-finite vector component")]
    NonFinite { line: usize },
    #[error("embedding table is empty")]
    EmptyTable,
    #[error("table has {rows} rows but {tokens} tokens")]
    TokenCount { rows: usize, tokens: usize },
    #[error("symbol id {id} is outside the vocabulary of size {vocab_size}")]
    IdOutOfRange { id: usize, vocab_size: usize },
    #[error("symbol sequence is empty")]
    EmptySequence,
    #[error("no in-vocabulary tokens remain after skipping OOV tokens")]
    EmptySeries,
    #[error("series has non-finite values")]
    NonFiniteSeries,
    #[error("series length {length} exceeds the pad length {pad_length}; chunk the input first")]
    LengthExceeded { length: usize, pad_length: usize },
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no series to concatenate")]
    NothingToConcat,
}

/// Immutable table of symbol embeddings with its cached row mean.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
    mean: Array1<f64>,
}

impl EmbeddingTable {
    /// Reads a GloVe-style text table. Blank lines are ignored and the first
    /// occurrence of a duplicated token wins.
    pub fn load<R: BufRead>(reader: R) -> Result<Self, EmbeddingError> {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        let mut data = Vec::new();
        let mut dim = None;

        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = lineno + 1;
            let mut fields = line.split_whitespace();
            let token = match fields.next() {
                Some(t) => t,
                None => continue,
            };

            let mut row = Vec::new();
            for field in fields {
                let v = f64::from_str(field).map_err(|_| EmbeddingError::Parse {
                    line: lineno,
                    value: field.to_owned(),
                })?;
                if !v.is_finite() {
                    return Err(EmbeddingError::NonFinite { line: lineno });
                }
                row.push(v);
            }
            if row.is_empty() {
                return Err(EmbeddingError::MissingVector {
                    line: lineno,
                    token: token.to_owned(),
                });
            }
            match dim {
                None => dim = Some(row.len()),
                Some(p) if p != row.len() => {
                    return Err(EmbeddingError::DimensionMismatch {
                        line: lineno,
                        expected: p,
                        found: row.len(),
                    })
                }
                Some(_) => {}
            }

            if index.contains_key(token) {
                continue;
            }
            index.insert(token.to_owned(), tokens.len());
            tokens.push(token.to_owned());
            data.extend(row);
        }

        let dim = dim.ok_or(EmbeddingError::EmptyTable)?;
        let vectors = Array2::from_shape_vec((tokens.len(), dim), data)
            .expect("row lengths were checked while parsing");
        Ok(Self::assemble(tokens, index, vectors))
    }

    /// Builds a table from explicit tokens and a `V × p` matrix.
    pub fn from_rows(tokens: Vec<String>, vectors: Array2<f64>) -> Result<Self, EmbeddingError> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(EmbeddingError::EmptyTable);
        }
        if tokens.len() != vectors.nrows() {
            return Err(EmbeddingError::TokenCount {
                rows: vectors.nrows(),
                tokens: tokens.len(),
            });
        }
        if let Some(row) = vectors
            .outer_iter()
            .position(|r| r.iter().any(|v| !v.is_finite()))
        {
            return Err(EmbeddingError::NonFinite { line: row + 1 });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            index.entry(t.clone()).or_insert(i);
        }
        Ok(Self::assemble(tokens, index, vectors))
    }

    /// Builds a table whose tokens are `s0 … s{V-1}`.
    pub fn from_matrix(vectors: Array2<f64>) -> Result<Self, EmbeddingError> {
        let tokens = (0..vectors.nrows()).map(|i| format!("s{i}")).collect();
        Self::from_rows(tokens, vectors)
    }

    fn assemble(tokens: Vec<String>, index: HashMap<String, usize>, vectors: Array2<f64>) -> Self {
        let mean = vectors
            .mean_axis(Axis(0))
            .expect("table has at least one row");
        EmbeddingTable {
            tokens,
            index,
            vectors,
            mean,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn mean_vector(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }

    pub fn row(&self, id: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(id)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Maps raw tokens to ids, marking unknown tokens as OOV.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<SymbolSequence, EmbeddingError> {
        SymbolSequence::new(tokens.iter().map(|t| self.id(t.as_ref())).collect())
    }

    /// Writes the table in the same text format `load` reads.
    pub fn write_text<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for (token, row) in self.tokens.iter().zip(self.vectors.outer_iter()) {
            write!(out, "{token}")?;
            for v in row {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Non-empty sequence of symbols; `None` marks an out-of-vocabulary token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolSequence(Vec<Option<usize>>);

impl SymbolSequence {
    pub fn new(ids: Vec<Option<usize>>) -> Result<Self, EmbeddingError> {
        if ids.is_empty() {
            return Err(EmbeddingError::EmptySequence);
        }
        Ok(SymbolSequence(ids))
    }

    pub fn from_ids(ids: Vec<usize>) -> Result<Self, EmbeddingError> {
        Self::new(ids.into_iter().map(Some).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[Option<usize>] {
        &self.0
    }

    /// Returns the ids if every token is in-vocabulary.
    pub fn known_ids(&self) -> Option<Vec<usize>> {
        self.0.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OovPolicy {
    Skip,
    #[default]
    Zero,
    Mean,
}

impl FromStr for OovPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "skip" => Ok(OovPolicy::Skip),
            "zero" => Ok(OovPolicy::Zero),
            "mean" => Ok(OovPolicy::Mean),
            other => Err(format!(
                "unknown OOV policy {other:?} (expected skip, zero or mean)"
            )),
        }
    }
}

/// A `T × p` real-valued series, one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSeries {
    values: Array2<f64>,
}

impl EmbeddedSeries {
    pub fn new(values: Array2<f64>) -> Result<Self, EmbeddingError> {
        if values.nrows() == 0 {
            return Err(EmbeddingError::EmptySeries);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFiniteSeries);
        }
        Ok(EmbeddedSeries { values })
    }

    /// Single-dimension series from a real vector.
    pub fn from_column(values: &[f64]) -> Result<Self, EmbeddingError> {
        Self::new(Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape"))
    }

    pub fn length(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// Replaces each symbol by its embedding row, applying `policy` to OOV tokens.
pub fn lookup_sequence(
    table: &EmbeddingTable,
    seq: &SymbolSequence,
    policy: OovPolicy,
) -> Result<EmbeddedSeries, EmbeddingError> {
    let p = table.dim();
    let mut data = Vec::with_capacity(seq.len() * p);
    let mut rows = 0;
    for id in seq.ids() {
        match (*id, policy) {
            (Some(id), _) => {
                if id >= table.vocab_size() {
                    return Err(EmbeddingError::IdOutOfRange {
                        id,
                        vocab_size: table.vocab_size(),
                    });
                }
                data.extend(table.row(id).iter());
            }
            (None, OovPolicy::Skip) => continue,
            (None, OovPolicy::Zero) => data.extend(std::iter::repeat_n(0.0, p)),
            (None, OovPolicy::Mean) => data.extend(table.mean_vector().iter()),
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(EmbeddingError::EmptySeries);
    }
    EmbeddedSeries::new(Array2::from_shape_vec((rows, p), data).expect("row count tracked"))
}

/// Left-pads with zero rows up to exactly `pad_length` rows.
pub fn pad_to_length(
    series: &EmbeddedSeries,
    pad_length: usize,
) -> Result<EmbeddedSeries, EmbeddingError> {
    let t = series.length();
    if t > pad_length {
        return Err(EmbeddingError::LengthExceeded {
            length: t,
            pad_length,
        });
    }
    let mut out = Array2::zeros((pad_length, series.dim()));
    out.slice_mut(s![pad_length - t.., ..])
        .assign(&series.values);
    Ok(EmbeddedSeries { values: out })
}

/// Splits a token stream into consecutive chunks of exactly `chunk_len`
/// tokens. A trailing partial chunk is dropped.
///
/// Panics if `chunk_len` is zero.
pub fn chunk_corpus<T, I>(tokens: I, chunk_len: usize) -> Vec<Vec<T>>
where
    I: IntoIterator<Item = T>,
{
    assert!(chunk_len >= 1, "chunk length must be positive");
    let mut chunks = Vec::new();
    let mut current = Vec::with_capacity(chunk_len);
    for token in tokens {
        current.push(token);
        if current.len() == chunk_len {
            chunks.push(std::mem::replace(
                &mut current,
                Vec::with_capacity(chunk_len),
            ));
        }
    }
    chunks
}

/// Concatenates feature blocks column-wise, in argument order.
pub fn concat_features(series: &[EmbeddedSeries]) -> Result<EmbeddedSeries, EmbeddingError> {
    let first = series.first().ok_or(EmbeddingError::NothingToConcat)?;
    if let Some(bad) = series.iter().find(|s| s.length() != first.length()) {
        return Err(EmbeddingError::LengthMismatch(first.length(), bad.length()));
    }
    let views: Vec<_> = series.iter().map(|s| s.values.view()).collect();
    let values = concatenate(Axis(1), &views).expect("lengths checked");
    Ok(EmbeddedSeries { values })
}
