//! Pretrained word vectors in the whitespace text format: one token per
//! line followed by its components.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{EmbeddingTable, Vocabulary};

/// Reads a vector file and appends a zero row for unknown words. With
/// `expected_dim = None` the width is taken from the first line.
pub fn load_embeddings(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vocab = Vocabulary::new();
    let mut data = Vec::new();
    let mut dim = expected_dim;
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let bad = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| bad(format!("token '{token}': cannot parse '{f}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let d = *dim.get_or_insert(values.len());
        if values.len() != d || d == 0 {
            return Err(bad(format!(
                "token '{token}' has {} components, expected {d}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("token '{token}' has a non-finite component")));
        }
        if !vocab.insert(token.to_string()) {
            return Err(bad(format!("duplicate token '{token}'")));
        }
        data.extend(values);
    }
    let d = dim.ok_or_else(|| Error::Format(format!("{}: no vectors and no dimension given", path.display())))?;
    data.extend(std::iter::repeat_n(0.0, d));
    Ok(EmbeddingTable {
        vectors: Tensor::new(vec![vocab.rows(), d], data)?,
        vocab,
    })
}

/// Writes every row except the unknown-word row.
pub fn save_embeddings(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (i, token) in table.vocab.tokens().iter().enumerate() {
        out.push_str(token);
        for v in table.vectors.row(i) {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
