//! Word-level encoding: POS-category attention, convolutional n-grams and the
//! averaged sentence vector.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The seven coarse groups the Penn Treebank tag set is folded into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PosCategory {
    CD,
    J,
    N,
    V,
    WP,
    WRB,
    O,
}

impl PosCategory {
    pub const ALL: [PosCategory; 7] = [
        PosCategory::CD,
        PosCategory::J,
        PosCategory::N,
        PosCategory::V,
        PosCategory::WP,
        PosCategory::WRB,
        PosCategory::O,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PosCategory::CD => "CD",
            PosCategory::J => "J",
            PosCategory::N => "N",
            PosCategory::V => "V",
            PosCategory::WP => "WP",
            PosCategory::WRB => "WRB",
            PosCategory::O => "O",
        }
    }
}

impl fmt::Display for PosCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Folds a Penn Treebank tag into its category. Unlisted tags are `O`.
pub fn group_pos_tag(tag: &str) -> PosCategory {
    match tag {
        "CD" => PosCategory::CD,
        "JJ" | "JJR" | "JJS" => PosCategory::J,
        "NN" | "NNS" | "NNP" | "NNPS" => PosCategory::N,
        "VB" | "VBD" | "VBG" | "VBN" | "VBP" | "VBZ" => PosCategory::V,
        "WP" | "WP$" => PosCategory::WP,
        "WRB" => PosCategory::WRB,
        _ => PosCategory::O,
    }
}

/// Token-to-row mapping for an embedding table. The last row is the shared
/// unknown-word row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary::default()
    }

    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary::new();
        for t in tokens {
            let t = t.into();
            if !v.insert(t.clone()) {
                return Err(Error::Lookup(format!("duplicate token '{t}'")));
            }
        }
        Ok(v)
    }

    /// Adds a token; returns false if it was already present.
    pub fn insert(&mut self, token: String) -> bool {
        if self.index.contains_key(&token) {
            return false;
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        true
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk_id())
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn unk_id(&self) -> usize {
        self.tokens.len()
    }

    /// Rows in the embedding table, including the unknown-word row.
    pub fn rows(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Embedding vectors together with the vocabulary that indexes them.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocabulary,
    pub vectors: Tensor,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub vocab_ids: Vec<usize>,
    pub pos_cats: Vec<PosCategory>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, tags: &[String], vocab: &Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Contract("sentence has no tokens".into()));
        }
        if tokens.len() != tags.len() {
            return Err(Error::Contract(format!(
                "{} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        Ok(TaggedSentence {
            vocab_ids: tokens.iter().map(|t| vocab.id(t)).collect(),
            pos_cats: tags.iter().map(|t| group_pos_tag(t)).collect(),
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn category_ids(&self) -> Vec<usize> {
        self.pos_cats.iter().map(|c| c.index()).collect()
    }
}

/// Looks up each word's embedding and scales it by its category weight.
/// `pos_weights` is `None` when the word-level attention is switched off.
pub fn apply_pos_attention(tape: &Tape, sent: &TaggedSentence, table: Var, pos_weights: Option<Var>) -> Result<Var> {
    if sent.is_empty() {
        return Err(Error::Contract("sentence has no tokens".into()));
    }
    let rows = tape.index_select(table, &sent.vocab_ids)?;
    match pos_weights {
        Some(w) => {
            let per_word = tape.index_select(w, &sent.category_ids())?;
            tape.scale_rows(rows, per_word)
        }
        None => Ok(rows),
    }
}

/// Window sizes `1..=filters.len()`: each filter bank is convolved, passed
/// through tanh, and the results are max-pooled elementwise across windows.
pub fn conv_ngram_encode(tape: &Tape, x_hat: Var, filters: &[(Var, Var)]) -> Result<Var> {
    let activated = filters
        .iter()
        .map(|&(f, b)| tape.tanh(tape.conv1d_same(x_hat, f, b)?))
        .collect::<Result<Vec<_>>>()?;
    tape.elem_max(&activated)
}

pub fn sentence_embed(tape: &Tape, e_tilde: Var) -> Result<Var> {
    tape.mean(e_tilde, 0)
}
