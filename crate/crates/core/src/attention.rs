//! Question- and answer-driven spatial attention over image regions.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Which sentences drive the region attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Uniform weights: the image vector is the mean region.
    None,
    /// `norm(att_q)`.
    Question,
    /// `norm(att_a)`; the balance coefficient is held at zero.
    Answer,
    /// `norm(lambda1 * att_q + att_a)`.
    Triplet,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::None,
        AttentionMode::Question,
        AttentionMode::Answer,
        AttentionMode::Triplet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::Question => "question",
            AttentionMode::Answer => "answer",
            AttentionMode::Triplet => "triplet",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionMode::None),
            "question" | "q" => Ok(AttentionMode::Question),
            "answer" | "a" => Ok(AttentionMode::Answer),
            "triplet" | "qa" => Ok(AttentionMode::Triplet),
            other => Err(Error::Config(format!("unknown attention mode '{other}'"))),
        }
    }
}

/// Nodes produced by one attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub att_q: Option<Var>,
    pub att_a: Option<Var>,
    pub att_combined: Var,
    pub x_img: Var,
}

/// Word-by-region scores `words . regions^T`, softmax-normalized over words
/// independently for each region column.
pub fn affinity_matrix(tape: &Tape, words: Var, regions: Var) -> Result<Var> {
    let (wd, rd) = (tape.shape(words), tape.shape(regions));
    if wd.len() != 2 || rd.len() != 2 || wd[1] != rd[1] {
        return Err(Error::Shape(format!(
            "affinity needs [M, d] words and [K, d] regions, got {wd:?} and {rd:?}"
        )));
    }
    let scores = tape.matmul(words, tape.transpose(regions)?)?;
    tape.softmax(scores, 0)
}

/// Best-matching word weight for each region.
pub fn attention_from_affinity(tape: &Tape, affinity: Var) -> Result<Var> {
    tape.maxpool(affinity, 0)
}

/// `norm(lambda1 * att_q + att_a)` with `norm(x) = x / sum(x)`.
pub fn combine_attentions(tape: &Tape, att_q: Var, att_a: Var, lambda1: Var) -> Result<Var> {
    let weighted = tape.scale_by(att_q, lambda1)?;
    tape.normalize_sum(tape.add(weighted, att_a)?)
}

/// Attention-weighted sum of region rows.
pub fn attend_image(tape: &Tape, regions: Var, att: Var) -> Result<Var> {
    tape.matmul(att, regions)
}

/// Full attention step for one (question, answer) pair. `q_words` and
/// `a_words` are word matrices already in region space.
pub fn triplet_attention(
    tape: &Tape,
    mode: AttentionMode,
    q_words: Var,
    a_words: Var,
    regions: Var,
    lambda1: Var,
) -> Result<AttentionOutput> {
    let k = tape.shape(regions)[0];
    let from = |words: Var| -> Result<Var> {
        let aff = affinity_matrix(tape, words, regions)?;
        attention_from_affinity(tape, aff)
    };
    let (att_q, att_a, combined) = match mode {
        AttentionMode::None => {
            let uniform = tape.constant(crate::tensor::Tensor::filled(&[k], 1.0 / k as f64));
            (None, None, uniform)
        }
        AttentionMode::Question => {
            let q = from(q_words)?;
            (Some(q), None, tape.normalize_sum(q)?)
        }
        AttentionMode::Answer => {
            let a = from(a_words)?;
            (None, Some(a), tape.normalize_sum(a)?)
        }
        AttentionMode::Triplet => {
            let q = from(q_words)?;
            let a = from(a_words)?;
            (Some(q), Some(a), combine_attentions(tape, q, a, lambda1)?)
        }
    };
    Ok(AttentionOutput {
        att_q,
        att_a,
        att_combined: combined,
        x_img: attend_image(tape, regions, combined)?,
    })
}
