//! Line-delimited JSON candidate groups.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tagger::tag_tokens;
use crate::text::{TaggedSentence, Vocabulary};
use crate::training::CandidateGroup;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    #[serde(default)]
    pub is_correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub image_id: String,
    pub question_tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_tags: Option<Vec<String>>,
    pub answers: Vec<AnswerRecord>,
}

/// Where POS tags come from when building sentences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tagging {
    /// Tags must be present in the record.
    Given,
    /// Missing tags are filled by the built-in lexicon tagger.
    Lexicon,
}

fn sentence(
    tokens: &[String],
    tags: Option<&Vec<String>>,
    tagging: Tagging,
    vocab: &Vocabulary,
) -> Result<TaggedSentence> {
    let tags = match (tags, tagging) {
        (Some(t), _) => t.clone(),
        (None, Tagging::Lexicon) => tag_tokens(tokens),
        (None, Tagging::Given) => return Err(Error::Contract("missing tags".into())),
    };
    TaggedSentence::new(tokens.to_vec(), &tags, vocab)
}

impl GroupRecord {
    pub fn positives(&self) -> Vec<usize> {
        (0..self.answers.len())
            .filter(|&i| self.answers[i].is_correct)
            .collect()
    }

    /// Question and answer sentences without checking the answer flags.
    pub fn sentences(&self, vocab: &Vocabulary, tagging: Tagging) -> Result<(TaggedSentence, Vec<TaggedSentence>)> {
        let q = sentence(&self.question_tokens, self.question_tags.as_ref(), tagging, vocab)
            .map_err(|e| Error::Contract(format!("question: {e}")))?;
        let answers = self
            .answers
            .iter()
            .enumerate()
            .map(|(i, a)| {
                sentence(&a.tokens, a.tags.as_ref(), tagging, vocab)
                    .map_err(|e| Error::Contract(format!("answer {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if answers.is_empty() {
            return Err(Error::Contract("no answers".into()));
        }
        Ok((q, answers))
    }

    /// A training/evaluation group: at least two answers, exactly one correct.
    pub fn to_group(&self, vocab: &Vocabulary, tagging: Tagging, fallback_id: String) -> Result<CandidateGroup> {
        let positive = match self.positives().as_slice() {
            [p] => *p,
            [] => return Err(Error::Contract("no answer is marked correct".into())),
            many => return Err(Error::Contract(format!("{} answers are marked correct", many.len()))),
        };
        let (question, answers) = self.sentences(vocab, tagging)?;
        CandidateGroup::new(
            self.id.clone().unwrap_or(fallback_id),
            self.image_id.clone(),
            question,
            answers,
            positive,
        )
    }

    pub fn tokens(&self) -> impl Iterator<Item = &String> {
        self.question_tokens
            .iter()
            .chain(self.answers.iter().flat_map(|a| a.tokens.iter()))
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// One record from a JSON string, e.g. a line read from standard input.
pub fn parse_record(text: &str, source: &str) -> Result<GroupRecord> {
    serde_json::from_str(text.trim()).map_err(|e| Error::Parse {
        path: source.to_string(),
        line: 1,
        message: e.to_string(),
    })
}

/// Records with their 1-based line numbers. Blank lines are skipped.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<(usize, GroupRecord)>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GroupRecord = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, records: &[GroupRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Loads every group, resolving tokens against `vocab` (unknown tokens map
/// to the shared unknown row). Groups without an `id` are named by line.
pub fn load_dataset(path: impl AsRef<Path>, vocab: &Vocabulary, tagging: Tagging) -> Result<Vec<CandidateGroup>> {
    let path = path.as_ref();
    read_records(path)?
        .into_iter()
        .map(|(line, rec)| {
            rec.to_group(vocab, tagging, format!("line{line}"))
                .map_err(|e| parse_err(path, line, e.to_string()))
        })
        .collect()
}

/// Every distinct token in first-seen order.
pub fn vocab_from_records<'a>(records: impl IntoIterator<Item = &'a GroupRecord>) -> Vocabulary {
    let mut v = Vocabulary::new();
    for r in records {
        for t in r.tokens() {
            v.insert(t.clone());
        }
    }
    v
}
