//! Planted synthetic corpus.
//!
//! Every image has one dominant region carrying a strong copy of a concept
//! direction; other regions carry weaker copies of other, distinct concepts
//! or noise.
//! The correct answer names the dominant concept, the wrong answers name
//! other concepts (preferring those that appear weakly in the image).
//! Concept directions are `+-b_i` for a random orthonormal basis `b`, and
//! each concept token's embedding starts with its direction.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::data::dataset::{AnswerRecord, GroupRecord};
use crate::data::FeatureStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{EmbeddingTable, Vocabulary};
use crate::vision::FeatureGrid;

const CONCEPTS: [&str; 12] = [
    "cat", "dog", "car", "tree", "boat", "kite", "horse", "clock", "bird", "train", "cup", "chair",
];

const QUESTION_WORDS: [(&str, &str); 20] = [
    ("what", "WP"),
    ("is", "VBZ"),
    ("shown", "VBN"),
    ("in", "IN"),
    ("the", "DT"),
    ("image", "NN"),
    ("picture", "NN"),
    ("which", "WDT"),
    ("object", "NN"),
    ("can", "MD"),
    ("you", "PRP"),
    ("see", "VB"),
    ("here", "RB"),
    ("main", "JJ"),
    ("thing", "NN"),
    ("there", "EX"),
    ("visible", "JJ"),
    ("most", "RBS"),
    ("prominent", "JJ"),
    ("where", "WRB"),
];

const FILLERS: [(&str, &str); 26] = [
    ("a", "DT"),
    ("it", "PRP"),
    ("one", "CD"),
    ("big", "JJ"),
    ("small", "JJ"),
    ("some", "DT"),
    ("looks", "VBZ"),
    ("like", "IN"),
    ("probably", "RB"),
    ("maybe", "RB"),
    ("red", "JJ"),
    ("blue", "JJ"),
    ("green", "JJ"),
    ("white", "JJ"),
    ("black", "JJ"),
    ("two", "CD"),
    ("near", "IN"),
    ("on", "IN"),
    ("of", "IN"),
    ("an", "DT"),
    ("that", "DT"),
    ("this", "DT"),
    ("just", "RB"),
    ("very", "RB"),
    ("old", "JJ"),
    ("new", "JJ"),
];

const TEMPLATES: [&[&str]; 7] = [
    &["what", "is", "shown", "in", "the", "image"],
    &["what", "is", "the", "main", "object"],
    &["which", "thing", "can", "you", "see", "here"],
    &["what", "is", "in", "the", "picture"],
    &["what", "is", "most", "prominent", "here"],
    &["where", "is", "the", "main", "thing"],
    &["what", "object", "is", "visible", "there"],
];

/// Corpus shape and signal strengths.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub groups: usize,
    pub answers: usize,
    pub vocab_size: usize,
    pub d_word: usize,
    pub grid_hw: (usize, usize),
    pub raw_dim: usize,
    pub concepts: usize,
    pub dominant: f64,
    pub distractor: f64,
    pub noise: f64,
    /// Half-width of the uniform noise added to concept embeddings.
    pub embedding_jitter: f64,
    /// Required lead of the dominant (region, concept) score over any pair
    /// naming a different concept.
    pub min_gap: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            groups: 200,
            answers: 4,
            vocab_size: 50,
            d_word: 8,
            grid_hw: (2, 2),
            raw_dim: 6,
            concepts: 8,
            dominant: 2.0,
            distractor: 1.0,
            noise: 0.3,
            embedding_jitter: 0.1,
            min_gap: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.answers < 2 {
            return fail("synthetic groups need at least 2 answers".into());
        }
        if self.concepts < self.answers || self.concepts > CONCEPTS.len() {
            return fail(format!("concepts must lie in {}..={}", self.answers, CONCEPTS.len()));
        }
        if self.concepts > 2 * self.raw_dim {
            return fail(format!(
                "{} concepts need raw_dim >= {}",
                self.concepts,
                self.concepts.div_ceil(2)
            ));
        }
        let min_vocab = self.concepts + QUESTION_WORDS.len() + 4;
        if self.vocab_size < min_vocab {
            return fail(format!("vocab_size must be at least {min_vocab}"));
        }
        if self.grid_hw.0 * self.grid_hw.1 == 0 || self.d_word == 0 {
            return fail("grid and embedding sizes must be positive".into());
        }
        if !(self.dominant > 0.0 && self.noise >= 0.0 && self.min_gap >= 0.0 && self.embedding_jitter >= 0.0) {
            return fail("signal strengths must be positive".into());
        }
        Ok(())
    }
}

/// Concept tokens and their feature directions.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedRule {
    pub concepts: Vec<(String, Vec<f64>)>,
}

impl PlantedRule {
    /// Highest `<region, direction>` over all regions and concepts, as
    /// `(region, concept, score)`, and the best score among other concepts.
    pub fn dominant(&self, grid: &FeatureGrid) -> ((usize, usize, f64), f64) {
        let mut scores = Vec::new();
        for k in 0..grid.num_regions() {
            let row = grid.regions.row(k);
            for (c, (_, u)) in self.concepts.iter().enumerate() {
                let s: f64 = row.iter().zip(u).map(|(a, b)| a * b).sum();
                scores.push((k, c, s));
            }
        }
        let best = scores
            .iter()
            .copied()
            .fold(None, |acc: Option<(usize, usize, f64)>, x| match acc {
                Some(a) if a.2 >= x.2 => Some(a),
                _ => Some(x),
            })
            .expect("at least one region and concept");
        let runner_up = scores
            .iter()
            .filter(|s| s.1 != best.1)
            .map(|s| s.2)
            .fold(f64::NEG_INFINITY, f64::max);
        (best, runner_up)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<GroupRecord>,
    pub grids: Vec<FeatureGrid>,
    pub embeddings: EmbeddingTable,
    pub rule: PlantedRule,
}

fn orthonormal_basis(rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn tagged(words: &[&str], tags: &HashMap<&str, &str>) -> (Vec<String>, Vec<String>) {
    (
        words.iter().map(|w| w.to_string()).collect(),
        words
            .iter()
            .map(|w| tags.get(w).copied().unwrap_or("NN").to_string())
            .collect(),
    )
}

/// Generates a corpus; identical specs give identical corpora.
pub fn make_synthetic_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut tag_of: HashMap<&str, &str> = HashMap::new();
    let mut tokens: Vec<String> = Vec::with_capacity(spec.vocab_size);
    for c in &CONCEPTS[..spec.concepts] {
        tokens.push(c.to_string());
        tag_of.insert(c, "NN");
    }
    for (w, t) in QUESTION_WORDS {
        tokens.push(w.to_string());
        tag_of.insert(w, t);
    }
    let mut fillers: Vec<String> = Vec::new();
    for (w, t) in FILLERS.iter().take(spec.vocab_size - tokens.len()) {
        fillers.push(w.to_string());
        tag_of.insert(w, t);
    }
    tokens.extend(fillers.iter().cloned());
    for i in tokens.len()..spec.vocab_size {
        let w = format!("word{i}");
        fillers.push(w.clone());
        tokens.push(w);
    }
    let vocab = Vocabulary::from_tokens(tokens)?;

    let basis = orthonormal_basis(&mut rng, spec.raw_dim);
    let rule = PlantedRule {
        concepts: (0..spec.concepts)
            .map(|c| {
                let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                (CONCEPTS[c].to_string(), basis[c / 2].iter().map(|x| sign * x).collect())
            })
            .collect(),
    };

    // Concept rows start with their feature direction; everything else,
    // and the concept rows' remaining slack, is uniform noise.
    let emb_dist = Uniform::new_inclusive(-0.5, 0.5);
    let jitter = Uniform::new_inclusive(-spec.embedding_jitter, spec.embedding_jitter);
    let mut vectors = Tensor::zeros(&[vocab.rows(), spec.d_word]);
    for row in 0..vocab.unk_id() {
        let out = &mut vectors.data_mut()[row * spec.d_word..(row + 1) * spec.d_word];
        match rule.concepts.get(row) {
            Some((_, u)) => {
                for (j, v) in out.iter_mut().enumerate() {
                    *v = u.get(j).copied().unwrap_or(0.0) + jitter.sample(&mut rng);
                }
            }
            None => out.iter_mut().for_each(|v| *v = emb_dist.sample(&mut rng)),
        }
    }

    let k = spec.grid_hw.0 * spec.grid_hw.1;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut records = Vec::with_capacity(spec.groups);
    let mut grids = Vec::with_capacity(spec.groups);
    for g in 0..spec.groups {
        let image_id = format!("synth{g:05}");
        let (grid, c_star, present) = loop {
            let c_star = rng.gen_range(0..spec.concepts);
            let r_star = rng.gen_range(0..k);
            let mut data = vec![0.0; k * spec.raw_dim];
            // Distractors name distinct concepts, never c* or its opposite.
            let mut pool: Vec<usize> = (0..spec.concepts).filter(|&c| c / 2 != c_star / 2).collect();
            pool.shuffle(&mut rng);
            let mut present = Vec::new();
            for r in 0..k {
                let row = &mut data[r * spec.raw_dim..(r + 1) * spec.raw_dim];
                let planted = if r == r_star {
                    Some((c_star, spec.dominant))
                } else if rng.gen_bool(0.5) {
                    pool.pop().map(|c| {
                        present.push(c);
                        (c, spec.distractor)
                    })
                } else {
                    None
                };
                if let Some((c, s)) = planted {
                    row.iter_mut().zip(&rule.concepts[c].1).for_each(|(x, u)| *x += s * u);
                }
                row.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
            }
            let grid = FeatureGrid::new(
                image_id.clone(),
                Tensor::new(vec![k, spec.raw_dim], data)?,
                spec.grid_hw,
            )?;
            let ((_, best_c, best), runner_up) = rule.dominant(&grid);
            if best_c == c_star && best - runner_up >= spec.min_gap {
                break (grid, c_star, present);
            }
        };

        let mut wrong: Vec<usize> = present;
        wrong.shuffle(&mut rng);
        wrong.truncate(spec.answers - 1);
        let mut rest: Vec<usize> = (0..spec.concepts)
            .filter(|c| *c != c_star && !wrong.contains(c))
            .collect();
        rest.shuffle(&mut rng);
        wrong.extend(rest.into_iter().take(spec.answers - 1 - wrong.len()));

        let positive = rng.gen_range(0..spec.answers);
        let mut concepts_in_order = wrong;
        concepts_in_order.insert(positive, c_star);
        let answers = concepts_in_order
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut words: Vec<&str> = Vec::new();
                for _ in 0..rng.gen_range(0..=2) {
                    words.push(fillers.choose(&mut rng).expect("fillers"));
                }
                words.push(CONCEPTS[c]);
                if rng.gen_bool(0.3) {
                    words.push(fillers.choose(&mut rng).expect("fillers"));
                }
                let (tokens, tags) = tagged(&words, &tag_of);
                AnswerRecord {
                    tokens,
                    tags: Some(tags),
                    is_correct: i == positive,
                }
            })
            .collect();
        let (question_tokens, question_tags) = tagged(TEMPLATES.choose(&mut rng).expect("templates"), &tag_of);
        records.push(GroupRecord {
            id: Some(format!("g{g:05}")),
            image_id,
            question_tokens,
            question_tags: Some(question_tags),
            answers,
        });
        grids.push(grid);
    }

    Ok(SynthCorpus {
        records,
        grids,
        embeddings: EmbeddingTable { vocab, vectors },
        rule,
    })
}

/// Recomputes the dominant concept of every image from its features alone
/// and checks that exactly the correct answer names it.
pub fn verify_planted_rule(records: &[GroupRecord], features: &FeatureStore, rule: &PlantedRule) -> Result<()> {
    for r in records {
        let id = r.id.clone().unwrap_or_else(|| r.image_id.clone());
        let grid = features.get(&r.image_id)?;
        let ((_, c, _), _) = rule.dominant(grid);
        let token = &rule.concepts[c].0;
        for (i, a) in r.answers.iter().enumerate() {
            let names = a.tokens.iter().any(|t| t == token);
            if names != a.is_correct {
                return Err(Error::Contract(format!(
                    "group {id}: answer {i} {} the dominant concept '{token}' but is_correct = {}",
                    if names { "names" } else { "does not name" },
                    a.is_correct
                )));
            }
        }
    }
    Ok(())
}

impl SynthCorpus {
    /// Writes `train.jsonl` (first `n_train` groups), `val.jsonl` (the rest),
    /// `features.fgrd` and `embeddings.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, n_train: usize) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n_train = n_train.min(self.records.len());
        crate::data::write_records(dir.join("train.jsonl"), &self.records[..n_train])?;
        crate::data::write_records(dir.join("val.jsonl"), &self.records[n_train..])?;
        crate::data::write_feature_file(dir.join("features.fgrd"), &self.grids)?;
        crate::data::save_embeddings(dir.join("embeddings.txt"), &self.embeddings)
    }

    pub fn feature_store(&self) -> Result<FeatureStore> {
        FeatureStore::from_grids(self.grids.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            groups: 60,
            seed: 11,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        assert_eq!(
            make_synthetic_corpus(&small()).unwrap(),
            make_synthetic_corpus(&small()).unwrap()
        );
        let other = make_synthetic_corpus(&SynthSpec { seed: 12, ..small() }).unwrap();
        assert_ne!(make_synthetic_corpus(&small()).unwrap().records, other.records);
    }

    #[test]
    fn planted_rule_holds_everywhere() {
        let c = make_synthetic_corpus(&small()).unwrap();
        verify_planted_rule(&c.records, &c.feature_store().unwrap(), &c.rule).unwrap();
        assert_eq!(c.embeddings.vocab.tokens().len(), 50);
        for r in &c.records {
            assert_eq!(r.answers.len(), 4);
            assert_eq!(r.positives().len(), 1);
        }
    }

    #[test]
    fn checker_catches_a_flipped_label() {
        let mut c = make_synthetic_corpus(&small()).unwrap();
        let p = c.records[5].positives()[0];
        c.records[5].answers[p].is_correct = false;
        c.records[5].answers[(p + 1) % 4].is_correct = true;
        let err = verify_planted_rule(&c.records, &c.feature_store().unwrap(), &c.rule).unwrap_err();
        assert!(err.to_string().contains("g00005"), "{err}");
    }

    #[test]
    fn positive_position_is_spread() {
        let c = make_synthetic_corpus(&SynthSpec { groups: 400, ..small() }).unwrap();
        let mut counts = [0usize; 4];
        for r in &c.records {
            counts[r.positives()[0]] += 1;
        }
        assert!(counts.iter().all(|&n| n > 60), "{counts:?}");
    }

    #[test]
    fn concepts_are_orthogonal_or_opposite() {
        let c = make_synthetic_corpus(&small()).unwrap();
        for (i, (_, u)) in c.rule.concepts.iter().enumerate() {
            for (j, (_, v)) in c.rule.concepts.iter().enumerate() {
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                let want = if i == j {
                    1.0
                } else if i / 2 == j / 2 {
                    -1.0
                } else {
                    0.0
                };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(make_synthetic_corpus(&SynthSpec { concepts: 3, ..small() }).is_err());
        assert!(make_synthetic_corpus(&SynthSpec {
            vocab_size: 20,
            ..small()
        })
        .is_err());
        assert!(make_synthetic_corpus(&SynthSpec { raw_dim: 3, ..small() }).is_err());
    }
}
