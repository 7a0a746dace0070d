//! End-to-end helpers: gather inputs named by a config, build a fresh model,
//! and train it.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::dataset::vocab_from_records;
use crate::data::{load_embeddings, read_records, FeatureStore, GroupRecord, SynthCorpus, Tagging};
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::training::{fit, CandidateGroup, FitOutcome, Trainer};

/// Everything a training run reads.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub vocab: Vocabulary,
    /// Pretrained vectors aligned with `vocab`, including the unknown row.
    pub embedding: Option<Tensor>,
    pub train: Vec<CandidateGroup>,
    pub val: Vec<CandidateGroup>,
    pub features: FeatureStore,
}

fn to_groups(records: &[(usize, GroupRecord)], vocab: &Vocabulary, tagging: Tagging) -> Result<Vec<CandidateGroup>> {
    records
        .iter()
        .map(|(line, r)| {
            r.to_group(vocab, tagging, format!("line{line}"))
                .map_err(|e| Error::Parse {
                    path: "dataset".into(),
                    line: *line,
                    message: e.to_string(),
                })
        })
        .collect()
}

/// Trailing `fraction` of the groups (at least one) become the validation set.
fn split_tail<T>(mut items: Vec<T>, fraction: f64) -> (Vec<T>, Vec<T>) {
    let n_val = ((items.len() as f64 * fraction).round() as usize).clamp(1, items.len().saturating_sub(1).max(1));
    let val = items.split_off(items.len() - n_val.min(items.len()));
    (items, val)
}

impl TrainingData {
    /// Reads `data`, `val_data`, `features` and `embeddings` from `cfg`.
    /// Without `val_data` the last `val_fraction` of `data` is held out.
    /// Without embeddings the vocabulary is every training token.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let data = cfg
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("no training data given".into()))?;
        let feats = cfg
            .features
            .as_ref()
            .ok_or_else(|| Error::Config("no feature file given".into()))?;
        let records = read_records(data)?;
        let (train_recs, val_recs) = match &cfg.val_data {
            Some(v) => (records, read_records(v)?),
            None => split_tail(records, cfg.val_fraction),
        };
        let (vocab, embedding) = match &cfg.embeddings {
            Some(path) => {
                let table = load_embeddings(path, Some(cfg.d_word))?;
                (table.vocab, Some(table.vectors))
            }
            None => (vocab_from_records(train_recs.iter().map(|(_, r)| r)), None),
        };
        let with_path = |path: &str, e: Error| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_string(),
                line,
                message,
            },
            other => other,
        };
        let train = to_groups(&train_recs, &vocab, Tagging::Given).map_err(|e| with_path(data, e))?;
        let val_path = cfg.val_data.clone().unwrap_or_else(|| data.clone());
        let val = to_groups(&val_recs, &vocab, Tagging::Given).map_err(|e| with_path(&val_path, e))?;
        Ok(TrainingData {
            vocab,
            embedding,
            train,
            val,
            features: FeatureStore::load(feats)?,
        })
    }

    /// In-memory corpus; the first `n_train` groups train, the rest validate.
    pub fn from_synth(corpus: &SynthCorpus, n_train: usize) -> Result<Self> {
        let vocab = corpus.embeddings.vocab.clone();
        let groups = corpus
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| r.to_group(&vocab, Tagging::Given, format!("g{i}")))
            .collect::<Result<Vec<_>>>()?;
        let n_train = n_train.min(groups.len());
        let mut train = groups;
        let val = train.split_off(n_train);
        Ok(TrainingData {
            vocab,
            embedding: Some(corpus.embeddings.vectors.clone()),
            train,
            val,
            features: corpus.feature_store()?,
        })
    }

    pub fn raw_dim(&self) -> Result<usize> {
        self.features
            .grids()
            .first()
            .map(|g| g.raw_dim())
            .ok_or_else(|| Error::Config("feature file holds no grids".into()))
    }
}

/// Fresh model plus the generator that continues the seeded stream.
pub fn init_model(cfg: &RunConfig, data: &TrainingData) -> Result<(Model, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(
        cfg,
        data.vocab.rows(),
        data.raw_dim()?,
        data.embedding.as_ref(),
        &mut rng,
    )?;
    Ok((Model::new(cfg.clone(), data.vocab.clone(), params)?, rng))
}

/// Initializes from `cfg.seed` and trains; the outcome is a pure function of
/// `(cfg, data)`.
pub fn train(cfg: &RunConfig, data: &TrainingData, jobs: usize, log: &mut dyn Write) -> Result<FitOutcome> {
    let (model, mut rng) = init_model(cfg, data)?;
    let trainer = Trainer::new(model, rng.gen());
    fit(trainer, &data.train, &data.val, &data.features, jobs, log)
}
