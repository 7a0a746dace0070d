//! Python bindings: load checkpoints, score groups, generate the synthetic
//! corpus, train and run the gradient check.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use tvqa_core::data::{
    load_checkpoint, load_dataset, make_synthetic_corpus, parse_record, save_checkpoint, SynthSpec, Tagging,
};
use tvqa_core::gradcheck::{gradcheck as run_gradcheck, GradcheckShape};
use tvqa_core::model::GroupInput;
use tvqa_core::session::{train as run_training, TrainingData};
use tvqa_core::text;
use tvqa_core::training::evaluate;
use tvqa_core::RunConfig;

create_exception!(tvqa, TvqaError, PyException);

fn py_err(e: tvqa_core::Error) -> PyErr {
    TvqaError::new_err(format!("{}: {e}", e.kind()))
}

fn tagging(lexicon: bool) -> Tagging {
    if lexicon {
        Tagging::Lexicon
    } else {
        Tagging::Given
    }
}

/// POS category (`CD`, `J`, `N`, `V`, `WP`, `WRB` or `O`) of a Penn Treebank tag.
#[pyfunction]
fn group_pos_tag(tag: &str) -> &'static str {
    text::group_pos_tag(tag).name()
}

/// Tags from the built-in demo lexicon.
#[pyfunction]
fn lexicon_tags(tokens: Vec<String>) -> Vec<String> {
    tvqa_core::tagger::tag_tokens(&tokens)
}

/// Image features read once and shared between calls.
#[pyclass(name = "Features", frozen)]
struct Features {
    store: tvqa_core::data::FeatureStore,
}

#[pymethods]
impl Features {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Features {
            store: tvqa_core::data::FeatureStore::load(path).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.store.len()
    }
}

#[pyclass(name = "Model", frozen)]
struct Model {
    inner: tvqa_core::Model,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Model {
            inner: load_checkpoint(path).map_err(py_err)?.model,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path, &self.inner, None).map_err(py_err)
    }

    #[getter]
    fn attention(&self) -> &'static str {
        self.inner.attention_mode().name()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.tokens().len()
    }

    /// Per-candidate probabilities for one JSON group record.
    #[pyo3(signature = (record, features, lexicon_tagger = false))]
    fn score(&self, record: &str, features: &Features, lexicon_tagger: bool) -> PyResult<Vec<f64>> {
        Ok(self.scores(record, features, lexicon_tagger)?.probs)
    }

    /// `(chosen index, probabilities)` for one JSON group record.
    #[pyo3(signature = (record, features, lexicon_tagger = false))]
    fn predict(&self, record: &str, features: &Features, lexicon_tagger: bool) -> PyResult<(usize, Vec<f64>)> {
        let s = self.scores(record, features, lexicon_tagger)?;
        Ok((s.choice, s.probs))
    }

    /// Accuracy over a dataset file.
    #[pyo3(signature = (data, features, jobs = 1))]
    fn evaluate(&self, py: Python<'_>, data: &str, features: &Features, jobs: usize) -> PyResult<f64> {
        let groups = load_dataset(data, &self.inner.vocab, Tagging::Given).map_err(py_err)?;
        let ev = py
            .detach(|| evaluate(&self.inner, &groups, &features.store, jobs.max(1)))
            .map_err(py_err)?;
        Ok(ev.accuracy())
    }
}

impl Model {
    fn scores(&self, record: &str, features: &Features, lexicon: bool) -> PyResult<tvqa_core::model::GroupScores> {
        let rec = parse_record(record, "<record>").map_err(py_err)?;
        let (question, answers) = rec.sentences(&self.inner.vocab, tagging(lexicon)).map_err(py_err)?;
        let grid = features.store.get(&rec.image_id).map_err(py_err)?;
        self.inner
            .score(&GroupInput {
                grid,
                question: &question,
                answers: &answers,
            })
            .map_err(py_err)
    }
}

/// Writes the planted corpus (train.jsonl, val.jsonl, features.fgrd,
/// embeddings.txt) into `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, groups = 400, train = 200, seed = 0))]
fn synth(out_dir: &str, groups: usize, train: usize, seed: u64) -> PyResult<()> {
    let spec = SynthSpec {
        groups,
        seed,
        ..SynthSpec::default()
    };
    make_synthetic_corpus(&spec)
        .and_then(|c| c.write(out_dir, train))
        .map_err(py_err)
}

/// Trains from a key=value config text and saves the best checkpoint to
/// `out`. Returns `(best_epoch, best_val_accuracy, log_lines)`.
#[pyfunction]
#[pyo3(signature = (config, out, jobs = 1))]
fn train(py: Python<'_>, config: &str, out: &str, jobs: usize) -> PyResult<(usize, f64, Vec<String>)> {
    let mut cfg = RunConfig::parse(config).map_err(py_err)?;
    cfg.apply_seed_env().map_err(py_err)?;
    let outcome = py
        .detach(|| {
            let data = TrainingData::load(&cfg)?;
            let mut log = Vec::new();
            let o = run_training(&cfg, &data, jobs.max(1), &mut log)?;
            save_checkpoint(out, &o.best, Some(&o.best_adam))?;
            Ok::<_, tvqa_core::Error>((o.best_epoch, o.best_val_acc, log))
        })
        .map_err(py_err)?;
    let lines = String::from_utf8_lossy(&outcome.2).lines().map(String::from).collect();
    Ok((outcome.0, outcome.1, lines))
}

/// `[(block, max_relative_error, passed)]` for a tiny model built from the
/// given config text (the synthetic preset when empty).
#[pyfunction]
#[pyo3(signature = (config = "", seed = 0))]
fn gradcheck(py: Python<'_>, config: &str, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let cfg = if config.trim().is_empty() {
        RunConfig::synthetic()
    } else {
        RunConfig::parse(config).map_err(py_err)?
    };
    let report = py
        .detach(|| run_gradcheck(&cfg, seed, GradcheckShape::default(), None))
        .map_err(py_err)?;
    Ok(report
        .blocks
        .into_iter()
        .map(|b| (b.name, b.max_rel_err, b.pass))
        .collect())
}

#[pymodule]
fn tvqa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TvqaError", m.py().get_type::<TvqaError>())?;
    m.add_class::<Features>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(group_pos_tag, m)?)?;
    m.add_function(wrap_pyfunction!(lexicon_tags, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
