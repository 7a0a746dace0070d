//! Finite-difference check of the analytic gradients of the training loss.
//!
//! A tiny model scores a fixed random batch in training mode (batch norm
//! over every candidate of every group) and the total loss is differentiated
//! twice: once by the tape, once by central differences on every scalar of
//! every parameter block.

use rand::distributions::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::BnMode;
use crate::model::{GroupInput, ModelParams};
use crate::tape::{OpTag, Tape};
use crate::tensor::Tensor;
use crate::text::{TaggedSentence, Vocabulary};
use crate::training::objective;
use crate::vision::FeatureGrid;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so that gradients which are
/// zero on both sides compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-6;
/// Draws closer than this to a max or relu switch are rejected, since a
/// central difference straddling the switch measures neither side.
pub const MIN_KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 1000;

const TAGS: [&str; 9] = ["NN", "NNS", "VBZ", "JJ", "CD", "WP", "WRB", "DT", "IN"];

/// Sizes of the checked problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradcheckShape {
    pub groups: usize,
    pub answers: usize,
    pub regions: (usize, usize),
    pub width: usize,
    pub raw_dim: usize,
    pub vocab: usize,
}

impl Default for GradcheckShape {
    fn default() -> Self {
        GradcheckShape {
            groups: 4,
            answers: 4,
            regions: (2, 2),
            width: 8,
            raw_dim: 6,
            vocab: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub loss: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.pass)
    }

    /// `name  entries  max_rel_err  PASS|FAIL`, one block per line.
    pub fn table(&self) -> String {
        let w = self.blocks.iter().map(|b| b.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<w$}  {:>7}  {:>11}  result\n", "block", "entries", "max_rel_err");
        for b in &self.blocks {
            out += &format!(
                "{:<w$}  {:>7}  {:>11.3e}  {}\n",
                b.name,
                b.entries,
                b.max_rel_err,
                if b.pass { "PASS" } else { "FAIL" }
            );
        }
        out
    }
}

struct Fixture {
    cfg: RunConfig,
    grids: Vec<FeatureGrid>,
    questions: Vec<TaggedSentence>,
    answers: Vec<Vec<TaggedSentence>>,
}

/// Distinct tokens, so no two word rows (and no two max-pool candidates)
/// can tie exactly.
fn sentence(rng: &mut ChaCha8Rng, vocab: &Vocabulary, n_vocab: usize) -> Result<TaggedSentence> {
    let len = rng.gen_range(1..=4.min(n_vocab));
    let tokens = rand::seq::index::sample(rng, n_vocab, len)
        .into_iter()
        .map(|i| format!("w{i}"))
        .collect();
    let tags: Vec<String> = (0..len)
        .map(|_| TAGS[rng.gen_range(0..TAGS.len())].to_string())
        .collect();
    TaggedSentence::new(tokens, &tags, vocab)
}

impl Fixture {
    fn new(base: &RunConfig, shape: GradcheckShape, rng: &mut ChaCha8Rng) -> Result<(Self, ModelParams)> {
        if shape.answers < 2 || shape.groups == 0 {
            return Err(Error::Config(
                "gradient check needs groups with at least two answers".into(),
            ));
        }
        let cfg = RunConfig {
            d_word: shape.width,
            d_img: shape.width,
            hidden: shape.width,
            ..base.clone()
        };
        let vocab = Vocabulary::from_tokens((0..shape.vocab).map(|i| format!("w{i}")))?;
        let dist = Uniform::new_inclusive(-1.0, 1.0);
        // Vectors on the scale of pretrained embeddings. With the tiny
        // from-scratch init every window's output sits near tanh(0), and the
        // max across window sizes is too close to a tie for central
        // differences.
        let table = (0..vocab.rows() * shape.width).map(|_| rng.sample(dist)).collect();
        let table = Tensor::matrix(vocab.rows(), shape.width, table)?;
        let params = ModelParams::init(&cfg, vocab.rows(), shape.raw_dim, Some(&table), rng)?;
        let k = shape.regions.0 * shape.regions.1;
        let mut grids = Vec::new();
        let mut questions = Vec::new();
        let mut answers = Vec::new();
        for g in 0..shape.groups {
            let data = (0..k * shape.raw_dim).map(|_| rng.sample(dist)).collect();
            grids.push(FeatureGrid::new(
                format!("img{g}"),
                Tensor::matrix(k, shape.raw_dim, data)?,
                shape.regions,
            )?);
            questions.push(sentence(rng, &vocab, shape.vocab)?);
            // Identical candidates would tie for the hardest negative.
            let mut group: Vec<TaggedSentence> = Vec::with_capacity(shape.answers);
            while group.len() < shape.answers {
                let s = sentence(rng, &vocab, shape.vocab)?;
                if group.iter().all(|a| a.vocab_ids != s.vocab_ids) {
                    group.push(s);
                }
            }
            answers.push(group);
        }
        Ok((
            Fixture {
                cfg,
                grids,
                questions,
                answers,
            },
            params,
        ))
    }

    fn inputs(&self) -> Vec<GroupInput<'_>> {
        (0..self.grids.len())
            .map(|g| GroupInput {
                grid: &self.grids[g],
                question: &self.questions[g],
                answers: &self.answers[g],
            })
            .collect()
    }

    /// The first answer of every group is the positive.
    fn spans(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.answers
            .iter()
            .map(|a| {
                off += a.len();
                (off - a.len(), a.len())
            })
            .collect()
    }

    fn kink_margin(&self, params: &ModelParams) -> Result<f64> {
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let out = bound.forward(&tape, &self.cfg, &params.bn_running, &self.inputs(), BnMode::Train)?;
        objective(&tape, out.probs, &self.spans(), self.cfg.lambda2, self.cfg.margin)?;
        Ok(tape.kink_margin())
    }

    /// Redraws until the loss is smooth in a neighborhood of the point.
    fn smooth(base: &RunConfig, shape: GradcheckShape, rng: &mut ChaCha8Rng) -> Result<(Self, ModelParams)> {
        for _ in 0..MAX_DRAWS {
            let (fx, params) = Fixture::new(base, shape, rng)?;
            if fx.kink_margin(&params)? >= MIN_KINK_MARGIN {
                return Ok((fx, params));
            }
        }
        Err(Error::Config(format!(
            "no draw in {MAX_DRAWS} stays {MIN_KINK_MARGIN} away from a max or relu switch"
        )))
    }

    fn loss(&self, params: &ModelParams) -> Result<f64> {
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let out = bound.forward(&tape, &self.cfg, &params.bn_running, &self.inputs(), BnMode::Train)?;
        let obj = objective(&tape, out.probs, &self.spans(), self.cfg.lambda2, self.cfg.margin)?;
        Ok(tape.item(obj.total))
    }

    fn analytic(&self, params: &ModelParams, tape: &Tape) -> Result<(f64, Vec<Tensor>)> {
        let bound = params.bind(tape, true);
        let out = bound.forward(tape, &self.cfg, &params.bn_running, &self.inputs(), BnMode::Train)?;
        let obj = objective(tape, out.probs, &self.spans(), self.cfg.lambda2, self.cfg.margin)?;
        let grads = tape.backward(obj.total)?;
        let per_block = bound
            .vars()
            .iter()
            .zip(params.blocks())
            .map(|(&v, (_, t))| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((tape.item(obj.total), per_block))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every block of a freshly initialized tiny model built from the
/// switches of `cfg` (attention mode, POS weighting, `l_max`, loss weights).
/// With `fault` set, the analytic pass uses a deliberately wrong backward
/// rule for that operation and the report is expected to fail.
pub fn gradcheck(cfg: &RunConfig, seed: u64, shape: GradcheckShape, fault: Option<OpTag>) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fx, params) = Fixture::smooth(cfg, shape, &mut rng)?;
    let tape = match fault {
        Some(tag) => Tape::with_fault(tag),
        None => Tape::new(),
    };
    let (loss, grads) = fx.analytic(&params, &tape)?;

    let mut probe = params.clone();
    let mut blocks = Vec::with_capacity(grads.len());
    for (b, grad) in grads.iter().enumerate() {
        let (name, entries) = {
            let (n, t) = &params.blocks()[b];
            (n.clone(), t.len())
        };
        let mut worst: f64 = 0.0;
        for i in 0..entries {
            let orig = params.blocks()[b].1.data()[i];
            let mut at = |x: f64| -> Result<f64> {
                probe.blocks_mut()[b].1.data_mut()[i] = x;
                fx.loss(&probe)
            };
            let up = at(orig + STEP)?;
            let down = at(orig - STEP)?;
            at(orig)?;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        blocks.push(BlockReport {
            name,
            entries,
            max_rel_err: worst,
            pass: worst < TOLERANCE,
        });
    }
    Ok(GradcheckReport { loss, blocks })
}
