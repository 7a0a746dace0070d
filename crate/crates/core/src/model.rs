//! Parameter blocks, initialization and the batched scoring pass.
//!
//! Each group shares one region transform and one question encoding; every
//! candidate answer then gets its own attention and fused vector. The fused
//! rows of a whole batch pass through batch norm together.

use rand::distributions::Uniform;
use rand::Rng;

use crate::attention::{triplet_attention, AttentionMode, AttentionOutput};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{batch_norm, candidate_logits, fuse_answer, fuse_question_image, BatchStats, BnMode, RunningStats};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{apply_pos_attention, conv_ngram_encode, sentence_embed, PosCategory, TaggedSentence, Vocabulary};
use crate::vision::{transform_regions, FeatureGrid};

/// Every trainable tensor plus the batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embedding: Tensor,
    pub pos_weights: Tensor,
    /// `(filter [l, d, d], bias [d])` for window sizes `1..=l_max`.
    pub conv: Vec<(Tensor, Tensor)>,
    pub lang_weight: Tensor,
    pub lang_bias: Tensor,
    pub answer_weight: Tensor,
    pub answer_bias: Tensor,
    pub vision_weight: Tensor,
    pub vision_bias: Tensor,
    pub lambda1: Tensor,
    pub qi_weight: Tensor,
    pub qi_bias: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub bn_running: RunningStats,
}

fn glorot(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, -a, a)
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let dist = Uniform::new_inclusive(lo, hi);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.sample(dist);
    }
    t
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &RunConfig, vocab_rows: usize, raw_dim: usize) -> Self {
        let (d, di, h) = (cfg.d_word, cfg.d_img, cfg.hidden);
        ModelParams {
            embedding: Tensor::zeros(&[vocab_rows, d]),
            pos_weights: Tensor::zeros(&[PosCategory::ALL.len()]),
            conv: (1..=cfg.l_max)
                .map(|l| (Tensor::zeros(&[l, d, d]), Tensor::zeros(&[d])))
                .collect(),
            lang_weight: Tensor::zeros(&[d, di]),
            lang_bias: Tensor::zeros(&[di]),
            answer_weight: Tensor::zeros(&[d, h]),
            answer_bias: Tensor::zeros(&[h]),
            vision_weight: Tensor::zeros(&[raw_dim, di]),
            vision_bias: Tensor::zeros(&[di]),
            lambda1: Tensor::scalar(0.0),
            qi_weight: Tensor::zeros(&[di, h]),
            qi_bias: Tensor::zeros(&[h]),
            bn_gamma: Tensor::zeros(&[h]),
            bn_beta: Tensor::zeros(&[h]),
            out_weight: Tensor::zeros(&[h, 1]),
            out_bias: Tensor::zeros(&[1]),
            bn_running: RunningStats::new(h),
        }
    }

    /// Fresh parameters. `embedding`, when given, must have `vocab_rows` rows
    /// of width `d_word` and is copied in unchanged.
    pub fn init(
        cfg: &RunConfig,
        vocab_rows: usize,
        raw_dim: usize,
        embedding: Option<&Tensor>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut p = ModelParams::zeros(cfg, vocab_rows, raw_dim);
        let (d, di, h) = (cfg.d_word, cfg.d_img, cfg.hidden);
        p.embedding = match embedding {
            Some(t) => {
                if t.shape() != [vocab_rows, d] {
                    return Err(Error::Shape(format!(
                        "embedding table is {:?}, expected [{vocab_rows}, {d}]",
                        t.shape()
                    )));
                }
                t.clone()
            }
            None => uniform(rng, &[vocab_rows, d], -cfg.emb_init, cfg.emb_init),
        };
        p.pos_weights = uniform(rng, &[PosCategory::ALL.len()], cfg.pos_init_low, cfg.pos_init_high);
        for (l, (filter, _)) in p.conv.iter_mut().enumerate() {
            let l = l + 1;
            *filter = glorot(rng, &[l, d, d], l * d, d);
        }
        p.lang_weight = glorot(rng, &[d, di], d, di);
        p.answer_weight = glorot(rng, &[d, h], d, h);
        p.vision_weight = glorot(rng, &[raw_dim, di], raw_dim, di);
        p.qi_weight = glorot(rng, &[di, h], di, h);
        p.out_weight = glorot(rng, &[h, 1], h, 1);
        p.lambda1 = Tensor::scalar(cfg.lambda1_init);
        p.bn_gamma = Tensor::ones(&[h]);
        Ok(p)
    }

    pub fn vocab_rows(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn raw_dim(&self) -> usize {
        self.vision_weight.shape()[0]
    }

    /// Trainable blocks in their fixed order.
    pub fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embedding".to_string(), &self.embedding),
            ("pos_weights".to_string(), &self.pos_weights),
        ];
        for (l, (f, b)) in self.conv.iter().enumerate() {
            out.push((format!("conv{}.filter", l + 1), f));
            out.push((format!("conv{}.bias", l + 1), b));
        }
        out.extend([
            ("lang_proj.weight".to_string(), &self.lang_weight),
            ("lang_proj.bias".to_string(), &self.lang_bias),
            ("answer_proj.weight".to_string(), &self.answer_weight),
            ("answer_proj.bias".to_string(), &self.answer_bias),
            ("vision.weight".to_string(), &self.vision_weight),
            ("vision.bias".to_string(), &self.vision_bias),
            ("lambda1".to_string(), &self.lambda1),
            ("qi.weight".to_string(), &self.qi_weight),
            ("qi.bias".to_string(), &self.qi_bias),
            ("bn.gamma".to_string(), &self.bn_gamma),
            ("bn.beta".to_string(), &self.bn_beta),
            ("qia.weight".to_string(), &self.out_weight),
            ("qia.bias".to_string(), &self.out_bias),
        ]);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("embedding".to_string(), &mut self.embedding),
            ("pos_weights".to_string(), &mut self.pos_weights),
        ];
        for (l, (f, b)) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{}.filter", l + 1), f));
            out.push((format!("conv{}.bias", l + 1), b));
        }
        out.extend([
            ("lang_proj.weight".to_string(), &mut self.lang_weight),
            ("lang_proj.bias".to_string(), &mut self.lang_bias),
            ("answer_proj.weight".to_string(), &mut self.answer_weight),
            ("answer_proj.bias".to_string(), &mut self.answer_bias),
            ("vision.weight".to_string(), &mut self.vision_weight),
            ("vision.bias".to_string(), &mut self.vision_bias),
            ("lambda1".to_string(), &mut self.lambda1),
            ("qi.weight".to_string(), &mut self.qi_weight),
            ("qi.bias".to_string(), &mut self.qi_bias),
            ("bn.gamma".to_string(), &mut self.bn_gamma),
            ("bn.beta".to_string(), &mut self.bn_beta),
            ("qia.weight".to_string(), &mut self.out_weight),
            ("qia.bias".to_string(), &mut self.out_bias),
        ]);
        out
    }

    /// Per-block learning rates: the embedding has its own rate.
    pub fn learning_rates(&self, cfg: &RunConfig) -> Vec<f64> {
        self.blocks()
            .iter()
            .map(|(name, _)| {
                if name == "embedding" {
                    cfg.lr_embedding
                } else {
                    cfg.lr_other
                }
            })
            .collect()
    }

    /// Places every block on `tape` as a leaf.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        let vars: Vec<Var> = self
            .blocks()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        Bound::from_vars(vars, self.conv.len())
    }
}

/// Tape handles for one bound copy of [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub embedding: Var,
    pub pos_weights: Var,
    pub conv: Vec<(Var, Var)>,
    pub lang_weight: Var,
    pub lang_bias: Var,
    pub answer_weight: Var,
    pub answer_bias: Var,
    pub vision_weight: Var,
    pub vision_bias: Var,
    pub lambda1: Var,
    pub qi_weight: Var,
    pub qi_bias: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub out_weight: Var,
    pub out_bias: Var,
    vars: Vec<Var>,
}

/// One group ready for scoring.
#[derive(Clone, Copy, Debug)]
pub struct GroupInput<'a> {
    pub grid: &'a FeatureGrid,
    pub question: &'a TaggedSentence,
    pub answers: &'a [TaggedSentence],
}

/// Scores for a batch of groups.
#[derive(Debug)]
pub struct BatchOutput {
    /// `[B]` logits over all candidates of all groups, group by group.
    pub logits: Var,
    pub probs: Var,
    /// First row of each group in `logits`.
    pub offsets: Vec<usize>,
    pub attention: Vec<Vec<AttentionOutput>>,
    pub stats: Option<BatchStats>,
}

/// Per-group fused rows before batch norm.
#[derive(Debug)]
pub struct FusedGroup {
    pub rows: Vec<Var>,
    pub attention: Vec<AttentionOutput>,
}

impl Bound {
    fn from_vars(vars: Vec<Var>, l_max: usize) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("block count fixed by ModelParams::blocks");
        let embedding = next();
        let pos_weights = next();
        let conv = (0..l_max).map(|_| (next(), next())).collect();
        Bound {
            embedding,
            pos_weights,
            conv,
            lang_weight: next(),
            lang_bias: next(),
            answer_weight: next(),
            answer_bias: next(),
            vision_weight: next(),
            vision_bias: next(),
            lambda1: next(),
            qi_weight: next(),
            qi_bias: next(),
            bn_gamma: next(),
            bn_beta: next(),
            out_weight: next(),
            out_bias: next(),
            vars,
        }
    }

    /// Leaves in [`ModelParams::blocks`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Word rows mapped into region space, and the mean conv-encoded vector.
    pub fn encode_text(&self, tape: &Tape, cfg: &RunConfig, sent: &TaggedSentence) -> Result<(Var, Var)> {
        let pos = cfg.pos_attention.then_some(self.pos_weights);
        let x_hat = apply_pos_attention(tape, sent, self.embedding, pos)?;
        let e = conv_ngram_encode(tape, x_hat, &self.conv)?;
        let words = tape.tanh(tape.add_bias(tape.matmul(e, self.lang_weight)?, self.lang_bias)?)?;
        Ok((words, sentence_embed(tape, e)?))
    }

    /// Fused `x_QIA` rows for every candidate of one group.
    pub fn fuse_group(&self, tape: &Tape, cfg: &RunConfig, group: &GroupInput) -> Result<FusedGroup> {
        if group.answers.is_empty() {
            return Err(Error::Contract("group has no candidate answers".into()));
        }
        let raw = tape.constant(group.grid.regions.clone());
        let regions = transform_regions(tape, raw, self.vision_weight, self.vision_bias)?;
        let (q_words, q_mean) = self.encode_text(tape, cfg, group.question)?;
        let x_q = tape.tanh(tape.add_bias(tape.matmul(q_mean, self.lang_weight)?, self.lang_bias)?)?;
        let mut rows = Vec::with_capacity(group.answers.len());
        let mut attention = Vec::with_capacity(group.answers.len());
        for answer in group.answers {
            let (a_words, a_mean) = self.encode_text(tape, cfg, answer)?;
            let x_a = tape.tanh(tape.add_bias(tape.matmul(a_mean, self.answer_weight)?, self.answer_bias)?)?;
            let att = triplet_attention(tape, cfg.attention, q_words, a_words, regions, self.lambda1)?;
            let x_qi = fuse_question_image(tape, x_q, att.x_img)?;
            rows.push(fuse_answer(tape, x_qi, x_a, self.qi_weight, self.qi_bias)?);
            attention.push(att);
        }
        Ok(FusedGroup { rows, attention })
    }

    /// Batch norm and the logistic layer over already fused groups.
    pub fn head(
        &self,
        tape: &Tape,
        cfg: &RunConfig,
        running: &RunningStats,
        fused: Vec<FusedGroup>,
        mode: BnMode,
    ) -> Result<BatchOutput> {
        let mut offsets = Vec::with_capacity(fused.len());
        let mut rows = Vec::new();
        let mut attention = Vec::with_capacity(fused.len());
        for g in fused {
            offsets.push(rows.len());
            rows.extend(g.rows);
            attention.push(g.attention);
        }
        let stacked = tape.stack(&rows)?;
        let (normed, stats) = batch_norm(tape, stacked, self.bn_gamma, self.bn_beta, running, mode, cfg.bn_eps)?;
        let logits = candidate_logits(tape, normed, self.out_weight, self.out_bias)?;
        Ok(BatchOutput {
            logits,
            probs: tape.sigmoid(logits)?,
            offsets,
            attention,
            stats,
        })
    }

    pub fn forward(
        &self,
        tape: &Tape,
        cfg: &RunConfig,
        running: &RunningStats,
        groups: &[GroupInput],
        mode: BnMode,
    ) -> Result<BatchOutput> {
        let fused = groups
            .iter()
            .map(|g| self.fuse_group(tape, cfg, g))
            .collect::<Result<Vec<_>>>()?;
        self.head(tape, cfg, running, fused, mode)
    }
}

/// A trained (or fresh) scorer together with the configuration and
/// vocabulary it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

/// Eval-mode output for one group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupScores {
    pub probs: Vec<f64>,
    pub choice: usize,
}

impl Model {
    pub fn new(config: RunConfig, vocab: Vocabulary, params: ModelParams) -> Result<Self> {
        let expected = ModelParams::zeros(&config, vocab.rows(), params.raw_dim());
        for ((name, want), (_, got)) in expected.blocks().iter().zip(params.blocks()) {
            if want.shape() != got.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name} is {:?}, configuration implies {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        if expected.blocks().len() != params.blocks().len() {
            return Err(Error::Shape("parameter block count does not match l_max".into()));
        }
        Ok(Model { config, vocab, params })
    }

    /// Scores every candidate of one group with running batch-norm
    /// statistics, so the result does not depend on other groups.
    pub fn score(&self, group: &GroupInput) -> Result<GroupScores> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let out = bound.forward(&tape, &self.config, &self.params.bn_running, &[*group], BnMode::Eval)?;
        let probs = tape.value(out.probs).into_data();
        let choice = crate::fusion::argmax_first(&probs)
            .ok_or_else(|| Error::Contract("no candidates to choose from".into()))?;
        Ok(GroupScores { probs, choice })
    }

    /// Scores plus the attention maps of every candidate, as plain vectors.
    pub fn inspect(&self, group: &GroupInput) -> Result<(GroupScores, Vec<AttentionMaps>)> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let out = bound.forward(&tape, &self.config, &self.params.bn_running, &[*group], BnMode::Eval)?;
        let probs = tape.value(out.probs).into_data();
        let choice = crate::fusion::argmax_first(&probs)
            .ok_or_else(|| Error::Contract("no candidates to choose from".into()))?;
        let k = group.grid.num_regions();
        let maps = out.attention[0]
            .iter()
            .map(|a| {
                let get = |v: Option<Var>| {
                    v.map(|v| tape.value(v).into_data())
                        .unwrap_or_else(|| vec![f64::NAN; k])
                };
                AttentionMaps {
                    att_q: get(a.att_q),
                    att_a: get(a.att_a),
                    combined: tape.value(a.att_combined).into_data(),
                }
            })
            .collect();
        Ok((GroupScores { probs, choice }, maps))
    }

    pub fn attention_mode(&self) -> AttentionMode {
        self.config.attention
    }
}

/// Attention weights over regions for one candidate. Entries of a map the
/// configured mode does not compute are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub att_q: Vec<f64>,
    pub att_a: Vec<f64>,
    pub combined: Vec<f64>,
}
