//! Losses, negative sampling, the epoch loop and early stopping.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::FeatureStore;
use crate::error::{Error, Result};
use crate::fusion::{argmax_first, BnMode};
use crate::model::{GroupInput, Model};
use crate::optim::AdamState;
use crate::tape::{Tape, Var, BCE_CLAMP};
use crate::text::TaggedSentence;

/// One image, one question and its candidate answers in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateGroup {
    pub id: String,
    pub image_id: String,
    pub question: TaggedSentence,
    pub answers: Vec<TaggedSentence>,
    pub positive: usize,
}

impl CandidateGroup {
    pub fn new(
        id: String,
        image_id: String,
        question: TaggedSentence,
        answers: Vec<TaggedSentence>,
        positive: usize,
    ) -> Result<Self> {
        if answers.len() < 2 {
            return Err(Error::Contract(format!(
                "group {id} has {} answers, need at least 2",
                answers.len()
            )));
        }
        if positive >= answers.len() {
            return Err(Error::Contract(format!(
                "group {id}: positive index {positive} out of range"
            )));
        }
        Ok(CandidateGroup {
            id,
            image_id,
            question,
            answers,
            positive,
        })
    }

    /// Answer indices with the positive first, the rest in file order.
    pub fn canonical_order(&self) -> Vec<usize> {
        std::iter::once(self.positive)
            .chain((0..self.answers.len()).filter(|&i| i != self.positive))
            .collect()
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.answers.len()).filter(move |&i| i != self.positive)
    }
}

/// Two-sided cross-entropy averaged over candidates.
pub fn binary_ce_loss(p: &[f64], targets: &[f64]) -> Result<f64> {
    if p.len() != targets.len() || p.is_empty() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} targets",
            p.len(),
            targets.len()
        )));
    }
    let total: f64 = p
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / p.len() as f64)
}

/// Hinge on the hardest negative; `p[0]` is the positive.
pub fn structured_margin_loss(p: &[f64], margin: f64) -> Result<f64> {
    let (&pos, negs) = p.split_first().ok_or_else(|| Error::Contract("no candidates".into()))?;
    let hardest = negs
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::Contract("structured loss needs at least one negative".into()))?;
    Ok((margin + hardest - pos).max(0.0))
}

pub fn total_loss(binary: f64, structured: f64, lambda2: f64) -> f64 {
    binary + lambda2 * structured
}

/// `p[0] >= max(p[1..]) + margin`.
pub fn margin_satisfied(p: &[f64], margin: f64) -> bool {
    structured_margin_loss(p, margin).is_ok_and(|l| l == 0.0)
}

/// Positive plus up to `neg_per_pos` distinct negatives drawn uniformly.
/// The positive comes first; the negatives keep file order.
pub fn sample_negatives(group: &CandidateGroup, neg_per_pos: usize, rng: &mut impl Rng) -> Vec<usize> {
    let negs: Vec<usize> = group.negatives().collect();
    let mut picked = if neg_per_pos >= negs.len() {
        negs
    } else {
        rand::seq::index::sample(rng, negs.len(), neg_per_pos)
            .into_iter()
            .map(|i| negs[i])
            .collect()
    };
    picked.sort_unstable();
    std::iter::once(group.positive).chain(picked).collect()
}

/// Loss nodes for one step.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub binary: Var,
    pub structured: Var,
}

/// Builds `L_b + lambda2 * L_s` on the tape. `spans` gives `(offset, len)` of
/// every group inside `probs`, positive first. The hinge is averaged over
/// groups.
pub fn objective(tape: &Tape, probs: Var, spans: &[(usize, usize)], lambda2: f64, margin: f64) -> Result<Objective> {
    let n = tape.shape(probs)[0];
    let mut targets = vec![0.0; n];
    let mut hinges = Vec::with_capacity(spans.len());
    for &(off, len) in spans {
        if len < 2 {
            return Err(Error::Contract("structured loss needs at least one negative".into()));
        }
        targets[off] = 1.0;
        let pos = tape.index_select(probs, &[off])?;
        let negs = tape.index_select(probs, &(off + 1..off + len).collect::<Vec<_>>())?;
        let hardest = tape.reshape(tape.maxpool(negs, 0)?, vec![1])?;
        hinges.push(tape.relu(tape.shift(tape.sub(hardest, pos)?, margin)?)?);
    }
    let binary = tape.binary_cross_entropy(probs, &targets)?;
    let structured = tape.scale(tape.sum_all(tape.stack(&hinges)?), 1.0 / spans.len() as f64)?;
    let total = tape.add(binary, tape.scale(structured, lambda2)?)?;
    Ok(Objective {
        total,
        binary,
        structured,
    })
}

/// True once `patience` epochs have passed without beating the first best
/// validation accuracy.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    match argmax_first(history) {
        Some(best) => history.len() - 1 - best >= patience,
        None => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    /// `(correct, total)` keyed by number of candidates.
    pub by_size: BTreeMap<usize, (usize, usize)>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

fn input<'a>(group: &'a CandidateGroup, features: &'a FeatureStore) -> Result<GroupInput<'a>> {
    Ok(GroupInput {
        grid: features.get(&group.image_id)?,
        question: &group.question,
        answers: &group.answers,
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))
}

/// Scores all candidates of every group in eval mode. `jobs` workers share
/// the read-only model; the result does not depend on `jobs`.
pub fn predictions(
    model: &Model,
    groups: &[CandidateGroup],
    features: &FeatureStore,
    jobs: usize,
) -> Result<Vec<Vec<f64>>> {
    let score = |g: &CandidateGroup| -> Result<Vec<f64>> { Ok(model.score(&input(g, features)?)?.probs) };
    if jobs <= 1 {
        groups.iter().map(score).collect()
    } else {
        pool(jobs)?.install(|| groups.par_iter().map(score).collect())
    }
}

pub fn evaluate(model: &Model, groups: &[CandidateGroup], features: &FeatureStore, jobs: usize) -> Result<Evaluation> {
    let probs = predictions(model, groups, features, jobs)?;
    let mut ev = Evaluation::default();
    for (g, p) in groups.iter().zip(&probs) {
        let hit = argmax_first(p) == Some(g.positive);
        let slot = ev.by_size.entry(g.answers.len()).or_default();
        slot.1 += 1;
        ev.total += 1;
        if hit {
            slot.0 += 1;
            ev.correct += 1;
        }
    }
    Ok(ev)
}

/// Fraction of groups whose positive beats every negative by `margin`, with
/// all candidates scored in eval mode.
pub fn margin_satisfaction(
    model: &Model,
    groups: &[CandidateGroup],
    features: &FeatureStore,
    margin: f64,
) -> Result<f64> {
    if groups.is_empty() {
        return Ok(0.0);
    }
    let probs = predictions(model, groups, features, 1)?;
    let ok = groups
        .iter()
        .zip(&probs)
        .filter(|(g, p)| {
            let ordered: Vec<f64> = g.canonical_order().iter().map(|&i| p[i]).collect();
            margin_satisfied(&ordered, margin)
        })
        .count();
    Ok(ok as f64 / groups.len() as f64)
}

/// Mutable training state: the model, the optimizer and the sampling stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    rng: ChaCha8Rng,
    steps: u64,
}

impl Trainer {
    /// Sampling and shuffling draw from a stream seeded by `seed`.
    pub fn new(model: Model, seed: u64) -> Self {
        let cfg = &model.config;
        let adam = AdamState::new(
            model.params.blocks().into_iter().map(|(_, t)| t),
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
        );
        Trainer {
            model,
            adam,
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps: 0,
        }
    }

    pub fn with_adam(mut self, adam: AdamState) -> Self {
        self.adam = adam;
        self
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One optimizer step over `(group, sampled answer indices)` pairs.
    /// Returns the loss and how many groups ranked their positive first.
    pub fn step(&mut self, batch: &[(&CandidateGroup, Vec<usize>)], features: &FeatureStore) -> Result<(f64, usize)> {
        let cfg = self.model.config.clone();
        let step = self.steps;
        let fail = |group: &str, e: Error| Error::Training {
            step,
            group: group.to_string(),
            message: e.to_string(),
        };
        let batch_ids = || batch.iter().map(|(g, _)| g.id.as_str()).collect::<Vec<_>>().join(",");

        let tape = Tape::new();
        let bound = self.model.params.bind(&tape, true);
        let mut fused = Vec::with_capacity(batch.len());
        let mut spans = Vec::with_capacity(batch.len());
        let mut offset = 0;
        for (g, picked) in batch {
            let answers: Vec<TaggedSentence> = picked.iter().map(|&i| g.answers[i].clone()).collect();
            let gi = GroupInput {
                grid: features.get(&g.image_id).map_err(|e| fail(&g.id, e))?,
                question: &g.question,
                answers: &answers,
            };
            fused.push(bound.fuse_group(&tape, &cfg, &gi).map_err(|e| fail(&g.id, e))?);
            spans.push((offset, picked.len()));
            offset += picked.len();
        }
        let out = bound
            .head(&tape, &cfg, &self.model.params.bn_running, fused, BnMode::Train)
            .map_err(|e| fail(&batch_ids(), e))?;
        let obj = objective(&tape, out.probs, &spans, cfg.lambda2, cfg.margin).map_err(|e| fail(&batch_ids(), e))?;
        let loss = tape.item(obj.total);
        if !loss.is_finite() {
            return Err(fail(&batch_ids(), Error::NonFinite(format!("loss = {loss}"))));
        }
        let grads = tape.backward(obj.total).map_err(|e| fail(&batch_ids(), e))?;

        let probs = tape.value(out.probs);
        let ranked_first = spans
            .iter()
            .filter(|&&(off, len)| argmax_first(&probs.data()[off..off + len]) == Some(0))
            .count();

        let lrs = self.model.params.learning_rates(&cfg);
        let grad_refs: Vec<Option<&crate::tensor::Tensor>> = bound.vars().iter().map(|&v| grads.get(v)).collect();
        let mut params: Vec<&mut crate::tensor::Tensor> =
            self.model.params.blocks_mut().into_iter().map(|(_, t)| t).collect();
        self.adam.update(&mut params, &grad_refs, &lrs)?;
        if let Some(stats) = out.stats {
            self.model
                .params
                .bn_running
                .absorb(&stats.mean, &stats.var, cfg.bn_momentum);
        }
        self.steps += 1;
        Ok((loss, ranked_first))
    }

    /// Shuffles the groups, resamples negatives and runs one pass.
    pub fn train_epoch(&mut self, groups: &[CandidateGroup], features: &FeatureStore) -> Result<EpochStats> {
        if groups.is_empty() {
            return Err(Error::Contract("no training groups".into()));
        }
        let cfg = self.model.config.clone();
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut self.rng);
        let sampled: Vec<(&CandidateGroup, Vec<usize>)> = order
            .iter()
            .map(|&i| (&groups[i], sample_negatives(&groups[i], cfg.neg_per_pos, &mut self.rng)))
            .collect();
        let (mut loss_sum, mut steps, mut ranked) = (0.0, 0usize, 0usize);
        for batch in sampled.chunks(cfg.batch_size) {
            let (loss, hits) = self.step(batch, features)?;
            loss_sum += loss;
            steps += 1;
            ranked += hits;
        }
        Ok(EpochStats {
            loss: loss_sum / steps as f64,
            accuracy: ranked as f64 / groups.len() as f64,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub wall_secs: f64,
}

impl EpochRecord {
    /// Tab-separated log line. Wall time is written as `-` when disabled.
    pub fn log_line(&self, with_time: bool) -> String {
        let time = if with_time {
            format!("{:.3}", self.wall_secs)
        } else {
            "-".to_string()
        };
        format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{}",
            self.epoch, self.train_loss, self.train_acc, self.val_acc, time
        )
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: Model,
    pub best_adam: AdamState,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains until `max_epochs` or early stopping, keeping the parameters of
/// the best validation epoch. One log line per epoch goes to `log`.
pub fn fit(
    mut trainer: Trainer,
    train: &[CandidateGroup],
    val: &[CandidateGroup],
    features: &FeatureStore,
    jobs: usize,
    log: &mut dyn Write,
) -> Result<FitOutcome> {
    if val.is_empty() {
        return Err(Error::Contract("no validation groups".into()));
    }
    let cfg: RunConfig = trainer.model.config.clone();
    let start = Instant::now();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut accs: Vec<f64> = Vec::new();
    let mut best: Option<(Model, AdamState, usize, f64)> = None;
    for epoch in 1..=cfg.max_epochs {
        let stats = trainer.train_epoch(train, features)?;
        let val_acc = evaluate(&trainer.model, val, features, jobs)?.accuracy();
        let rec = EpochRecord {
            epoch,
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            val_acc,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", rec.log_line(cfg.log_wall_time)).map_err(|e| Error::io("training log", e))?;
        history.push(rec);
        accs.push(val_acc);
        if best.as_ref().is_none_or(|b| val_acc > b.3) {
            best = Some((trainer.model.clone(), trainer.adam.clone(), epoch, val_acc));
        }
        if early_stop(&accs, cfg.patience) {
            break;
        }
    }
    let (best, best_adam, best_epoch, best_val_acc) =
        best.ok_or_else(|| Error::Contract("max_epochs must be at least 1".into()))?;
    Ok(FitOutcome {
        best,
        best_adam,
        best_epoch,
        best_val_acc,
        history,
    })
}
