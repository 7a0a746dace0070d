//! Hierarchical fusion head: question x image, then x answer, then a
//! batch-normalized logistic scorer.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running per-feature statistics for the batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        RunningStats {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn absorb(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

/// Batch statistics observed in a train-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateScore {
    pub index: usize,
    pub logit: f64,
    pub p: f64,
}

impl CandidateScore {
    pub fn from_logit(index: usize, logit: f64) -> Self {
        CandidateScore {
            index,
            logit,
            p: crate::tape::sigmoid(logit),
        }
    }
}

pub fn fuse_question_image(tape: &Tape, x_q: Var, x_img: Var) -> Result<Var> {
    tape.hadamard(x_q, x_img)
}

/// `tanh(x_qi W_QI + b_QI) * x_ans`.
pub fn fuse_answer(tape: &Tape, x_qi: Var, x_ans: Var, weight: Var, bias: Var) -> Result<Var> {
    let hidden = tape.tanh(tape.add_bias(tape.matmul(x_qi, weight)?, bias)?)?;
    tape.hadamard(hidden, x_ans)
}

/// Normalizes a `[B, h]` batch. Train mode uses (and reports) the batch's own
/// statistics; eval mode uses `running`.
pub fn batch_norm(
    tape: &Tape,
    batch: Var,
    gamma: Var,
    beta: Var,
    running: &RunningStats,
    mode: BnMode,
    eps: f64,
) -> Result<(Var, Option<BatchStats>)> {
    match mode {
        BnMode::Train => {
            let (y, mean, var) = tape.batch_norm_train(batch, gamma, beta, eps)?;
            Ok((y, Some(BatchStats { mean, var })))
        }
        BnMode::Eval => Ok((
            tape.batch_norm_eval(batch, gamma, beta, &running.mean, &running.var, eps)?,
            None,
        )),
    }
}

/// Logits `x W_QIA + b_QIA` for a `[B, h]` batch, returned as a length-B vector.
pub fn candidate_logits(tape: &Tape, x_qia: Var, weight: Var, bias: Var) -> Result<Var> {
    let rows = tape.shape(x_qia)[0];
    let logits = tape.add_bias(tape.matmul(x_qia, weight)?, bias)?;
    tape.reshape(logits, vec![rows])
}

/// Scores a single fused vector of width h.
pub fn score_candidate(tape: &Tape, index: usize, x_qia: Var, weight: Var, bias: Var) -> Result<CandidateScore> {
    let logit = tape.add_bias(tape.matmul(x_qia, weight)?, bias)?;
    Ok(CandidateScore::from_logit(index, tape.item(logit)))
}

/// Index of the highest probability; the lowest index wins ties.
pub fn predict_choice(scores: &[CandidateScore]) -> Result<usize> {
    let first = scores
        .first()
        .ok_or_else(|| Error::Contract("no candidates to choose from".into()))?;
    let mut best = first;
    for s in &scores[1..] {
        if s.p > best.p {
            best = s;
        }
    }
    Ok(best.index)
}

/// Same rule over raw values.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn question_image_fusion() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let i = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(
            tape.value(fuse_question_image(&tape, q, i).unwrap()).data(),
            &[3.0, 8.0]
        );
        let ones = tape.constant(Tensor::ones(&[2]));
        assert_eq!(
            tape.value(fuse_question_image(&tape, q, ones).unwrap()).data(),
            &[1.0, 2.0]
        );
        let zero = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(
            tape.value(fuse_question_image(&tape, zero, i).unwrap()).data(),
            &[0.0, 0.0]
        );
        let short = tape.constant(Tensor::ones(&[3]));
        assert!(fuse_question_image(&tape, q, short).is_err());
    }

    #[test]
    fn answer_fusion_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (xqi, xa) = (rand_t(&mut rng, &[3]), rand_t(&mut rng, &[4]));
        let (w, b) = (rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4]));

        let tape = Tape::new();
        let zero = fuse_answer(
            &tape,
            tape.constant(xqi.clone()),
            tape.constant(xa.clone()),
            tape.constant(Tensor::zeros(&[3, 4])),
            tape.constant(Tensor::zeros(&[4])),
        )
        .unwrap();
        assert!(tape.value(zero).data().iter().all(|&v| v == 0.0));

        let out = tape.value(
            fuse_answer(
                &tape,
                tape.constant(xqi.clone()),
                tape.constant(xa.clone()),
                tape.constant(w.clone()),
                tape.constant(b.clone()),
            )
            .unwrap(),
        );
        let ones = tape.value(
            fuse_answer(
                &tape,
                tape.constant(xqi.clone()),
                tape.constant(Tensor::ones(&[4])),
                tape.constant(w.clone()),
                tape.constant(b.clone()),
            )
            .unwrap(),
        );
        for j in 0..4 {
            let mut acc = b.data()[j];
            for i in 0..3 {
                acc += xqi.data()[i] * w.at2(i, j);
            }
            assert!((out.data()[j] - acc.tanh() * xa.data()[j]).abs() < 1e-12);
            assert!((ones.data()[j] - acc.tanh()).abs() < 1e-12);
        }
    }

    fn bn(rows: Tensor, mode: BnMode, running: &RunningStats) -> (Tensor, Option<BatchStats>) {
        let h = rows.shape()[1];
        let tape = Tape::new();
        let (y, stats) = batch_norm(
            &tape,
            tape.constant(rows),
            tape.constant(Tensor::ones(&[h])),
            tape.constant(Tensor::zeros(&[h])),
            running,
            mode,
            1e-5,
        )
        .unwrap();
        (tape.value(y), stats)
    }

    #[test]
    fn batch_norm_degenerate_and_normalized() {
        let same = Tensor::from_rows(&[&[2.0, -1.0], &[2.0, -1.0], &[2.0, -1.0]]);
        let (y, _) = bn(same, BnMode::Train, &RunningStats::new(2));
        assert!(y.data().iter().all(|&v| v == 0.0));

        let (y, stats) = bn(
            Tensor::from_rows(&[&[-1.0], &[1.0]]),
            BnMode::Train,
            &RunningStats::new(1),
        );
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expected).abs() < 1e-15 && (y.data()[1] - expected).abs() < 1e-15);
        assert_eq!(
            stats.unwrap(),
            BatchStats {
                mean: vec![0.0],
                var: vec![1.0]
            }
        );
    }

    #[test]
    fn batch_norm_eval_matches_hand_computation() {
        let running = RunningStats {
            mean: vec![0.5, -1.0],
            var: vec![4.0, 0.25],
        };
        let x = Tensor::from_rows(&[&[1.5, 0.0], &[-0.5, -1.5]]);
        let (y, stats) = bn(x.clone(), BnMode::Eval, &running);
        assert!(stats.is_none());
        for r in 0..2 {
            for j in 0..2 {
                let e = (x.at2(r, j) - running.mean[j]) / (running.var[j] + 1e-5).sqrt();
                assert!((y.at2(r, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_train_needs_two_rows() {
        let tape = Tape::new();
        let err = batch_norm(
            &tape,
            tape.constant(Tensor::zeros(&[1, 2])),
            tape.constant(Tensor::ones(&[2])),
            tape.constant(Tensor::zeros(&[2])),
            &RunningStats::new(2),
            BnMode::Train,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::BatchTooSmall(1)));
    }

    #[test]
    fn running_stats_momentum() {
        let mut r = RunningStats::new(1);
        r.absorb(&[1.0], &[3.0], 0.9);
        assert!((r.mean[0] - 0.1).abs() < 1e-15);
        assert!((r.var[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn eval_scores_do_not_depend_on_batch_mates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let running = RunningStats {
            mean: vec![0.1, 0.2, -0.3],
            var: vec![1.5, 0.7, 2.0],
        };
        let a = rand_t(&mut rng, &[1, 3]);
        let b = rand_t(&mut rng, &[2, 3]);
        let both = Tensor::matrix(3, 3, [a.data(), b.data()].concat()).unwrap();
        let (ya, _) = bn(a, BnMode::Eval, &running);
        let (yb, _) = bn(both, BnMode::Eval, &running);
        assert_eq!(ya.row(0), yb.row(0));
    }

    #[test]
    fn scoring_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.3, -0.7]));
        let zero_w = tape.constant(Tensor::zeros(&[2, 1]));
        let s = score_candidate(&tape, 0, x, zero_w, tape.constant(Tensor::zeros(&[1]))).unwrap();
        assert_eq!(s.p, 0.5);
        let s = score_candidate(&tape, 0, x, zero_w, tape.constant(Tensor::vector(vec![10.0]))).unwrap();
        assert!(s.p > 0.9999);

        let w = Tensor::from_rows(&[&[0.4], &[0.9]]);
        let s = score_candidate(&tape, 2, x, tape.constant(w), tape.constant(Tensor::vector(vec![0.05]))).unwrap();
        let logit: f64 = 0.3 * 0.4 - 0.7 * 0.9 + 0.05;
        assert!((s.logit - logit).abs() < 1e-12);
        assert!((s.p - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-12);
        assert_eq!(s.index, 2);
    }

    #[test]
    fn choice_rules() {
        let mk = |ps: &[f64]| -> Vec<CandidateScore> {
            ps.iter()
                .enumerate()
                .map(|(i, &p)| CandidateScore {
                    index: i,
                    logit: 0.0,
                    p,
                })
                .collect()
        };
        assert_eq!(predict_choice(&mk(&[0.3])).unwrap(), 0);
        assert_eq!(predict_choice(&mk(&[0.2, 0.9, 0.9])).unwrap(), 1);
        assert!(predict_choice(&[]).is_err());
    }

    proptest! {
        #[test]
        fn choice_invariant_under_monotone_transform(logits in prop::collection::vec(-3.0f64..3.0, 1..10)) {
            let scores: Vec<CandidateScore> = logits
                .iter()
                .enumerate()
                .map(|(i, &l)| CandidateScore::from_logit(i, l))
                .collect();
            let transformed: Vec<CandidateScore> = logits
                .iter()
                .enumerate()
                .map(|(i, &l)| CandidateScore::from_logit(i, 1.5 * l + 0.1 * l.powi(3) - 1.0))
                .collect();
            prop_assert_eq!(predict_choice(&scores).unwrap(), predict_choice(&transformed).unwrap());
            prop_assert!(scores.iter().all(|s| s.p > 0.0 && s.p < 1.0));
        }
    }
}
