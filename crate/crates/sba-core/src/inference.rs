//! Test-time prediction: plain argmax and majority vote over a sample plus
//! its virtual replicas.
//!
//! Vote evaluation reuses the training vicinity configuration and draws one
//! split layer and one fresh orthonormal basis per evaluation call (a
//! standalone [`predict_vote`] call counts as its own evaluation, so it gets
//! its own basis). All evaluation randomness comes from dedicated eval
//! streams, so evaluating never perturbs a training run.

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{draw_split, LayerStack, SplitChoice, TracedNet};
use crate::rng::{stream_indexed, StreamTag};
use crate::tensor::{Tape, Tensor};
use crate::vicinity::{augment_batch, make_basis, BasisMatrix, VicinityConfig};

/// Rows per forward chunk during dataset evaluation.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Argmax,
    Vote,
}

/// Outcome of a majority vote over `M + 1` voters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VotePrediction {
    pub predicted_class: usize,
    /// Per-class tallies; sums to `M + 1`.
    pub vote_counts: Vec<usize>,
    /// Argmax of the reference sample alone.
    pub reference_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub error_rate: f64,
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax classification; ties break to the lowest class index.
pub fn predict_argmax(net: &LayerStack, x: &Tensor) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let logits = net.frozen().forward_full(&tape, x)?;
    Ok(logits.data().chunks_exact(logits.cols()).map(argmax_row).collect())
}

/// Majority vote for every row of `x_chunk`, sharing one basis.
fn vote_chunk(
    traced: &TracedNet,
    class_count: usize,
    x_chunk: &Tensor,
    k: SplitChoice,
    vicinity: &VicinityConfig,
    basis: &BasisMatrix,
    noise_rng: &mut impl Rng,
    mask_rng: &mut impl Rng,
) -> Result<Vec<VotePrediction>> {
    let tape = Tape::new();
    let rows = x_chunk.rows();
    let h = traced.forward_to(&tape, x_chunk, k)?;

    let fold = vicinity.fold();
    if fold == 0 {
        // No virtual voters: vote degenerates to argmax.
        let logits = traced.forward_from(&tape, &h, k)?;
        return Ok(logits
            .data()
            .chunks_exact(class_count)
            .map(|row| {
                let class = argmax_row(row);
                let mut counts = vec![0usize; class_count];
                counts[class] = 1;
                VotePrediction {
                    predicted_class: class,
                    vote_counts: counts,
                    reference_class: class,
                }
            })
            .collect());
    }

    let aug = augment_batch(&tape, &h, vicinity, basis, noise_rng, mask_rng)?;
    let logits = traced.forward_from(&tape, &aug.rows, k)?;
    let preds: Vec<usize> = logits.data().chunks_exact(class_count).map(argmax_row).collect();

    let mut counts = vec![vec![0usize; class_count]; rows];
    for (i, row_counts) in counts.iter_mut().enumerate() {
        row_counts[preds[i]] += 1;
    }
    for (virt_row, &ref_row) in aug.virtual_refs().iter().enumerate() {
        counts[ref_row][preds[rows + virt_row]] += 1;
    }

    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, vote_counts)| {
            let reference_class = preds[i];
            let top = *vote_counts.iter().max().expect("class_count >= 1");
            // Plurality; ties prefer the reference's own prediction, then the
            // lowest class index.
            let predicted_class = if vote_counts[reference_class] == top {
                reference_class
            } else {
                vote_counts.iter().position(|&c| c == top).expect("max exists")
            };
            VotePrediction {
                predicted_class,
                vote_counts,
                reference_class,
            }
        })
        .collect())
}

/// Majority vote for a single sample: computes its split activation, builds
/// `M` virtual replicas with a fresh basis from `noise_rng`, and tallies the
/// `M + 1` argmax votes.
pub fn predict_vote(
    net: &LayerStack,
    x: &[f64],
    k: SplitChoice,
    vicinity: &VicinityConfig,
    noise_rng: &mut impl Rng,
    mask_rng: &mut impl Rng,
) -> Result<VotePrediction> {
    if x.len() != net.input_dim() {
        return Err(Error::Shape {
            op: "predict_vote",
            left: vec![x.len()],
            right: vec![net.input_dim()],
        });
    }
    let basis = make_basis(net.width_at(k.k), vicinity.basis_mode, 0, k.k, noise_rng);
    let x_t = Tensor::matrix(1, x.len(), x.to_vec())?;
    let mut preds = vote_chunk(
        &net.frozen(),
        net.class_count(),
        &x_t,
        k,
        vicinity,
        &basis,
        noise_rng,
        mask_rng,
    )?;
    Ok(preds.remove(0))
}

/// Argmax accuracy alone: deterministic, no eval streams consumed.
pub fn evaluate_argmax(net: &LayerStack, ds: &Dataset) -> Result<f64> {
    if ds.dim() != net.input_dim() {
        return Err(Error::Shape {
            op: "evaluate",
            left: vec![ds.dim()],
            right: vec![net.input_dim()],
        });
    }
    let traced = net.frozen();
    let class_count = net.class_count();
    let mut correct = 0usize;
    let mut at = 0usize;
    while at < ds.len() {
        let hi = (at + EVAL_CHUNK).min(ds.len());
        let idx: Vec<usize> = (at..hi).collect();
        let (x, y) = ds.gather(&idx)?;
        let tape = Tape::new();
        let logits = traced.forward_full(&tape, &x)?;
        for (row, &label) in logits.data().chunks_exact(class_count).zip(&y) {
            if argmax_row(row) == label {
                correct += 1;
            }
        }
        at = hi;
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Accuracy under both eval modes in one pass over the dataset.
///
/// One split draw and one basis serve the whole call; `index` keys the eval
/// streams (pass the epoch number when evaluating per epoch). Falls back to
/// argmax behavior for the vote column when the net has no eligible split
/// layers.
pub fn evaluate_both(
    net: &LayerStack,
    ds: &Dataset,
    vicinity: &VicinityConfig,
    noise_seed: u64,
    mask_seed: u64,
    split_seed: u64,
    index: u64,
) -> Result<(f64, f64)> {
    if ds.dim() != net.input_dim() {
        return Err(Error::Shape {
            op: "evaluate",
            left: vec![ds.dim()],
            right: vec![net.input_dim()],
        });
    }
    let mut noise_rng = stream_indexed(noise_seed, StreamTag::EvalNoise, index);
    let mut mask_rng = stream_indexed(mask_seed, StreamTag::EvalMask, index);
    let mut split_rng = stream_indexed(split_seed, StreamTag::EvalSplit, index);

    let votable = !net.split_set().is_empty();
    let (k, basis) = if votable {
        let k = draw_split(net.split_set(), &mut split_rng)?;
        let basis = make_basis(net.width_at(k.k), vicinity.basis_mode, 0, k.k, &mut noise_rng);
        (Some(k), Some(basis))
    } else {
        (None, None)
    };

    let traced = net.frozen();
    let class_count = net.class_count();
    let mut correct_argmax = 0usize;
    let mut correct_vote = 0usize;
    let mut at = 0usize;
    while at < ds.len() {
        let hi = (at + EVAL_CHUNK).min(ds.len());
        let idx: Vec<usize> = (at..hi).collect();
        let (x, y) = ds.gather(&idx)?;
        match (&k, &basis) {
            (Some(k), Some(basis)) => {
                let votes = vote_chunk(
                    &traced,
                    class_count,
                    &x,
                    *k,
                    vicinity,
                    basis,
                    &mut noise_rng,
                    &mut mask_rng,
                )?;
                for (v, &label) in votes.iter().zip(&y) {
                    if v.reference_class == label {
                        correct_argmax += 1;
                    }
                    if v.predicted_class == label {
                        correct_vote += 1;
                    }
                }
            }
            _ => {
                let tape = Tape::new();
                let logits = traced.forward_full(&tape, &x)?;
                for (row, &label) in logits.data().chunks_exact(class_count).zip(&y) {
                    if argmax_row(row) == label {
                        correct_argmax += 1;
                        correct_vote += 1;
                    }
                }
            }
        }
        at = hi;
    }
    let n = ds.len() as f64;
    Ok((correct_argmax as f64 / n, correct_vote as f64 / n))
}

/// Accuracy and error rate of `net` on `ds` under one eval mode.
/// Deterministic in `eval_seed`; vote mode consumes eval noise/mask streams.
pub fn evaluate(
    net: &LayerStack,
    ds: &Dataset,
    mode: EvalMode,
    vicinity: &VicinityConfig,
    eval_seed: u64,
) -> Result<Evaluation> {
    let (argmax_acc, vote_acc) = evaluate_both(net, ds, vicinity, eval_seed, eval_seed, eval_seed, 0)?;
    let accuracy = match mode {
        EvalMode::Argmax => argmax_acc,
        EvalMode::Vote => vote_acc,
    };
    Ok(Evaluation {
        accuracy,
        error_rate: 1.0 - accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_two_moons;
    use crate::rng::stream;

    fn tally(class_count: usize, voters: &[usize], reference_class: usize) -> VotePrediction {
        let mut vote_counts = vec![0usize; class_count];
        for &v in voters {
            vote_counts[v] += 1;
        }
        let top = *vote_counts.iter().max().unwrap();
        let predicted_class = if vote_counts[reference_class] == top {
            reference_class
        } else {
            vote_counts.iter().position(|&c| c == top).unwrap()
        };
        VotePrediction {
            predicted_class,
            vote_counts,
            reference_class,
        }
    }

    #[test]
    fn argmax_breaks_ties_to_lowest_index() {
        assert_eq!(argmax_row(&[0.1, 0.9]), 1);
        assert_eq!(argmax_row(&[0.5, 0.5]), 0);
        assert_eq!(argmax_row(&[-1.0, -1.0, -0.5]), 2);
    }

    #[test]
    fn predict_argmax_matches_per_row_scan() {
        let net = LayerStack::init(&[3, 4, 3], 2).unwrap();
        let x = Tensor::matrix(5, 3, (0..15).map(|i| (i as f64).sin()).collect()).unwrap();
        let preds = predict_argmax(&net, &x).unwrap();

        let tape = Tape::new();
        let logits = net.frozen().forward_full(&tape, &x).unwrap();
        for (i, row) in logits.data().chunks_exact(3).enumerate() {
            let mut best = 0;
            for c in 1..3 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            assert_eq!(preds[i], best);
        }
    }

    #[test]
    fn plurality_wins() {
        let p = tally(4, &[2, 2, 3], 2);
        assert_eq!(p.predicted_class, 2);
        assert_eq!(p.vote_counts, vec![0, 0, 2, 1]);
    }

    #[test]
    fn tie_prefers_reference_prediction() {
        let p = tally(3, &[2, 1], 2);
        assert_eq!(p.predicted_class, 2);
        // Remaining ties (reference not among the top) go to lowest index.
        let q = tally(3, &[1, 2], 0);
        assert_eq!(q.predicted_class, 1);
    }

    #[test]
    fn vote_with_zero_fold_reduces_to_argmax() {
        let net = LayerStack::init(&[2, 8, 2], 3).unwrap();
        let ds = synth_two_moons(40, 0.1, 5).unwrap();
        let cfg = VicinityConfig {
            p_gauss: 0,
            q_drop: 0,
            ..VicinityConfig::default()
        };
        let (argmax_acc, vote_acc) =
            evaluate_both(&net, &ds, &cfg, 1, 2, 3, 0).unwrap();
        assert_eq!(argmax_acc, vote_acc);
    }

    #[test]
    fn tiny_vicinity_vote_agrees_with_argmax_exactly() {
        let net = LayerStack::init(&[2, 8, 8, 2], 3).unwrap();
        let ds = synth_two_moons(60, 0.1, 5).unwrap();
        let cfg = VicinityConfig {
            tau: 1e-300,
            keep_prob: 1.0,
            ..VicinityConfig::default()
        };
        let (argmax_acc, vote_acc) = evaluate_both(&net, &ds, &cfg, 1, 2, 3, 0).unwrap();
        assert_eq!(argmax_acc, vote_acc);
    }

    #[test]
    fn vote_counts_sum_to_fold_plus_one() {
        let net = LayerStack::init(&[2, 8, 2], 3).unwrap();
        let cfg = VicinityConfig::default();
        let mut noise = stream(1, StreamTag::EvalNoise);
        let mut mask = stream(2, StreamTag::EvalMask);
        let p = predict_vote(
            &net,
            &[0.3, -0.8],
            SplitChoice { k: 1 },
            &cfg,
            &mut noise,
            &mut mask,
        )
        .unwrap();
        assert_eq!(p.vote_counts.iter().sum::<usize>(), cfg.fold() + 1);
        assert!(p.vote_counts[p.predicted_class] >= 1);
    }

    #[test]
    fn evaluate_is_deterministic_and_reports_error_rate() {
        let net = LayerStack::init(&[2, 8, 2], 3).unwrap();
        let ds = synth_two_moons(50, 0.1, 6).unwrap();
        let cfg = VicinityConfig::default();
        let a = evaluate(&net, &ds, EvalMode::Vote, &cfg, 9).unwrap();
        let b = evaluate(&net, &ds, EvalMode::Vote, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert!((a.accuracy + a.error_rate - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_classifier_scores_half_on_balanced_set() {
        // Zero weights, biased last layer: always predicts class 1.
        let mut net = LayerStack::init(&[2, 2], 0).unwrap();
        net.set_param_vector(&[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let ds = synth_two_moons(40, 0.0, 1).unwrap();
        let e = evaluate(&net, &ds, EvalMode::Argmax, &VicinityConfig::default(), 0).unwrap();
        assert_eq!(e.accuracy, 0.5);
    }
}
