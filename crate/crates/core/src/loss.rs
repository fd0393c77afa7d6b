//! Matching and regression losses for both training stages.

use ndarray::Array2;

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::geometry::{edge_soft_labels, encode_offset, iou, node_soft_labels, BBox};
use crate::model::{Forward, SceneInput};
use crate::tape::{smooth_l1_value, Tape, Var};

/// `-sum_m target_m * log_softmax(logits)_m`.
pub fn soft_ce_loss(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::DimensionMismatch { context: "soft cross entropy", expected: logits.len(), actual: target.len() });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    Ok(logits.iter().zip(target).map(|(z, t)| t * (lse - z)).sum())
}

/// Summed smooth-L1 distance between two offset vectors.
pub fn smooth_l1(pred: &[f64; 4], target: &[f64; 4]) -> f64 {
    pred.iter().zip(target).map(|(a, b)| smooth_l1_value(a - b)).sum()
}

/// Individual loss terms of one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub prune_match: Var,
    pub prune_reg: Var,
    pub node_match: Option<Var>,
    pub edge_match: Option<Var>,
    pub node_reg: Option<Var>,
}

/// Sum of per-group soft cross entropies over contiguous row blocks of `logits`.
fn grouped_ce(tape: &mut Tape, logits: Var, groups: Vec<(std::ops::Range<usize>, Vec<f64>)>) -> Var {
    let terms: Vec<(Var, f64)> = groups
        .into_iter()
        .map(|(rows, target)| {
            let block = tape.rows(logits, rows.collect());
            (tape.soft_cross_entropy(block, target), 1.0)
        })
        .collect();
    if terms.is_empty() {
        tape.zeros(1, 1)
    } else {
        tape.weighted_sum(terms)
    }
}

/// Regression over candidates with IoU at least `tau`, each phrase's
/// positives sharing unit weight.
fn masked_regression(tape: &mut Tape, offsets: Var, candidates: &[Vec<BBox>], gt: &[BBox], tau: f64) -> Var {
    let rows: usize = candidates.iter().map(|c| c.len()).sum();
    let mut target = Array2::zeros((rows, 4));
    let mut weights = vec![0.0; rows];
    let mut r = 0;
    for (cands, g) in candidates.iter().zip(gt) {
        let positive: Vec<bool> = cands.iter().map(|c| iou(c, g) >= tau).collect();
        let count = positive.iter().filter(|p| **p).count();
        for (c, pos) in cands.iter().zip(&positive) {
            if *pos {
                let t = encode_offset(c, g).to_array();
                for (col, v) in t.iter().enumerate() {
                    target[[r, col]] = *v;
                }
                weights[r] = 1.0 / count as f64;
            }
            r += 1;
        }
    }
    tape.smooth_l1(offsets, target, weights)
}

pub fn loss_terms(tape: &mut Tape, fwd: &Forward, input: &SceneInput, gt: &[BBox], tau: f64) -> Result<LossTerms> {
    let n = input.phrases.len();
    if gt.len() != n {
        return Err(Error::DimensionMismatch { context: "ground-truth boxes", expected: n, actual: gt.len() });
    }
    let m = input.proposals.len();
    let groups = (0..n)
        .map(|i| (i * m..(i + 1) * m, node_soft_labels(&input.proposals, &gt[i], tau).0))
        .collect();
    let prune_match = grouped_ce(tape, fwd.phrase.prune_logits, groups);
    let all: Vec<Vec<BBox>> = vec![input.proposals.clone(); n];
    let prune_reg = masked_regression(tape, fwd.phrase.prune_offsets, &all, gt, tau);

    let Some(g) = &fwd.graph else {
        return Ok(LossTerms { prune_match, prune_reg, node_match: None, edge_match: None, node_reg: None });
    };
    let k = g.graph.k;
    let refined: Vec<Vec<BBox>> = g.pruned.iter().map(|p| p.refined.clone()).collect();
    let groups = (0..n).map(|i| (i * k..(i + 1) * k, node_soft_labels(&refined[i], &gt[i], tau).0)).collect();
    let node_match = grouped_ce(tape, g.node_logits, groups);
    let node_reg = masked_regression(tape, g.node_offsets, &refined, gt, tau);
    let edge_match = g.edge_logits.map(|logits| {
        let groups = input
            .pairs()
            .iter()
            .enumerate()
            .map(|(r, &(i, j))| {
                let pairs: Vec<(BBox, BBox)> =
                    (0..k).flat_map(|a| (0..k).map(move |b| (a, b))).map(|(a, b)| (refined[i][a], refined[j][b])).collect();
                (g.graph.relation_rows(r), edge_soft_labels(&pairs, &(gt[i], gt[j]), tau).0)
            })
            .collect();
        grouped_ce(tape, logits, groups)
    });
    Ok(LossTerms { prune_match, prune_reg, node_match: Some(node_match), edge_match, node_reg: Some(node_reg) })
}

/// Pruning match loss plus weighted pruning regression.
pub fn stage1_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Var {
    tape.weighted_sum(vec![(terms.prune_match, 1.0), (terms.prune_reg, w.prune_reg)])
}

/// Stage-one loss plus the weighted graph matching and regression terms
/// that are present.
pub fn stage2_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Var {
    let mut parts = vec![(terms.prune_match, 1.0), (terms.prune_reg, w.prune_reg)];
    if let Some(v) = terms.node_match {
        parts.push((v, w.node_match));
    }
    if let Some(v) = terms.edge_match {
        parts.push((v, w.edge_match));
    }
    if let Some(v) = terms.node_reg {
        parts.push((v, w.node_reg));
    }
    tape.weighted_sum(parts)
}
