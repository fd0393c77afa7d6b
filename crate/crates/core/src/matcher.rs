//! Node and edge similarity fusion, the structured assignment solver, an
//! exhaustive reference solver and the balance-weight search.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::visual_graph::softmax;

/// Edge scores between the candidates of `subject` and `object`, `K x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeScores {
    pub subject: usize,
    pub object: usize,
    pub scores: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchInstance {
    /// `N x K` node scores.
    pub nodes: Array2<f64>,
    pub edges: Vec<EdgeScores>,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub assignment: Vec<usize>,
    pub objective: f64,
    /// Complete assignments whose objective was evaluated.
    pub enumerated: u64,
}

impl MatchInstance {
    pub fn n(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn k(&self) -> usize {
        self.nodes.ncols()
    }

    /// Node scores summed in phrase order, plus `beta` times edge scores
    /// summed in edge order.
    pub fn objective(&self, s: &[usize]) -> f64 {
        let node: f64 = s.iter().enumerate().map(|(i, &k)| self.nodes[[i, k]]).sum();
        let edge: f64 = self.edges.iter().map(|e| e.scores[[s[e.subject], s[e.object]]]).sum();
        node + self.beta * edge
    }

    pub fn validate(&self) -> Result<()> {
        if self.n() == 0 || self.k() == 0 {
            return Err(Error::Empty("match instance"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config("beta must be finite and non-negative".into()));
        }
        for e in &self.edges {
            if e.subject >= self.n() || e.object >= self.n() || e.scores.dim() != (self.k(), self.k()) {
                return Err(Error::Format("edge scores do not match the instance".into()));
            }
        }
        Ok(())
    }
}

/// Per-phrase argmax of the node scores; ties go to the lower index.
pub fn node_only(inst: &MatchInstance) -> Vec<usize> {
    inst.nodes
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

struct Search<'a> {
    inst: &'a MatchInstance,
    /// Best node score of phrases `i..`.
    node_tail: Vec<f64>,
    edge_max: Vec<f64>,
    /// Edges whose later endpoint is phrase `i`.
    closing: Vec<Vec<usize>>,
    current: Vec<usize>,
    best: Vec<usize>,
    best_value: f64,
    enumerated: u64,
}

impl Search<'_> {
    fn bound(&self, depth: usize, partial: f64, closed_edges: f64, open_edges: f64) -> f64 {
        partial + self.node_tail[depth] + self.inst.beta * (closed_edges + open_edges)
    }

    fn visit(&mut self, depth: usize, partial: f64, closed_edges: f64, open_edges: f64) {
        let n = self.inst.n();
        if depth == n {
            self.enumerated += 1;
            let value = self.inst.objective(&self.current);
            if value > self.best_value {
                self.best_value = value;
                self.best.clone_from(&self.current);
            }
            return;
        }
        for k in 0..self.inst.k() {
            self.current[depth] = k;
            let mut closed = closed_edges;
            let mut open = open_edges;
            for &e in &self.closing[depth] {
                let edge = &self.inst.edges[e];
                closed += edge.scores[[self.current[edge.subject], self.current[edge.object]]];
                open -= self.edge_max[e];
            }
            let p = partial + self.inst.nodes[[depth, k]];
            let bound = self.bound(depth + 1, p, closed, open);
            let slack = 1e-9 * (1.0 + self.best_value.abs());
            if self.best_value.is_finite() && bound < self.best_value - slack {
                continue;
            }
            self.visit(depth + 1, p, closed, open);
        }
    }
}

/// Exhaustive search over all `K^N` assignments in lexicographic order,
/// skipping branches whose optimistic bound cannot reach the incumbent.
fn exhaustive(inst: &MatchInstance) -> Solution {
    let n = inst.n();
    let mut node_tail = vec![0.0; n + 1];
    for i in (0..n).rev() {
        let best = inst.nodes.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        node_tail[i] = node_tail[i + 1] + best;
    }
    let edge_max: Vec<f64> = inst.edges.iter().map(|e| e.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
    let mut closing = vec![Vec::new(); n];
    for (idx, e) in inst.edges.iter().enumerate() {
        closing[e.subject.max(e.object)].push(idx);
    }
    let open: f64 = edge_max.iter().sum();
    let mut search = Search {
        inst,
        node_tail,
        edge_max,
        closing,
        current: vec![0; n],
        best: vec![0; n],
        best_value: f64::NEG_INFINITY,
        enumerated: 0,
    };
    search.visit(0, 0.0, 0.0, open);
    Solution { assignment: search.best, objective: search.best_value, enumerated: search.enumerated }
}

/// Exhaustive search when `N < exhaustive_below`, otherwise independent
/// per-phrase argmax.
pub fn solve_assignment(inst: &MatchInstance, exhaustive_below: usize) -> Solution {
    if inst.n() < exhaustive_below {
        exhaustive(inst)
    } else {
        let assignment = node_only(inst);
        let objective = inst.objective(&assignment);
        Solution { assignment, objective, enumerated: 0 }
    }
}

/// Largest `N log2 K` the reference solver accepts.
pub const ORACLE_LIMIT_BITS: f64 = 24.0;

/// Evaluates every assignment by counting through `0..K^N`.
pub fn brute_force_oracle(inst: &MatchInstance) -> Result<Solution> {
    let (n, k) = (inst.n(), inst.k());
    let bits = n as f64 * (k as f64).log2();
    if bits > ORACLE_LIMIT_BITS {
        return Err(Error::InstanceTooLarge(2f64.powf(bits)));
    }
    let total = (k as u64).pow(n as u32);
    let mut s = vec![0; n];
    let mut best = (f64::NEG_INFINITY, vec![0; n]);
    for code in 0..total {
        let mut rest = code;
        for i in (0..n).rev() {
            s[i] = (rest % k as u64) as usize;
            rest /= k as u64;
        }
        let value = inst.objective(&s);
        if value > best.0 {
            best = (value, s.clone());
        }
    }
    Ok(Solution { assignment: best.1, objective: best.0, enumerated: total })
}

/// Fused node score: product of the per-phrase softmax of the pruning and
/// matching logits.
pub fn fuse_node_scores(prune_logits: &[f64], match_logits: &[f64]) -> Vec<f64> {
    assert_eq!(prune_logits.len(), match_logits.len());
    softmax(prune_logits).into_iter().zip(softmax(match_logits)).map(|(a, b)| a * b).collect()
}

/// Edge scores of one language edge: softmax over its `K^2` logits, reshaped.
pub fn edge_score_matrix(logits: &[f64], k: usize) -> Array2<f64> {
    assert_eq!(logits.len(), k * k);
    Array2::from_shape_vec((k, k), softmax(logits)).expect("k x k")
}

/// Balance weights `0, step, ..., 1`.
pub fn beta_grid(step: f64) -> Vec<f64> {
    assert!(step > 0.0 && step <= 1.0);
    let n = (1.0 / step).round();
    if ((n * step) - 1.0).abs() < 1e-9 {
        let n = n as usize;
        (0..=n).map(|i| i as f64 / n as f64).collect()
    } else {
        (0..).map(|i| i as f64 * step).take_while(|b| *b <= 1.0 + 1e-12).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaSearch {
    pub best: f64,
    pub best_score: f64,
    pub grid: Vec<(f64, f64)>,
}

/// Grid search of the balance weight maximizing `score`; ties go to the
/// smaller weight.
pub fn calibrate_beta<F: FnMut(f64) -> Result<f64>>(step: f64, mut score: F) -> Result<BetaSearch> {
    let mut grid = Vec::new();
    let mut best = (0.0, f64::NEG_INFINITY);
    for beta in beta_grid(step) {
        let s = score(beta)?;
        if s > best.1 {
            best = (beta, s);
        }
        grid.push((beta, s));
    }
    Ok(BetaSearch { best: best.0, best_score: best.1, grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pair_instance(beta: f64) -> MatchInstance {
        MatchInstance {
            nodes: array![[0.6, 0.4], [0.6, 0.4]],
            edges: vec![EdgeScores { subject: 0, object: 1, scores: array![[0.01, 0.01], [0.01, 0.9]] }],
            beta,
        }
    }

    #[test]
    fn edge_term_overrides_node_preference() {
        let sol = solve_assignment(&pair_instance(1.0), 6);
        assert_eq!(sol.assignment, vec![1, 1]);
        assert_eq!(brute_force_oracle(&pair_instance(1.0)).unwrap().assignment, vec![1, 1]);
    }

    #[test]
    fn zero_beta_is_node_argmax() {
        let sol = solve_assignment(&pair_instance(0.0), 6);
        assert_eq!(sol.assignment, vec![0, 0]);
    }

    #[test]
    fn large_instances_skip_enumeration() {
        let inst = MatchInstance { nodes: Array2::from_elem((6, 3), 0.1), edges: vec![], beta: 1.0 };
        let sol = solve_assignment(&inst, 6);
        assert_eq!(sol.enumerated, 0);
        assert_eq!(sol.assignment, vec![0; 6]);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let inst = MatchInstance { nodes: Array2::from_elem((3, 3), 0.5), edges: vec![], beta: 0.0 };
        assert_eq!(solve_assignment(&inst, 6).assignment, vec![0, 0, 0]);
        assert_eq!(brute_force_oracle(&inst).unwrap().assignment, vec![0, 0, 0]);
    }

    #[test]
    fn oracle_guard() {
        let inst = MatchInstance { nodes: Array2::from_elem((13, 4), 0.5), edges: vec![], beta: 0.0 };
        assert!(matches!(brute_force_oracle(&inst), Err(Error::InstanceTooLarge(_))));
    }

    #[test]
    fn grid_has_21_points() {
        let g = beta_grid(0.05);
        assert_eq!(g.len(), 21);
        assert_eq!(g[20], 1.0);
        let mut calls = 0;
        let s = calibrate_beta(0.05, |_| {
            calls += 1;
            Ok(1.0)
        })
        .unwrap();
        assert_eq!(calls, 21);
        assert_eq!(s.best, 0.0);
    }

    #[test]
    fn fusion_is_elementwise_product() {
        let f = fuse_node_scores(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]);
        let g = softmax(&[1.0, 2.0, 3.0]);
        for (a, b) in f.iter().zip(g) {
            assert!((a - b / 3.0).abs() < 1e-15);
        }
    }
}
