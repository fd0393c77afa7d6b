//! Attention message passing over a directed graph with edge features.
//!
//! The same propagation step drives both the phrase graph and the visual
//! object graph: edges are refined from their endpoints, then every node
//! aggregates attention-weighted messages over the edges touching it in
//! either direction.

use crate::encoders::Mlp;
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};

/// One incidence of an edge on a node: `node` receives a message from
/// `neighbor` through `edge`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Incidence {
    pub node: usize,
    pub neighbor: usize,
    pub edge: usize,
}

/// Incidences grouped by receiving node (ascending), each group in edge
/// order, plus the contiguous row range of each non-empty group.
pub fn incidences(pairs: &[(usize, usize)]) -> (Vec<Incidence>, Vec<(usize, usize)>) {
    let mut inc = Vec::with_capacity(2 * pairs.len());
    for (e, &(a, b)) in pairs.iter().enumerate() {
        inc.push(Incidence { node: a, neighbor: b, edge: e });
        inc.push(Incidence { node: b, neighbor: a, edge: e });
    }
    inc.sort_by_key(|i| (i.node, i.edge, i.neighbor));
    let mut segments = Vec::new();
    let mut start = 0;
    for r in 1..=inc.len() {
        if r == inc.len() || inc[r].node != inc[start].node {
            segments.push((start, r));
            start = r;
        }
    }
    (inc, segments)
}

#[derive(Debug, Clone)]
pub struct Propagation {
    pub nodes: Var,
    pub edges: Var,
    /// Attention weight of every incidence, `len(incidences) x 1`.
    pub attention: Option<Var>,
    pub incidences: Vec<Incidence>,
    pub segments: Vec<(usize, usize)>,
}

/// Residual edge update followed by attention aggregation; with no edges
/// the inputs pass through untouched.
#[derive(Debug, Clone)]
pub struct GraphNet {
    pub edge_mlp: Mlp,
    pub message_mlp: Mlp,
}

impl GraphNet {
    pub fn new(store: &mut ParameterStore, edge_name: &str, message_name: &str, width: usize, seed: u64) -> Self {
        GraphNet {
            edge_mlp: Mlp::new(store, edge_name, &[3 * width, width, width], seed),
            message_mlp: Mlp::new(store, message_name, &[2 * width, width, width], seed),
        }
    }

    /// `edges + edge_mlp([subject; object; edges])`.
    pub fn edge_update(&self, tape: &mut Tape, nodes: Var, edges: Var, pairs: &[(usize, usize)]) -> Var {
        let subj = tape.rows(nodes, pairs.iter().map(|p| p.0).collect());
        let obj = tape.rows(nodes, pairs.iter().map(|p| p.1).collect());
        let joint = tape.concat_cols(&[subj, obj, edges]);
        let delta = self.edge_mlp.forward(tape, joint);
        tape.add(edges, delta)
    }

    /// `nodes + sum over incidences of attention * message_mlp([neighbor; edge])`.
    /// With `use_edge_feature` false the edge slot is filled with zeros.
    pub fn node_update(
        &self,
        tape: &mut Tape,
        nodes: Var,
        refined_edges: Var,
        pairs: &[(usize, usize)],
        use_edge_feature: bool,
    ) -> (Var, Var, Vec<Incidence>, Vec<(usize, usize)>) {
        let (inc, segments) = incidences(pairs);
        let n_nodes = tape.shape(nodes).0;
        let width = tape.shape(refined_edges).1;
        let rel = if use_edge_feature {
            tape.rows(refined_edges, inc.iter().map(|i| i.edge).collect())
        } else {
            tape.zeros(inc.len(), width)
        };
        let own = tape.rows(nodes, inc.iter().map(|i| i.node).collect());
        let other = tape.rows(nodes, inc.iter().map(|i| i.neighbor).collect());
        let key_in = tape.concat_cols(&[own, rel]);
        let key = self.message_mlp.forward(tape, key_in);
        let msg_in = tape.concat_cols(&[other, rel]);
        let msg = self.message_mlp.forward(tape, msg_in);
        let score = tape.row_dot(key, msg);
        let attn = tape.segment_softmax(score, segments.clone());
        let weighted = tape.scale_rows(msg, attn);
        let agg = tape.segment_sum(weighted, inc.iter().map(|i| i.node).collect(), n_nodes);
        (tape.add(nodes, agg), attn, inc, segments)
    }

    pub fn forward(&self, tape: &mut Tape, nodes: Var, edges: Var, pairs: &[(usize, usize)], use_edge_feature: bool) -> Propagation {
        if pairs.is_empty() {
            return Propagation { nodes, edges, attention: None, incidences: Vec::new(), segments: Vec::new() };
        }
        let refined = self.edge_update(tape, nodes, edges, pairs);
        let (out, attn, inc, segments) = self.node_update(tape, nodes, refined, pairs, use_edge_feature);
        Propagation { nodes: out, edges: refined, attention: Some(attn), incidences: inc, segments }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.edge_mlp.param_ids();
        ids.extend(self.message_mlp.param_ids());
        ids
    }
}

/// Phrase graph network: refines phrase and relation features.
#[derive(Debug, Clone)]
pub struct PhraseGraphNet {
    pub net: GraphNet,
}

impl PhraseGraphNet {
    pub fn new(store: &mut ParameterStore, width: usize, seed: u64) -> Self {
        PhraseGraphNet { net: GraphNet::new(store, "pgn_edge", "pgn_msg", width, seed) }
    }

    /// `phrases` is `N x D`, `relations` is `E x D` aligned with `pairs`
    /// of `(subject, object)` phrase indices.
    pub fn forward(&self, tape: &mut Tape, phrases: Var, relations: Var, pairs: &[(usize, usize)], use_relation: bool) -> Propagation {
        self.net.forward(tape, phrases, relations, pairs, use_relation)
    }
}
