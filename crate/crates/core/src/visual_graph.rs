//! Language-guided proposal pruning, visual scene graph construction and the
//! visual object graph network.

use crate::encoders::Mlp;
use crate::error::{Error, Result};
use crate::geometry::{decode_offset, union_box, BBox, Offset};
use crate::params::{ParamId, ParameterStore};
use crate::phrase_graph::{GraphNet, Propagation};
use crate::tape::{Tape, Var};

/// Smallest side a refined box may shrink to.
pub const MIN_BOX_SIDE: f64 = 1e-3;

/// Scores a pair of feature rows through `[a; b; a*b; |a-b|]`, with an
/// optional box-offset branch.
#[derive(Debug, Clone)]
pub struct MatchHead {
    pub cls: Mlp,
    pub reg: Option<Mlp>,
}

impl MatchHead {
    pub fn new(store: &mut ParameterStore, name: &str, width: usize, with_offsets: bool, seed: u64) -> Self {
        let cls = Mlp::new(store, &format!("{name}_cls"), &[4 * width, width, 1], seed);
        let reg = with_offsets.then(|| Mlp::new(store, &format!("{name}_reg"), &[4 * width, width, 4], seed));
        MatchHead { cls, reg }
    }

    pub fn joint(tape: &mut Tape, a: Var, b: Var) -> Var {
        let prod = tape.mul(a, b);
        let diff = tape.sub(a, b);
        let dist = tape.abs(diff);
        tape.concat_cols(&[a, b, prod, dist])
    }

    /// Logits (`n x 1`) and offsets (`n x 4`) for row-aligned `a`, `b`.
    pub fn forward(&self, tape: &mut Tape, a: Var, b: Var) -> (Var, Option<Var>) {
        let joint = Self::joint(tape, a, b);
        let logits = self.cls.forward(tape, joint);
        let offsets = self.reg.as_ref().map(|r| r.forward(tape, joint));
        (logits, offsets)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.cls.param_ids();
        if let Some(r) = &self.reg {
            ids.extend(r.param_ids());
        }
        ids
    }
}

/// Indices of the `k` largest scores, highest first; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::TooFewProposals { k, m: scores.len() });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Apply an offset and keep the result inside the canvas.
pub fn refine_box(proposal: &BBox, delta: &Offset, canvas: &BBox) -> BBox {
    let raw = decode_offset(delta, proposal);
    let fixed = BBox {
        x1: raw.x1.min(raw.x2),
        y1: raw.y1.min(raw.y2),
        x2: raw.x1.max(raw.x2),
        y2: raw.y1.max(raw.y2),
    };
    fixed.clip_to(canvas, MIN_BOX_SIDE)
}

/// Proposals kept for one phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedPhrase {
    /// Source proposal indices, best first.
    pub proposals: Vec<usize>,
    /// Pruning logits of the kept proposals.
    pub logits: Vec<f64>,
    /// Softmax of `logits`.
    pub probs: Vec<f64>,
    pub refined: Vec<BBox>,
}

/// Keep the top `k` of each phrase's `m` proposals and refine their boxes.
/// `logits` is phrase-major (`n * m`), `offsets` aligned with it.
pub fn prune_proposals(
    logits: &[f64],
    offsets: &[Offset],
    proposals: &[BBox],
    canvas: &BBox,
    k: usize,
) -> Result<Vec<PrunedPhrase>> {
    let m = proposals.len();
    if m == 0 {
        return Err(Error::Empty("proposal set"));
    }
    if k > m {
        return Err(Error::TooFewProposals { k, m });
    }
    let n = logits.len() / m;
    (0..n)
        .map(|i| {
            let row = &logits[i * m..(i + 1) * m];
            let kept = top_k(row, k)?;
            let kept_logits: Vec<f64> = kept.iter().map(|&p| row[p]).collect();
            let refined = kept.iter().map(|&p| refine_box(&proposals[p], &offsets[i * m + p], canvas)).collect();
            Ok(PrunedPhrase { probs: softmax(&kept_logits), proposals: kept, logits: kept_logits, refined })
        })
        .collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Edge between node `(i, k)` and node `(j, l)` induced by language edge `relation`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisualEdge {
    pub relation: usize,
    pub k: usize,
    pub l: usize,
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualSceneGraph {
    pub k: usize,
    /// Refined box of node `i * k + slot`.
    pub boxes: Vec<BBox>,
    /// Source proposal of every node.
    pub sources: Vec<usize>,
    /// Grouped by language edge, then `k`, then `l`.
    pub edges: Vec<VisualEdge>,
}

impl VisualSceneGraph {
    pub fn node(&self, phrase: usize, slot: usize) -> usize {
        phrase * self.k + slot
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.source, e.target)).collect()
    }

    /// Rows of the edges belonging to language edge `r`.
    pub fn relation_rows(&self, r: usize) -> std::ops::Range<usize> {
        let kk = self.k * self.k;
        r * kk..(r + 1) * kk
    }
}

/// `K` nodes per phrase and `K^2` edges per language edge.
pub fn build_visual_graph(pruned: &[PrunedPhrase], relations: &[(usize, usize)]) -> VisualSceneGraph {
    let k = pruned.first().map_or(0, |p| p.proposals.len());
    let mut boxes = Vec::with_capacity(pruned.len() * k);
    let mut sources = Vec::with_capacity(pruned.len() * k);
    for p in pruned {
        assert_eq!(p.proposals.len(), k, "every phrase keeps the same number of proposals");
        boxes.extend(p.refined.iter().copied());
        sources.extend(p.proposals.iter().copied());
    }
    let mut edges = Vec::with_capacity(relations.len() * k * k);
    for (r, &(i, j)) in relations.iter().enumerate() {
        for a in 0..k {
            for b in 0..k {
                edges.push(VisualEdge { relation: r, k: a, l: b, source: i * k + a, target: j * k + b });
            }
        }
    }
    VisualSceneGraph { k, boxes, sources, edges }
}

/// Union boxes used as the mask canvas of each visual edge.
pub fn edge_regions(graph: &VisualSceneGraph) -> Vec<(BBox, BBox, BBox)> {
    graph
        .edges
        .iter()
        .map(|e| {
            let a = graph.boxes[e.source];
            let b = graph.boxes[e.target];
            (a, b, union_box(&a, &b))
        })
        .collect()
}

/// Visual object graph network over object nodes and relation edges.
#[derive(Debug, Clone)]
pub struct VisualGraphNet {
    pub net: GraphNet,
}

impl VisualGraphNet {
    pub fn new(store: &mut ParameterStore, width: usize, seed: u64) -> Self {
        VisualGraphNet { net: GraphNet::new(store, "vogn_edge", "vogn_msg", width, seed) }
    }

    pub fn forward(&self, tape: &mut Tape, objects: Var, relations: Var, graph: &VisualSceneGraph, use_relation: bool) -> Propagation {
        self.net.forward(tape, objects, relations, &graph.pairs(), use_relation)
    }
}
