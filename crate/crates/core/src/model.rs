//! The full grounding network: parameter layout, forward pipeline and
//! inference.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Toggles};
use crate::encoders::{fuse, object_spatial_feature, phrase_pool, BiGru, CoordinateMap, MaskEncoder, Mlp, Vocab};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Offset};
use crate::langgraph::{LanguageSceneGraph, Span};
use crate::matcher::{edge_score_matrix, fuse_node_scores, solve_assignment, EdgeScores, MatchInstance};
use crate::params::{ParamId, ParamKind, ParameterStore};
use crate::phrase_graph::{PhraseGraphNet, Propagation};
use crate::tape::{Tape, Var};
use crate::visual_graph::{
    build_visual_graph, edge_regions, prune_proposals, refine_box, softmax, MatchHead, PrunedPhrase, VisualGraphNet,
    VisualSceneGraph,
};

/// Parameter name prefixes trained in the first stage.
pub const STAGE_ONE_PREFIXES: [&str; 7] = ["embed", "gru_p.", "gru_r.", "pgn_", "spatial.", "fuse_obj.", "head_p_"];

/// Words of a relation: a span of the sentence or a standalone word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationText {
    Span(Span),
    Word(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub object: usize,
    pub text: RelationText,
}

/// Everything the network sees for one sentence and image.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInput {
    pub tokens: Vec<String>,
    pub phrases: Vec<Span>,
    pub relations: Vec<Relation>,
    pub canvas: BBox,
    pub proposals: Vec<BBox>,
    /// `M x d_a` appearance features aligned with `proposals`.
    pub appearance: Array2<f64>,
}

impl SceneInput {
    pub fn from_graph(
        tokens: Vec<String>,
        graph: &LanguageSceneGraph,
        canvas: BBox,
        proposals: Vec<BBox>,
        appearance: Array2<f64>,
    ) -> Self {
        let relations = graph
            .edges
            .iter()
            .map(|e| Relation {
                subject: e.subject,
                object: e.object,
                text: match e.span {
                    Some(s) => RelationText::Span(s),
                    None => RelationText::Word(e.relation.clone()),
                },
            })
            .collect();
        SceneInput { tokens, phrases: graph.nodes.iter().map(|p| p.span).collect(), relations, canvas, proposals, appearance }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let t = self.tokens.len();
        if t == 0 {
            return Err(Error::Empty("token sequence"));
        }
        if self.phrases.is_empty() {
            return Err(Error::Empty("phrase list"));
        }
        for s in &self.phrases {
            s.check(t)?;
        }
        for r in &self.relations {
            if r.subject >= self.phrases.len() || r.object >= self.phrases.len() || r.subject == r.object {
                return Err(Error::Format(format!("relation ({}, {}) is not between two phrases", r.subject, r.object)));
            }
            match &r.text {
                RelationText::Span(s) => s.check(t)?,
                RelationText::Word(w) if w.is_empty() => return Err(Error::Empty("relation word")),
                RelationText::Word(_) => {}
            }
        }
        if self.proposals.len() < config.top_k {
            return Err(Error::TooFewProposals { k: config.top_k, m: self.proposals.len() });
        }
        if self.appearance.dim() != (self.proposals.len(), config.appearance_dim) {
            return Err(Error::DimensionMismatch {
                context: "appearance features",
                expected: self.proposals.len() * config.appearance_dim,
                actual: self.appearance.len(),
            });
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.relations.iter().map(|r| (r.subject, r.object)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Layers {
    pub embed: ParamId,
    pub gru_p: BiGru,
    pub gru_r: BiGru,
    pub spatial: Mlp,
    pub fuse_obj: Mlp,
    pub mask: MaskEncoder,
    pub fuse_union: Mlp,
    pub pgn: PhraseGraphNet,
    pub vogn: VisualGraphNet,
    pub head_p: MatchHead,
    pub head_g: MatchHead,
    pub head_r: MatchHead,
}

impl Layers {
    fn build(store: &mut ParameterStore, cfg: &ModelConfig, vocab_len: usize) -> Layers {
        let s = cfg.seed;
        let d = cfg.hidden;
        let r2 = 2 * cfg.roi_resolution * cfg.roi_resolution;
        Layers {
            embed: store.init_uniform("embed", ParamKind::Embedding, vocab_len, cfg.word_dim, 1, s),
            gru_p: BiGru::new(store, "gru_p", cfg.word_dim, d, s),
            gru_r: BiGru::new(store, "gru_r", cfg.word_dim, d, s),
            spatial: Mlp::new(store, "spatial", &[r2, cfg.spatial_dim, cfg.spatial_dim], s),
            fuse_obj: Mlp::new(store, "fuse_obj", &[cfg.appearance_dim + cfg.spatial_dim, d, d], s),
            mask: MaskEncoder::new(store, "mask", cfg.mask_grid, cfg.mask_source_grid, cfg.spatial_dim, s),
            fuse_union: Mlp::new(store, "fuse_union", &[cfg.appearance_dim + cfg.spatial_dim, d, d], s),
            pgn: PhraseGraphNet::new(store, d, s),
            vogn: VisualGraphNet::new(store, d, s),
            head_p: MatchHead::new(store, "head_p", d, true, s),
            head_g: MatchHead::new(store, "head_g", d, true, s),
            head_r: MatchHead::new(store, "head_r", d, false, s),
        }
    }
}

/// Language side and pruning scores.
#[derive(Debug, Clone)]
pub struct PhraseForward {
    pub phrases: Var,
    pub relations: Option<Var>,
    pub pgn: Option<Propagation>,
    pub ctx_phrases: Var,
    pub ctx_relations: Option<Var>,
    pub appearance: Var,
    /// Fused features of all proposals, `M x D`.
    pub objects: Var,
    /// Phrase-major `N*M x 1`.
    pub prune_logits: Var,
    pub prune_offsets: Var,
}

/// Pruned visual graph and matching scores.
#[derive(Debug, Clone)]
pub struct GraphForward {
    pub pruned: Vec<PrunedPhrase>,
    pub graph: VisualSceneGraph,
    pub objects: Var,
    pub edges: Option<Var>,
    pub vogn: Option<Propagation>,
    pub ctx_objects: Var,
    pub ctx_edges: Option<Var>,
    /// Phrase-major `N*K x 1`.
    pub node_logits: Var,
    pub node_offsets: Var,
    /// `U x 1`, grouped by language edge.
    pub edge_logits: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub phrase: PhraseForward,
    pub graph: Option<GraphForward>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParameterStore,
    pub layers: Layers,
}

fn offsets_of(values: &Array2<f64>) -> Vec<Offset> {
    values.rows().into_iter().map(|r| Offset::from_slice(&r.to_vec())).collect()
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let layers = Layers::build(&mut store, &config, vocab.len());
        Ok(Model { config, vocab, store, layers })
    }

    /// Rebuild a model and replace every tensor with the one of the same
    /// name in `tensors`, checking shapes.
    pub fn from_tensors(config: ModelConfig, vocab: Vocab, tensors: &[(String, Array2<f64>)]) -> Result<Self> {
        let mut model = Model::new(config, vocab)?;
        let mut seen = vec![false; model.store.len()];
        for (name, value) in tensors {
            let id = model.store.require(name)?;
            let slot = model.store.get_mut(id);
            if slot.dim() != value.dim() {
                return Err(Error::DimensionMismatch { context: "weight tensor", expected: slot.len(), actual: value.len() });
            }
            slot.assign(value);
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("weights lack tensor {:?}", model.store.name(ParamId(missing)))));
        }
        Ok(model)
    }

    pub fn stage_one_params(&self) -> Vec<ParamId> {
        self.store.ids().filter(|id| STAGE_ONE_PREFIXES.iter().any(|p| self.store.name(*id).starts_with(p))).collect()
    }

    fn encode_relations(&self, tape: &mut Tape, input: &SceneInput, word_ids: &[usize]) -> Var {
        let mut rows = Vec::with_capacity(input.relations.len());
        let mut sentence: Option<Var> = None;
        for r in &input.relations {
            let v = match &r.text {
                RelationText::Span(s) => {
                    let states = *sentence.get_or_insert_with(|| {
                        let x = tape.embedding(self.layers.embed, word_ids.to_vec());
                        self.layers.gru_r.encode(tape, x)
                    });
                    phrase_pool(tape, states, s.start, s.end)
                }
                RelationText::Word(w) => {
                    let x = tape.embedding(self.layers.embed, vec![self.vocab.id(w)]);
                    let states = self.layers.gru_r.encode(tape, x);
                    phrase_pool(tape, states, 0, 1)
                }
            };
            rows.push(v);
        }
        tape.concat_rows(&rows)
    }

    /// Phrase encoding, phrase graph and pruning scores over all proposals.
    pub fn forward_phrases(&self, tape: &mut Tape, input: &SceneInput, toggles: &Toggles) -> PhraseForward {
        let cfg = &self.config;
        let n = input.phrases.len();
        let m = input.proposals.len();
        let word_ids = self.vocab.ids(&input.tokens);
        let x = tape.embedding(self.layers.embed, word_ids.clone());
        let states = self.layers.gru_p.encode(tape, x);
        let pooled: Vec<Var> = input.phrases.iter().map(|s| phrase_pool(tape, states, s.start, s.end)).collect();
        let phrases = tape.concat_rows(&pooled);

        let need_relations = !input.relations.is_empty() && (toggles.pgn || toggles.uses_edges());
        let relations = need_relations.then(|| self.encode_relations(tape, input, &word_ids));
        let pgn = match (toggles.pgn, relations) {
            (true, Some(r)) => Some(self.layers.pgn.forward(tape, phrases, r, &input.pairs(), toggles.pgn_relation)),
            _ => None,
        };
        let (ctx_phrases, ctx_relations) = match &pgn {
            Some(p) => (p.nodes, Some(p.edges)),
            None => (phrases, relations),
        };

        let map = CoordinateMap::new(cfg.coord_map, input.canvas);
        let spatial = object_spatial_feature(tape, &self.layers.spatial, &map, &input.proposals, cfg.roi_resolution);
        let appearance = tape.constant(input.appearance.clone());
        let objects = fuse(tape, &self.layers.fuse_obj, appearance, spatial);

        let a = tape.rows(ctx_phrases, (0..n).flat_map(|i| std::iter::repeat_n(i, m)).collect());
        let b = tape.rows(objects, (0..n).flat_map(|_| 0..m).collect());
        let (prune_logits, prune_offsets) = self.layers.head_p.forward(tape, a, b);
        PhraseForward {
            phrases,
            relations,
            pgn,
            ctx_phrases,
            ctx_relations,
            appearance,
            objects,
            prune_logits,
            prune_offsets: prune_offsets.expect("pruning head regresses offsets"),
        }
    }

    /// Pruning, visual graph, visual message passing and matching heads.
    /// `frozen` replaces the pruning decisions computed from the scores.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        input: &SceneInput,
        toggles: &Toggles,
        phrase: &PhraseForward,
        frozen: Option<&[PrunedPhrase]>,
    ) -> Result<GraphForward> {
        let cfg = &self.config;
        let n = input.phrases.len();
        let pruned = match frozen {
            Some(p) => p.to_vec(),
            None => {
                let logits: Vec<f64> = tape.value(phrase.prune_logits).iter().copied().collect();
                let offsets = offsets_of(tape.value(phrase.prune_offsets));
                prune_proposals(&logits, &offsets, &input.proposals, &input.canvas, cfg.top_k)?
            }
        };
        let k = pruned.first().map_or(cfg.top_k, |p| p.proposals.len());
        let use_edges = toggles.uses_edges() && !input.relations.is_empty();
        let relation_pairs = if use_edges { input.pairs() } else { Vec::new() };
        let graph = build_visual_graph(&pruned, &relation_pairs);

        let map = CoordinateMap::new(cfg.coord_map, input.canvas);
        let spatial = object_spatial_feature(tape, &self.layers.spatial, &map, &graph.boxes, cfg.roi_resolution);
        let app = tape.rows(phrase.appearance, graph.sources.clone());
        let objects = fuse(tape, &self.layers.fuse_obj, app, spatial);

        let edges = (!graph.edges.is_empty()).then(|| {
            let mask = self.layers.mask.forward(tape, &edge_regions(&graph));
            let a = tape.rows(phrase.appearance, graph.edges.iter().map(|e| graph.sources[e.source]).collect());
            let b = tape.rows(phrase.appearance, graph.edges.iter().map(|e| graph.sources[e.target]).collect());
            let sum = tape.add(a, b);
            let mean = tape.scale(sum, 0.5);
            fuse(tape, &self.layers.fuse_union, mean, mask)
        });
        let vogn = match (toggles.vogn, edges) {
            (true, Some(e)) => Some(self.layers.vogn.forward(tape, objects, e, &graph, toggles.vogn_relation)),
            _ => None,
        };
        let (ctx_objects, ctx_edges) = match &vogn {
            Some(p) => (p.nodes, Some(p.edges)),
            None => (objects, edges),
        };

        let a = tape.rows(phrase.ctx_phrases, (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect());
        let (node_logits, node_offsets) = self.layers.head_g.forward(tape, a, ctx_objects);
        let edge_logits = match (ctx_edges, phrase.ctx_relations) {
            (Some(e), Some(r)) => {
                let rel = tape.rows(r, graph.edges.iter().map(|e| e.relation).collect());
                Some(self.layers.head_r.forward(tape, rel, e).0)
            }
            _ => None,
        };
        Ok(GraphForward {
            pruned,
            graph,
            objects,
            edges,
            vogn,
            ctx_objects,
            ctx_edges,
            node_logits,
            node_offsets: node_offsets.expect("node head regresses offsets"),
            edge_logits,
        })
    }

    pub fn forward(&self, tape: &mut Tape, input: &SceneInput, toggles: &Toggles, stage_two: bool) -> Result<Forward> {
        input.validate(&self.config)?;
        let phrase = self.forward_phrases(tape, input, toggles);
        let graph = if stage_two { Some(self.forward_graph(tape, input, toggles, &phrase, None)?) } else { None };
        Ok(Forward { phrase, graph })
    }

    /// Scores and candidate boxes for `input`; the balance weight is chosen
    /// later by [`Inference::decode`].
    pub fn infer(&self, input: &SceneInput, toggles: &Toggles) -> Result<Inference> {
        let mut tape = Tape::new(&self.store);
        let fwd = self.forward(&mut tape, input, toggles, toggles.needs_stage_two())?;
        let n = input.phrases.len();
        let m = input.proposals.len();
        let prune_logits: Vec<f64> = tape.value(fwd.phrase.prune_logits).iter().copied().collect();
        let prune_offsets = offsets_of(tape.value(fwd.phrase.prune_offsets));
        let Some(g) = fwd.graph else {
            let pruned = prune_proposals(&prune_logits, &prune_offsets, &input.proposals, &input.canvas, 1)?;
            let mut nodes = Array2::zeros((n, 1));
            let mut boxes = Vec::with_capacity(n);
            for (i, p) in pruned.iter().enumerate() {
                nodes[[i, 0]] = softmax(&prune_logits[i * m..(i + 1) * m])[p.proposals[0]];
                boxes.push(p.refined.clone());
            }
            return Ok(Inference { nodes, edges: Vec::new(), boxes, exhaustive_below: self.config.exhaustive_below, structured: false });
        };
        let k = g.graph.k;
        let node_logits: Vec<f64> = tape.value(g.node_logits).iter().copied().collect();
        let node_offsets = offsets_of(tape.value(g.node_offsets));
        let mut nodes = Array2::zeros((n, k));
        let mut boxes = Vec::with_capacity(n);
        for (i, p) in g.pruned.iter().enumerate() {
            let fused = fuse_node_scores(&p.logits, &node_logits[i * k..(i + 1) * k]);
            for (slot, v) in fused.into_iter().enumerate() {
                nodes[[i, slot]] = v;
            }
            boxes.push((0..k).map(|slot| refine_box(&p.refined[slot], &node_offsets[i * k + slot], &input.canvas)).collect());
        }
        let mut edges = Vec::new();
        if let (Some(el), true) = (g.edge_logits, toggles.sp) {
            let values: Vec<f64> = tape.value(el).iter().copied().collect();
            for (r, rel) in input.relations.iter().enumerate() {
                let rows = g.graph.relation_rows(r);
                edges.push(EdgeScores { subject: rel.subject, object: rel.object, scores: edge_score_matrix(&values[rows], k) });
            }
        }
        Ok(Inference { nodes, edges, boxes, exhaustive_below: self.config.exhaustive_below, structured: toggles.sp })
    }
}

/// Network outputs needed to pick one box per phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// `N x K` node scores.
    pub nodes: Array2<f64>,
    pub edges: Vec<EdgeScores>,
    /// Final box of each candidate, per phrase.
    pub boxes: Vec<Vec<BBox>>,
    pub exhaustive_below: usize,
    pub structured: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhrasePrediction {
    pub candidate: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub phrases: Vec<PhrasePrediction>,
    pub objective: f64,
    pub enumerated: u64,
}

impl Inference {
    pub fn instance(&self, beta: f64) -> MatchInstance {
        let beta = if self.structured { beta } else { 0.0 };
        MatchInstance { nodes: self.nodes.clone(), edges: self.edges.clone(), beta }
    }

    pub fn decode(&self, beta: f64) -> Prediction {
        let inst = self.instance(beta);
        let sol = solve_assignment(&inst, self.exhaustive_below);
        let phrases = sol
            .assignment
            .iter()
            .enumerate()
            .map(|(i, &k)| PhrasePrediction { candidate: k, bbox: self.boxes[i][k], score: self.nodes[[i, k]] })
            .collect();
        Prediction { phrases, objective: sol.objective, enumerated: sol.enumerated }
    }
}
