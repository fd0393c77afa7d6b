//! Central finite-difference checks of the analytic gradients of every
//! parameterized operation.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LossWeights, ModelConfig, Toggles, WorldConfig};
use crate::encoders::{fuse, object_spatial_feature, BiGru, CoordinateMap, GruCell, MaskEncoder, Mlp};
use crate::error::{Error, Result};
use crate::geometry::{union_box, BBox};
use crate::loss::{loss_terms, stage1_loss, stage2_loss};
use crate::model::{Model, SceneInput};
use crate::params::{GradientMap, ParameterStore};
use crate::phrase_graph::PhraseGraphNet;
use crate::synth::{generate_record, vocabulary, Split};
use crate::tape::{Tape, Var};
use crate::visual_graph::{build_visual_graph, MatchHead, PrunedPhrase, VisualGraphNet};

/// Names accepted by [`check_op`].
pub const OPS: [&str; 13] =
    ["mlp", "gru", "bigru", "spatial", "mask", "fuse", "match_head", "pgn", "vogn", "soft_ce", "smooth_l1", "stage1", "stage2"];

pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub seed: u64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_abs_error).fold(0.0, f64::max)
    }
}

/// Compare the analytic gradient of `loss` with central differences for
/// every entry of every tensor in `store`.
pub fn check_store<F>(store: &mut ParameterStore, loss: F) -> Vec<TensorCheck>
where
    F: Fn(&mut Tape) -> Var,
{
    let eval = |store: &ParameterStore| {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape);
        tape.scalar(l)
    };
    let analytic: GradientMap = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape);
        tape.backward(l)
    };
    let ids: Vec<_> = store.ids().collect();
    ids.into_iter()
        .map(|id| {
            let shape = store.get(id).dim();
            let mut worst: f64 = 0.0;
            let mut worst_abs: f64 = 0.0;
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let orig = store.get(id)[[r, c]];
                    store.get_mut(id)[[r, c]] = orig + STEP;
                    let plus = eval(store);
                    store.get_mut(id)[[r, c]] = orig - STEP;
                    let minus = eval(store);
                    store.get_mut(id)[[r, c]] = orig;
                    let numeric = (plus - minus) / (2.0 * STEP);
                    let a = analytic.get(id).map_or(0.0, |g| g[[r, c]]);
                    worst = worst.max(relative_error(a, numeric));
                    worst_abs = worst_abs.max((a - numeric).abs());
                }
            }
            TensorCheck { name: store.name(id).to_owned(), entries: shape.0 * shape.1, max_rel_error: worst, max_abs_error: worst_abs }
        })
        .collect()
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn random_box(rng: &mut ChaCha8Rng, canvas: f64) -> BBox {
    let x1 = rng.random_range(0.0..canvas * 0.7);
    let y1 = rng.random_range(0.0..canvas * 0.7);
    let w = rng.random_range(canvas * 0.1..canvas * 0.3);
    let h = rng.random_range(canvas * 0.1..canvas * 0.3);
    BBox::new(x1, y1, x1 + w, y1 + h).expect("positive extent")
}

/// Move every parameter off its initialization so no check sits at a
/// special point.
fn jitter(store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
    }
}

/// `sum(out * probe)` for a fixed random probe, reducing any output to a
/// scalar that depends on every entry.
fn probe(tape: &mut Tape, out: Var, weights: &Array2<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w);
    tape.sum_all(prod)
}

fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        word_dim: 4,
        hidden: 4,
        spatial_dim: 3,
        appearance_dim: crate::synth::APPEARANCE_DIM,
        roi_resolution: 2,
        coord_map: 6,
        mask_grid: 4,
        mask_source_grid: 8,
        top_k: 2,
        exhaustive_below: 6,
        toggles: Toggles::FULL,
        seed,
    }
}

/// A small generated scene with at least two phrases and one relation.
fn tiny_scene(seed: u64) -> Result<(SceneInput, Vec<BBox>)> {
    let world = WorldConfig { phrases: [2, 3], duplicates: [1, 1], proposals: 8, near_distractors: 1, ..WorldConfig::default() };
    for index in 0..200 {
        let ex = generate_record(seed, Split::Train, index, &world)?.example()?;
        if ex.input.phrases.len() >= 2 && !ex.input.relations.is_empty() {
            return Ok((ex.input, ex.gt));
        }
    }
    Err(Error::Config("no small scene with a relation".into()))
}

fn check_model(seed: u64, stage_two: bool) -> Result<Vec<TensorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (input, gt) = tiny_scene(seed)?;
    let mut model = Model::new(tiny_model_config(seed), vocabulary())?;
    jitter(&mut model.store, &mut rng);
    let toggles = Toggles::FULL;
    let weights = LossWeights::default();
    let tau = 0.5;
    // Pruning picks discrete indices; hold them fixed across perturbations.
    let frozen: Vec<PrunedPhrase> = {
        let mut tape = Tape::new(&model.store);
        model.forward(&mut tape, &input, &toggles, true)?.graph.expect("stage two forward").pruned
    };
    let layers = model.layers.clone();
    let cfg = model.config.clone();
    let vocab = model.vocab.clone();
    let shell = Model { config: cfg, vocab, store: ParameterStore::new(), layers };
    let loss = |tape: &mut Tape| {
        let phrase = shell.forward_phrases(tape, &input, &toggles);
        let graph = stage_two.then(|| shell.forward_graph(tape, &input, &toggles, &phrase, Some(&frozen)).expect("frozen graph"));
        let fwd = crate::model::Forward { phrase, graph };
        let terms = loss_terms(tape, &fwd, &input, &gt, tau).expect("aligned ground truth");
        if stage_two {
            stage2_loss(tape, &terms, &weights)
        } else {
            stage1_loss(tape, &terms, &weights)
        }
    };
    Ok(check_store(&mut model.store, loss))
}

/// Run the check named `op` at the random point drawn from `seed`.
pub fn check_op(op: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6ead_c0de);
    let mut store = ParameterStore::new();
    let tensors = match op {
        "mlp" => {
            let mlp = Mlp::new(&mut store, "mlp", &[5, 4, 3], seed);
            jitter(&mut store, &mut rng);
            let x = random(&mut rng, 3, 5);
            let p = random(&mut rng, 3, 3);
            check_store(&mut store, |t| {
                let xv = t.constant(x.clone());
                let y = mlp.forward(t, xv);
                probe(t, y, &p)
            })
        }
        "gru" => {
            let cell = GruCell::new(&mut store, "gru", 3, 4, seed);
            jitter(&mut store, &mut rng);
            let x = random(&mut rng, 4, 3);
            let p = random(&mut rng, 4, 4);
            check_store(&mut store, |t| {
                let xv = t.constant(x.clone());
                let states = cell.run(t, xv, &[0, 1, 2, 3]);
                let y = t.concat_rows(&states);
                probe(t, y, &p)
            })
        }
        "bigru" => {
            let enc = BiGru::new(&mut store, "bigru", 3, 4, seed);
            jitter(&mut store, &mut rng);
            let x = random(&mut rng, 5, 3);
            let p = random(&mut rng, 5, 4);
            check_store(&mut store, |t| {
                let xv = t.constant(x.clone());
                let y = enc.encode(t, xv);
                probe(t, y, &p)
            })
        }
        "spatial" => {
            let mlp = Mlp::new(&mut store, "spatial", &[8, 4, 3], seed);
            jitter(&mut store, &mut rng);
            let canvas = BBox::new(0.0, 0.0, 100.0, 100.0)?;
            let boxes: Vec<BBox> = (0..3).map(|_| random_box(&mut rng, 100.0)).collect();
            let p = random(&mut rng, 3, 3);
            let map = CoordinateMap::new(6, canvas);
            check_store(&mut store, |t| {
                let y = object_spatial_feature(t, &mlp, &map, &boxes, 2);
                probe(t, y, &p)
            })
        }
        "mask" => {
            let enc = MaskEncoder::new(&mut store, "mask", 4, 8, 3, seed);
            jitter(&mut store, &mut rng);
            let pairs: Vec<(BBox, BBox, BBox)> = (0..3)
                .map(|_| {
                    let a = random_box(&mut rng, 100.0);
                    let b = random_box(&mut rng, 100.0);
                    (a, b, union_box(&a, &b))
                })
                .collect();
            let p = random(&mut rng, 3, 3);
            check_store(&mut store, |t| {
                let y = enc.forward(t, &pairs);
                probe(t, y, &p)
            })
        }
        "fuse" => {
            let mlp = Mlp::new(&mut store, "fuse", &[5, 4, 4], seed);
            jitter(&mut store, &mut rng);
            let a = random(&mut rng, 3, 3);
            let s = random(&mut rng, 3, 2);
            let p = random(&mut rng, 3, 4);
            check_store(&mut store, |t| {
                let av = t.constant(a.clone());
                let sv = t.constant(s.clone());
                let y = fuse(t, &mlp, av, sv);
                probe(t, y, &p)
            })
        }
        "match_head" => {
            let head = MatchHead::new(&mut store, "head", 4, true, seed);
            jitter(&mut store, &mut rng);
            let a = random(&mut rng, 3, 4);
            let b = random(&mut rng, 3, 4);
            let p = random(&mut rng, 3, 1);
            let q = random(&mut rng, 3, 4);
            check_store(&mut store, |t| {
                let av = t.constant(a.clone());
                let bv = t.constant(b.clone());
                let (logits, offsets) = head.forward(t, av, bv);
                let l1 = probe(t, logits, &p);
                let l2 = probe(t, offsets.expect("offset branch"), &q);
                t.add(l1, l2)
            })
        }
        "pgn" => {
            let net = PhraseGraphNet::new(&mut store, 4, seed);
            jitter(&mut store, &mut rng);
            let nodes = random(&mut rng, 3, 4);
            let edges = random(&mut rng, 3, 4);
            let pairs = [(0, 1), (1, 2), (2, 0)];
            let p = random(&mut rng, 3, 4);
            let q = random(&mut rng, 3, 4);
            check_store(&mut store, |t| {
                let nv = t.constant(nodes.clone());
                let ev = t.constant(edges.clone());
                let out = net.forward(t, nv, ev, &pairs, true);
                let l1 = probe(t, out.nodes, &p);
                let l2 = probe(t, out.edges, &q);
                t.add(l1, l2)
            })
        }
        "vogn" => {
            let net = VisualGraphNet::new(&mut store, 4, seed);
            jitter(&mut store, &mut rng);
            let phrase = PrunedPhrase {
                proposals: vec![0, 1],
                logits: vec![0.0; 2],
                probs: vec![0.5; 2],
                refined: vec![BBox::new(0.0, 0.0, 1.0, 1.0)?; 2],
            };
            let graph = build_visual_graph(&[phrase.clone(), phrase.clone(), phrase], &[(0, 1), (1, 2)]);
            let nodes = random(&mut rng, graph.boxes.len(), 4);
            let edges = random(&mut rng, graph.edges.len(), 4);
            let p = random(&mut rng, graph.boxes.len(), 4);
            let q = random(&mut rng, graph.edges.len(), 4);
            check_store(&mut store, |t| {
                let nv = t.constant(nodes.clone());
                let ev = t.constant(edges.clone());
                let out = net.forward(t, nv, ev, &graph, true);
                let l1 = probe(t, out.nodes, &p);
                let l2 = probe(t, out.edges, &q);
                t.add(l1, l2)
            })
        }
        "soft_ce" => {
            let w = store.insert("logits", crate::params::ParamKind::Weight, random(&mut rng, 6, 1));
            let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let target: Vec<f64> = raw.iter().map(|v| v / total).collect();
            check_store(&mut store, |t| {
                let logits = t.embedding(w, (0..6).collect());
                t.soft_cross_entropy(logits, target.clone())
            })
        }
        "smooth_l1" => {
            let w = store.insert("pred", crate::params::ParamKind::Weight, random(&mut rng, 3, 4) * 2.0);
            let target = random(&mut rng, 3, 4);
            let weights: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
            check_store(&mut store, |t| {
                let pred = t.embedding(w, vec![0, 1, 2]);
                t.smooth_l1(pred, target.clone(), weights.clone())
            })
        }
        "stage1" => check_model(seed, false)?,
        "stage2" => check_model(seed, true)?,
        other => return Err(Error::Config(format!("unknown gradient check {other:?}; expected one of {}", OPS.join(", ")))),
    };
    Ok(GradCheckReport { op: op.to_owned(), seed, tensors })
}
