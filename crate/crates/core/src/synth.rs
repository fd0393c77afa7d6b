//! Seeded synthetic scenes, descriptions, noisy parses and proposals.
//!
//! A scene is a tree of mentioned entities linked by geometric relations,
//! plus unmentioned look-alikes that only the relations can tell apart.

use std::sync::OnceLock;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{Config, WorldConfig};
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::geometry::{encode_offset, iou, union_box, BBox};
use crate::langgraph::{build_scene_graph, Category, GivenPhrase, ParseEdge, ParseNode, RawParse, Span, TokenSeq};
use crate::model::SceneInput;
use crate::train::Example;

pub const COLORS: [&str; 8] = ["red", "blue", "green", "white", "black", "yellow", "brown", "gray"];

pub const RELATIONS: [&str; 12] =
    ["left of", "right of", "above", "below", "next to", "near", "on", "riding", "holding", "playing", "wearing", "with"];

const FUNCTION_WORDS: [&str; 5] = ["a", "two", "and", ".", "the"];

/// Adjectives that carry no grounding signal.
const FILLERS: [&str; 8] = ["small", "large", "young", "old", "little", "big", "tall", "short"];

/// Nouns of each coarse category with their plural forms.
pub fn nouns(category: Category) -> [(&'static str, &'static str); 4] {
    match category {
        Category::People => [("man", "men"), ("woman", "women"), ("boy", "boys"), ("girl", "girls")],
        Category::Clothing => [("shirt", "shirts"), ("hat", "hats"), ("jacket", "jackets"), ("dress", "dresses")],
        Category::Bodyparts => [("hair", "hair"), ("hand", "hands"), ("face", "faces"), ("arm", "arms")],
        Category::Animal => [("dog", "dogs"), ("cat", "cats"), ("horse", "horses"), ("bird", "birds")],
        Category::Vehicles => [("car", "cars"), ("bike", "bikes"), ("bus", "buses"), ("boat", "boats")],
        Category::Instruments => [("guitar", "guitars"), ("drum", "drums"), ("violin", "violins"), ("trumpet", "trumpets")],
        Category::Scene => [("street", "streets"), ("field", "fields"), ("beach", "beaches"), ("wall", "walls")],
        Category::Other => [("ball", "balls"), ("table", "tables"), ("bench", "benches"), ("umbrella", "umbrellas")],
    }
}

/// Every word the generator can emit, plus the recalled relation words.
pub fn vocabulary() -> Vocab {
    let mut words: Vec<&str> = FUNCTION_WORDS.to_vec();
    words.extend(COLORS);
    words.extend(FILLERS);
    for c in Category::ALL {
        for (s, p) in nouns(c) {
            words.push(s);
            words.push(p);
        }
    }
    for r in RELATIONS {
        words.extend(r.split(' '));
    }
    words.extend(["wear", "have"]);
    Vocab::new(words)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub category: Category,
    pub noun: String,
    pub color: usize,
    /// Noise-free appearance of the object.
    pub attributes: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// A mention: one object, or a pair described with a plural noun.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub objects: Vec<usize>,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRelation {
    pub subject: usize,
    pub object: usize,
    pub relation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub canvas: BBox,
    pub objects: Vec<SceneObject>,
    pub entities: Vec<Entity>,
    /// Relations between entities, each child attached to its parent.
    pub relations: Vec<SceneRelation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// First scene seed offset of the split; ranges never overlap.
    pub fn offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1_000_000,
            Split::Test => 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePhrase {
    pub id: usize,
    pub span: Span,
    pub category: Category,
    pub gt: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub tokens: Vec<String>,
    pub phrases: Vec<SamplePhrase>,
    pub parse: RawParse,
    pub proposals: Vec<BBox>,
    pub appearance: Vec<Vec<f64>>,
    pub split: Split,
}

impl GroundingSample {
    pub fn given_phrases(&self) -> Vec<GivenPhrase> {
        self.phrases.iter().map(|p| GivenPhrase { id: p.id, span: p.span, category: p.category }).collect()
    }

    pub fn gt(&self) -> Vec<BBox> {
        self.phrases.iter().map(|p| p.gt).collect()
    }

    pub fn appearance_matrix(&self) -> Result<Array2<f64>> {
        let cols = self.appearance.first().map_or(0, |r| r.len());
        let flat: Vec<f64> = self.appearance.iter().flatten().copied().collect();
        Array2::from_shape_vec((self.appearance.len(), cols), flat).map_err(|e| Error::Format(e.to_string()))
    }

    /// Builds the language graph from the raw parse and packs the network input.
    pub fn to_input(&self, canvas: BBox) -> Result<SceneInput> {
        let tokens = TokenSeq::new(self.tokens.clone())?;
        let graph = build_scene_graph(&tokens, &self.parse, &self.given_phrases())?;
        Ok(SceneInput::from_graph(self.tokens.clone(), &graph, canvas, self.proposals.clone(), self.appearance_matrix()?))
    }
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub scene: SyntheticScene,
    pub sample: GroundingSample,
}

impl Record {
    pub fn example(&self) -> Result<Example> {
        Ok(Example {
            input: self.sample.to_input(self.scene.canvas)?,
            gt: self.sample.gt(),
            categories: self.sample.phrases.iter().map(|p| p.category).collect(),
        })
    }
}

/// Fixed appearance codebook shared by every scene.
struct Codebook {
    nouns: Vec<(Category, &'static str, Vec<f64>)>,
    colors: Vec<Vec<f64>>,
    background: Vec<f64>,
    location: Vec<Vec<f64>>,
}

pub const APPEARANCE_DIM: usize = 16;

/// Extra weight of objects covering part of a proposal, by covered share.
const CONTEXT_WEIGHT: f64 = 0.3;

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let v: f64 = StandardNormal.sample(rng);
    v
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * gauss(rng)).collect()
}

fn codebook() -> &'static Codebook {
    static BOOK: OnceLock<Codebook> = OnceLock::new();
    BOOK.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
        let mut nouns_out = Vec::new();
        for c in Category::ALL {
            let center = gaussian_vec(&mut rng, APPEARANCE_DIM, 1.0);
            for (s, _) in nouns(c) {
                let own = gaussian_vec(&mut rng, APPEARANCE_DIM, 0.6);
                nouns_out.push((c, s, center.iter().zip(own).map(|(a, b)| a + b).collect()));
            }
        }
        let colors = (0..COLORS.len()).map(|_| gaussian_vec(&mut rng, APPEARANCE_DIM, 0.7)).collect();
        let background = gaussian_vec(&mut rng, APPEARANCE_DIM, 1.0);
        let location = (0..4).map(|_| gaussian_vec(&mut rng, APPEARANCE_DIM, 0.5)).collect();
        Codebook { nouns: nouns_out, colors, background, location }
    })
}

fn base_appearance(noun: &str, color: usize) -> Vec<f64> {
    let book = codebook();
    let n = &book.nouns.iter().find(|(_, s, _)| *s == noun).expect("known noun").2;
    n.iter().zip(&book.colors[color]).map(|(a, b)| a + b).collect()
}

/// Seed of item `index` under `master`, well mixed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn size_range(c: Category) -> ([f64; 2], [f64; 2]) {
    match c {
        Category::People => ([14.0, 22.0], [30.0, 45.0]),
        Category::Animal => ([14.0, 22.0], [10.0, 16.0]),
        Category::Vehicles => ([22.0, 32.0], [14.0, 20.0]),
        Category::Instruments => ([7.0, 11.0], [7.0, 11.0]),
        Category::Scene => ([30.0, 45.0], [16.0, 26.0]),
        Category::Other => ([9.0, 15.0], [9.0, 15.0]),
        Category::Clothing | Category::Bodyparts => ([6.0, 10.0], [6.0, 10.0]),
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn horizontal_overlap(a: &BBox, b: &BBox) -> f64 {
    (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0)
}

fn gap(a: &BBox, b: &BBox) -> f64 {
    let dx = (b.x1 - a.x2).max(a.x1 - b.x2).max(0.0);
    let dy = (b.y1 - a.y2).max(a.y1 - b.y2).max(0.0);
    dx.max(dy)
}

/// Permissive reading of `subject relation object`; look-alikes are placed
/// where even this fails.
pub fn loosely_satisfied(relation: &str, s: &BBox, o: &BBox) -> bool {
    let (sc, oc) = (s.center(), o.center());
    match relation {
        "left of" => sc.0 < oc.0,
        "right of" => sc.0 > oc.0,
        "above" => sc.1 < oc.1,
        "below" => sc.1 > oc.1,
        "next to" | "near" => gap(s, o) < 20.0,
        "on" | "riding" => horizontal_overlap(s, o) > 0.0 && sc.1 < oc.1,
        _ => s.intersection_area(o) > 0.0,
    }
}

/// Relation from a parent of category `parent` to a child of category `child`.
fn pick_relation(rng: &mut ChaCha8Rng, parent: Category, child: Category) -> &'static str {
    match (parent, child) {
        (Category::People, Category::Clothing) => "wearing",
        (Category::People, Category::Bodyparts) => "with",
        (Category::People, Category::Instruments) => ["playing", "holding"].choose(rng).expect("non-empty"),
        (Category::People, Category::Animal | Category::Vehicles) if rng.random_bool(0.5) => "riding",
        (_, Category::Scene) if rng.random_bool(0.6) => "on",
        _ => ["left of", "right of", "above", "below", "next to", "near"].choose(rng).expect("non-empty"),
    }
}

/// Box for the object of `relation` given the subject box `s`.
fn place_child(rng: &mut ChaCha8Rng, relation: &str, s: &BBox, category: Category) -> Option<BBox> {
    let (wr, hr) = size_range(category);
    let (mut w, mut h) = (uniform(rng, wr), uniform(rng, hr));
    let (scx, scy) = s.center();
    let (cx, cy) = match relation {
        "left of" => (s.x2 + uniform(rng, [2.0, 20.0]) + w / 2.0, scy + uniform(rng, [-12.0, 12.0])),
        "right of" => (s.x1 - uniform(rng, [2.0, 20.0]) - w / 2.0, scy + uniform(rng, [-12.0, 12.0])),
        "above" => (scx + uniform(rng, [-12.0, 12.0]), s.y2 + uniform(rng, [2.0, 16.0]) + h / 2.0),
        "below" => (scx + uniform(rng, [-12.0, 12.0]), s.y1 - uniform(rng, [2.0, 16.0]) - h / 2.0),
        "next to" | "near" => {
            let g = if relation == "next to" { uniform(rng, [0.5, 5.0]) } else { uniform(rng, [4.0, 12.0]) };
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (scx + side * (s.width() / 2.0 + g + w / 2.0), scy + uniform(rng, [-8.0, 8.0]))
        }
        "on" => {
            w = w.max(s.width() * 1.4);
            (scx + uniform(rng, [-0.2, 0.2]) * w, s.y2 - 0.15 * s.height() + h / 2.0)
        }
        "riding" => (scx + uniform(rng, [-0.15, 0.15]) * w, s.y1 + uniform(rng, [0.6, 0.75]) * s.height() + h / 2.0),
        "holding" | "playing" => (scx + uniform(rng, [-0.25, 0.25]) * s.width(), s.y1 + uniform(rng, [0.45, 0.65]) * s.height()),
        "wearing" | "with" => {
            w = s.width() * uniform(rng, [0.35, 0.7]);
            h = s.height() * uniform(rng, [0.15, 0.3]);
            let top = uniform(rng, [0.0, 0.7 - h / s.height()]);
            (scx + uniform(rng, [-0.1, 0.1]) * s.width(), s.y1 + (top + h / s.height() / 2.0) * s.height())
        }
        _ => return None,
    };
    BBox::from_center(cx, cy, w, h).ok()
}

fn random_box(rng: &mut ChaCha8Rng, canvas: &BBox, category: Category) -> BBox {
    let (wr, hr) = size_range(category);
    let (w, h) = (uniform(rng, wr), uniform(rng, hr));
    let x1 = rng.random_range(canvas.x1..canvas.x2 - w);
    let y1 = rng.random_range(canvas.y1..canvas.y2 - h);
    BBox { x1, y1, x2: x1 + w, y2: y1 + h }
}

fn noisy(rng: &mut ChaCha8Rng, v: &[f64], sigma: f64) -> Vec<f64> {
    v.iter().map(|x| x + sigma * gauss(rng)).collect()
}

/// Relation pairs that must stay close to each other.
fn contained(relation: &str) -> bool {
    matches!(relation, "wearing" | "with" | "holding" | "playing" | "riding" | "on")
}

struct Draft {
    category: Category,
    noun: &'static str,
    color: usize,
    group: bool,
    bbox: BBox,
    parent: Option<(usize, &'static str)>,
}

fn try_generate(rng: &mut ChaCha8Rng, cfg: &WorldConfig, seed: u64) -> Option<SyntheticScene> {
    let canvas = BBox { x1: 0.0, y1: 0.0, x2: cfg.canvas, y2: cfg.canvas };
    let n = rng.random_range(cfg.phrases[0]..=cfg.phrases[1]);
    let mut drafts: Vec<Draft> = Vec::with_capacity(n);
    let root_cats = [Category::People, Category::People, Category::Animal, Category::Vehicles, Category::Other, Category::Scene];
    for idx in 0..n {
        let (category, parent) = if idx == 0 {
            (*root_cats.choose(rng).expect("non-empty"), None)
        } else {
            let mut cat = Category::ALL[rng.random_range(0..8)];
            let people: Vec<usize> = (0..idx).filter(|&i| drafts[i].category == Category::People && !drafts[i].group).collect();
            if matches!(cat, Category::Clothing | Category::Bodyparts) && people.is_empty() {
                cat = *[Category::Animal, Category::Other, Category::Vehicles, Category::People].choose(rng).expect("non-empty");
            }
            let parent = if matches!(cat, Category::Clothing | Category::Bodyparts) {
                *people.choose(rng).expect("non-empty")
            } else {
                let open: Vec<usize> = (0..idx).filter(|&i| !matches!(drafts[i].category, Category::Clothing | Category::Bodyparts)).collect();
                if rng.random_bool(0.5) { 0 } else { *open.choose(rng)? }
            };
            (cat, Some(parent))
        };
        let (noun, _) = *nouns(category).choose(rng).expect("non-empty");
        let color = rng.random_range(0..COLORS.len());
        let group = parent.is_some()
            && !matches!(category, Category::Clothing | Category::Bodyparts | Category::Scene)
            && rng.random_bool(cfg.multi_object);
        let mut placed = None;
        let mut relation = "";
        for _ in 0..40 {
            let b = match parent {
                None => Some(random_box(rng, &canvas, category)),
                Some(p) => {
                    relation = pick_relation(rng, drafts[p].category, category);
                    place_child(rng, relation, &drafts[p].bbox, category)
                }
            };
            let Some(mut b) = b else { continue };
            if group {
                b = BBox::from_center(b.center().0, b.center().1, b.width() * 2.0, b.height()).ok()?;
            }
            if !canvas.contains(&b) {
                continue;
            }
            let clash = drafts.iter().enumerate().any(|(j, d)| {
                let related = parent == Some(j) && contained(relation);
                !related && iou(&d.bbox, &b) > 0.25 && !matches!(d.category, Category::Scene)
            });
            if clash {
                continue;
            }
            placed = Some(b);
            break;
        }
        let bbox = placed?;
        drafts.push(Draft { category, noun, color, group, bbox, parent: parent.map(|p| (p, relation)) });
    }

    let mut objects = Vec::new();
    let mut entities = Vec::new();
    for d in &drafts {
        let attrs = base_appearance(d.noun, d.color);
        let boxes = if d.group {
            let half = d.bbox.width() / 2.0;
            let gapw = 0.08 * half;
            vec![
                BBox { x1: d.bbox.x1, y1: d.bbox.y1, x2: d.bbox.x1 + half - gapw, y2: d.bbox.y2 },
                BBox { x1: d.bbox.x1 + half + gapw, y1: d.bbox.y1, x2: d.bbox.x2, y2: d.bbox.y2 },
            ]
        } else {
            vec![d.bbox]
        };
        let ids: Vec<usize> = boxes
            .into_iter()
            .map(|b| {
                objects.push(SceneObject {
                    id: objects.len(),
                    category: d.category,
                    noun: d.noun.to_owned(),
                    color: d.color,
                    attributes: attrs.clone(),
                    bbox: b,
                });
                objects.len() - 1
            })
            .collect();
        let bbox = ids.iter().map(|&i| objects[i].bbox).reduce(|a, b| union_box(&a, &b)).expect("non-empty");
        entities.push(Entity { objects: ids, bbox });
    }
    let relations: Vec<SceneRelation> = drafts
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.parent.map(|(p, r)| SceneRelation { subject: p, object: i, relation: r.to_owned() }))
        .collect();

    if rng.random_bool(cfg.ambiguity) {
        let candidates: Vec<usize> = (0..drafts.len()).filter(|&i| !drafts[i].group).collect();
        let degree = |i: usize| relations.iter().filter(|r| r.subject == i || r.object == i).count();
        let target = *candidates.choose_weighted(rng, |&i| degree(i) as f64).ok()?;
        let count = rng.random_range(cfg.duplicates[0]..=cfg.duplicates[1]);
        let template = objects[entities[target].objects[0]].clone();
        // Look-alikes break the relation mentioned farthest from the target
        // phrase and keep the others where possible, so telling them apart
        // needs the long-range part of the description.
        let draft = SyntheticScene { seed, canvas, objects: objects.clone(), entities: entities.clone(), relations: relations.clone() };
        let sentence = linearize(&draft);
        let own = sentence.phrase_spans[target];
        let distance = |r: usize| {
            let s = sentence.relation_spans[r];
            if s.start >= own.end { s.start - own.end } else { own.start.saturating_sub(s.end) }
        };
        let touching: Vec<usize> = (0..relations.len()).filter(|&r| relations[r].subject == target || relations[r].object == target).collect();
        let broken = *touching.iter().max_by_key(|&&r| (distance(r), std::cmp::Reverse(r)))?;
        let holds = |r: &SceneRelation, b: &BBox| {
            if r.subject == target {
                loosely_satisfied(&r.relation, b, &entities[r.object].bbox)
            } else {
                loosely_satisfied(&r.relation, &entities[r.subject].bbox, b)
            }
        };
        let partners: Vec<usize> = touching
            .iter()
            .flat_map(|&r| [relations[r].subject, relations[r].object])
            .filter(|&e| e != target)
            .flat_map(|e| entities[e].objects.clone())
            .collect();
        let mut added = 0;
        for attempt in 0..300 {
            if added == count {
                break;
            }
            let b = BBox::from_center(
                rng.random_range(canvas.x1..canvas.x2),
                rng.random_range(canvas.y1..canvas.y2),
                template.bbox.width() * uniform(rng, [0.9, 1.1]),
                template.bbox.height() * uniform(rng, [0.9, 1.1]),
            )
            .ok()?;
            if !canvas.contains(&b) {
                continue;
            }
            let keeps_others = attempt >= 200 || touching.iter().filter(|&&r| r != broken).all(|&r| holds(&relations[r], &b));
            let violates = !holds(&relations[broken], &b) && keeps_others;
            let clash = objects.iter().any(|o| {
                o.category != Category::Scene
                    && !partners.contains(&o.id)
                    && o.bbox.intersection_area(&b) > 0.15 * b.area().min(o.bbox.area())
            }) || objects.iter().any(|o| iou(&o.bbox, &b) > 0.3);
            if !violates || clash {
                continue;
            }
            objects.push(SceneObject { id: objects.len(), bbox: b, ..template.clone() });
            added += 1;
        }
        if added < count.max(1) {
            return None;
        }
    }
    Some(SyntheticScene { seed, canvas, objects, entities, relations })
}

/// Seeded scene; retries internally until a layout satisfies all constraints.
pub fn generate_scene(seed: u64, cfg: &WorldConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    if cfg.max_objects() > cfg.proposals {
        return Err(Error::Config(format!(
            "up to {} objects do not fit in {} proposals",
            cfg.max_objects(),
            cfg.proposals
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..200 {
        if let Some(scene) = try_generate(&mut rng, cfg, seed) {
            return Ok(scene);
        }
    }
    Err(Error::Config("could not lay out a scene; the canvas is too crowded for this configuration".into()))
}

fn describe(scene: &SyntheticScene, entity: usize) -> Vec<String> {
    let obj = &scene.objects[scene.entities[entity].objects[0]];
    let color = COLORS[obj.color].to_owned();
    let h = derive_seed(scene.seed, 0xf111 + entity as u64);
    let fillers = (0..(h % 5) as usize).map(|i| FILLERS[((h >> (8 + 8 * i)) % FILLERS.len() as u64) as usize].to_owned());
    let mut words: Vec<String> = Vec::new();
    if scene.entities[entity].objects.len() > 1 {
        let plural = nouns(obj.category).iter().find(|(s, _)| *s == obj.noun).expect("known noun").1;
        words.push("two".into());
        words.extend(fillers);
        words.extend([color, plural.into()]);
    } else {
        words.push("a".into());
        words.extend(fillers);
        words.extend([color, obj.noun.clone()]);
    }
    words
}

struct Sentence {
    tokens: Vec<String>,
    phrase_spans: Vec<Span>,
    relation_spans: Vec<Span>,
}

fn linearize(scene: &SyntheticScene) -> Sentence {
    let n = scene.entities.len();
    let mut s = Sentence { tokens: Vec::new(), phrase_spans: vec![Span::new(0, 0); n], relation_spans: vec![Span::new(0, 0); scene.relations.len()] };
    fn visit(scene: &SyntheticScene, e: usize, s: &mut Sentence) {
        let start = s.tokens.len();
        s.tokens.extend(describe(scene, e));
        s.phrase_spans[e] = Span::new(start, s.tokens.len());
        let children: Vec<usize> = (0..scene.relations.len()).filter(|&r| scene.relations[r].subject == e).collect();
        for &r in &children {
            let rs = s.tokens.len();
            s.tokens.extend(scene.relations[r].relation.split(' ').map(str::to_owned));
            s.relation_spans[r] = Span::new(rs, s.tokens.len());
            visit(scene, scene.relations[r].object, s);
        }
    }
    visit(scene, 0, &mut s);
    // Entities detached from the root tree (none with the current generator) are appended.
    for e in 0..n {
        if s.phrase_spans[e].is_empty() {
            s.tokens.push("and".into());
            let start = s.tokens.len();
            s.tokens.extend(describe(scene, e));
            s.phrase_spans[e] = Span::new(start, s.tokens.len());
        }
    }
    s.tokens.push(".".into());
    s
}

/// Proposal boxes: a jittered copy of every object and merged group box,
/// near misses around objects, then random boxes up to `cfg.proposals`.
pub fn generate_proposals(scene: &SyntheticScene, cfg: &WorldConfig, jitter: f64, seed: u64) -> Result<Vec<BBox>> {
    let m = cfg.proposals;
    let mut targets: Vec<BBox> = scene.objects.iter().map(|o| o.bbox).collect();
    targets.extend(scene.entities.iter().filter(|e| e.objects.len() > 1).map(|e| e.bbox));
    if m < targets.len() {
        return Err(Error::TooFewProposals { k: targets.len(), m });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canvas = scene.canvas;
    let mut out = Vec::with_capacity(m);
    for t in &targets {
        if jitter == 0.0 {
            out.push(*t);
            continue;
        }
        let mut best = *t;
        for _ in 0..100 {
            let (cx, cy) = t.center();
            let s = 0.12 * jitter;
            let cand = BBox::from_center(
                cx + s * t.width() * gauss(&mut rng),
                cy + s * t.height() * gauss(&mut rng),
                t.width() * (s * gauss(&mut rng)).exp(),
                t.height() * (s * gauss(&mut rng)).exp(),
            )
            .map(|b| b.clip_to(&canvas, 1.0))
            .unwrap_or(*t);
            let v = iou(&cand, t);
            if (0.5..=0.95).contains(&v) {
                best = cand;
                break;
            }
        }
        out.push(best);
    }
    let mut near = 0;
    let mut guard = 0;
    while near < cfg.near_distractors && out.len() < m && guard < 1000 {
        guard += 1;
        let t = targets[rng.random_range(0..targets.len())];
        let (cx, cy) = t.center();
        let cand = BBox::from_center(
            cx + uniform(&mut rng, [-0.6, 0.6]) * t.width(),
            cy + uniform(&mut rng, [-0.6, 0.6]) * t.height(),
            t.width() * uniform(&mut rng, [0.6, 1.5]),
            t.height() * uniform(&mut rng, [0.6, 1.5]),
        )
        .map(|b| b.clip_to(&canvas, 1.0));
        if let Ok(c) = cand {
            let v = iou(&c, &t);
            if (0.15..0.45).contains(&v) && targets.iter().all(|o| iou(&c, o) < 0.5) {
                out.push(c);
                near += 1;
            }
        }
    }
    while out.len() < m {
        let w = uniform(&mut rng, [5.0, 40.0]) * canvas.width() / 100.0;
        let h = uniform(&mut rng, [5.0, 40.0]) * canvas.height() / 100.0;
        let x1 = rng.random_range(canvas.x1..canvas.x2 - w);
        let y1 = rng.random_range(canvas.y1..canvas.y2 - h);
        let c = BBox { x1, y1, x2: x1 + w, y2: y1 + h };
        if targets.iter().all(|o| iou(&c, o) < 0.5) {
            out.push(c);
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Appearance of a proposal: overlap-weighted mix of object appearances and
/// background, plus a code of where the dominant object sits in the box.
fn proposal_appearance(rng: &mut ChaCha8Rng, scene: &SyntheticScene, object_app: &[Vec<f64>], b: &BBox, sigma: f64) -> Vec<f64> {
    let book = codebook();
    let bg_weight = 0.15;
    let mut mix: Vec<f64> = book.background.iter().map(|v| v * bg_weight).collect();
    let mut total = bg_weight;
    let mut dominant: Option<(f64, usize)> = None;
    for (o, app) in scene.objects.iter().zip(object_app) {
        let overlap = iou(b, &o.bbox);
        if overlap <= 0.0 {
            continue;
        }
        let w = overlap + CONTEXT_WEIGHT * b.intersection_area(&o.bbox) / b.area();
        for (m, a) in mix.iter_mut().zip(app) {
            *m += w * a;
        }
        total += w;
        if dominant.is_none_or(|(bw, _)| overlap > bw) {
            dominant = Some((overlap, o.id));
        }
    }
    for m in mix.iter_mut() {
        *m /= total;
    }
    if let Some((w, id)) = dominant {
        let code = encode_offset(b, &scene.objects[id].bbox).to_array();
        for (c, row) in code.iter().zip(&book.location) {
            let c = c.clamp(-2.0, 2.0) * w.sqrt();
            for (m, l) in mix.iter_mut().zip(row) {
                *m += c * l;
            }
        }
    }
    noisy(rng, &mix, sigma)
}

/// Sentence, phrases, noisy parse, proposals and appearance features.
pub fn render_sample(scene: &SyntheticScene, cfg: &WorldConfig, split: Split, seed: u64) -> Result<GroundingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentence = linearize(scene);
    let n_tok = sentence.tokens.len();
    let phrases: Vec<SamplePhrase> = scene
        .entities
        .iter()
        .enumerate()
        .map(|(i, e)| SamplePhrase {
            id: i,
            span: sentence.phrase_spans[i],
            category: scene.objects[e.objects[0]].category,
            gt: e.bbox,
        })
        .collect();

    let mut node_of = vec![None; phrases.len()];
    let mut parse = RawParse::default();
    for (i, p) in phrases.iter().enumerate() {
        if rng.random_bool(cfg.node_drop) {
            continue;
        }
        let mut span = p.span;
        if rng.random_bool(cfg.span_jitter) {
            let shift: i64 = if rng.random_bool(0.5) { 1 } else { -1 };
            let s = (span.start as i64 + shift).clamp(0, n_tok as i64 - 1) as usize;
            let e = (span.end as i64 + shift).clamp(s as i64 + 1, n_tok as i64) as usize;
            span = Span::new(s, e);
        }
        node_of[i] = Some(parse.nodes.len());
        parse.nodes.push(ParseNode { span, text: sentence.tokens[span.start..span.end].join(" ") });
    }
    for (r, rel) in scene.relations.iter().enumerate() {
        if rng.random_bool(cfg.edge_drop) {
            continue;
        }
        if let (Some(s), Some(o)) = (node_of[rel.subject], node_of[rel.object]) {
            parse.edges.push(ParseEdge { subject: s, object: o, relation: rel.relation.clone(), span: Some(sentence.relation_spans[r]) });
        }
    }

    let object_app: Vec<Vec<f64>> = scene.objects.iter().map(|o| noisy(&mut rng, &o.attributes, cfg.appearance_noise)).collect();
    let proposals = generate_proposals(scene, cfg, cfg.jitter, derive_seed(seed, 1))?;
    let appearance = proposals.iter().map(|b| proposal_appearance(&mut rng, scene, &object_app, b, cfg.proposal_noise)).collect();
    Ok(GroundingSample { tokens: sentence.tokens, phrases, parse, proposals, appearance, split })
}

/// Scene and sample `index` of `split`.
pub fn generate_record(master: u64, split: Split, index: usize, cfg: &WorldConfig) -> Result<Record> {
    let seed = derive_seed(master, split.offset() + index as u64);
    let scene = generate_scene(seed, cfg)?;
    let sample = render_sample(&scene, cfg, split, derive_seed(seed, 0x51))?;
    Ok(Record { scene, sample })
}

pub fn generate_split(master: u64, split: Split, count: usize, cfg: &WorldConfig) -> Result<Vec<Record>> {
    (0..count).map(|i| generate_record(master, split, i, cfg)).collect()
}

/// One JSON object per line.
pub fn to_jsonl(records: &[Record]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<Record>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Records of `split`: read from the configured file when one is set,
/// generated otherwise.
pub fn load_split(config: &Config, split: Split) -> Result<Vec<Record>> {
    let d = &config.data;
    let (path, count) = match split {
        Split::Train => (&d.train_path, d.train),
        Split::Val => (&d.val_path, d.val),
        Split::Test => (&d.test_path, d.test),
    };
    match path {
        Some(p) => from_jsonl(&std::fs::read_to_string(p)?),
        None => generate_split(d.seed, split, count, &config.world),
    }
}

/// Network inputs of every record.
pub fn examples(records: &[Record]) -> Result<Vec<Example>> {
    records.iter().map(Record::example).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = WorldConfig::default();
        assert_eq!(generate_scene(5, &cfg).unwrap(), generate_scene(5, &cfg).unwrap());
        assert_ne!(generate_scene(5, &cfg).unwrap(), generate_scene(6, &cfg).unwrap());
    }

    #[test]
    fn vocabulary_covers_generated_tokens() {
        let cfg = WorldConfig::default();
        let vocab = vocabulary();
        for i in 0..50 {
            let r = generate_record(1, Split::Train, i, &cfg).unwrap();
            assert!(r.sample.tokens.iter().all(|t| vocab.id(t) != 0), "{:?}", r.sample.tokens);
        }
    }

    #[test]
    fn zero_jitter_keeps_gt_boxes() {
        let cfg = WorldConfig::default();
        let scene = generate_scene(3, &cfg).unwrap();
        let props = generate_proposals(&scene, &cfg, 0.0, 9).unwrap();
        for o in &scene.objects {
            assert!(props.contains(&o.bbox));
        }
    }
}
