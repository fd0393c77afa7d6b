//! Language scene graph construction: align a (noisy) dependency-style parse
//! to the given phrases, carry its relations over, and recall missing
//! clothing / body-part relations from the coarse phrase categories.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    People,
    Clothing,
    Bodyparts,
    Animal,
    Vehicles,
    Instruments,
    Scene,
    Other,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::People,
        Category::Clothing,
        Category::Bodyparts,
        Category::Animal,
        Category::Vehicles,
        Category::Instruments,
        Category::Scene,
        Category::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::People => "people",
            Category::Clothing => "clothing",
            Category::Bodyparts => "bodyparts",
            Category::Animal => "animal",
            Category::Vehicles => "vehicles",
            Category::Instruments => "instruments",
            Category::Scene => "scene",
            Category::Other => "other",
        }
    }

    pub fn index(self) -> usize {
        Category::ALL.iter().position(|c| *c == self).unwrap()
    }

    /// Relation word recalled for an isolated phrase of this category.
    pub fn recalled_relation(self) -> Option<&'static str> {
        match self {
            Category::Clothing => Some("wear"),
            Category::Bodyparts => Some("have"),
            _ => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Half-open token interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlap(&self, other: &Span) -> usize {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }

    pub fn check(&self, len: usize) -> Result<()> {
        if self.start >= self.end || self.end > len {
            return Err(Error::SpanOutOfRange { start: self.start, end: self.end, len });
        }
        Ok(())
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<String>);

impl TokenSeq {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::Format("empty token".into()));
        }
        Ok(TokenSeq(tokens))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(text.split_whitespace().map(str::to_owned).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn slice(&self, span: Span) -> &[String] {
        &self.0[span.start..span.end]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GivenPhrase {
    pub id: usize,
    pub span: Span,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseNode {
    pub span: Span,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseEdge {
    pub subject: usize,
    pub object: usize,
    pub relation: String,
    /// Location of the relation words in the sentence, when the parser kept it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<Span>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawParse {
    pub nodes: Vec<ParseNode>,
    pub edges: Vec<ParseEdge>,
}

impl RawParse {
    pub fn validate(&self, len: usize) -> Result<()> {
        for node in &self.nodes {
            node.span.check(len)?;
        }
        for edge in &self.edges {
            if edge.subject >= self.nodes.len() || edge.object >= self.nodes.len() {
                return Err(Error::Format(format!(
                    "parse edge ({}, {}) references a missing node",
                    edge.subject, edge.object
                )));
            }
            if let Some(span) = edge.span {
                span.check(len)?;
            }
        }
        Ok(())
    }
}

/// Directed relation edge between two phrase nodes (indices into `nodes`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangEdge {
    pub subject: usize,
    pub object: usize,
    pub relation: String,
    /// `None` for relation words synthesized by the recall rules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<Span>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSceneGraph {
    pub nodes: Vec<GivenPhrase>,
    pub edges: Vec<LangEdge>,
}

impl LanguageSceneGraph {
    pub fn degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.subject == node || e.object == node).count()
    }

    pub fn is_isolated(&self, node: usize) -> bool {
        self.degree(node) == 0
    }
}

/// Map each parse node to the phrase index with the largest token overlap.
/// Zero overlap leaves the node unmapped; ties go to the earlier phrase.
pub fn align_phrases(parse: &RawParse, phrases: &[GivenPhrase]) -> Vec<Option<usize>> {
    parse
        .nodes
        .iter()
        .map(|node| {
            let mut best: Option<(usize, usize)> = None;
            for (idx, phrase) in phrases.iter().enumerate() {
                let overlap = node.span.overlap(&phrase.span);
                if overlap == 0 {
                    continue;
                }
                best = match best {
                    None => Some((idx, overlap)),
                    Some((b, o)) if overlap > o || (overlap == o && phrase.span.start < phrases[b].span.start) => {
                        Some((idx, overlap))
                    }
                    keep => keep,
                };
            }
            best.map(|(idx, _)| idx)
        })
        .collect()
}

pub fn transfer_relations(parse: &RawParse, alignment: &[Option<usize>]) -> Vec<LangEdge> {
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    for edge in &parse.edges {
        let (Some(i), Some(j)) = (alignment[edge.subject], alignment[edge.object]) else {
            continue;
        };
        if i == j || !seen.insert((i, j)) {
            continue;
        }
        edges.push(LangEdge {
            subject: i,
            object: j,
            relation: edge.relation.clone(),
            span: edge.span,
        });
    }
    edges
}

/// Attach every isolated clothing / body-part phrase to the nearest people
/// phrase (by start-token distance) with a synthetic "wear" / "have" edge.
pub fn recall_missing_relations(mut graph: LanguageSceneGraph) -> LanguageSceneGraph {
    let people: Vec<usize> = (0..graph.nodes.len())
        .filter(|&i| graph.nodes[i].category == Category::People)
        .collect();
    if people.is_empty() {
        return graph;
    }
    for idx in 0..graph.nodes.len() {
        let Some(word) = graph.nodes[idx].category.recalled_relation() else {
            continue;
        };
        if !graph.is_isolated(idx) {
            continue;
        }
        let start = graph.nodes[idx].span.start;
        let subject = people
            .iter()
            .copied()
            .min_by_key(|&p| (graph.nodes[p].span.start.abs_diff(start), graph.nodes[p].span.start))
            .expect("non-empty");
        graph.edges.push(LangEdge {
            subject,
            object: idx,
            relation: word.to_owned(),
            span: None,
        });
    }
    graph
}

pub fn validate_phrases(tokens: &TokenSeq, phrases: &[GivenPhrase]) -> Result<()> {
    for p in phrases {
        p.span.check(tokens.len())?;
    }
    for (a, pa) in phrases.iter().enumerate() {
        for pb in &phrases[a + 1..] {
            if pa.span.overlap(&pb.span) > 0 {
                return Err(Error::Format(format!("phrases {} and {} overlap", pa.id, pb.id)));
            }
        }
    }
    Ok(())
}

pub fn build_scene_graph(tokens: &TokenSeq, parse: &RawParse, phrases: &[GivenPhrase]) -> Result<LanguageSceneGraph> {
    validate_phrases(tokens, phrases)?;
    parse.validate(tokens.len())?;
    let alignment = align_phrases(parse, phrases);
    let edges = transfer_relations(parse, &alignment);
    Ok(recall_missing_relations(LanguageSceneGraph { nodes: phrases.to_vec(), edges }))
}

/// Input document of the `parse-graph` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParseRequest {
    pub tokens: Vec<String>,
    pub phrases: Vec<GivenPhrase>,
    pub parse: RawParse,
}

impl ParseRequest {
    pub fn build(&self) -> Result<LanguageSceneGraph> {
        let tokens = TokenSeq::new(self.tokens.clone())?;
        build_scene_graph(&tokens, &self.parse, &self.phrases)
    }
}
