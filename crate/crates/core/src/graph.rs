//! Scene-graph conditions and their fusion with the scene matrix.
//!
//! A condition graph is merged into a fully connected digraph over all `N`
//! rows in which every ordered pair starts out with the `neutral` relation.
//! Typed condition edges replace the neutral edge of their pair. Masking for
//! classifier-free guidance reverts every edge to neutral and zeroes the
//! label embeddings.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::EMPTY_LABEL;
use crate::tensor::{Precision, Tensor};

pub const NEUTRAL: &str = "neutral";
pub const NEUTRAL_INDEX: usize = 0;
/// Width of a label embedding.
pub const EMBED_DIM: usize = 300;

/// Spatial relations with a geometric predicate, in canonical order.
pub const CANONICAL_RELATIONS: [&str; 8] = [
    "left",
    "right",
    "front",
    "behind",
    "above",
    "below",
    "close-by",
    "standing-on",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct RelationVocab {
    names: Vec<String>,
}

impl RelationVocab {
    /// Builds a vocabulary from relation names; `neutral` is prepended at
    /// index 0 if the list does not already start with it.
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut out = vec![NEUTRAL.to_string()];
        let mut seen = HashSet::new();
        seen.insert(NEUTRAL.to_string());
        for (i, n) in names.iter().enumerate() {
            let n = n.as_ref();
            if i == 0 && n == NEUTRAL {
                continue;
            }
            if !seen.insert(n.to_string()) {
                return Err(Error::invalid(format!("duplicate relation name `{n}`")));
            }
            out.push(n.to_string());
        }
        Ok(Self { names: out })
    }

    /// `neutral` plus the eight canonical spatial relations.
    pub fn canonical() -> Self {
        Self::new(&CANONICAL_RELATIONS).expect("canonical names are unique")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownRelation(name.to_string()))
    }
}

impl TryFrom<Vec<String>> for RelationVocab {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<RelationVocab> for Vec<String> {
    fn from(v: RelationVocab) -> Self {
        v.names
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GraphEdge {
    pub source: usize,
    pub relation: usize,
    pub target: usize,
}

impl GraphEdge {
    pub fn new(source: usize, relation: usize, target: usize) -> Self {
        Self {
            source,
            relation,
            target,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneGraph {
    pub node_labels: Vec<String>,
    pub edges: Vec<GraphEdge>,
}

impl SceneGraph {
    pub fn new(node_labels: Vec<String>, edges: Vec<GraphEdge>) -> Self {
        Self { node_labels, edges }
    }

    pub fn node_count(&self) -> usize {
        self.node_labels.len()
    }

    /// Relabels nodes: node `i` of `self` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut labels = vec![String::new(); self.node_labels.len()];
        for (i, l) in self.node_labels.iter().enumerate() {
            labels[perm[i]] = l.clone();
        }
        let edges = self
            .edges
            .iter()
            .map(|e| GraphEdge::new(perm[e.source], e.relation, perm[e.target]))
            .collect();
        Self::new(labels, edges)
    }
}

/// One entry per violated invariant; an empty list means the graph is valid.
pub fn validate_graph(
    graph: &SceneGraph,
    relations: &RelationVocab,
    labels: &[String],
    n_max: usize,
) -> Vec<String> {
    let mut out = Vec::new();
    let n = graph.node_count();
    if n > n_max {
        out.push(format!("graph has {n} nodes but at most {n_max} are representable"));
    }
    for l in &graph.node_labels {
        if !labels.iter().any(|k| k == l) {
            out.push(format!("unknown label `{l}`"));
        }
    }
    let mut seen = HashSet::new();
    for e in &graph.edges {
        let rel = relations.name(e.relation);
        let fmt = || {
            format!(
                "({},{},{})",
                e.source,
                rel.map_or_else(|| e.relation.to_string(), str::to_string),
                e.target
            )
        };
        if e.source >= n || e.target >= n {
            out.push(format!("edge {} references a missing node", fmt()));
        }
        if e.source == e.target {
            out.push(format!("self edge {}", fmt()));
        }
        match rel {
            None => out.push(format!("edge {} has unknown relation index", fmt())),
            Some(NEUTRAL) => out.push(format!("edge {} uses the reserved neutral relation", fmt())),
            Some(_) => {}
        }
        if !seen.insert(*e) {
            out.push(format!("duplicate edge {}", fmt()));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingProvenance {
    HashDerived,
    LoadedPretrained,
    Learned,
}

/// Fixed map from label to a 300-dimensional vector; `empty` maps to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbedder {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    table: Tensor,
    provenance: EmbeddingProvenance,
}

fn fnv1a(seed: u64, s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl LabelEmbedder {
    /// Seeded pseudo-random unit vectors, one per label, derived from a hash
    /// of `(seed, label)` so each row is independent of the vocabulary order.
    pub fn hash_derived<S: AsRef<str>>(labels: &[S], seed: u64) -> Self {
        let mut names = Vec::new();
        let mut data = Vec::new();
        for l in labels {
            let l = l.as_ref();
            if names.iter().any(|n: &String| n == l) {
                continue;
            }
            names.push(l.to_string());
            if l == EMPTY_LABEL {
                data.extend(std::iter::repeat_n(0.0, EMBED_DIM));
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, l));
            let v: Vec<f64> = (0..EMBED_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.iter().map(|x| x / n));
        }
        Self::from_parts(names, data, EmbeddingProvenance::HashDerived)
            .expect("table built with matching dimensions")
    }

    fn from_parts(mut labels: Vec<String>, mut data: Vec<f64>, provenance: EmbeddingProvenance) -> Result<Self> {
        if !labels.iter().any(|l| l == EMPTY_LABEL) {
            labels.push(EMPTY_LABEL.to_string());
            data.extend(std::iter::repeat_n(0.0, EMBED_DIM));
        }
        let table = Tensor::new(vec![labels.len(), EMBED_DIM], data)?;
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Ok(Self {
            labels,
            index,
            table,
            provenance,
        })
    }

    /// Rebuilds an embedder from a stored table (e.g. from a checkpoint).
    pub fn from_table(labels: Vec<String>, table: Tensor, provenance: EmbeddingProvenance) -> Result<Self> {
        if table.shape() != [labels.len(), EMBED_DIM] {
            return Err(Error::Shape {
                op: "embedding_table",
                lhs: table.shape().to_vec(),
                rhs: vec![labels.len(), EMBED_DIM],
            });
        }
        Self::from_parts(labels, table.into_data(), provenance)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn provenance(&self) -> EmbeddingProvenance {
        self.provenance
    }

    /// The same table with every entry rounded to `precision`.
    pub fn rounded(mut self, precision: Precision) -> Self {
        precision.round_slice(self.table.data_mut());
        self
    }

    pub fn embedding(&self, label: &str) -> Result<&[f64]> {
        self.index
            .get(label)
            .map(|&i| self.table.row(i))
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// Reads `label v1 … v300` lines. Blank lines and `#` comments are skipped.
    pub fn read_text<R: Read>(reader: R, source: &Path) -> Result<Self> {
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                message,
            };
            let mut parts = line.split_whitespace();
            let label = parts.next().expect("non-empty line").to_string();
            let values = parts
                .map(|p| p.parse::<f64>().map_err(|e| parse_err(format!("{p}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != EMBED_DIM {
                return Err(parse_err(format!(
                    "expected {EMBED_DIM} values for `{label}`, found {}",
                    values.len()
                )));
            }
            if labels.contains(&label) {
                return Err(parse_err(format!("duplicate label `{label}`")));
            }
            if label == EMPTY_LABEL && values.iter().any(|&v| v != 0.0) {
                return Err(parse_err("`empty` must map to the zero vector".into()));
            }
            labels.push(label);
            data.extend(values);
        }
        Self::from_parts(labels, data, EmbeddingProvenance::LoadedPretrained)
    }

    pub fn load_text(path: &Path) -> Result<Self> {
        Self::read_text(fs::File::open(path)?, path)
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, l) in self.labels.iter().enumerate() {
            write!(w, "{l}")?;
            for v in self.table.row(i) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// `n × 300` label embeddings for a graph; rows past the graph size are zero.
pub fn embed_labels(graph: &SceneGraph, embedder: &LabelEmbedder, n: usize) -> Result<Tensor> {
    if graph.node_count() > n {
        return Err(Error::invalid(format!(
            "graph has {} nodes but only {n} rows are available",
            graph.node_count()
        )));
    }
    let mut out = Tensor::zeros(&[n, EMBED_DIM]);
    for (i, l) in graph.node_labels.iter().enumerate() {
        out.row_mut(i).copy_from_slice(embedder.embedding(l)?);
    }
    Ok(out)
}

/// Fully connected relational view of a scene matrix plus its condition.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedGraph {
    pub node_features: Tensor,
    /// Exactly one edge per ordered pair `(i, j)`, `i ≠ j`, sorted by `(source, target)`.
    pub edges: Vec<GraphEdge>,
    pub label_embeddings: Tensor,
    /// Rows that carry a real (non-empty, unmasked) label.
    pub present: Vec<bool>,
}

impl FusedGraph {
    pub fn node_count(&self) -> usize {
        self.present.len()
    }

    pub fn typed_edge_count(&self) -> usize {
        self.edges.iter().filter(|e| e.relation != NEUTRAL_INDEX).count()
    }

    /// Same condition, new node features.
    pub fn with_features(&self, features: Tensor) -> Self {
        Self {
            node_features: features,
            ..self.clone()
        }
    }

    /// Keeps labels but reverts all typed edges to neutral.
    pub fn without_relations(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.edges {
            e.relation = NEUTRAL_INDEX;
        }
        out
    }
}

fn neutral_edges(n: usize) -> Vec<GraphEdge> {
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                edges.push(GraphEdge::new(i, NEUTRAL_INDEX, j));
            }
        }
    }
    edges
}

/// Merges a condition graph into the fully connected neutral digraph over
/// the rows of `scene_rows`.
pub fn fuse_condition(scene_rows: &Tensor, graph: &SceneGraph, embedder: &LabelEmbedder) -> Result<FusedGraph> {
    let n = scene_rows.rows();
    let labels = embed_labels(graph, embedder, n)?;
    let k = graph.node_count();
    let mut edges = neutral_edges(n);
    for e in &graph.edges {
        for idx in [e.source, e.target] {
            if idx >= k {
                return Err(Error::IndexOutOfRange {
                    what: "condition graph nodes",
                    index: idx,
                    len: k,
                });
            }
        }
        if e.source == e.target {
            return Err(Error::invalid(format!(
                "self edge on node {}; self-connections are implicit",
                e.source
            )));
        }
        if e.relation == NEUTRAL_INDEX {
            return Err(Error::invalid("condition edges may not use the neutral relation"));
        }
        // Row-major pair index with the diagonal removed.
        let slot = e.source * (n - 1) + if e.target > e.source { e.target - 1 } else { e.target };
        edges[slot].relation = e.relation;
    }
    let present = (0..n)
        .map(|i| i < k && graph.node_labels[i] != EMPTY_LABEL)
        .collect();
    Ok(FusedGraph {
        node_features: scene_rows.clone(),
        edges,
        label_embeddings: labels,
        present,
    })
}

/// Canonical unconditional form: all edges neutral, labels zeroed.
pub fn mask_condition(fused: &FusedGraph) -> FusedGraph {
    let n = fused.node_count();
    FusedGraph {
        node_features: fused.node_features.clone(),
        edges: neutral_edges(n),
        label_embeddings: Tensor::zeros(fused.label_embeddings.shape()),
        present: vec![false; n],
    }
}

/// On-disk graph document: node labels plus `[source, relation, target]` triples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub nodes: Vec<String>,
    pub edges: Vec<(usize, String, usize)>,
}

impl GraphFile {
    pub fn from_graph(graph: &SceneGraph, relations: &RelationVocab) -> Result<Self> {
        let edges = graph
            .edges
            .iter()
            .map(|e| {
                let name = relations.name(e.relation).ok_or(Error::IndexOutOfRange {
                    what: "relation vocabulary",
                    index: e.relation,
                    len: relations.len(),
                })?;
                Ok((e.source, name.to_string(), e.target))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            nodes: graph.node_labels.clone(),
            edges,
        })
    }

    pub fn to_graph(&self, relations: &RelationVocab) -> Result<SceneGraph> {
        let edges = self
            .edges
            .iter()
            .map(|(s, r, t)| Ok(GraphEdge::new(*s, relations.index_of(r)?, *t)))
            .collect::<Result<_>>()?;
        Ok(SceneGraph::new(self.nodes.clone(), edges))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
