//! Raw corpus ingestion, the filtering cascade, dataset splits and a
//! synthetic scene/graph generator.
//!
//! # Raw corpus layout
//!
//! A raw directory holds up to two JSON files. A missing file reads as empty.
//!
//! `objects.json`:
//!
//! ```json
//! { "scans": [ { "scan": "room-1", "objects": [
//!     { "id": 3, "label": "chair", "centroid": [0.5, 1.0, 0.45],
//!       "axes": [1, 0, 0, 0, 1, 0, 0, 0, 1], "size": [0.5, 0.5, 0.9] } ] } ] }
//! ```
//!
//! `relationships.json`, with `[subject id, object id, relation]` triples:
//!
//! ```json
//! { "scans": [ { "scan": "room-1", "relationships": [[3, 7, "left"]] } ] }
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphEdge, RelationVocab, SceneGraph, CANONICAL_RELATIONS};
use crate::relations::{eval_predicate, PredicateConfig};
use crate::scene::{pad_scene, SceneMatrix, SceneObject, DEFAULT_MAX_OBJECTS, EMPTY_LABEL};

pub const OBJECTS_FILE: &str = "objects.json";
pub const RELATIONSHIPS_FILE: &str = "relationships.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawObject {
    pub id: u64,
    pub label: String,
    pub centroid: [f64; 3],
    pub axes: [f64; 9],
    pub size: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRelation {
    pub subject: u64,
    pub object: u64,
    pub relation: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawScene {
    pub id: String,
    pub objects: Vec<RawObject>,
    pub relations: Vec<RawRelation>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectsDoc {
    scans: Vec<ObjectsScan>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectsScan {
    scan: String,
    objects: Vec<RawObject>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationsDoc {
    scans: Vec<RelationsScan>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationsScan {
    scan: String,
    relationships: Vec<(u64, u64, String)>,
}

/// Parsed raw scenes plus the number of relations dropped for referencing
/// unknown objects or scans.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCorpus {
    pub scenes: Vec<RawScene>,
    pub dangling: usize,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Reads a raw corpus directory, in scan order of the objects file.
pub fn load_raw(dir: &Path) -> Result<RawCorpus> {
    if !dir.is_dir() {
        return Err(Error::invalid(format!("data directory {} does not exist", dir.display())));
    }
    let objects: ObjectsDoc = read_json(&dir.join(OBJECTS_FILE))?.unwrap_or(ObjectsDoc { scans: vec![] });
    let relations: RelationsDoc = read_json(&dir.join(RELATIONSHIPS_FILE))?.unwrap_or(RelationsDoc { scans: vec![] });

    let mut index = HashMap::new();
    let mut scenes = Vec::with_capacity(objects.scans.len());
    for scan in objects.scans {
        if index.insert(scan.scan.clone(), scenes.len()).is_some() {
            return Err(Error::invalid(format!("scan `{}` is listed twice in {OBJECTS_FILE}", scan.scan)));
        }
        scenes.push(RawScene {
            id: scan.scan,
            objects: scan.objects,
            relations: Vec::new(),
        });
    }
    let mut dangling = 0;
    for scan in relations.scans {
        let Some(&k) = index.get(&scan.scan) else {
            dangling += scan.relationships.len();
            continue;
        };
        let ids: HashSet<u64> = scenes[k].objects.iter().map(|o| o.id).collect();
        for (subject, object, relation) in scan.relationships {
            if ids.contains(&subject) && ids.contains(&object) {
                scenes[k].relations.push(RawRelation {
                    subject,
                    object,
                    relation,
                });
            } else {
                dangling += 1;
            }
        }
    }
    if dangling > 0 {
        log::warn!("dropped {dangling} relations with missing endpoints");
    }
    Ok(RawCorpus { scenes, dangling })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub relation_whitelist: Vec<String>,
    pub top_k_categories: usize,
    pub max_objects: usize,
    pub blocklist: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            relation_whitelist: CANONICAL_RELATIONS.iter().map(|s| s.to_string()).collect(),
            top_k_categories: 51,
            max_objects: DEFAULT_MAX_OBJECTS,
            blocklist: Vec::new(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.relation_whitelist.is_empty() {
            return Err(Error::invalid("relation whitelist is empty"));
        }
        if self.max_objects == 0 {
            return Err(Error::invalid("max_objects must be at least 1"));
        }
        self.vocab().map(|_| ())
    }

    /// Relation vocabulary implied by the whitelist.
    pub fn vocab(&self) -> Result<RelationVocab> {
        RelationVocab::new(&self.relation_whitelist)
    }
}

/// A scene that survived filtering, with graph node `i` describing `objects[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredScene {
    pub id: String,
    pub objects: Vec<SceneObject>,
    pub graph: SceneGraph,
}

/// Per-label object counts, most frequent first, ties in label order.
pub fn category_ranking<'a>(scenes: impl IntoIterator<Item = &'a RawScene>) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in scenes {
        for o in &s.objects {
            *counts.entry(o.label.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().map(|(l, c)| (l.to_string(), c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

fn retain_objects(scene: &mut RawScene, keep: impl Fn(&RawObject) -> bool) {
    scene.objects.retain(|o| keep(o));
    let ids: HashSet<u64> = scene.objects.iter().map(|o| o.id).collect();
    scene
        .relations
        .retain(|r| ids.contains(&r.subject) && ids.contains(&r.object));
}

/// Blocklist, relation whitelist, top-k categories, per-scene object cap
/// (smallest volumes dropped first), then removal of scenes left without
/// objects or relations.
pub fn filter_dataset(raw: &[RawScene], cfg: &FilterConfig) -> Result<Vec<FilteredScene>> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let blocked: HashSet<&str> = cfg.blocklist.iter().map(String::as_str).collect();
    let allowed: HashSet<&str> = cfg.relation_whitelist.iter().map(String::as_str).collect();

    let mut scenes: Vec<RawScene> = raw.iter().filter(|s| !blocked.contains(s.id.as_str())).cloned().collect();
    for s in &mut scenes {
        s.relations
            .retain(|r| allowed.contains(r.relation.as_str()) && r.subject != r.object);
        // The padding label is reserved.
        retain_objects(s, |o| o.label != EMPTY_LABEL);
    }

    let kept: HashSet<String> = category_ranking(&scenes)
        .into_iter()
        .take(cfg.top_k_categories)
        .map(|(l, _)| l)
        .collect();
    for s in &mut scenes {
        retain_objects(s, |o| kept.contains(&o.label));
    }

    for s in &mut scenes {
        if s.objects.len() > cfg.max_objects {
            let mut by_volume: Vec<(f64, usize)> = s
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| (o.size.iter().product::<f64>().abs(), i))
                .collect();
            // Largest first; equal volumes keep the earlier object.
            by_volume.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let survivors: HashSet<u64> = by_volume[..cfg.max_objects]
                .iter()
                .map(|&(_, i)| s.objects[i].id)
                .collect();
            retain_objects(s, |o| survivors.contains(&o.id));
        }
    }

    let mut out = Vec::new();
    for s in scenes {
        if s.objects.is_empty() || s.relations.is_empty() {
            continue;
        }
        let pos: HashMap<u64, usize> = s.objects.iter().enumerate().map(|(i, o)| (o.id, i)).collect();
        let mut seen = BTreeSet::new();
        let mut edges = Vec::new();
        for r in &s.relations {
            let e = GraphEdge::new(pos[&r.subject], vocab.index_of(&r.relation)?, pos[&r.object]);
            if seen.insert(e) {
                edges.push(e);
            }
        }
        let objects: Vec<SceneObject> = s
            .objects
            .iter()
            .map(|o| SceneObject {
                label: o.label.clone(),
                centroid: o.centroid,
                axes: o.axes,
                size: o.size,
            })
            .collect();
        let graph = SceneGraph::new(objects.iter().map(|o| o.label.clone()).collect(), edges);
        out.push(FilteredScene {
            id: s.id,
            objects,
            graph,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then cuts at `round(n·r₁)` and `round(n·(r₁+r₂))`.
pub fn split_dataset<T: Clone>(items: &[T], ratios: [f64; 3], seed: u64) -> Result<Split<T>> {
    if items.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut1 = ((n as f64 * ratios[0]).round() as usize).min(n);
    let cut2 = ((n as f64 * (ratios[0] + ratios[1])).round() as usize).clamp(cut1, n);
    let take = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect();
    Ok(Split {
        train: take(&order[..cut1]),
        val: take(&order[cut1..cut2]),
        test: take(&order[cut2..]),
    })
}

/// Size ranges of one synthetic category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCategory {
    pub label: String,
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
    /// Other objects may be placed on top of it.
    #[serde(default)]
    pub supports: bool,
    /// May be placed on top of a supporting object.
    #[serde(default)]
    pub stackable: bool,
}

impl SynthCategory {
    fn new(label: &str, size_min: [f64; 3], size_max: [f64; 3], supports: bool, stackable: bool) -> Self {
        Self {
            label: label.to_string(),
            size_min,
            size_max,
            supports,
            stackable,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub categories: Vec<SynthCategory>,
    pub relations: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_relations: usize,
    pub n_max: usize,
    /// Objects are placed with centroids inside `[-r, r]²`.
    pub room_half_extent: f64,
    /// Largest allowed intersection as a fraction of the smaller volume.
    pub max_overlap: f64,
    /// Probability that a stackable object is placed on a supporter.
    pub stack_prob: f64,
    pub attempts: usize,
    /// Margins a relation must clear to be put in a graph; at least as strict
    /// as the evaluation predicates.
    pub selection: PredicateConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            categories: vec![
                SynthCategory::new("bed", [1.4, 1.9, 0.4], [1.8, 2.2, 0.6], false, false),
                SynthCategory::new("wardrobe", [0.8, 0.5, 1.8], [1.4, 0.7, 2.2], false, false),
                SynthCategory::new("table", [0.8, 0.6, 0.7], [1.4, 1.0, 0.8], true, false),
                SynthCategory::new("chair", [0.4, 0.4, 0.8], [0.55, 0.55, 1.0], false, false),
                SynthCategory::new("nightstand", [0.4, 0.35, 0.45], [0.55, 0.5, 0.6], true, false),
                SynthCategory::new("lamp", [0.2, 0.2, 0.3], [0.35, 0.35, 0.6], false, true),
            ],
            relations: CANONICAL_RELATIONS.iter().map(|s| s.to_string()).collect(),
            min_objects: 3,
            max_objects: 6,
            max_relations: 6,
            n_max: DEFAULT_MAX_OBJECTS,
            room_half_extent: 2.5,
            max_overlap: 0.1,
            stack_prob: 0.3,
            attempts: 200,
            selection: PredicateConfig {
                margin: 0.15,
                close_by: 1.2,
                vertical_gap: 0.02,
                overlap: 0.7,
            },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::invalid("synthetic config lists no categories"));
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return Err(Error::invalid("need 2 <= min_objects <= max_objects"));
        }
        if self.max_objects > self.n_max {
            return Err(Error::invalid(format!(
                "max_objects {} exceeds n_max {}",
                self.max_objects, self.n_max
            )));
        }
        if self.max_relations == 0 {
            return Err(Error::invalid("max_relations must be at least 1"));
        }
        for c in &self.categories {
            if c.label == EMPTY_LABEL {
                return Err(Error::invalid("category label `empty` is reserved"));
            }
            for k in 0..3 {
                if !(c.size_min[k] > 0.0 && c.size_min[k] <= c.size_max[k]) {
                    return Err(Error::invalid(format!("bad size range for category `{}`", c.label)));
                }
            }
        }
        self.selection.validate()?;
        self.vocab().map(|_| ())
    }

    pub fn vocab(&self) -> Result<RelationVocab> {
        RelationVocab::new(&self.relations)
    }

    pub fn labels(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.label.clone()).collect()
    }
}

fn intersection_volume(a: &SceneObject, b: &SceneObject) -> f64 {
    let (alo, ahi) = a.aabb();
    let (blo, bhi) = b.aabb();
    (0..3).map(|k| (ahi[k].min(bhi[k]) - alo[k].max(blo[k])).max(0.0)).product()
}

fn volume(o: &SceneObject) -> f64 {
    o.size.iter().product()
}

fn sample_size(c: &SynthCategory, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut s = [0.0; 3];
    for k in 0..3 {
        s[k] = if c.size_min[k] < c.size_max[k] {
            rng.random_range(c.size_min[k]..c.size_max[k])
        } else {
            c.size_min[k]
        };
    }
    s
}

/// Places one object of category `cat` without excessive overlap.
fn place(
    cat: &SynthCategory,
    placed: &[(usize, SceneObject)],
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Option<SceneObject> {
    let size = sample_size(cat, rng);
    let supporters: Vec<&SceneObject> = placed
        .iter()
        .filter(|(c, _)| cfg.categories[*c].supports)
        .map(|(_, o)| o)
        .collect();
    let stack = cat.stackable && !supporters.is_empty() && rng.random::<f64>() < cfg.stack_prob;
    let r = cfg.room_half_extent;
    let centroid = if stack {
        let base = supporters.choose(rng)?;
        let slack = |k: usize| 0.25 * (base.size[k] - size[k]).max(0.0);
        let dx = rng.random_range(-1.0..=1.0) * slack(0);
        let dy = rng.random_range(-1.0..=1.0) * slack(1);
        let top = base.centroid[2] + 0.5 * base.size[2];
        [base.centroid[0] + dx, base.centroid[1] + dy, top + 0.5 * size[2]]
    } else {
        [rng.random_range(-r..=r), rng.random_range(-r..=r), 0.5 * size[2]]
    };
    let obj = SceneObject::axis_aligned(cat.label.clone(), centroid, size);
    let ok = placed
        .iter()
        .all(|(_, o)| intersection_volume(&obj, o) <= cfg.max_overlap * volume(&obj).min(volume(o)));
    ok.then_some(obj)
}

/// Relations `(i, rel, j)` that hold under both the selection margins and the
/// evaluation predicates.
fn holding_relations(
    objects: &[SceneObject],
    vocab: &RelationVocab,
    cfg: &SynthConfig,
    eval: &PredicateConfig,
) -> Result<Vec<GraphEdge>> {
    let mut out = Vec::new();
    for i in 0..objects.len() {
        for j in 0..objects.len() {
            if i == j {
                continue;
            }
            for (r, name) in vocab.names().iter().enumerate().skip(1) {
                if eval_predicate(name, &objects[i], &objects[j], &cfg.selection)?
                    && eval_predicate(name, &objects[i], &objects[j], eval)?
                {
                    out.push(GraphEdge::new(i, r, j));
                }
            }
        }
    }
    Ok(out)
}

/// Generates `n_scenes` world-space scenes with graphs whose every relation
/// holds under `eval`.
pub fn synth_generate(
    n_scenes: usize,
    cfg: &SynthConfig,
    eval: &PredicateConfig,
    seed: u64,
) -> Result<Vec<(SceneMatrix, SceneGraph)>> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_scenes);
    while out.len() < n_scenes {
        let k = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut placed: Vec<(usize, SceneObject)> = Vec::with_capacity(k);
        let mut attempts = 0;
        while placed.len() < k {
            attempts += 1;
            if attempts > cfg.attempts * k {
                return Err(Error::RejectionBudget { attempts: attempts - 1 });
            }
            let c = rng.random_range(0..cfg.categories.len());
            if let Some(obj) = place(&cfg.categories[c], &placed, cfg, &mut rng) {
                placed.push((c, obj));
            }
        }
        let objects: Vec<SceneObject> = placed.into_iter().map(|(_, o)| o).collect();
        let candidates = holding_relations(&objects, &vocab, cfg, eval)?;
        if candidates.is_empty() {
            continue;
        }
        let mut by_pair: BTreeMap<(usize, usize), Vec<GraphEdge>> = BTreeMap::new();
        for e in candidates {
            by_pair.entry((e.source.min(e.target), e.source.max(e.target))).or_default().push(e);
        }
        let mut pairs: Vec<Vec<GraphEdge>> = by_pair.into_values().collect();
        pairs.shuffle(&mut rng);
        let m = rng.random_range(1..=cfg.max_relations.min(pairs.len()));
        let mut edges: Vec<GraphEdge> = pairs[..m]
            .iter()
            .map(|opts| *opts.choose(&mut rng).expect("pair has a relation"))
            .collect();
        edges.sort();
        let graph = SceneGraph::new(objects.iter().map(|o| o.label.clone()).collect(), edges);
        out.push((pad_scene(&objects, cfg.n_max)?, graph));
    }
    Ok(out)
}

/// Everything needed to regenerate a synthetic corpus exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthManifest {
    pub seed: u64,
    pub n_scenes: usize,
    pub config: SynthConfig,
    pub predicates: PredicateConfig,
    pub relations: Vec<String>,
    /// `(scene file, graph file)` names, relative to the manifest.
    pub files: Vec<(String, String)>,
}

impl SynthManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)?.ok_or_else(|| Error::invalid(format!("manifest {} does not exist", path.display())))
    }
}
