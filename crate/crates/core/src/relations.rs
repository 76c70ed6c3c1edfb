//! Geometric spatial predicates and the relationship alignment score (RAS).
//!
//! World axes: `x` points right, `y` points to the front and `z` up. Boxes are
//! treated as axis-aligned extents around their centroids; orientation axes
//! play no part in relation geometry.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{RelationVocab, SceneGraph};
use crate::scene::{SceneMatrix, SceneObject};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredicateConfig {
    /// Directional margin (m).
    pub margin: f64,
    /// Centroid distance below which two objects are close by (m).
    pub close_by: f64,
    /// Allowed gap between a supported bottom and a supporting top (m).
    pub vertical_gap: f64,
    /// Required footprint overlap as a fraction of the smaller footprint.
    pub overlap: f64,
}

impl Default for PredicateConfig {
    fn default() -> Self {
        Self {
            margin: 0.05,
            close_by: 1.5,
            vertical_gap: 0.05,
            overlap: 0.5,
        }
    }
}

impl PredicateConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("margin", self.margin),
            ("close_by", self.close_by),
            ("vertical_gap", self.vertical_gap),
            ("overlap", self.overlap),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("predicate threshold {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Extent of `o` along world axis `k`, tolerating negative decoded sizes.
fn span(o: &SceneObject, k: usize) -> (f64, f64) {
    let h = 0.5 * o.size[k].abs();
    (o.centroid[k] - h, o.centroid[k] + h)
}

fn overlap_len(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Intersection of the two xy-footprints over the smaller footprint area.
pub fn footprint_overlap(a: &SceneObject, b: &SceneObject) -> f64 {
    let inter = overlap_len(span(a, 0), span(b, 0)) * overlap_len(span(a, 1), span(b, 1));
    let area = |o: &SceneObject| o.size[0].abs() * o.size[1].abs();
    let smaller = area(a).min(area(b));
    if smaller <= 0.0 {
        return 0.0;
    }
    inter / smaller
}

/// Whether `relation(a, b)` holds, read as "a is <relation> b".
pub fn eval_predicate(relation: &str, a: &SceneObject, b: &SceneObject, cfg: &PredicateConfig) -> Result<bool> {
    let (ca, cb) = (a.centroid, b.centroid);
    let tau = cfg.margin;
    Ok(match relation {
        "left" => ca[0] < cb[0] - tau,
        "right" => ca[0] > cb[0] + tau,
        "front" => ca[1] > cb[1] + tau,
        "behind" => ca[1] < cb[1] - tau,
        "above" => ca[2] > cb[2] + tau,
        "below" => ca[2] < cb[2] - tau,
        "close-by" => {
            let d2: f64 = (0..3).map(|k| (ca[k] - cb[k]).powi(2)).sum();
            d2.sqrt() < cfg.close_by
        }
        "standing-on" => {
            let bottom_a = span(a, 2).0;
            let top_b = span(b, 2).1;
            (bottom_a - top_b).abs() < cfg.vertical_gap && footprint_overlap(a, b) >= cfg.overlap
        }
        other => return Err(Error::UnknownRelation(other.to_string())),
    })
}

/// Outcome of every condition edge of one scene, as `(relation name, held)`.
pub fn relation_checks(
    scene: &SceneMatrix,
    graph: &SceneGraph,
    relations: &RelationVocab,
    cfg: &PredicateConfig,
) -> Result<Vec<(String, bool)>> {
    if graph.edges.is_empty() {
        return Err(Error::invalid("RAS is undefined for a graph without relations"));
    }
    graph
        .edges
        .iter()
        .map(|e| {
            let name = relations
                .name(e.relation)
                .ok_or_else(|| Error::UnknownRelation(format!("#{}", e.relation)))?;
            for idx in [e.source, e.target] {
                if idx >= scene.n_max() {
                    return Err(Error::IndexOutOfRange {
                        what: "scene rows",
                        index: idx,
                        len: scene.n_max(),
                    });
                }
            }
            let held = if scene.is_empty_row(e.source) || scene.is_empty_row(e.target) {
                // Still rejects unknown names.
                eval_predicate(name, &SceneObject::empty(), &SceneObject::empty(), cfg)?;
                false
            } else {
                eval_predicate(name, &scene.object(e.source), &scene.object(e.target), cfg)?
            };
            Ok((name.to_string(), held))
        })
        .collect()
}

/// Fraction of the graph's relations that hold in a world-space scene.
pub fn ras_scene(scene: &SceneMatrix, graph: &SceneGraph, relations: &RelationVocab, cfg: &PredicateConfig) -> Result<f64> {
    let checks = relation_checks(scene, graph, relations, cfg)?;
    let held = checks.iter().filter(|(_, h)| *h).count();
    Ok(held as f64 / checks.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTally {
    pub held: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasReport {
    pub corpus: f64,
    pub scenes: Vec<f64>,
    pub per_relation: BTreeMap<String, RelationTally>,
}

impl RasReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Unweighted mean of per-scene RAS with a per-relation breakdown.
pub fn ras_corpus(
    pairs: &[(SceneMatrix, SceneGraph)],
    relations: &RelationVocab,
    cfg: &PredicateConfig,
) -> Result<RasReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("cannot score an empty corpus"));
    }
    let mut scenes = Vec::with_capacity(pairs.len());
    let mut per_relation: BTreeMap<String, RelationTally> = BTreeMap::new();
    for (scene, graph) in pairs {
        let checks = relation_checks(scene, graph, relations, cfg)?;
        let mut held = 0;
        for (name, h) in &checks {
            let tally = per_relation.entry(name.clone()).or_default();
            tally.total += 1;
            if *h {
                tally.held += 1;
                held += 1;
            }
        }
        scenes.push(held as f64 / checks.len() as f64);
    }
    let corpus = scenes.iter().sum::<f64>() / scenes.len() as f64;
    Ok(RasReport {
        corpus,
        scenes,
        per_relation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphEdge;
    use crate::scene::pad_scene;

    fn at(c: [f64; 3]) -> SceneObject {
        SceneObject::axis_aligned("box", c, [0.4, 0.4, 0.4])
    }

    #[test]
    fn left_right_asymmetry() {
        let cfg = PredicateConfig::default();
        let (a, b) = (at([0.0, 0.0, 0.0]), at([1.0, 0.0, 0.0]));
        assert!(eval_predicate("left", &a, &b, &cfg).unwrap());
        assert!(!eval_predicate("right", &a, &b, &cfg).unwrap());
        assert!(eval_predicate("right", &b, &a, &cfg).unwrap());
    }

    #[test]
    fn ties_are_not_directional() {
        let cfg = PredicateConfig::default();
        let a = at([0.3, 0.3, 0.3]);
        for rel in ["left", "right", "front", "behind", "above", "below"] {
            assert!(!eval_predicate(rel, &a, &a.clone(), &cfg).unwrap(), "{rel}");
        }
    }

    #[test]
    fn standing_on_with_small_gap() {
        let cfg = PredicateConfig::default();
        // B spans z ∈ [0, 1.02], A spans z ∈ [1.0, 1.4].
        let b = SceneObject::axis_aligned("table", [0.0, 0.0, 0.51], [1.0, 1.0, 1.02]);
        let a = SceneObject::axis_aligned("lamp", [0.0, 0.0, 1.2], [1.0, 1.0, 0.4]);
        assert!(eval_predicate("standing-on", &a, &b, &cfg).unwrap());
        let off = SceneObject::axis_aligned("lamp", [0.8, 0.0, 1.2], [1.0, 1.0, 0.4]);
        assert!(!eval_predicate("standing-on", &off, &b, &cfg).unwrap());
    }

    #[test]
    fn unknown_relation_errors() {
        let a = at([0.0; 3]);
        assert!(matches!(
            eval_predicate("inside", &a, &a, &PredicateConfig::default()),
            Err(Error::UnknownRelation(_))
        ));
    }

    fn scene() -> SceneMatrix {
        pad_scene(&[at([0.0, 0.0, 0.0]), at([1.0, 0.0, 0.0])], 3).unwrap()
    }

    #[test]
    fn ras_counts_held_relations() {
        let v = RelationVocab::canonical();
        let (left, right) = (v.index_of("left").unwrap(), v.index_of("right").unwrap());
        let labels = vec!["box".to_string(), "box".to_string()];
        let g = SceneGraph::new(labels.clone(), vec![GraphEdge::new(0, left, 1), GraphEdge::new(0, right, 1)]);
        let cfg = PredicateConfig::default();
        assert_eq!(ras_scene(&scene(), &g, &v, &cfg).unwrap(), 0.5);
        let empty = SceneGraph::new(labels.clone(), vec![]);
        assert!(ras_scene(&scene(), &empty, &v, &cfg).is_err());
        let to_empty_row = SceneGraph::new(labels, vec![GraphEdge::new(0, left, 2)]);
        assert_eq!(ras_scene(&scene(), &to_empty_row, &v, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn corpus_is_unweighted_mean() {
        let v = RelationVocab::canonical();
        let left = v.index_of("left").unwrap();
        let labels = vec!["box".to_string(), "box".to_string()];
        let good = SceneGraph::new(labels.clone(), vec![GraphEdge::new(0, left, 1)]);
        let bad = SceneGraph::new(labels, vec![GraphEdge::new(1, left, 0)]);
        let cfg = PredicateConfig::default();
        let report = ras_corpus(&[(scene(), good.clone()), (scene(), bad)], &v, &cfg).unwrap();
        assert_eq!(report.scenes, vec![1.0, 0.0]);
        assert_eq!(report.corpus, 0.5);
        assert_eq!(report.per_relation["left"], RelationTally { held: 1, total: 2 });
        let single = ras_corpus(&[(scene(), good)], &v, &cfg).unwrap();
        assert_eq!(single.corpus, 1.0);
        assert!(ras_corpus(&[], &v, &cfg).is_err());
    }
}
