//! Relational graph convolution with mean aggregation per relation.
//!
//! `h′_i = relu(W₀·h_i + Σ_r mean_{j ∈ N_r(i)} W_r·h_j)` where `N_r(i)` are the
//! sources of edges of relation `r` pointing at `i`, and the per-relation
//! weights either come from a shared basis (`W_r = Σ_b a_rb·V_b`) or are
//! stored directly.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::GraphEdge;
use crate::tensor::SparseMatrix;

#[derive(Clone, Debug)]
pub enum RelationWeights {
    /// `coeffs`: `R × B`, `bases`: `B × H²` (each row a row-major `H × H` matrix).
    Basis { coeffs: Var, bases: Var },
    /// One `H × H` matrix per relation.
    Full(Vec<Var>),
}

#[derive(Clone, Debug)]
pub struct RgcnLayer {
    pub self_weight: Var,
    pub relations: RelationWeights,
}

/// One row-normalized incoming adjacency per relation; `None` where the
/// relation has no edges.
pub type Adjacency = Vec<Option<Arc<SparseMatrix>>>;

/// Builds the mean-aggregation matrices `A_r[i, j] = 1/|N_r(i)|`.
pub fn aggregation_matrices(edges: &[GraphEdge], n_nodes: usize, n_relations: usize) -> Result<Adjacency> {
    let mut incoming: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); n_nodes]; n_relations];
    for e in edges {
        if e.relation >= n_relations {
            return Err(Error::IndexOutOfRange {
                what: "relation vocabulary",
                index: e.relation,
                len: n_relations,
            });
        }
        if e.source >= n_nodes || e.target >= n_nodes {
            return Err(Error::IndexOutOfRange {
                what: "graph nodes",
                index: e.source.max(e.target),
                len: n_nodes,
            });
        }
        incoming[e.relation][e.target].push(e.source);
    }
    Ok(incoming
        .into_iter()
        .map(|per_node| {
            if per_node.iter().all(Vec::is_empty) {
                return None;
            }
            let mut m = SparseMatrix::new(n_nodes, n_nodes);
            for (i, srcs) in per_node.iter().enumerate() {
                let w = 1.0 / srcs.len().max(1) as f64;
                for &j in srcs {
                    m.push(i, j, w);
                }
            }
            Some(Arc::new(m))
        })
        .collect())
}

/// Per-relation weight matrices needed by `adjacency`, materialized on the tape.
fn relation_matrices(tape: &mut Tape, layer: &RgcnLayer, adjacency: &Adjacency, hidden: usize) -> Result<Vec<Option<Var>>> {
    let needed = |r: usize| adjacency.get(r).is_some_and(Option::is_some);
    match &layer.relations {
        RelationWeights::Full(ws) => {
            if ws.len() < adjacency.len() {
                return Err(Error::IndexOutOfRange {
                    what: "relation weights",
                    index: adjacency.len() - 1,
                    len: ws.len(),
                });
            }
            Ok((0..adjacency.len()).map(|r| needed(r).then(|| ws[r])).collect())
        }
        RelationWeights::Basis { coeffs, bases } => {
            let n_rel = tape.value(*coeffs).rows();
            if adjacency.len() > n_rel {
                return Err(Error::IndexOutOfRange {
                    what: "relation coefficients",
                    index: adjacency.len() - 1,
                    len: n_rel,
                });
            }
            let all = tape.matmul(*coeffs, *bases)?;
            (0..adjacency.len())
                .map(|r| {
                    if !needed(r) {
                        return Ok(None);
                    }
                    let row = tape.gather_rows(all, &[r])?;
                    Ok(Some(tape.reshape(row, &[hidden, hidden])?))
                })
                .collect()
        }
    }
}

pub fn rgcn_layer_forward(tape: &mut Tape, h: Var, adjacency: &Adjacency, layer: &RgcnLayer) -> Result<Var> {
    let hidden = tape.value(layer.self_weight).rows();
    let weights = relation_matrices(tape, layer, adjacency, hidden)?;
    let mut acc = tape.matmul(h, layer.self_weight)?;
    for (a, w) in adjacency.iter().zip(weights) {
        let (Some(a), Some(w)) = (a, w) else { continue };
        let pooled = tape.spmm(a.clone(), h)?;
        let msg = tape.matmul(pooled, w)?;
        acc = tape.add(acc, msg)?;
    }
    Ok(tape.relu(acc))
}
