//! Label injection followed by parallel cross- and self-attention.
//!
//! Attention never crosses scene boundaries inside a batch: each scene's rows
//! attend only to rows of the same scene.

use std::ops::Range;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::SparseMatrix;

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub q: Var,
    pub q_b: Var,
    /// Keys carry no bias: it would shift every score of a query equally.
    pub k: Var,
    pub v: Var,
    pub v_b: Var,
}

#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    pub out: Var,
    pub out_b: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionBlockParams {
    /// `300 × H`, no bias: zeroed labels inject nothing.
    pub inject: Var,
    pub cross: Option<MultiHeadParams>,
    pub self_attn: Option<MultiHeadParams>,
}

/// Multi-head attention with queries from `query_src` and keys/values from
/// `kv_src`, computed independently per scene.
pub fn multi_head_attention(
    tape: &mut Tape,
    query_src: Var,
    kv_src: Var,
    params: &MultiHeadParams,
    scenes: &[Range<usize>],
) -> Result<Var> {
    let mut head_outputs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let q = tape.linear(query_src, head.q, Some(head.q_b))?;
        let k = tape.linear(kv_src, head.k, None)?;
        let v = tape.linear(kv_src, head.v, Some(head.v_b))?;
        let dh = tape.value(q).cols();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut per_scene = Vec::with_capacity(scenes.len());
        for range in scenes {
            let idx: Vec<usize> = range.clone().collect();
            let qs = tape.gather_rows(q, &idx)?;
            let ks = tape.gather_rows(k, &idx)?;
            let vs = tape.gather_rows(v, &idx)?;
            let kt = tape.transpose(ks)?;
            let scores = tape.matmul(qs, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores);
            per_scene.push(tape.matmul(weights, vs)?);
        }
        head_outputs.push(if per_scene.len() == 1 {
            per_scene[0]
        } else {
            tape.concat(&per_scene, 0)?
        });
    }
    let joined = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        tape.concat(&head_outputs, 1)?
    };
    tape.linear(joined, params.out, Some(params.out_b))
}

/// Adds the pooled label projection to `feats`, then sums the enabled
/// attention branches. With both branches disabled the injected features
/// are returned.
pub fn attention_block_forward(
    tape: &mut Tape,
    feats: Var,
    labels: Var,
    pool: &Arc<SparseMatrix>,
    params: &AttentionBlockParams,
    scenes: &[Range<usize>],
) -> Result<Var> {
    let projected = tape.matmul(labels, params.inject)?;
    let pooled = tape.spmm(pool.clone(), projected)?;
    let feats = tape.add(feats, pooled)?;

    let cross = match &params.cross {
        Some(p) => Some(multi_head_attention(tape, feats, labels, p, scenes)?),
        None => None,
    };
    let selfa = match &params.self_attn {
        Some(p) => Some(multi_head_attention(tape, feats, feats, p, scenes)?),
        None => None,
    };
    match (cross, selfa) {
        (Some(c), Some(s)) => tape.add(c, s),
        (Some(c), None) => Ok(c),
        (None, Some(s)) => Ok(s),
        (None, None) => Ok(feats),
    }
}

/// Row-wise mean over the labeled rows of each scene: `P[i, j] = 1/k_s` for
/// every labeled `j` in the scene containing `i`.
pub fn pooling_matrix(scenes: &[Range<usize>], present: &[bool]) -> SparseMatrix {
    let n = present.len();
    let mut m = SparseMatrix::new(n, n);
    for range in scenes {
        let labeled: Vec<usize> = range.clone().filter(|&j| present[j]).collect();
        if labeled.is_empty() {
            continue;
        }
        let w = 1.0 / labeled.len() as f64;
        for i in range.clone() {
            for &j in &labeled {
                m.push(i, j, w);
            }
        }
    }
    m
}
