//! The noise-prediction network.
//!
//! Pipeline per scene: `[X_t | timestep embedding]` → linear + tanh → a
//! stack of relational graph convolutions over the fused graph → label
//! injection and parallel cross/self-attention → linear back to row space.

pub mod attention;
pub mod rgcn;

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::ddpm::Denoise;
use crate::error::{Error, Result};
use crate::graph::{fuse_condition, FusedGraph, GraphEdge, LabelEmbedder, RelationVocab, SceneGraph, EMBED_DIM, NEUTRAL_INDEX};
use crate::scene::ROW_DIM;
use crate::tensor::{Precision, Tensor};

use attention::{attention_block_forward, pooling_matrix, AttentionBlockParams, HeadParams, MultiHeadParams};
use rgcn::{aggregation_matrices, rgcn_layer_forward, RelationWeights, RgcnLayer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestepMode {
    /// Embedding appended to every input row.
    #[default]
    Concat,
    /// Embedding projected to the hidden width and added after the input projection.
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub n_max: usize,
    pub hidden: usize,
    pub rgcn_layers: usize,
    pub heads: usize,
    pub bases: usize,
    pub time_dim: usize,
    pub use_cross_attention: bool,
    pub use_self_attention: bool,
    pub use_skip_connections: bool,
    pub use_relational_edges: bool,
    pub timestep_mode: TimestepMode,
    pub precision: Precision,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_max: crate::scene::DEFAULT_MAX_OBJECTS,
            hidden: 128,
            rgcn_layers: 3,
            heads: 4,
            bases: 4,
            time_dim: 64,
            use_cross_attention: true,
            use_self_attention: true,
            use_skip_connections: true,
            use_relational_edges: true,
            timestep_mode: TimestepMode::Concat,
            precision: Precision::F32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::invalid("n_max must be at least 1"));
        }
        if self.hidden == 0 || self.heads == 0 {
            return Err(Error::invalid("hidden width and head count must be positive"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.bases == 0 {
            return Err(Error::invalid("basis count must be at least 1"));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "timestep embedding dimension must be even and positive, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        match self.timestep_mode {
            TimestepMode::Concat => ROW_DIM + self.time_dim,
            TimestepMode::Add => ROW_DIM,
        }
    }

    /// Relations that get their own weights; the label-only model keeps just the neutral one.
    fn weighted_relations(&self, vocab: &RelationVocab) -> usize {
        if self.use_relational_edges {
            vocab.len()
        } else {
            1
        }
    }
}

/// Sinusoidal embedding: interleaved `(sin(t·f_k), cos(t·f_k))` with `f_k`
/// geometric from 1 down to 10⁻⁴.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("timestep embedding dimension {dim} is odd")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let exponent = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let arg = t as f64 * 10f64.powf(-4.0 * exponent);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Named trainable tensors, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts every tensor on the tape as a trainable leaf (or constant).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameters placed on a tape, addressable by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    /// Pairs store names, in order, with variables already on a tape.
    pub fn from_vars(store: &ParamStore, vars: &[Var]) -> Result<Self> {
        if store.len() != vars.len() {
            return Err(Error::invalid(format!(
                "{} variables for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        Ok(Self {
            vars: store.iter().map(|(n, _)| n.to_string()).zip(vars.iter().copied()).collect(),
        })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Expected parameter names, shapes and uniform init bounds for a configuration.
fn layout(config: &DenoiserConfig, n_relations: usize) -> Vec<(String, Vec<usize>, f64)> {
    let h = config.hidden;
    let dh = h / config.heads;
    let uni = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
    let mut out = vec![
        ("input.w".to_string(), vec![config.input_dim(), h], uni(config.input_dim())),
        ("input.b".to_string(), vec![h], uni(config.input_dim())),
    ];
    if config.timestep_mode == TimestepMode::Add {
        out.push(("time.w".into(), vec![config.time_dim, h], uni(config.time_dim)));
    }
    for l in 0..config.rgcn_layers {
        out.push((format!("rgcn.{l}.self"), vec![h, h], uni(h)));
        out.push((format!("rgcn.{l}.bases"), vec![config.bases, h * h], uni(h)));
        out.push((format!("rgcn.{l}.coeffs"), vec![n_relations, config.bases], uni(config.bases)));
    }
    out.push(("label.inject".into(), vec![EMBED_DIM, h], uni(EMBED_DIM)));
    let mut branch = |prefix: &str, kv_in: usize| {
        for head in 0..config.heads {
            for (m, fan_in) in [("q", h), ("k", kv_in), ("v", kv_in)] {
                out.push((format!("{prefix}.{head}.{m}"), vec![fan_in, dh], uni(fan_in)));
                if m != "k" {
                    out.push((format!("{prefix}.{head}.{m}_b"), vec![dh], uni(fan_in)));
                }
            }
        }
        out.push((format!("{prefix}.out"), vec![h, h], uni(h)));
        out.push((format!("{prefix}.out_b"), vec![h], uni(h)));
    };
    if config.use_cross_attention {
        branch("cross", EMBED_DIM);
    }
    if config.use_self_attention {
        branch("self", h);
    }
    out.push(("output.w".into(), vec![h, ROW_DIM], uni(h)));
    out.push(("output.b".into(), vec![ROW_DIM], uni(h)));
    out
}

/// Freshly initialized parameters for `config`.
pub fn init_params(config: &DenoiserConfig, relations: &RelationVocab, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, bound) in layout(config, config.weighted_relations(relations)) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        store.insert(name, Tensor::new(shape, data)?.rounded(config.precision));
    }
    Ok(store)
}

fn finite_stage(tape: &Tape, v: Var, stage: &str) -> Result<Var> {
    match tape.value(v).first_non_finite() {
        None => Ok(v),
        Some(i) => Err(Error::NonFinite {
            location: format!("denoiser stage {stage}, entry {i}"),
        }),
    }
}

/// One scene in a forward batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub xt: &'a Tensor,
    pub t: usize,
    pub condition: &'a FusedGraph,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    relations: RelationVocab,
    embedder: LabelEmbedder,
    params: ParamStore,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, relations: RelationVocab, embedder: LabelEmbedder, seed: u64) -> Result<Self> {
        let params = init_params(&config, &relations, seed)?;
        Ok(Self {
            embedder: embedder.rounded(config.precision),
            config,
            relations,
            params,
        })
    }

    /// Assembles a model from stored parts, checking every tensor's shape.
    pub fn from_parts(
        config: DenoiserConfig,
        relations: RelationVocab,
        embedder: LabelEmbedder,
        params: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config, config.weighted_relations(&relations));
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("parameter {name}"),
                });
            }
        }
        Ok(Self {
            embedder: embedder.rounded(config.precision),
            config,
            relations,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn relations(&self) -> &RelationVocab {
        &self.relations
    }

    pub fn embedder(&self) -> &LabelEmbedder {
        &self.embedder
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Runs a batch on `tape`; rows of the result are the scenes' rows, stacked.
    pub fn forward_batch(&self, tape: &mut Tape, params: &BoundParams, batch: &[BatchItem<'_>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::invalid("empty forward batch"));
        }
        let cfg = &self.config;
        let mut scenes: Vec<Range<usize>> = Vec::with_capacity(batch.len());
        let mut edges: Vec<GraphEdge> = Vec::new();
        let mut present = Vec::new();
        let mut inputs = Vec::new();
        let mut times = Vec::new();
        let mut labels = Vec::new();
        let mut offset = 0;
        for item in batch {
            let n = item.condition.node_count();
            if item.xt.shape() != [n, ROW_DIM] {
                return Err(Error::Shape {
                    op: "denoiser input",
                    lhs: item.xt.shape().to_vec(),
                    rhs: vec![n, ROW_DIM],
                });
            }
            let temb = timestep_embedding(item.t, cfg.time_dim)?;
            for i in 0..n {
                inputs.extend_from_slice(item.xt.row(i));
                match cfg.timestep_mode {
                    TimestepMode::Concat => inputs.extend_from_slice(&temb),
                    TimestepMode::Add => times.extend_from_slice(&temb),
                }
            }
            for e in &item.condition.edges {
                let relation = if cfg.use_relational_edges { e.relation } else { NEUTRAL_INDEX };
                edges.push(GraphEdge::new(e.source + offset, relation, e.target + offset));
            }
            labels.extend_from_slice(item.condition.label_embeddings.data());
            present.extend_from_slice(&item.condition.present);
            scenes.push(offset..offset + n);
            offset += n;
        }
        let total = offset;

        let x = tape.constant(Tensor::new(vec![total, cfg.input_dim()], inputs)?);
        let mut h = tape.linear(x, params.var("input.w")?, Some(params.var("input.b")?))?;
        if cfg.timestep_mode == TimestepMode::Add {
            let tv = tape.constant(Tensor::new(vec![total, cfg.time_dim], times)?);
            let proj = tape.matmul(tv, params.var("time.w")?)?;
            h = tape.add(h, proj)?;
        }
        let h = tape.tanh(h);
        let mut h = finite_stage(tape, h, "input projection")?;

        let adjacency = aggregation_matrices(&edges, total, cfg.weighted_relations(&self.relations))?;
        for l in 0..cfg.rgcn_layers {
            let layer = RgcnLayer {
                self_weight: params.var(&format!("rgcn.{l}.self"))?,
                relations: RelationWeights::Basis {
                    coeffs: params.var(&format!("rgcn.{l}.coeffs"))?,
                    bases: params.var(&format!("rgcn.{l}.bases"))?,
                },
            };
            let out = rgcn_layer_forward(tape, h, &adjacency, &layer)?;
            h = if cfg.use_skip_connections { tape.add(out, h)? } else { out };
            h = finite_stage(tape, h, &format!("rgcn layer {l}"))?;
        }

        let label_var = tape.constant(Tensor::new(vec![total, EMBED_DIM], labels)?);
        let pool = Arc::new(pooling_matrix(&scenes, &present));
        let block = AttentionBlockParams {
            inject: params.var("label.inject")?,
            cross: self.branch_params(params, "cross", cfg.use_cross_attention)?,
            self_attn: self.branch_params(params, "self", cfg.use_self_attention)?,
        };
        let h = attention_block_forward(tape, h, label_var, &pool, &block, &scenes)?;
        let h = finite_stage(tape, h, "attention")?;

        let out = tape.linear(h, params.var("output.w")?, Some(params.var("output.b")?))?;
        finite_stage(tape, out, "output projection")
    }

    fn branch_params(&self, params: &BoundParams, prefix: &str, enabled: bool) -> Result<Option<MultiHeadParams>> {
        if !enabled {
            return Ok(None);
        }
        let heads = (0..self.config.heads)
            .map(|h| {
                let v = |m: &str| params.var(&format!("{prefix}.{h}.{m}"));
                Ok(HeadParams {
                    q: v("q")?,
                    q_b: v("q_b")?,
                    k: v("k")?,
                    v: v("v")?,
                    v_b: v("v_b")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(MultiHeadParams {
            heads,
            out: params.var(&format!("{prefix}.out"))?,
            out_b: params.var(&format!("{prefix}.out_b"))?,
        }))
    }

    /// Single-scene inference at the configured precision.
    pub fn forward(&self, xt: &Tensor, t: usize, condition: &FusedGraph) -> Result<Tensor> {
        let mut tape = Tape::new(self.config.precision);
        let bound = self.params.bind(&mut tape, false);
        let out = self.forward_batch(&mut tape, &bound, &[BatchItem { xt, t, condition }])?;
        Ok(tape.value(out).clone())
    }
}

impl Denoise for Denoiser {
    fn predict(&self, xt: &Tensor, t: usize, condition: &FusedGraph) -> Result<Tensor> {
        self.forward(xt, t, condition)
    }

    fn condition(&self, graph: &SceneGraph) -> Result<FusedGraph> {
        let placeholder = Tensor::zeros(&[self.config.n_max, ROW_DIM]);
        let fused = fuse_condition(&placeholder, graph, &self.embedder)?;
        Ok(if self.config.use_relational_edges {
            fused
        } else {
            fused.without_relations()
        })
    }

    fn n_max(&self) -> usize {
        self.config.n_max
    }
}
