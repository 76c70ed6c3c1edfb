//! Training losses, the optimizer, plateau scheduling and the epoch loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::ddpm::{make_schedule, q_sample, Denoise, NoiseSchedule, PredictionTarget, ScheduleKind, DEFAULT_STEPS};
use crate::denoiser::{BatchItem, BoundParams, Denoiser, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{mask_condition, FusedGraph, SceneGraph};
use crate::scene::{SceneMatrix, Normalizer, EMPTY_LABEL, ROW_DIM, SIZE};
use crate::tensor::{Precision, Tensor};

/// Smallest side length (m) used when forming log side ratios.
pub const MIN_SIDE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconKind {
    L1,
    #[default]
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub volume: f64,
    pub ratio: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            volume: 0.2,
            ratio: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("recon", self.recon), ("volume", self.volume), ("ratio", self.ratio)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean over all entries of `|d|` or `d²`.
pub fn recon_loss(tape: &mut Tape, pred: Var, target: Var, kind: ReconKind) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let per_entry = match kind {
        ReconKind::L2 => tape.square(d),
        ReconKind::L1 => {
            let pos = tape.relu(d);
            let neg = tape.scale(d, -1.0);
            let neg = tape.relu(neg);
            tape.add(pos, neg)?
        }
    };
    Ok(tape.mean(per_entry))
}

/// Mean box statistics of one category.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryStat {
    pub mean_volume: f64,
    /// Means of `log(sx/sy)` and `log(sy/sz)`.
    pub mean_log_ratio: [f64; 2],
    pub count: usize,
}

/// Per-category targets for the volume and aspect-ratio losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub categories: BTreeMap<String, CategoryStat>,
}

fn log_ratios(size: &[f64]) -> [f64; 2] {
    let s: Vec<f64> = size.iter().map(|v| v.max(MIN_SIDE)).collect();
    [(s[0] / s[1]).ln(), (s[1] / s[2]).ln()]
}

impl CategoryStats {
    /// Statistics over the non-empty objects of world-space scenes.
    pub fn fit(scenes: &[SceneMatrix]) -> Self {
        let mut acc: BTreeMap<String, (f64, [f64; 2], usize)> = BTreeMap::new();
        for scene in scenes {
            for obj in scene.objects() {
                let e = acc.entry(obj.label.clone()).or_insert((0.0, [0.0; 2], 0));
                let r = log_ratios(&obj.size);
                e.0 += obj.size.iter().product::<f64>();
                e.1[0] += r[0];
                e.1[1] += r[1];
                e.2 += 1;
            }
        }
        let categories = acc
            .into_iter()
            .map(|(label, (vol, r, n))| {
                let n_f = n as f64;
                (
                    label,
                    CategoryStat {
                        mean_volume: vol / n_f,
                        mean_log_ratio: [r[0] / n_f, r[1] / n_f],
                        count: n,
                    },
                )
            })
            .collect();
        Self { categories }
    }

    pub fn get(&self, label: &str) -> Result<&CategoryStat> {
        self.categories
            .get(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn insert(&mut self, label: impl Into<String>, stat: CategoryStat) {
        self.categories.insert(label.into(), stat);
    }
}

/// World-space sizes `(sx, sy, sz)` of the non-empty rows as three `k × 1` columns.
fn world_sizes(tape: &mut Tape, pred: Var, labels: &[String], norm: &Normalizer) -> Result<Option<([Var; 3], Vec<usize>)>> {
    if !norm.is_fitted() {
        return Err(Error::UnfittedNormalizer);
    }
    let rows = tape.value(pred).rows();
    if rows != labels.len() {
        return Err(Error::Shape {
            op: "size losses",
            lhs: tape.value(pred).shape().to_vec(),
            rhs: vec![labels.len(), ROW_DIM],
        });
    }
    let keep: Vec<usize> = (0..rows).filter(|&i| labels[i] != EMPTY_LABEL).collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let sel = tape.gather_rows(pred, &keep)?;
    let mut cols = Vec::with_capacity(3);
    for k in 0..3 {
        let d = SIZE.start + k;
        // denormalize(v) = v·half + mid
        let half = 0.5 * (norm.max[d] - norm.min[d]);
        let mid = 0.5 * (norm.max[d] + norm.min[d]);
        let mut pick = Tensor::zeros(&[ROW_DIM, 1]);
        pick.set(d, 0, half);
        let pick = tape.constant(pick);
        let col = tape.matmul(sel, pick)?;
        let offset = tape.constant(Tensor::vector(vec![mid]));
        cols.push(tape.add_row_vector(col, offset)?);
    }
    Ok(Some(([cols[0], cols[1], cols[2]], keep)))
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Mean squared deviation of predicted object volumes from their category means.
pub fn volume_loss(tape: &mut Tape, pred: Var, labels: &[String], stats: &CategoryStats, norm: &Normalizer) -> Result<Var> {
    let Some(([sx, sy, sz], keep)) = world_sizes(tape, pred, labels, norm)? else {
        return Ok(zero(tape));
    };
    let targets = keep
        .iter()
        .map(|&i| Ok(stats.get(&labels[i])?.mean_volume))
        .collect::<Result<Vec<_>>>()?;
    let xy = tape.mul(sx, sy)?;
    let vol = tape.mul(xy, sz)?;
    let target = tape.constant(Tensor::new(vec![keep.len(), 1], targets)?);
    let d = tape.sub(vol, target)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Mean squared deviation of `(log(sx/sy), log(sy/sz))` from category means,
/// with sides clamped at [`MIN_SIDE`].
pub fn aspect_ratio_loss(tape: &mut Tape, pred: Var, labels: &[String], stats: &CategoryStats, norm: &Normalizer) -> Result<Var> {
    let Some(([sx, sy, sz], keep)) = world_sizes(tape, pred, labels, norm)? else {
        return Ok(zero(tape));
    };
    let mut mu = [Vec::with_capacity(keep.len()), Vec::with_capacity(keep.len())];
    for &i in &keep {
        let s = stats.get(&labels[i])?;
        mu[0].push(s.mean_log_ratio[0]);
        mu[1].push(s.mean_log_ratio[1]);
    }
    let lx = tape.log_clamped(sx, MIN_SIDE);
    let ly = tape.log_clamped(sy, MIN_SIDE);
    let lz = tape.log_clamped(sz, MIN_SIDE);
    let r1 = tape.sub(lx, ly)?;
    let r2 = tape.sub(ly, lz)?;
    let [m1, m2] = mu;
    let m1 = tape.constant(Tensor::new(vec![keep.len(), 1], m1)?);
    let m2 = tape.constant(Tensor::new(vec![keep.len(), 1], m2)?);
    let d1 = tape.sub(r1, m1)?;
    let d2 = tape.sub(r2, m2)?;
    let s1 = tape.square(d1);
    let s2 = tape.square(d2);
    let per_object = tape.add(s1, s2)?;
    Ok(tape.mean(per_object))
}

/// Everything besides the prediction needed to score it.
#[derive(Clone, Copy, Debug)]
pub struct LossContext<'a> {
    pub target: PredictionTarget,
    pub recon: ReconKind,
    pub weights: LossWeights,
    pub stats: &'a CategoryStats,
    pub normalizer: &'a Normalizer,
}

/// ε mode: reconstruction only. `X₀` mode: `λ₁·recon + λ₂·volume + λ₃·ratio`.
pub fn total_loss(tape: &mut Tape, pred: Var, target: Var, labels: &[String], ctx: &LossContext<'_>) -> Result<Var> {
    let recon = recon_loss(tape, pred, target, ctx.recon)?;
    match ctx.target {
        PredictionTarget::Epsilon => Ok(recon),
        PredictionTarget::X0 => {
            let w = ctx.weights;
            let mut total = tape.scale(recon, w.recon);
            if w.volume != 0.0 {
                let v = volume_loss(tape, pred, labels, ctx.stats, ctx.normalizer)?;
                let v = tape.scale(v, w.volume);
                total = tape.add(total, v)?;
            }
            if w.ratio != 0.0 {
                let r = aspect_ratio_loss(tape, pred, labels, ctx.stats, ctx.normalizer)?;
                let r = tape.scale(r, w.ratio);
                total = tape.add(total, r)?;
            }
            Ok(total)
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of `params` given same-ordered `grads`.
    pub fn update<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (k, g) in grads.iter().enumerate() {
            if let Some(j) = g.first_non_finite() {
                return Err(Error::NonFinite {
                    location: format!("gradient of parameter {k}, entry {j}"),
                });
            }
        }
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[k].len() != g.len() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *x -= lr * weight_decay * *x;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// evaluations without a decrease larger than `threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: Option<f64>,
    stale: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            threshold: 1e-6,
            best: None,
            stale: 0,
        }
    }

    /// Records `metric`; returns `true` if `lr` was reduced.
    pub fn step(&mut self, metric: f64, lr: &mut f64) -> bool {
        match self.best {
            Some(best) if metric >= best - self.threshold => self.stale += 1,
            _ => {
                self.best = Some(metric);
                self.stale = 0;
            }
        }
        if self.stale >= self.patience {
            *lr *= self.factor;
            self.stale = 0;
            return true;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub drop_prob: f64,
    pub prediction_target: PredictionTarget,
    pub recon: ReconKind,
    pub loss_weights: LossWeights,
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 10_000,
            lr: 5e-4,
            weight_decay: 1e-4,
            plateau_factor: 0.8,
            plateau_patience: 60,
            drop_prob: 0.15,
            prediction_target: PredictionTarget::Epsilon,
            recon: ReconKind::L2,
            loss_weights: LossWeights::default(),
            schedule: ScheduleKind::Linear,
            steps: DEFAULT_STEPS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::invalid(format!("drop_prob must be in [0, 1], got {}", self.drop_prob)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be finite and non-negative"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::invalid("plateau_factor must be in (0, 1]"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be positive"));
        }
        self.loss_weights.validate()
    }
}

/// A normalized scene with its fused condition, ready for training.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub x0: Tensor,
    pub labels: Vec<String>,
    pub condition: FusedGraph,
}

impl TrainingExample {
    /// `scene` must already be normalized.
    pub fn new<M: Denoise + ?Sized>(scene: &SceneMatrix, graph: &SceneGraph, model: &M) -> Result<Self> {
        let condition = model.condition(graph)?;
        if scene.n_max() != condition.node_count() {
            return Err(Error::invalid(format!(
                "scene has {} rows but the model expects {}",
                scene.n_max(),
                condition.node_count()
            )));
        }
        Ok(Self {
            x0: scene.rows().clone(),
            labels: scene.labels().to_vec(),
            condition,
        })
    }
}

/// A noised sample and its regression target.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub xt: Tensor,
    pub t: usize,
    pub condition: FusedGraph,
    pub target: Tensor,
    pub labels: Vec<String>,
}

/// Loss of `model` on a prepared batch, built on `tape`.
pub fn batch_loss(
    model: &Denoiser,
    tape: &mut Tape,
    params: &BoundParams,
    batch: &[PreparedSample],
    ctx: &LossContext<'_>,
) -> Result<Var> {
    let items: Vec<BatchItem<'_>> = batch
        .iter()
        .map(|s| BatchItem {
            xt: &s.xt,
            t: s.t,
            condition: &s.condition,
        })
        .collect();
    let pred = model.forward_batch(tape, params, &items)?;
    let targets: Vec<&Tensor> = batch.iter().map(|s| &s.target).collect();
    let target = tape.constant(Tensor::concat(&targets, 0)?);
    let labels: Vec<String> = batch.iter().flat_map(|s| s.labels.iter().cloned()).collect();
    total_loss(tape, pred, target, &labels, ctx)
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], precision: Precision) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Ok(Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())?.rounded(precision))
}

/// Draws `t`, ε and `X_t` for one example.
pub fn prepare_sample(
    example: &TrainingExample,
    condition: FusedGraph,
    target: PredictionTarget,
    sched: &NoiseSchedule,
    precision: Precision,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedSample> {
    let t = rng.random_range(1..=sched.steps());
    let eps = gaussian(rng, example.x0.shape(), precision)?;
    let xt = q_sample(&example.x0, t, &eps, sched)?.rounded(precision);
    let target = match target {
        PredictionTarget::Epsilon => eps,
        PredictionTarget::X0 => example.x0.clone(),
    };
    Ok(PreparedSample {
        xt,
        t,
        condition,
        target,
        labels: example.labels.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub masked: usize,
    pub samples: usize,
}

impl EpochMetrics {
    /// `epoch, train_loss, val_loss, lr` (val_loss empty when not evaluated).
    pub fn log_line(&self) -> String {
        let val = self.val_loss.map(|v| format!("{v:.8e}")).unwrap_or_default();
        format!("{}, {:.8e}, {}, {:e}", self.epoch, self.train_loss, val, self.lr)
    }
}

const VALIDATION_STREAM: u64 = 0x7661_6c69_6461_7465;

/// Owns the model and optimizer state for a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Denoiser,
    config: TrainConfig,
    stats: CategoryStats,
    normalizer: Normalizer,
    schedule: NoiseSchedule,
    adam: Adam,
    plateau: Plateau,
    lr: f64,
    rng: ChaCha8Rng,
    epoch: usize,
    /// Samples whose condition was replaced by the masked form, over the whole run.
    pub masked_count: usize,
    pub sample_count: usize,
}

impl Trainer {
    pub fn new(model: Denoiser, config: TrainConfig, stats: CategoryStats, normalizer: Normalizer) -> Result<Self> {
        config.validate()?;
        if !normalizer.is_fitted() {
            return Err(Error::UnfittedNormalizer);
        }
        let schedule = make_schedule(config.schedule, config.steps)?;
        Ok(Self {
            plateau: Plateau::new(config.plateau_factor, config.plateau_patience),
            lr: config.lr,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            stats,
            normalizer,
            schedule,
            adam: Adam::new(),
            epoch: 0,
            masked_count: 0,
            sample_count: 0,
        })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn into_model(self) -> Denoiser {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn stats(&self) -> &CategoryStats {
        &self.stats
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    fn context(&self) -> LossContext<'_> {
        LossContext {
            target: self.config.prediction_target,
            recon: self.config.recon,
            weights: self.config.loss_weights,
            stats: &self.stats,
            normalizer: &self.normalizer,
        }
    }

    /// One optimizer step on `batch`; returns its loss.
    pub fn step(&mut self, batch: &[PreparedSample]) -> Result<f64> {
        let precision = self.model.config().precision;
        let mut tape = Tape::new(precision);
        let bound = self.model.params().bind(&mut tape, true);
        let loss_var = batch_loss(&self.model, &mut tape, &bound, batch, &self.context())?;
        let loss = tape.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                location: format!("training loss at epoch {}, timesteps {:?}", self.epoch, timesteps(batch)),
            });
        }
        tape.backward(loss_var)?;
        let grads: Vec<Tensor> = bound
            .iter()
            .zip(self.model.params().iter())
            .map(|((_, v), (_, p))| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let params = self.model.params_mut();
        self.adam.update(params.iter_mut().map(|(_, t)| t), &grads, self.lr, self.config.weight_decay)?;
        round_params(params, precision);
        Ok(loss)
    }

    /// One pass over `data` in shuffled mini-batches.
    pub fn train_epoch(&mut self, data: &[TrainingExample]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let precision = self.model.config().precision;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut masked = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let drop = self.rng.random::<f64>() < self.config.drop_prob;
                let condition = if drop {
                    masked += 1;
                    mask_condition(&data[i].condition)
                } else {
                    data[i].condition.clone()
                };
                batch.push(prepare_sample(
                    &data[i],
                    condition,
                    self.config.prediction_target,
                    &self.schedule,
                    precision,
                    &mut self.rng,
                )?);
            }
            total += self.step(&batch)? * chunk.len() as f64;
        }
        self.epoch += 1;
        self.masked_count += masked;
        self.sample_count += data.len();
        Ok(EpochMetrics {
            epoch: self.epoch,
            train_loss: total / data.len() as f64,
            val_loss: None,
            lr: self.lr,
            masked,
            samples: data.len(),
        })
    }

    /// Loss on `data` with noise drawn from a fixed stream, conditions kept.
    pub fn validation_loss(&self, data: &[TrainingExample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("validation set is empty"));
        }
        let precision = self.model.config().precision;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ VALIDATION_STREAM);
        let mut total = 0.0;
        let indices: Vec<usize> = (0..data.len()).collect();
        for chunk in indices.chunks(self.config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    prepare_sample(
                        &data[i],
                        data[i].condition.clone(),
                        self.config.prediction_target,
                        &self.schedule,
                        precision,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new(precision);
            let bound = self.model.params().bind(&mut tape, false);
            let loss = batch_loss(&self.model, &mut tape, &bound, &batch, &self.context())?;
            total += tape.value(loss).item() * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    }

    /// Feeds the plateau scheduler; returns `true` if the learning rate dropped.
    pub fn observe(&mut self, metric: f64) -> bool {
        let reduced = self.plateau.step(metric, &mut self.lr);
        if reduced {
            log::info!("epoch {}: learning rate reduced to {:e}", self.epoch, self.lr);
        }
        reduced
    }

    /// Trains for `config.epochs` epochs, scheduling on validation loss (or
    /// training loss when `val` is empty). `on_epoch` sees every epoch's metrics.
    pub fn fit(
        &mut self,
        train: &[TrainingExample],
        val: &[TrainingExample],
        mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            let mut m = self.train_epoch(train)?;
            if !val.is_empty() {
                m.val_loss = Some(self.validation_loss(val)?);
            }
            self.observe(m.val_loss.unwrap_or(m.train_loss));
            m.lr = self.lr;
            on_epoch(&m)?;
            history.push(m);
        }
        Ok(history)
    }
}

fn timesteps(batch: &[PreparedSample]) -> Vec<usize> {
    batch.iter().map(|s| s.t).collect()
}

fn round_params(params: &mut ParamStore, precision: Precision) {
    for (_, t) in params.iter_mut() {
        precision.round_slice(t.data_mut());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{pad_scene, SceneObject};

    fn scalar(tape: &mut Tape, v: f64) -> Var {
        tape.constant(Tensor::vector(vec![v]))
    }

    #[test]
    fn recon_examples() {
        let mut tape = Tape::new(Precision::F64);
        let (p, z) = (scalar(&mut tape, 1.0), scalar(&mut tape, 0.0));
        for kind in [ReconKind::L1, ReconKind::L2] {
            let l = recon_loss(&mut tape, p, z, kind).unwrap();
            assert_eq!(tape.value(l).item(), 1.0);
            let l = recon_loss(&mut tape, p, p, kind).unwrap();
            assert_eq!(tape.value(l).item(), 0.0);
        }
        let p = tape.constant(Tensor::vector(vec![1.0, 3.0]));
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = recon_loss(&mut tape, p, z, ReconKind::L2).unwrap();
        assert_eq!(tape.value(l).item(), 5.0);
    }

    fn identity_norm() -> Normalizer {
        // Maps [-1, 1] onto itself.
        Normalizer {
            min: vec![-1.0; ROW_DIM],
            max: vec![1.0; ROW_DIM],
        }
    }

    fn stats(volume: f64, ratios: [f64; 2]) -> CategoryStats {
        let mut s = CategoryStats::default();
        s.insert(
            "box",
            CategoryStat {
                mean_volume: volume,
                mean_log_ratio: ratios,
                count: 1,
            },
        );
        s
    }

    fn scene_var(tape: &mut Tape, sizes: &[[f64; 3]], n: usize) -> (Var, Vec<String>) {
        let objs: Vec<SceneObject> = sizes.iter().map(|s| SceneObject::axis_aligned("box", [0.0; 3], *s)).collect();
        let scene = pad_scene(&objs, n).unwrap();
        (tape.constant(scene.rows().clone()), scene.labels().to_vec())
    }

    #[test]
    fn volume_examples() {
        let mut tape = Tape::new(Precision::F64);
        let norm = identity_norm();
        let (p, labels) = scene_var(&mut tape, &[[1.0, 1.0, 1.0]], 3);
        let l = volume_loss(&mut tape, p, &labels, &stats(2.0, [0.0; 2]), &norm).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let l = volume_loss(&mut tape, p, &labels, &stats(1.0, [0.0; 2]), &norm).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let (e, empty) = scene_var(&mut tape, &[], 3);
        let l = volume_loss(&mut tape, e, &empty, &stats(1.0, [0.0; 2]), &norm).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn ratio_examples() {
        let mut tape = Tape::new(Precision::F64);
        let norm = identity_norm();
        let (cube, labels) = scene_var(&mut tape, &[[0.5, 0.5, 0.5]], 2);
        let l = aspect_ratio_loss(&mut tape, cube, &labels, &stats(1.0, [0.0; 2]), &norm).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        // sx/sy = e · 1, sy/sz matched.
        let e = std::f64::consts::E;
        let (p, labels) = scene_var(&mut tape, &[[0.3 * e, 0.3, 0.3]], 2);
        let l = aspect_ratio_loss(&mut tape, p, &labels, &stats(1.0, [0.0; 2]), &norm).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_category_is_an_error() {
        let mut tape = Tape::new(Precision::F64);
        let (p, labels) = scene_var(&mut tape, &[[1.0, 1.0, 1.0]], 2);
        let err = volume_loss(&mut tape, p, &labels, &CategoryStats::default(), &identity_norm()).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel(_)));
    }

    #[test]
    fn epsilon_mode_ignores_size_weights() {
        let mut tape = Tape::new(Precision::F64);
        let (p, labels) = scene_var(&mut tape, &[[1.0, 0.2, 0.7]], 2);
        let z = tape.constant(Tensor::zeros(&[2, ROW_DIM]));
        let st = stats(5.0, [1.0, -1.0]);
        let norm = identity_norm();
        let ctx = LossContext {
            target: PredictionTarget::Epsilon,
            recon: ReconKind::L2,
            weights: LossWeights {
                recon: 1.0,
                volume: 7.0,
                ratio: 9.0,
            },
            stats: &st,
            normalizer: &norm,
        };
        let total = total_loss(&mut tape, p, z, &labels, &ctx).unwrap();
        let recon = recon_loss(&mut tape, p, z, ReconKind::L2).unwrap();
        assert_eq!(tape.value(total).item(), tape.value(recon).item());
        let ctx = LossContext {
            target: PredictionTarget::X0,
            weights: LossWeights {
                recon: 1.0,
                volume: 0.0,
                ratio: 0.0,
            },
            ..ctx
        };
        let total = total_loss(&mut tape, p, z, &labels, &ctx).unwrap();
        assert_eq!(tape.value(total).item(), tape.value(recon).item());
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut adam = Adam::new();
        let mut p = [Tensor::vector(vec![1.0, 1.0, 1.0])];
        let g = [Tensor::vector(vec![0.3, -2.0, 0.0])];
        adam.update(p.iter_mut(), &g, 0.01, 0.0).unwrap();
        let d = p[0].data();
        assert!((d[0] - 0.99).abs() < 1e-6);
        assert!((d[1] - 1.01).abs() < 1e-6);
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut adam = Adam::new();
        let mut p = [Tensor::vector(vec![1.0])];
        let g = [Tensor::vector(vec![f64::NAN])];
        assert!(adam.update(p.iter_mut(), &g, 0.01, 0.0).is_err());
        assert_eq!(p[0].data(), &[1.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut adam = Adam::new();
        let mut p = [Tensor::vector(vec![1.0])];
        for _ in 0..200 {
            let g = [p[0].scale(2.0)];
            adam.update(p.iter_mut(), &g, 0.1, 0.0).unwrap();
        }
        assert!(p[0].item().abs() < 1e-2, "{}", p[0].item());
    }

    #[test]
    fn plateau_reductions() {
        let mut lr = 1.0;
        let mut p = Plateau::new(0.8, 60);
        for i in 0..500 {
            assert!(!p.step(100.0 - i as f64, &mut lr));
        }
        assert_eq!(lr, 1.0);

        let mut lr = 1.0;
        let mut p = Plateau::new(0.8, 60);
        p.step(1.0, &mut lr);
        let reductions = (0..60).filter(|_| p.step(1.0, &mut lr)).count();
        assert_eq!(reductions, 1);
        assert_eq!(lr, 0.8);
        (0..60).for_each(|_| {
            p.step(1.0, &mut lr);
        });
        assert!((lr - 0.64).abs() < 1e-15);
    }
}
