//! Forward noising, the reverse generative step, classifier-free guidance
//! and dynamic thresholding.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `ᾱ₀ = 1` by convention.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{mask_condition, FusedGraph, SceneGraph};
use crate::scene::SceneMatrix;
use crate::tensor::Tensor;

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
pub const DEFAULT_STEPS: usize = 1000;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;
const MIN_ALPHA_BAR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_var: Vec<f64>,
}

/// Builds a linear or cosine schedule with `steps` timesteps.
pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("noise schedule needs at least one step"));
    }
    let betas = match kind {
        ScheduleKind::Linear if steps == 1 => vec![LINEAR_BETA_START],
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                LINEAR_BETA_START
                    + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (steps - 1) as f64
            })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                (((t / steps as f64) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            let f0 = f(0.0);
            (1..=steps)
                .map(|t| {
                    let prev = f((t - 1) as f64) / f0;
                    let cur = f(t as f64) / f0;
                    (1.0 - cur / prev).min(COSINE_MAX_BETA)
                })
                .collect()
        }
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("noise schedule needs at least one step"));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_var = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_var,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::IndexOutOfRange {
                what: "timestep (1-based)",
                index: t,
                len: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.idx(t)?])
    }

    /// `ᾱ_t`, with `ᾱ₀ = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.idx(t)?])
    }

    pub fn posterior_var(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_var[self.idx(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_var
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionTarget {
    #[default]
    Epsilon,
    X0,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub guidance_scale: f64,
    pub threshold_percentile: f64,
    pub prediction_target: PredictionTarget,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 3.0,
            threshold_percentile: 85.0,
            prediction_target: PredictionTarget::Epsilon,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_percentile > 0.0 && self.threshold_percentile <= 100.0) {
            return Err(Error::invalid("threshold percentile must lie in (0, 100]"));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::invalid("guidance scale must be non-negative"));
        }
        Ok(())
    }
}

/// `X_t = √ᾱ_t·X₀ + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.idx(t)?;
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, "q_sample", |x, e| a * x + b * e)
}

/// Inverts [`q_sample`] for a noise estimate.
pub fn predict_x0_from_eps(xt: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.idx(t)?;
    let ab = sched.alpha_bar(t)?;
    if ab < MIN_ALPHA_BAR {
        return Err(Error::invalid(format!("alpha_bar at t={t} is {ab:e}; schedule is misconfigured")));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    xt.zip_map(eps_hat, "predict_x0", |x, e| (x - b * e) / a)
}

/// Noise implied by an `X₀` estimate.
pub fn predict_eps_from_x0(xt: &Tensor, t: usize, x0_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.idx(t)?;
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    if b == 0.0 {
        return Err(Error::invalid("cannot recover noise at zero noise level"));
    }
    xt.zip_map(x0_hat, "predict_eps", |x, x0| (x - a * x0) / b)
}

/// `μ = (1/√α_t)·(X_t − β_t/√(1−ᾱ_t)·ε̂)`.
pub fn posterior_mean(xt: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let alpha = sched.alpha(t)?;
    let beta = sched.beta(t)?;
    let ab = sched.alpha_bar(t)?;
    if ab < MIN_ALPHA_BAR {
        return Err(Error::invalid(format!("alpha_bar at t={t} is {ab:e}; schedule is misconfigured")));
    }
    let c = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    xt.zip_map(eps_hat, "posterior_mean", |x, e| inv * (x - c * e))
}

/// Mean of `q(X_{t−1} | X_t, X₀)` written in terms of an `X₀` estimate.
pub fn posterior_mean_from_x0(xt: &Tensor, t: usize, x0_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let beta = sched.beta(t)?;
    let alpha = sched.alpha(t)?;
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t - 1)?;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    x0_hat.zip_map(xt, "posterior_mean_from_x0", |x0, x| c0 * x0 + ct * x)
}

/// Nearest-rank percentile of `|values|`: the smallest entry such that at
/// least `percentile`% of all entries are ≤ it.
pub fn abs_percentile(values: &[f64], percentile: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let n = abs.len();
    let rank = ((percentile / 100.0) * n as f64 - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    abs[rank - 1]
}

/// Clamps to `[−s, s]` and divides by `s`, where `s = max(1, percentile of |x|)`.
pub fn dynamic_threshold(x0_hat: &Tensor, percentile: f64) -> Tensor {
    let s = abs_percentile(x0_hat.data(), percentile).max(1.0);
    x0_hat.map(|v| v.clamp(-s, s) / s)
}

/// `(1 − w)·ε_u + w·ε_c`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, w: f64) -> Result<Tensor> {
    eps_uncond.zip_map(eps_cond, "cfg_combine", |u, c| (1.0 - w) * u + w * c)
}

/// A network that predicts noise or the clean scene from a noisy scene.
pub trait Denoise {
    fn predict(&self, xt: &Tensor, t: usize, condition: &FusedGraph) -> Result<Tensor>;

    /// Fuses a condition graph for this model's matrix size and label table.
    fn condition(&self, graph: &SceneGraph) -> Result<FusedGraph>;

    fn n_max(&self) -> usize;
}

fn checked(pred: Tensor, t: usize, which: &str) -> Result<Tensor> {
    match pred.first_non_finite() {
        None => Ok(pred),
        Some(i) => Err(Error::NonFinite {
            location: format!("{which} model output, step {t}, entry {i}"),
        }),
    }
}

/// One reverse step `X_t → X_{t−1}` with guidance and thresholding.
pub fn p_sample_step<M: Denoise + ?Sized, R: Rng>(
    xt: &Tensor,
    t: usize,
    model: &M,
    condition: &FusedGraph,
    guidance: &GuidanceConfig,
    rng: &mut R,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let masked = mask_condition(condition);
    let uncond = checked(model.predict(xt, t, &masked)?, t, "unconditional")?;
    let cond = checked(model.predict(xt, t, condition)?, t, "conditional")?;
    let guided = cfg_combine(&uncond, &cond, guidance.guidance_scale)?;
    let x0_hat = match guidance.prediction_target {
        PredictionTarget::Epsilon => predict_x0_from_eps(xt, t, &guided, sched)?,
        PredictionTarget::X0 => guided,
    };
    let x0_hat = dynamic_threshold(&x0_hat, guidance.threshold_percentile);
    let mut mean = posterior_mean_from_x0(xt, t, &x0_hat, sched)?;
    if t > 1 {
        let sigma = sched.posterior_var(t)?.sqrt();
        for v in mean.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Ok(mean)
}

/// Runs the full reverse chain from `X_T ~ N(0, I)` and returns the final
/// (normalized) scene, labeled from the graph's nodes.
pub fn sample_loop<M: Denoise + ?Sized>(
    model: &M,
    graph: &SceneGraph,
    guidance: &GuidanceConfig,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<SceneMatrix> {
    guidance.validate()?;
    let condition = model.condition(graph)?;
    let rows = sample_rows(model, &condition, guidance, seed, sched)?;
    let n = model.n_max();
    let mut labels = vec![crate::scene::EMPTY_LABEL.to_string(); n];
    for (i, l) in graph.node_labels.iter().enumerate() {
        labels[i] = l.clone();
    }
    SceneMatrix::new(rows, labels)
}

/// [`sample_loop`] on an already fused condition, returning the raw matrix.
pub fn sample_rows<M: Denoise + ?Sized>(
    model: &M,
    condition: &FusedGraph,
    guidance: &GuidanceConfig,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = condition.node_features.shape().to_vec();
    let n: usize = shape.iter().product();
    let mut x = Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())?;
    for t in (1..=sched.steps()).rev() {
        x = p_sample_step(&x, t, model, condition, guidance, &mut rng, sched)?;
    }
    Ok(x)
}
