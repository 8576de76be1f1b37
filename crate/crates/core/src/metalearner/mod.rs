//! The ELU network and the Hessian-corrected meta-learning steps run by each
//! coalition member.

mod mlp;
mod model;

use log::debug;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Shard};
use crate::error::{Error, Result};
use crate::LearnerId;

pub use mlp::{accuracy, embedding, forward, grad, hessian_vector, hessian_vector_fd, loss, loss_and_grad};
pub use model::{norm, Architecture, ModelParams, DEFAULT_HIDDEN};

/// How the Hessian-vector product inside the meta-gradient is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvpMode {
    #[default]
    Exact,
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaHyper {
    /// Outer (meta) learning rate.
    pub alpha: f64,
    /// Inner adaptation step size.
    pub beta: f64,
    /// Local meta-steps per round.
    pub tau: usize,
    /// Size of each of the three independent batches.
    pub batch_size: usize,
    pub hvp: HvpMode,
}

impl MetaHyper {
    pub fn new(alpha: f64, beta: f64, tau: usize, batch_size: usize) -> Result<Self> {
        if !(alpha > 0.0) || !(beta > 0.0) || tau == 0 || batch_size == 0 {
            return Err(Error::InvalidParam(format!(
                "meta hyper-parameters out of range: alpha={alpha} beta={beta} tau={tau} batch={batch_size}"
            )));
        }
        Ok(Self {
            alpha,
            beta,
            tau,
            batch_size,
            hvp: HvpMode::Exact,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub round: u64,
    pub owner: LearnerId,
}

/// Per-round training contribution of one learner.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundContribution {
    /// Loss-reduction proxy, clamped to [-1, 1].
    pub u: f64,
    /// Norm of each applied meta-gradient.
    pub grad_norms: Vec<f64>,
}

/// Per-step contribution term `‖g‖² − 2(1 + 1/√|D|)‖g‖`.
pub fn contribution_term(grad_norm: f64, batch_size: usize) -> f64 {
    grad_norm * grad_norm - 2.0 * (1.0 + 1.0 / (batch_size as f64).sqrt()) * grad_norm
}

fn hvp(params: &ModelParams, data: &Dataset, batch: &[usize], v: &[f64], mode: HvpMode) -> Result<Vec<f64>> {
    match mode {
        HvpMode::Exact => hessian_vector(params, data, batch, v),
        HvpMode::FiniteDifference => hessian_vector_fd(params, data, batch, v),
    }
}

/// `(I − β ∇²f(θ, D'')) ∇f(θ − β ∇f(θ, D), D')`.
pub fn meta_gradient(
    params: &ModelParams,
    hyper: &MetaHyper,
    data: &Dataset,
    inner: &[usize],
    outer: &[usize],
    hessian: &[usize],
) -> Result<Vec<f64>> {
    let g_inner = grad(params, data, inner)?;
    let mut adapted = params.clone();
    adapted.axpy(-hyper.beta, &g_inner);
    let mut g_outer = grad(&adapted, data, outer)?;
    if hyper.beta != 0.0 {
        let hv = hvp(params, data, hessian, &g_outer, hyper.hvp)?;
        for (g, h) in g_outer.iter_mut().zip(&hv) {
            *g -= hyper.beta * h;
        }
    }
    Ok(g_outer)
}

/// Three batches of `size`: disjoint when the pool holds at least `3 * size`
/// samples, otherwise each drawn with replacement.
fn draw_batches(n: usize, size: usize, rng: &mut impl Rng) -> [Vec<usize>; 3] {
    if n >= 3 * size {
        let idx = sample_indices(rng, n, 3 * size).into_vec();
        [
            idx[..size].to_vec(),
            idx[size..2 * size].to_vec(),
            idx[2 * size..].to_vec(),
        ]
    } else {
        let mut draw = || (0..size).map(|_| rng.random_range(0..n)).collect::<Vec<_>>();
        [draw(), draw(), draw()]
    }
}

/// Runs `hyper.tau` meta-steps on the shard's training split and accumulates
/// the contribution `u`.
pub fn local_update(
    params: &ModelParams,
    hyper: &MetaHyper,
    shard: &Shard,
    rng: &mut impl Rng,
) -> Result<(ModelParams, RoundContribution)> {
    let train = &shard.train;
    let mut theta = params.clone();
    let mut contribution = RoundContribution::default();
    if train.is_empty() || hyper.tau == 0 {
        return Ok((theta, contribution));
    }
    let mut u = 0.0;
    for _ in 0..hyper.tau {
        let [d, d_outer, d_hessian] = draw_batches(train.len(), hyper.batch_size, rng);
        let g = meta_gradient(&theta, hyper, train, &d, &d_outer, &d_hessian)?;
        let g_norm = norm(&g);
        u += contribution_term(g_norm, hyper.batch_size);
        contribution.grad_norms.push(g_norm);
        theta.axpy(-hyper.alpha, &g);
    }
    if !(-1.0..=1.0).contains(&u) {
        debug!("learner {}: contribution {u:.4} clamped to [-1, 1]", shard.owner_id);
    }
    contribution.u = u.clamp(-1.0, 1.0);
    if !theta.is_finite() {
        return Err(Error::InvalidParam(format!(
            "non-finite parameters after local update of learner {}",
            shard.owner_id
        )));
    }
    Ok((theta, contribution))
}

/// Unweighted parameter mean.
pub fn aggregate(models: &[ModelParams]) -> Result<ModelParams> {
    let first = models.first().ok_or(Error::EmptyCoalition)?;
    let mut mean = first.clone();
    for m in &models[1..] {
        if m.arch() != first.arch() {
            return Err(Error::ShapeMismatch {
                expected: first.len(),
                found: m.len(),
            });
        }
        for (acc, v) in mean.values_mut().iter_mut().zip(m.values()) {
            *acc += v;
        }
    }
    let scale = 1.0 / models.len() as f64;
    mean.values_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(mean)
}

/// `steps` full-batch gradient steps of size β on the support samples.
pub fn personalize(
    params: &ModelParams,
    hyper: &MetaHyper,
    data: &Dataset,
    support: &[usize],
    steps: usize,
) -> Result<ModelParams> {
    let mut theta = params.clone();
    if steps == 0 {
        return Ok(theta);
    }
    if support.is_empty() {
        return Err(Error::InvalidParam("personalization needs support samples".into()));
    }
    for _ in 0..steps {
        let g = grad(&theta, data, support)?;
        theta.axpy(-hyper.beta, &g);
    }
    Ok(theta)
}

pub fn embed(params: &ModelParams, data: &Dataset, probe: &[usize], owner: LearnerId, round: u64) -> Result<Embedding> {
    Ok(Embedding {
        vector: embedding(params, data, probe)?,
        round,
        owner,
    })
}
