//! Sharpness-aware learnability: the largest absolute change in training loss
//! reachable by perturbing a single dense layer inside an epsilon ball while
//! every other layer stays fixed.

mod matrix;
mod multitask;

pub use matrix::{sal_matrix, sal_matrix_models, SalCell, SalManifest, SalMatrix};
pub use multitask::{sal_task_similarity, train_multitask, MultiTaskModel, Task, TaskSimilarity};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::diffcore::{Model, Target, Tensor};
use crate::error::{Error, Result};
use crate::seed::{derive, rng_from};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L2,
    Linf,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L2 => l2(v),
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    /// Projects `v` in place onto the ball of radius `eps`.
    pub fn project(self, v: &mut [f64], eps: f64) {
        match self {
            Norm::L2 => {
                let n = l2(v);
                if n > eps {
                    let s = eps / n;
                    v.iter_mut().for_each(|x| *x *= s);
                }
            }
            Norm::Linf => v.iter_mut().for_each(|x| *x = x.clamp(-eps, eps)),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Norm::L2),
            "linf" => Ok(Norm::Linf),
            other => Err(Error::invalid(format!("unknown norm {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SalProbeConfig {
    pub epsilon: f64,
    pub norm: Norm,
    pub ascent_iters: usize,
    /// Rows of the fixed evaluation batch drawn from the training set.
    pub eval_subset: usize,
    pub seed: u64,
}

impl Default for SalProbeConfig {
    fn default() -> Self {
        SalProbeConfig {
            epsilon: 0.05,
            norm: Norm::L2,
            ascent_iters: 10,
            eval_subset: 512,
            seed: 0,
        }
    }
}

impl SalProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.ascent_iters == 0 {
            return Err(Error::invalid("ascent_iters must be >= 1"));
        }
        if self.eval_subset == 0 {
            return Err(Error::invalid("eval_subset must be >= 1"));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        2.0 * self.epsilon / self.ascent_iters as f64
    }
}

/// Result of one projected ascent.
#[derive(Clone, Debug, PartialEq)]
pub struct Ascent {
    /// Largest `|L(v) - L(0)|` seen over the iterates.
    pub value: f64,
    /// Perturbation attaining `value`.
    pub delta: Vec<f64>,
    pub base_loss: f64,
    /// The gradient vanished at `v = 0`. The ascent then starts from a seeded
    /// random point on the ball's boundary instead.
    pub degenerate: bool,
}

/// Normalized-gradient projected ascent on `objective`, which maps a
/// perturbation to `(loss, gradient)`. Starts at `v = 0`, steps
/// `2 * eps / iters` along `g / |g|_2` and projects back onto the ball.
pub fn projected_ascent<F>(dim: usize, cfg: &SalProbeConfig, restart_seed: u64, mut objective: F) -> Result<Ascent>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let mut v = vec![0.0; dim];
    let (base_loss, mut g) = objective(&v)?;
    let mut best = Ascent {
        value: 0.0,
        delta: v.clone(),
        base_loss,
        degenerate: false,
    };
    if l2(&g) == 0.0 {
        best.degenerate = true;
        if dim == 0 {
            return Ok(best);
        }
        v = boundary_point(dim, cfg, restart_seed);
        let (loss, g1) = objective(&v)?;
        consider(&mut best, loss, &v);
        g = g1;
    }
    let eta = cfg.step_size();
    for _ in 0..cfg.ascent_iters {
        let n = l2(&g);
        if n == 0.0 || !n.is_finite() {
            break;
        }
        for (vi, gi) in v.iter_mut().zip(&g) {
            *vi += eta * gi / n;
        }
        cfg.norm.project(&mut v, cfg.epsilon);
        let (loss, g1) = objective(&v)?;
        consider(&mut best, loss, &v);
        g = g1;
    }
    Ok(best)
}

fn consider(best: &mut Ascent, loss: f64, v: &[f64]) {
    let diff = (loss - best.base_loss).abs();
    if diff > best.value {
        best.value = diff;
        best.delta = v.to_vec();
    }
}

fn boundary_point(dim: usize, cfg: &SalProbeConfig, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    loop {
        let u: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = cfg.norm.of(&u);
        if n > 0.0 {
            return u.into_iter().map(|x| x * cfg.epsilon / n).collect();
        }
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// SAL of dense layer `l` on `data`, for an arbitrary loss target.
pub fn sal_layer_target(
    model: &Model,
    l: usize,
    x: &Tensor,
    target: Target<'_>,
    cfg: &SalProbeConfig,
) -> Result<Ascent> {
    let mut probe = model.clone();
    probe.freeze_all_except(l)?;
    let dim = probe.dense(l)?.param_count();
    let restart = derive(cfg.seed, &format!("sal-restart-{l}"));
    projected_ascent(dim, cfg, restart, |v| {
        let lg = probe.perturb_layer(l, v)?.loss_and_grad(x, target, false)?;
        let g = lg.grads.layer_flat(l).unwrap_or_else(|| vec![0.0; dim]);
        Ok((lg.loss, g))
    })
}

/// SAL of dense layer `l` under mean cross-entropy on `data`. The input
/// model is never modified.
pub fn sal_layer(model: &Model, l: usize, data: &Dataset, cfg: &SalProbeConfig) -> Result<Ascent> {
    if data.dim() != model.input_dim() {
        return Err(Error::shape("evaluation batch dimension differs from model input"));
    }
    sal_layer_target(model, l, &data.features, Target::Labels(&data.labels), cfg)
}

/// Grid oracle over a 2-D disk: `grid_n x grid_n` square lattice clipped to
/// the disk plus `8 * grid_n` points on the boundary circle.
pub fn disk_oracle<F>(epsilon: f64, grid_n: usize, mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if epsilon == 0.0 {
        return Ok(0.0);
    }
    if !(epsilon > 0.0) || grid_n < 2 {
        return Err(Error::invalid("oracle needs epsilon >= 0 and grid_n >= 2"));
    }
    let base = f(&[0.0, 0.0])?;
    let mut best: f64 = 0.0;
    let step = 2.0 * epsilon / (grid_n - 1) as f64;
    for i in 0..grid_n {
        for j in 0..grid_n {
            let p = [-epsilon + i as f64 * step, -epsilon + j as f64 * step];
            if p[0] * p[0] + p[1] * p[1] <= epsilon * epsilon {
                best = best.max((f(&p)? - base).abs());
            }
        }
    }
    let ring = 8 * grid_n;
    for k in 0..ring {
        let a = std::f64::consts::TAU * k as f64 / ring as f64;
        best = best.max((f(&[epsilon * a.cos(), epsilon * a.sin()])? - base).abs());
    }
    Ok(best)
}

/// Exhaustive l2 SAL for a dense layer holding exactly two parameters.
pub fn sal_oracle_2param(model: &Model, l: usize, data: &Dataset, epsilon: f64, grid_n: usize) -> Result<f64> {
    let n = model.dense(l)?.param_count();
    if n != 2 {
        return Err(Error::invalid(format!("layer {l} has {n} parameters, oracle needs 2")));
    }
    disk_oracle(epsilon, grid_n, |v| {
        model
            .perturb_layer(l, v)?
            .loss(&data.features, Target::Labels(&data.labels))
    })
}
