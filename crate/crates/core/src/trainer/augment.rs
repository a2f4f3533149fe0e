//! Batch-level defenses: MixUp, CutOut and PGD adversarial training.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::diffcore::{Model, SgdMomentum, Target, Tensor};
use crate::error::{Error, Result};
use crate::poisons::project_linf;

/// One-hot rows for `labels`.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![labels.len(), n_classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.row_mut(i)[y] = 1.0;
    }
    t
}

/// MixUp with a fixed mixing weight and partner permutation:
/// `x'_i = lam * x_i + (1 - lam) * x_perm[i]`, labels mixed the same way.
pub fn mixup_with(
    x: &Tensor,
    labels: &[usize],
    n_classes: usize,
    lam: f64,
    perm: &[usize],
) -> Result<(Tensor, Tensor)> {
    if perm.len() != x.rows() || labels.len() != x.rows() {
        return Err(Error::shape("mixup permutation/labels length differs from batch"));
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::invalid(format!("mixing weight {lam} outside [0, 1]")));
    }
    let hot = one_hot(labels, n_classes);
    let mut xm = x.clone();
    let mut ym = hot.clone();
    for (i, &j) in perm.iter().enumerate() {
        for (a, (&xi, &xj)) in xm.row_mut(i).iter_mut().zip(x.row(i).iter().zip(x.row(j))) {
            *a = if lam == 1.0 { xi } else { lam * xi + (1.0 - lam) * xj };
        }
        for (a, (&yi, &yj)) in ym.row_mut(i).iter_mut().zip(hot.row(i).iter().zip(hot.row(j))) {
            *a = if lam == 1.0 { yi } else { lam * yi + (1.0 - lam) * yj };
        }
    }
    Ok((xm, ym))
}

/// MixUp with `lam ~ Beta(alpha, alpha)` and a random in-batch partner.
pub fn mixup_batch<R: Rng + ?Sized>(
    x: &Tensor,
    labels: &[usize],
    n_classes: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("mixup alpha {alpha} must be > 0")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?;
    let lam = beta.sample(rng);
    let mut perm: Vec<usize> = (0..x.rows()).collect();
    perm.shuffle(rng);
    mixup_with(x, labels, n_classes, lam, &perm)
}

/// Overwrites `width` consecutive coordinates starting at `starts[i]` in row `i`.
pub fn cutout_with(x: &Tensor, width: usize, fill: f64, starts: &[usize]) -> Result<Tensor> {
    let d = x.cols();
    if width > d {
        return Err(Error::invalid(format!("cutout width {width} exceeds dimension {d}")));
    }
    if starts.len() != x.rows() {
        return Err(Error::shape("one cutout start per row required"));
    }
    let mut out = x.clone();
    for (i, &s) in starts.iter().enumerate() {
        if s + width > d {
            return Err(Error::invalid(format!("cutout window {s}..{} out of range", s + width)));
        }
        out.row_mut(i)[s..s + width].fill(fill);
    }
    Ok(out)
}

/// CutOut on feature vectors: one random contiguous window per sample.
pub fn cutout_batch<R: Rng + ?Sized>(x: &Tensor, width: usize, fill: f64, rng: &mut R) -> Result<Tensor> {
    let d = x.cols();
    if width > d {
        return Err(Error::invalid(format!("cutout width {width} exceeds dimension {d}")));
    }
    let starts: Vec<usize> = (0..x.rows()).map(|_| rng.random_range(0..=d - width)).collect();
    cutout_with(x, width, fill, &starts)
}

/// Worst-case perturbation by signed-gradient ascent inside the l-inf ball,
/// starting from zero, step `2.5 * budget / steps`.
pub fn craft_adversarial(model: &Model, x: &Tensor, labels: &[usize], budget: f64, steps: usize) -> Result<Tensor> {
    let mut delta = Tensor::zeros(x.shape().to_vec());
    if steps == 0 || budget == 0.0 {
        return Ok(delta);
    }
    let step = 2.5 * budget / steps as f64;
    for _ in 0..steps {
        let xp = add(x, &delta);
        let g = model
            .loss_and_grad(&xp, Target::Labels(labels), true)?
            .input_grad
            .expect("input gradient");
        for (d, gv) in delta.data_mut().iter_mut().zip(g.data()) {
            *d += step * sign(*gv);
        }
        delta = project_linf(&delta, budget, x)?;
    }
    Ok(delta)
}

/// One adversarial-training update: craft `delta` against the current model,
/// then take an SGD step on `x + delta`. With `inner_steps == 0` this is a
/// plain SGD step. Returns the perturbed-batch loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn adv_train_step(
    model: &mut Model,
    opt: &mut SgdMomentum,
    x: &Tensor,
    labels: &[usize],
    budget: f64,
    inner_steps: usize,
    lr: f64,
    momentum: f64,
) -> Result<f64> {
    if !(budget > 0.0) {
        return Err(Error::invalid("adversarial training budget must be > 0"));
    }
    let delta = craft_adversarial(model, x, labels, budget, inner_steps)?;
    let xp = add(x, &delta);
    let lg = model.loss_and_grad(&xp, Target::Labels(labels), false)?;
    opt.step(model, &lg.grads, lr, momentum)?;
    Ok(lg.loss)
}

pub(crate) fn add(x: &Tensor, delta: &Tensor) -> Tensor {
    let mut out = x.clone();
    for (a, d) in out.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
    out
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
