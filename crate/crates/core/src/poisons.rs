//! Unlearnable / availability perturbations under a shared l-inf budget.
//!
//! Budgets are in normalized feature units: features live in `[0, 1]` and a
//! perturbed sample is always clipped back into that range.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::diffcore::{Architecture, Model, SgdMomentum, Target, Tensor};
use crate::error::{Error, Result};
use crate::io::{csv_reader, csv_writer, fmt_cell, read_json, write_json};
use crate::seed::{derive, rng_from};
use crate::trainer::{add, sign};

/// Default budget, 8/255 in normalized units.
pub const DEFAULT_BUDGET: f64 = 8.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoisonMethod {
    Em,
    Ops,
    Tap,
    Lsp,
}

impl PoisonMethod {
    pub const ALL: [PoisonMethod; 4] = [
        PoisonMethod::Em,
        PoisonMethod::Ops,
        PoisonMethod::Tap,
        PoisonMethod::Lsp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoisonMethod::Em => "em",
            PoisonMethod::Ops => "ops",
            PoisonMethod::Tap => "tap",
            PoisonMethod::Lsp => "lsp",
        }
    }

    pub fn scope(self) -> Scope {
        match self {
            PoisonMethod::Em | PoisonMethod::Tap => Scope::SampleWise,
            PoisonMethod::Ops | PoisonMethod::Lsp => Scope::ClassWise,
        }
    }
}

impl fmt::Display for PoisonMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name().to_uppercase())
    }
}

impl FromStr for PoisonMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "em" => Ok(PoisonMethod::Em),
            "ops" => Ok(PoisonMethod::Ops),
            "tap" => Ok(PoisonMethod::Tap),
            "lsp" => Ok(PoisonMethod::Lsp),
            other => Err(Error::invalid(format!("unknown poison method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    SampleWise,
    ClassWise,
}

/// Generator diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoisonReport {
    /// EM only: whether the proxy reached the stop accuracy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proxy_train_acc: Option<f64>,
    /// TAP only: fraction of samples the source model assigns to the target label.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_success: Option<f64>,
}

/// A clean dataset plus additive perturbations. The training features are
/// `clamp(base + delta, 0, 1)`; labels are never touched.
#[derive(Clone, Debug)]
pub struct PoisonedDataset {
    pub base: Arc<Dataset>,
    pub deltas: Tensor,
    pub method: PoisonMethod,
    pub budget: f64,
    pub scope: Scope,
    pub report: PoisonReport,
}

impl PoisonedDataset {
    fn new(base: &Dataset, deltas: Tensor, method: PoisonMethod, budget: f64, report: PoisonReport) -> Result<Self> {
        if !deltas.same_shape(&base.features) {
            return Err(Error::shape("delta matrix differs in shape from features"));
        }
        if deltas.max_abs() > budget * (1.0 + 1e-12) {
            return Err(Error::invalid(format!(
                "delta norm {} exceeds budget {budget}",
                deltas.max_abs()
            )));
        }
        Ok(PoisonedDataset {
            base: Arc::new(base.clone()),
            deltas,
            method,
            budget,
            scope: method.scope(),
            report,
        })
    }

    /// Perturbed training set.
    pub fn materialize(&self) -> Dataset {
        let mut x = add(&self.base.features, &self.deltas);
        for v in x.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        self.base.with_features(x).expect("same shape")
    }

    pub fn max_delta(&self) -> f64 {
        self.deltas.max_abs()
    }

    /// `deltas.csv` (header `d0..d{d-1}`) plus a `manifest.json` sidecar.
    pub fn save(&self, dir: &Path, seed: u64, config_hash: Option<&str>) -> Result<()> {
        let comment = config_hash.map(|h| format!("config_hash={h}"));
        let mut w = csv_writer(&dir.join("deltas.csv"), comment.as_deref())?;
        let header: Vec<String> = (0..self.deltas.cols()).map(|j| format!("d{j}")).collect();
        w.write_record(&header)?;
        for i in 0..self.deltas.rows() {
            w.write_record(self.deltas.row(i).iter().map(|v| fmt_cell(*v)))?;
        }
        w.flush()?;
        write_json(
            &dir.join("manifest.json"),
            &PoisonManifest {
                version: 1,
                method: self.method,
                budget: self.budget,
                scope: self.scope,
                seed,
                n_samples: self.deltas.rows(),
                dim: self.deltas.cols(),
                config_hash: config_hash.map(str::to_owned),
                report: self.report.clone(),
            },
        )
    }

    /// Reattaches saved deltas to their clean base dataset.
    pub fn load(dir: &Path, base: &Dataset) -> Result<PoisonedDataset> {
        let manifest: PoisonManifest = read_json(&dir.join("manifest.json"))?;
        let mut r = csv_reader(&dir.join("deltas.csv"))?;
        let mut data = Vec::new();
        for rec in r.records() {
            for v in rec?.iter() {
                data.push(
                    v.parse::<f64>()
                        .map_err(|e| Error::invalid(format!("bad delta {v:?}: {e}")))?,
                );
            }
        }
        let deltas = Tensor::new(vec![manifest.n_samples, manifest.dim], data)?;
        PoisonedDataset::new(base, deltas, manifest.method, manifest.budget, manifest.report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoisonManifest {
    pub version: u32,
    pub method: PoisonMethod,
    pub budget: f64,
    pub scope: Scope,
    pub seed: u64,
    pub n_samples: usize,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub report: PoisonReport,
}

/// Clamps every coordinate of `delta` to `[-budget, budget]`, then clips
/// `x + delta` into `[0, 1]` and returns the resulting delta.
pub fn project_linf(delta: &Tensor, budget: f64, x: &Tensor) -> Result<Tensor> {
    if !delta.same_shape(x) {
        return Err(Error::shape("delta and x differ in shape"));
    }
    let mut out = delta.clone();
    for (d, &xv) in out.data_mut().iter_mut().zip(x.data()) {
        let clamped = d.clamp(-budget, budget);
        let moved = xv + clamped;
        *d = if moved > 1.0 {
            1.0 - xv
        } else if moved < 0.0 {
            -xv
        } else {
            clamped
        };
    }
    Ok(out)
}

/// Knobs for [`em_perturb`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub budget: f64,
    pub outer_rounds: usize,
    pub train_steps: usize,
    pub pgd_steps: usize,
    /// Defaults to `2.5 * budget / pgd_steps`.
    pub step_size: Option<f64>,
    pub lr: f64,
    pub batch_size: usize,
    pub stop_accuracy: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            budget: DEFAULT_BUDGET,
            outer_rounds: 10,
            train_steps: 20,
            pgd_steps: 10,
            step_size: None,
            lr: 0.1,
            batch_size: 64,
            stop_accuracy: 0.99,
        }
    }
}

fn default_step(budget: f64, steps: usize) -> f64 {
    2.5 * budget / steps.max(1) as f64
}

/// Error-minimizing noise: alternate proxy training on the current poisoned
/// set with per-sample signed-gradient descent on the perturbations, until the
/// proxy fits the poisoned set or `outer_rounds` run out. A final pass against
/// the final proxy keeps, per sample, the lowest-loss perturbation seen
/// (including zero), so every poisoned sample has loss no higher than its
/// clean version under that proxy.
pub fn em_perturb(ds: &Dataset, arch: &Architecture, cfg: &EmConfig, seed: u64) -> Result<(PoisonedDataset, Model)> {
    if !(cfg.budget >= 0.0) {
        return Err(Error::invalid("budget must be >= 0"));
    }
    let mut rng = rng_from(derive(seed, "em-proxy-init"));
    let mut proxy = arch.build(&mut rng)?;
    let x = &ds.features;
    let mut delta = Tensor::zeros(x.shape().to_vec());
    let mut report = PoisonReport {
        converged: Some(false),
        ..Default::default()
    };
    if cfg.budget == 0.0 {
        return Ok((PoisonedDataset::new(ds, delta, PoisonMethod::Em, 0.0, report)?, proxy));
    }
    let step = cfg.step_size.unwrap_or_else(|| default_step(cfg.budget, cfg.pgd_steps));
    let mut opt = SgdMomentum::new();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut cursor = order.len();
    let mut rounds = 0;
    for _ in 0..cfg.outer_rounds {
        rounds += 1;
        let poisoned = clip_add(x, &delta);
        for _ in 0..cfg.train_steps {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let end = (cursor + cfg.batch_size).min(order.len());
            let idx = &order[cursor..end];
            cursor = end;
            let xb = poisoned.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            let g = proxy.loss_and_grad(&xb, Target::Labels(&yb), false)?.grads;
            opt.step(&mut proxy, &g, cfg.lr, 0.0)?;
        }
        let acc = proxy.accuracy(&poisoned, &ds.labels)?;
        report.proxy_train_acc = Some(acc);
        if acc >= cfg.stop_accuracy {
            report.converged = Some(true);
            break;
        }
        delta = descend(&proxy, x, &ds.labels, delta, cfg.budget, cfg.pgd_steps, step, false)?;
    }
    delta = descend(&proxy, x, &ds.labels, delta, cfg.budget, cfg.pgd_steps, step, true)?;
    report.rounds = Some(rounds);
    Ok((
        PoisonedDataset::new(ds, delta, PoisonMethod::Em, cfg.budget, report)?,
        proxy,
    ))
}

fn clip_add(x: &Tensor, delta: &Tensor) -> Tensor {
    let mut out = add(x, delta);
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Signed-gradient descent on per-sample loss w.r.t. the perturbation,
/// keeping each sample's best iterate. With `include_zero`, the clean input is
/// also a candidate.
#[allow(clippy::too_many_arguments)]
fn descend(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    start: Tensor,
    budget: f64,
    steps: usize,
    step: f64,
    include_zero: bool,
) -> Result<Tensor> {
    let d = x.cols();
    let mut best = start.clone();
    let mut best_loss = model.per_sample_losses(&add(x, &start), labels)?;
    if include_zero {
        let clean = model.per_sample_losses(x, labels)?;
        for i in 0..labels.len() {
            if clean[i] <= best_loss[i] {
                best_loss[i] = clean[i];
                best.row_mut(i).fill(0.0);
            }
        }
    }
    let mut delta = start;
    for _ in 0..steps {
        let g = model
            .loss_and_grad(&add(x, &delta), Target::Labels(labels), true)?
            .input_grad
            .expect("input gradient");
        for (dv, gv) in delta.data_mut().iter_mut().zip(g.data()) {
            *dv -= step * sign(*gv);
        }
        delta = project_linf(&delta, budget, x)?;
        let losses = model.per_sample_losses(&add(x, &delta), labels)?;
        for (i, l) in losses.into_iter().enumerate() {
            if l < best_loss[i] {
                best_loss[i] = l;
                best.row_mut(i).copy_from_slice(&delta.data()[i * d..(i + 1) * d]);
            }
        }
    }
    Ok(best)
}

/// One-coordinate class shortcut: coordinate `class % d` of every sample of
/// that class is overwritten with `value`.
pub fn ops_perturb(ds: &Dataset, value: f64) -> Result<PoisonedDataset> {
    let d = ds.dim();
    if ds.n_classes > d {
        return Err(Error::invalid(format!(
            "{} classes need distinct coordinates but only {d} dimensions exist",
            ds.n_classes
        )));
    }
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::invalid(format!("shortcut value {value} outside [0, 1]")));
    }
    let mut delta = Tensor::zeros(ds.features.shape().to_vec());
    for (i, &y) in ds.labels.iter().enumerate() {
        let j = ops_coordinate(y, d);
        delta.row_mut(i)[j] = value - ds.features.row(i)[j];
    }
    PoisonedDataset::new(ds, delta, PoisonMethod::Ops, 1.0, PoisonReport::default())
}

/// Shortcut coordinate used for class `class`.
pub fn ops_coordinate(class: usize, dim: usize) -> usize {
    class % dim
}

/// Targeted PGD toward `(y + 1) mod C` against a clean model.
pub fn tap_perturb(
    ds: &Dataset,
    clean_model: &Model,
    budget: f64,
    pgd_steps: usize,
    step_size: Option<f64>,
) -> Result<PoisonedDataset> {
    if !(budget >= 0.0) {
        return Err(Error::invalid("budget must be >= 0"));
    }
    let x = &ds.features;
    let targets: Vec<usize> = ds.labels.iter().map(|&y| (y + 1) % ds.n_classes).collect();
    let step = step_size.unwrap_or_else(|| default_step(budget, pgd_steps));
    let mut delta = Tensor::zeros(x.shape().to_vec());
    if budget > 0.0 {
        for _ in 0..pgd_steps {
            let g = clean_model
                .loss_and_grad(&add(x, &delta), Target::Labels(&targets), true)?
                .input_grad
                .expect("input gradient");
            for (dv, gv) in delta.data_mut().iter_mut().zip(g.data()) {
                *dv -= step * sign(*gv);
            }
            delta = project_linf(&delta, budget, x)?;
        }
    }
    let pred = clean_model.predict_labels(&add(x, &delta))?;
    let hits = pred.iter().zip(&targets).filter(|(p, t)| p == t).count();
    let report = PoisonReport {
        target_success: Some(hits as f64 / ds.len().max(1) as f64),
        ..Default::default()
    };
    PoisonedDataset::new(ds, delta, PoisonMethod::Tap, budget, report)
}

/// Class-wise random directions scaled to l-inf norm `budget`.
pub fn lsp_perturb(ds: &Dataset, budget: f64, seed: u64) -> Result<PoisonedDataset> {
    if !(budget >= 0.0) {
        return Err(Error::invalid("budget must be >= 0"));
    }
    let d = ds.dim();
    let mut rng = rng_from(derive(seed, "lsp-directions"));
    let patterns: Vec<Vec<f64>> = (0..ds.n_classes)
        .map(|_| {
            let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let m = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            u.iter().map(|v| if m > 0.0 { budget * v / m } else { 0.0 }).collect()
        })
        .collect();
    let mut delta = Tensor::zeros(ds.features.shape().to_vec());
    for (i, &y) in ds.labels.iter().enumerate() {
        delta.row_mut(i).copy_from_slice(&patterns[y]);
    }
    PoisonedDataset::new(ds, delta, PoisonMethod::Lsp, budget, PoisonReport::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_classification, normalize, ClassificationSpec};
    use crate::trainer::{train, TrainConfig};

    fn toy(n: usize) -> Dataset {
        normalize(
            &make_classification(
                &ClassificationSpec {
                    n_samples: n,
                    ..Default::default()
                },
                0,
            )
            .unwrap(),
        )
    }

    /// Multiclass perceptron until an error-free pass or `max_epochs`.
    fn perceptron_accuracy(x: &[Vec<f64>], y: &[usize], c: usize, max_epochs: usize) -> f64 {
        let d = x[0].len();
        let mut w = vec![vec![0.0; d + 1]; c];
        let score =
            |w: &Vec<Vec<f64>>, xi: &[f64], k: usize| w[k][d] + xi.iter().zip(&w[k]).map(|(a, b)| a * b).sum::<f64>();
        let predict = |w: &Vec<Vec<f64>>, xi: &[f64]| {
            (0..c)
                .max_by(|&a, &b| score(w, xi, a).total_cmp(&score(w, xi, b)))
                .unwrap()
        };
        for _ in 0..max_epochs {
            let mut mistakes = 0;
            for (xi, &yi) in x.iter().zip(y) {
                let p = predict(&w, xi);
                if p != yi {
                    mistakes += 1;
                    for j in 0..d {
                        w[yi][j] += xi[j];
                        w[p][j] -= xi[j];
                    }
                    w[yi][d] += 1.0;
                    w[p][d] -= 1.0;
                }
            }
            if mistakes == 0 {
                break;
            }
        }
        let hits = x.iter().zip(y).filter(|(xi, &yi)| predict(&w, xi) == yi).count();
        hits as f64 / y.len() as f64
    }

    #[test]
    fn projection_cases() {
        let x = Tensor::new(vec![1, 3], vec![0.5, 0.5, 1.0]).unwrap();
        let inside = Tensor::new(vec![1, 3], vec![0.01, -0.02, -0.01]).unwrap();
        assert_eq!(project_linf(&inside, 0.03, &x).unwrap(), inside);
        let big = Tensor::new(vec![1, 3], vec![0.06, -0.06, 0.02]).unwrap();
        let p = project_linf(&big, 0.03, &x).unwrap();
        assert!((p.data()[0] - 0.03).abs() < 1e-15);
        assert!((p.data()[1] + 0.03).abs() < 1e-15);
        // x = 1.0 with a positive delta clips to zero change
        assert_eq!(p.data()[2], 0.0);
        assert!(project_linf(&big, 0.03, &Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn ops_shortcut_is_classwise_and_separable() {
        let ds = toy(2000);
        let p = ops_perturb(&ds, 1.0).unwrap();
        let pd = p.materialize();
        assert_eq!(pd.labels, ds.labels);
        assert_eq!(p.scope, Scope::ClassWise);
        for (i, &y) in ds.labels.iter().enumerate() {
            let j = ops_coordinate(y, 12);
            assert_eq!(pd.features.row(i)[j], 1.0);
            for k in 0..12 {
                if k != j {
                    assert_eq!(p.deltas.row(i)[k], 0.0);
                }
            }
        }
        // linear probe on the shortcut coordinates only
        let sc: Vec<Vec<f64>> = (0..pd.len())
            .map(|i| (0..10).map(|c| pd.features.row(i)[ops_coordinate(c, 12)]).collect())
            .collect();
        assert_eq!(perceptron_accuracy(&sc, &pd.labels, 10, 2000), 1.0);
        // the perturbations themselves, restricted to the shortcut coordinates
        let dl: Vec<Vec<f64>> = (0..pd.len())
            .map(|i| (0..10).map(|c| p.deltas.row(i)[ops_coordinate(c, 12)]).collect())
            .collect();
        assert!(perceptron_accuracy(&dl, &pd.labels, 10, 2000) >= 0.999);
    }

    #[test]
    fn ops_needs_enough_dimensions() {
        let ds = toy(200);
        let narrow = ds
            .with_features(ds.features.clone())
            .map(|mut d| {
                d.n_classes = 13;
                d
            })
            .unwrap();
        assert!(ops_perturb(&narrow, 1.0).is_err());
    }

    #[test]
    fn lsp_is_classwise_deterministic_and_separable() {
        let ds = toy(1000);
        let a = lsp_perturb(&ds, 0.05, 3).unwrap();
        let b = lsp_perturb(&ds, 0.05, 3).unwrap();
        assert_eq!(a.deltas, b.deltas);
        assert!((a.max_delta() - 0.05).abs() < 1e-15);
        for c in 0..10 {
            let rows: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels[i] == c)
                .map(|i| a.deltas.row(i))
                .collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
        }
        let dl: Vec<Vec<f64>> = (0..ds.len()).map(|i| a.deltas.row(i).to_vec()).collect();
        assert!(perceptron_accuracy(&dl, &ds.labels, 10, 100) >= 0.99);
        let pd = a.materialize();
        assert!(pd.features.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn em_zero_budget_is_clean() {
        let ds = toy(300);
        let (p, _) = em_perturb(
            &ds,
            &Architecture::linear(12, 10),
            &EmConfig {
                budget: 0.0,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert!(p.deltas.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.materialize().features, ds.features);
    }

    #[test]
    fn em_lowers_loss_for_every_sample() {
        let ds = toy(1000);
        let cfg = EmConfig {
            budget: 0.1,
            outer_rounds: 5,
            ..Default::default()
        };
        let (p, proxy) = em_perturb(&ds, &Architecture::linear(12, 10), &cfg, 2).unwrap();
        assert!(p.max_delta() <= 0.1 + 1e-12);
        let clean = proxy.per_sample_losses(&ds.features, &ds.labels).unwrap();
        let pois = proxy.per_sample_losses(&p.materialize().features, &ds.labels).unwrap();
        assert!(clean.iter().zip(&pois).all(|(c, q)| q <= c));
        assert_eq!(p.materialize().labels, ds.labels);
    }

    #[test]
    fn tap_hits_permuted_labels() {
        let ds = toy(2000);
        let model0 = Architecture::linear(12, 10).build(&mut rng_from(1)).unwrap();
        let rec = train(
            &model0,
            &ds,
            &ds,
            &TrainConfig {
                lr_decay: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        let clean = rec.final_model().unwrap();
        let p = tap_perturb(&ds, clean, 0.25, 50, None).unwrap();
        assert!(p.max_delta() <= 0.25 + 1e-12);
        let success = p.report.target_success.unwrap();
        assert!(success >= 0.8, "target success {success}");
        let none = tap_perturb(&ds, clean, 0.25, 0, None).unwrap();
        assert!(none.deltas.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn save_and_load_round_trip() {
        let ds = toy(200);
        let p = lsp_perturb(&ds, 0.03, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path(), 1, Some("h")).unwrap();
        let back = PoisonedDataset::load(dir.path(), &ds).unwrap();
        assert_eq!(back.deltas, p.deltas);
        assert_eq!(back.method, PoisonMethod::Lsp);
    }

    #[test]
    fn method_names_parse() {
        for m in PoisonMethod::ALL {
            assert_eq!(m.name().parse::<PoisonMethod>().unwrap(), m);
        }
        assert!("rem".parse::<PoisonMethod>().is_err());
    }
}
