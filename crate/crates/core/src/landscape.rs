//! PCA of parameter trajectories and loss evaluation over 2-D planes
//! spanned by principal directions.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::diffcore::{Model, Target};
use crate::error::{Error, Result};
use crate::io::{csv_writer, fmt_cell, write_json};
use crate::trainer::TrainRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<usize>,
    pub snapshots: Vec<Vec<f64>>,
    pub run_id: String,
}

impl Trajectory {
    pub fn new(steps: Vec<usize>, snapshots: Vec<Vec<f64>>, run_id: impl Into<String>) -> Result<Self> {
        if steps.len() != snapshots.len() {
            return Err(Error::shape("one step index per snapshot required"));
        }
        if let Some(first) = snapshots.first() {
            if snapshots.iter().any(|s| s.len() != first.len()) {
                return Err(Error::shape("snapshots differ in length"));
            }
        }
        Ok(Trajectory {
            steps,
            snapshots,
            run_id: run_id.into(),
        })
    }

    pub fn from_record(record: &TrainRecord, run_id: impl Into<String>) -> Result<Self> {
        Trajectory::new(
            record.snapshots.iter().map(|s| s.step).collect(),
            record.snapshots.iter().map(|s| s.params.clone()).collect(),
            run_id,
        )
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.snapshots.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance fraction of each returned component.
    pub explained_variance: Vec<f64>,
    /// Per snapshot, its coordinates on the returned components.
    pub projections: Vec<Vec<f64>>,
    /// Fewer than the requested number of components carry variance.
    pub rank_deficient: bool,
}

impl Pca {
    pub fn reconstruct(&self, i: usize) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &p) in self.components.iter().zip(&self.projections[i]) {
            out.iter_mut().zip(c).for_each(|(o, v)| *o += p * v);
        }
        out
    }
}

/// Top-`k` principal directions of the centered snapshots via SVD. Each
/// direction's sign is fixed so its largest-magnitude entry is positive.
/// Components with negligible singular value are dropped and flagged.
pub fn pca_trajectory(traj: &Trajectory, k: usize) -> Result<Pca> {
    let n = traj.len();
    let p = traj.dim();
    if n < 3 {
        return Err(Error::invalid(format!("PCA needs at least 3 snapshots, got {n}")));
    }
    if k == 0 || k > n.min(p) {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", n.min(p))));
    }
    let mean: Vec<f64> = (0..p)
        .map(|j| traj.snapshots.iter().map(|s| s[j]).sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, p, |i, j| traj.snapshots[i][j] - mean[j]);
    let svd = x.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Rank("SVD did not converge".into()))?;
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let smax = sv.iter().fold(0.0_f64, |m, &s| m.max(s));
    let tol = smax * 1e-10 * n.max(p) as f64;

    let mut components = Vec::new();
    let mut explained_variance = Vec::new();
    for &i in order.iter().take(k) {
        if sv[i] <= tol || total == 0.0 {
            break;
        }
        let mut c: Vec<f64> = v_t.row(i).iter().copied().collect();
        let pivot = c.iter().fold(0.0_f64, |m, v| if v.abs() > m.abs() { *v } else { m });
        if pivot < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        explained_variance.push(sv[i] * sv[i] / total);
    }
    let projections = traj
        .snapshots
        .iter()
        .map(|s| {
            components
                .iter()
                .map(|c| c.iter().zip(s).zip(&mean).map(|((cv, sv), m)| cv * (sv - m)).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        rank_deficient: components.len() < k,
        mean,
        components,
        explained_variance,
        projections,
    })
}

/// Affine plane through the trajectory mean, spanned by two principal
/// directions, with the trajectory projected onto it.
#[derive(Clone, Debug, PartialEq)]
pub struct LandscapePlane {
    pub anchor: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    /// 1-based component ranks of `d1` and `d2`.
    pub ranks: (usize, usize),
    /// Variance fractions of every component up to the larger rank.
    pub explained_variance: Vec<f64>,
    pub path: Vec<(usize, f64, f64)>,
}

impl LandscapePlane {
    pub fn point(&self, alpha: f64, beta: f64) -> Vec<f64> {
        self.anchor
            .iter()
            .zip(self.d1.iter().zip(&self.d2))
            .map(|(a, (u, v))| a + alpha * u + beta * v)
            .collect()
    }

    pub fn project(&self, theta: &[f64]) -> (f64, f64) {
        let mut a = 0.0;
        let mut b = 0.0;
        for ((t, c), (u, v)) in theta.iter().zip(&self.anchor).zip(self.d1.iter().zip(&self.d2)) {
            a += (t - c) * u;
            b += (t - c) * v;
        }
        (a, b)
    }
}

pub fn build_plane(traj: &Trajectory, ranks: (usize, usize)) -> Result<LandscapePlane> {
    let (i, j) = ranks;
    if i == 0 || j == 0 || i == j {
        return Err(Error::invalid(format!(
            "component ranks {ranks:?} must be distinct and 1-based"
        )));
    }
    let need = i.max(j);
    let avail = traj.len().min(traj.dim());
    if need > avail {
        return Err(Error::Rank(format!(
            "rank {need} requested but at most {avail} components exist"
        )));
    }
    let pca = pca_trajectory(traj, need)?;
    if pca.components.len() < need {
        return Err(Error::Rank(format!(
            "trajectory has only {} informative components, rank {need} requested",
            pca.components.len()
        )));
    }
    let path = traj
        .steps
        .iter()
        .zip(&pca.projections)
        .map(|(&s, p)| (s, p[i - 1], p[j - 1]))
        .collect();
    Ok(LandscapePlane {
        d1: pca.components[i - 1].clone(),
        d2: pca.components[j - 1].clone(),
        anchor: pca.mean,
        ranks,
        explained_variance: pca.explained_variance,
        path,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Row-major over `(alpha, beta)`; NaN marks a missing cell.
    pub loss: Vec<f64>,
}

impl LossGrid {
    pub fn at(&self, ia: usize, ib: usize) -> f64 {
        self.loss[ia * self.betas.len() + ib]
    }

    pub fn missing(&self) -> usize {
        self.loss.iter().filter(|v| !v.is_finite()).count()
    }
}

/// Grid axis symmetric about zero covering `[lo, hi]` widened by `pad` of the
/// span. With odd `res` the middle node is exactly 0.
pub fn grid_axis(lo: f64, hi: f64, res: usize, pad: f64) -> Vec<f64> {
    let span = hi - lo;
    let mut m = lo.abs().max(hi.abs()) + pad * span;
    if !(m > 0.0) {
        m = 1.0;
    }
    let den = (res - 1) as f64;
    (0..res).map(|k| m * (2.0 * k as f64 - den) / den).collect()
}

/// Evaluates `f` at `anchor + alpha * d1 + beta * d2` over a `res x res` grid
/// covering the padded bounding box of the projected path.
pub fn loss_grid_with<F>(plane: &LandscapePlane, res: usize, pad: f64, f: F) -> Result<LossGrid>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if res < 2 {
        return Err(Error::invalid("grid resolution must be >= 2"));
    }
    if !(pad >= 0.0) {
        return Err(Error::invalid("grid padding must be >= 0"));
    }
    let bounds = |sel: fn(&(usize, f64, f64)) -> f64| {
        plane
            .path
            .iter()
            .map(sel)
            .fold((0.0_f64, 0.0_f64), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (alo, ahi) = bounds(|p| p.1);
    let (blo, bhi) = bounds(|p| p.2);
    let alphas = grid_axis(alo, ahi, res, pad);
    let betas = grid_axis(blo, bhi, res, pad);
    let loss = (0..res * res)
        .into_par_iter()
        .map(|c| {
            let theta = plane.point(alphas[c / res], betas[c % res]);
            match f(&theta) {
                Ok(v) if v.is_finite() => v,
                _ => f64::NAN,
            }
        })
        .collect();
    Ok(LossGrid { alphas, betas, loss })
}

/// Mean cross-entropy of `template` with parameters from the grid point.
pub fn loss_grid(plane: &LandscapePlane, template: &Model, data: &Dataset, res: usize, pad: f64) -> Result<LossGrid> {
    if template.param_count() != plane.anchor.len() {
        return Err(Error::shape("model template does not match the plane dimension"));
    }
    loss_grid_with(plane, res, pad, |theta| {
        template
            .with_flat_params(theta)?
            .loss(&data.features, Target::Labels(&data.labels))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaManifest {
    pub version: u32,
    pub run_id: String,
    pub ranks: (usize, usize),
    pub explained_variance: Vec<f64>,
    pub top2_variance: f64,
    pub n_snapshots: usize,
    pub dim: usize,
    pub res: usize,
    pub pad: f64,
    pub missing_cells: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Writes `landscape.csv`, `path.csv` and `pca.json` into `dir`.
pub fn write_landscape(
    dir: &Path,
    run_id: &str,
    plane: &LandscapePlane,
    grid: &LossGrid,
    pad: f64,
    config_hash: Option<&str>,
) -> Result<PcaManifest> {
    let comment = config_hash.map(|h| format!("config_hash={h}"));
    let mut w = csv_writer(&dir.join("landscape.csv"), comment.as_deref())?;
    w.write_record(["alpha", "beta", "loss"])?;
    for (ia, a) in grid.alphas.iter().enumerate() {
        for (ib, b) in grid.betas.iter().enumerate() {
            w.write_record([fmt_cell(*a), fmt_cell(*b), fmt_cell(grid.at(ia, ib))])?;
        }
    }
    w.flush()?;
    let mut w = csv_writer(&dir.join("path.csv"), comment.as_deref())?;
    w.write_record(["step", "alpha", "beta"])?;
    for (s, a, b) in &plane.path {
        w.write_record([s.to_string(), fmt_cell(*a), fmt_cell(*b)])?;
    }
    w.flush()?;
    let manifest = PcaManifest {
        version: 1,
        run_id: run_id.to_string(),
        ranks: plane.ranks,
        explained_variance: plane.explained_variance.clone(),
        top2_variance: plane.explained_variance.iter().take(2).sum(),
        n_snapshots: plane.path.len(),
        dim: plane.anchor.len(),
        res: grid.alphas.len(),
        pad,
        missing_cells: grid.missing(),
        config_hash: config_hash.map(str::to_owned),
    };
    write_json(&dir.join("pca.json"), &manifest)?;
    Ok(manifest)
}
