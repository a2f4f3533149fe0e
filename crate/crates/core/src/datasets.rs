//! Synthetic classification data, stratified splits, min-max normalization and CSV I/O.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Per-dimension affine range recorded by [`normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub min: f64,
    pub max: f64,
    /// Dimension was constant and mapped to 0.5.
    #[serde(default)]
    pub constant: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Present once the dataset has been normalized.
    pub feature_scale: Option<Vec<FeatureScale>>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize, seed: u64) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "features {:?} vs {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::invalid(format!("label {y} outside [0, {n_classes})")));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
            feature_scale: None,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            feature_scale: self.feature_scale.clone(),
            seed: self.seed,
        }
    }

    /// Same labels and metadata with replaced features.
    pub fn with_features(&self, features: Tensor) -> Result<Dataset> {
        if !features.same_shape(&self.features) {
            return Err(Error::shape("replacement features differ in shape"));
        }
        Ok(Dataset {
            features,
            ..self.clone()
        })
    }

    /// Writes `f0..f{d-1},label` with a header row.
    pub fn write_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let mut w = crate::io::csv_writer(path, comment)?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`Dataset::write_csv`]. `n_classes` is inferred
    /// from the largest label when not given.
    pub fn read_csv(path: &Path, n_classes: Option<usize>) -> Result<Dataset> {
        let mut r = crate::io::csv_reader(path)?;
        let headers = r.headers()?.clone();
        let d = headers
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::invalid("empty header"))?;
        for (j, h) in headers.iter().take(d).enumerate() {
            if h != format!("f{j}") {
                return Err(Error::invalid(format!("unexpected column {h:?} at position {j}")));
            }
        }
        if headers.get(d) != Some("label") {
            return Err(Error::invalid("last column must be `label`"));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for v in rec.iter().take(d) {
                data.push(parse_f64(v)?);
            }
            labels.push(
                rec.get(d)
                    .unwrap_or("")
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| Error::invalid(format!("bad label: {e}")))?,
            );
        }
        let c = n_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        let n = labels.len();
        Dataset::new(Tensor::new(vec![n, d], data)?, labels, c, 0)
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::invalid(format!("bad number {s:?}: {e}")))
}

/// Generator knobs for [`make_classification`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassificationSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// Defaults to `n_features` when absent.
    pub n_informative: Option<usize>,
    pub class_sep: f64,
    pub clusters_per_class: usize,
}

impl Default for ClassificationSpec {
    fn default() -> Self {
        ClassificationSpec {
            n_samples: 5000,
            n_features: 12,
            n_classes: 10,
            n_informative: None,
            class_sep: 2.0,
            clusters_per_class: 1,
        }
    }
}

impl ClassificationSpec {
    pub fn informative(&self) -> usize {
        self.n_informative.unwrap_or(self.n_features)
    }

    pub fn validate(&self) -> Result<()> {
        let inf = self.informative();
        if inf == 0 || inf > self.n_features {
            return Err(Error::invalid(format!(
                "n_informative {inf} must be in [1, {}]",
                self.n_features
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        let clusters = self.n_classes * self.clusters_per_class.max(1);
        if self.n_samples < clusters {
            return Err(Error::invalid(format!(
                "{} samples cannot cover {clusters} clusters",
                self.n_samples
            )));
        }
        if clusters > (1usize << inf.min(40)) {
            return Err(Error::invalid("too many clusters for the informative hypercube"));
        }
        if !(self.class_sep.is_finite() && self.class_sep >= 0.0) {
            return Err(Error::invalid("class_sep must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Gaussian clusters on the vertices of a hypercube with side `2 * class_sep`
/// in the informative subspace, each with a random linear covariance
/// transform. Remaining dimensions are random linear combinations of the
/// informative ones plus small Gaussian noise. Samples are shuffled.
pub fn make_classification(spec: &ClassificationSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng_from(seed);
    let n = spec.n_samples;
    let d = spec.n_features;
    let inf = spec.informative();
    let cpc = spec.clusters_per_class.max(1);
    let n_clusters = spec.n_classes * cpc;

    let vertices = hypercube_vertices(n_clusters, inf, &mut rng);
    let mut per_cluster = vec![n / n_clusters; n_clusters];
    for slot in per_cluster.iter_mut().take(n % n_clusters) {
        *slot += 1;
    }

    let mut data = vec![0.0; n * d];
    let mut labels = vec![0; n];
    let mut start = 0;
    for (k, &count) in per_cluster.iter().enumerate() {
        let centroid: Vec<f64> = vertices[k]
            .iter()
            .map(|&bit| if bit { spec.class_sep } else { -spec.class_sep })
            .collect();
        let transform: Vec<f64> = (0..inf * inf).map(|_| rng.random_range(-1.0..1.0)).collect();
        for i in start..start + count {
            let z: Vec<f64> = (0..inf).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let row = &mut data[i * d..i * d + inf];
            for (j, slot) in row.iter_mut().enumerate() {
                // z @ A
                let mut acc = 0.0;
                for (r, zr) in z.iter().enumerate() {
                    acc += zr * transform[r * inf + j];
                }
                *slot = acc + centroid[j];
            }
            labels[i] = k % spec.n_classes;
        }
        start += count;
    }

    if d > inf {
        let mix: Vec<f64> = (0..inf * (d - inf)).map(|_| rng.random_range(-1.0..1.0)).collect();
        for i in 0..n {
            for j in 0..d - inf {
                let mut acc = 0.0;
                for r in 0..inf {
                    acc += data[i * d + r] * mix[r * (d - inf) + j];
                }
                let noise: f64 = rng.sample(StandardNormal);
                data[i * d + inf + j] = acc + 0.1 * noise;
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut shuffled = Vec::with_capacity(n * d);
    let mut shuffled_labels = Vec::with_capacity(n);
    for &i in &order {
        shuffled.extend_from_slice(&data[i * d..(i + 1) * d]);
        shuffled_labels.push(labels[i]);
    }
    Dataset::new(
        Tensor::new(vec![n, d], shuffled)?,
        shuffled_labels,
        spec.n_classes,
        seed,
    )
}

/// Distinct random vertices of the `dim`-cube.
fn hypercube_vertices<R: Rng>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<bool>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: Vec<bool> = (0..dim).map(|_| rng.random::<bool>()).collect();
        if seen.insert(v.clone()) {
            out.push(v);
        }
    }
    out
}

/// Stratified split: each class contributes `round(count * test_frac)` test samples.
pub fn split(ds: &Dataset, test_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::invalid(format!("test_frac {test_frac} outside (0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = rng_from(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::invalid(format!(
                "class {class} has {} sample(s); need at least 2 to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * test_frac).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Index sets produced by [`split`], for callers that need provenance.
pub fn split_indices(ds: &Dataset, test_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    // identical procedure to `split`, on an index-tagged copy
    let tagged = Dataset {
        features: Tensor::new(vec![ds.len(), 1], (0..ds.len()).map(|i| i as f64).collect())?,
        ..ds.clone()
    };
    let (tr, te) = split(&tagged, test_frac, seed)?;
    let ids = |d: &Dataset| d.features.data().iter().map(|&v| v as usize).collect();
    Ok((ids(&tr), ids(&te)))
}

/// Fixed evaluation batch: `size` rows drawn without replacement by `seed`,
/// kept in ascending index order. Returns the whole set when `size >= len`.
pub fn eval_subset(ds: &Dataset, size: usize, seed: u64) -> Dataset {
    if size >= ds.len() {
        return ds.clone();
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng_from(seed));
    idx.truncate(size);
    idx.sort_unstable();
    ds.subset(&idx)
}

/// Per-dimension min-max rescaling to `[0, 1]`. Constant dimensions map to 0.5
/// and are flagged in the recorded scale.
pub fn normalize(ds: &Dataset) -> Dataset {
    let d = ds.dim();
    let n = ds.len();
    let mut scale = Vec::with_capacity(d);
    let mut features = ds.features.clone();
    for j in 0..d {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            let v = ds.features.row(i)[j];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let constant = !(hi > lo);
        for i in 0..n {
            let slot = &mut features.row_mut(i)[j];
            *slot = if constant { 0.5 } else { (*slot - lo) / (hi - lo) };
        }
        scale.push(FeatureScale {
            min: lo,
            max: hi,
            constant,
        });
    }
    Dataset {
        features,
        feature_scale: Some(scale),
        ..ds.clone()
    }
}

/// Applies a scale recorded by [`normalize`] to other data (e.g. a test split).
pub fn apply_scale(ds: &Dataset, scale: &[FeatureScale]) -> Result<Dataset> {
    if scale.len() != ds.dim() {
        return Err(Error::shape("scale length differs from feature dimension"));
    }
    let mut features = ds.features.clone();
    for i in 0..ds.len() {
        for (v, s) in features.row_mut(i).iter_mut().zip(scale) {
            *v = if s.constant {
                0.5
            } else {
                ((*v - s.min) / (s.max - s.min)).clamp(0.0, 1.0)
            };
        }
    }
    Ok(Dataset {
        features,
        feature_scale: Some(scale.to_vec()),
        ..ds.clone()
    })
}
