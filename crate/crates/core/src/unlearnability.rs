//! Learnable threshold, learnable-layer counts and the unlearnable distance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_json;
use crate::sal::{SalMatrix, SalProbeConfig};

/// Optimal two-cluster partition of a list of reals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoMeans {
    pub c1: f64,
    pub c2: f64,
    /// Within-cluster sum of squares of the returned partition.
    pub sse: f64,
    /// Number of values in the lower cluster (sorted order).
    pub split: usize,
    /// All values identical: `c1 == c2` and there is no real split.
    pub degenerate: bool,
}

/// Exact 1-D 2-means. Sorts the values, scores every contiguous split with
/// prefix sums and keeps the first split of minimal SSE; `c1 <= c2`.
pub fn kmeans2_1d(values: &[f64]) -> Result<TwoMeans> {
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "2-means needs at least 2 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("2-means input".into()));
    }
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if xs[0] == xs[n - 1] {
        return Ok(TwoMeans {
            c1: xs[0],
            c2: xs[0],
            sse: 0.0,
            split: n,
            degenerate: true,
        });
    }
    let shift = xs.iter().sum::<f64>() / n as f64;
    let mut s = vec![0.0; n + 1];
    let mut q = vec![0.0; n + 1];
    for (i, &x) in xs.iter().enumerate() {
        let d = x - shift;
        s[i + 1] = s[i] + d;
        q[i + 1] = q[i] + d * d;
    }
    let cost = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let sum = s[b] - s[a];
        q[b] - q[a] - sum * sum / m
    };
    let mut best_k = 1;
    let mut best = f64::INFINITY;
    for k in 1..n {
        let c = cost(0, k) + cost(k, n);
        if c < best {
            best = c;
            best_k = k;
        }
    }
    let (lo, hi) = xs.split_at(best_k);
    let c1 = mean(lo);
    let c2 = mean(hi);
    Ok(TwoMeans {
        c1,
        c2,
        sse: sse(lo, c1) + sse(hi, c2),
        split: best_k,
        degenerate: false,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sse(v: &[f64], c: f64) -> f64 {
    v.iter().map(|x| (x - c) * (x - c)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub beta: f64,
    /// `(c1 + c2) / 2` of every usable epoch.
    pub midpoints: Vec<f64>,
    /// Epoch rows whose clustering degenerated (one layer or identical values).
    pub degenerate_rows: Vec<usize>,
    /// Epoch rows with no finite value, left out of the average.
    pub skipped_rows: Vec<usize>,
}

/// Per epoch, the midpoint of the two 2-means centers of that epoch's layer
/// values; the threshold is the mean midpoint over epochs. A single-layer
/// epoch contributes its lone value.
pub fn learnable_threshold(sal_clean: &SalMatrix) -> Result<Threshold> {
    let mut midpoints = Vec::new();
    let mut degenerate_rows = Vec::new();
    let mut skipped_rows = Vec::new();
    for t in 0..sal_clean.n_epochs() {
        let row = sal_clean.row_values(t);
        match row.len() {
            0 => skipped_rows.push(t),
            1 => {
                degenerate_rows.push(t);
                midpoints.push(row[0]);
            }
            _ => {
                let km = kmeans2_1d(&row)?;
                if km.degenerate {
                    degenerate_rows.push(t);
                }
                midpoints.push((km.c1 + km.c2) / 2.0);
            }
        }
    }
    if midpoints.is_empty() {
        return Err(Error::Undefined("clean SAL matrix has no finite entries".into()));
    }
    Ok(Threshold {
        beta: mean(&midpoints),
        midpoints,
        degenerate_rows,
        skipped_rows,
    })
}

/// Number of entries strictly above `beta`. NaN entries never count.
pub fn count_learnable(sal_epoch: &[f64], beta: f64) -> usize {
    sal_epoch.iter().filter(|&&v| v > beta).count()
}

/// Per-epoch learnable counts.
pub fn learnable_counts(sal: &SalMatrix, beta: f64) -> Vec<usize> {
    sal.values.iter().map(|row| count_learnable(row, beta)).collect()
}

/// Mean learnable count over epochs.
pub fn lp_average(sal: &SalMatrix, beta: f64) -> f64 {
    let counts = learnable_counts(sal, beta);
    if counts.is_empty() {
        return 0.0;
    }
    counts.iter().sum::<usize>() as f64 / counts.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunIds {
    pub clean: String,
    pub poisoned: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdReport {
    pub beta: f64,
    pub lp_clean: f64,
    pub lp_poisoned: f64,
    pub ud: f64,
    pub lambda_clean: Vec<usize>,
    pub lambda_poisoned: Vec<usize>,
    pub probe: SalProbeConfig,
    pub runs: RunIds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl UdReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Ratio of the poisoned run's mean learnable count to the clean run's, with
/// the threshold taken from the clean run. Epoch counts may differ.
pub fn unlearnable_distance(sal_poisoned: &SalMatrix, sal_clean: &SalMatrix) -> Result<UdReport> {
    if sal_poisoned.probe != sal_clean.probe {
        return Err(Error::invalid(
            "SAL matrices were produced with different probe settings",
        ));
    }
    if sal_poisoned.layer_ids != sal_clean.layer_ids {
        return Err(Error::shape("SAL matrices cover different layers"));
    }
    let beta = learnable_threshold(sal_clean)?.beta;
    let lambda_clean = learnable_counts(sal_clean, beta);
    let lambda_poisoned = learnable_counts(sal_poisoned, beta);
    let lp_clean = lp_average(sal_clean, beta);
    let lp_poisoned = lp_average(sal_poisoned, beta);
    if lp_clean == 0.0 {
        return Err(Error::Undefined(format!(
            "clean run has no learnable layers above beta = {beta}; distance undefined"
        )));
    }
    Ok(UdReport {
        beta,
        lp_clean,
        lp_poisoned,
        ud: lp_poisoned / lp_clean,
        lambda_clean,
        lambda_poisoned,
        probe: sal_clean.probe.clone(),
        runs: RunIds {
            clean: sal_clean.run_id.clone(),
            poisoned: sal_poisoned.run_id.clone(),
        },
        config_hash: None,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::seed::rng_from;

    fn matrix(values: Vec<Vec<f64>>, run: &str) -> SalMatrix {
        let layers = values.first().map_or(0, Vec::len);
        SalMatrix {
            epochs: (1..=values.len()).collect(),
            values,
            layer_ids: (0..layers).map(|l| 2 * l).collect(),
            probe: SalProbeConfig::default(),
            run_id: run.into(),
            missing: vec![],
            degenerate: vec![],
        }
    }

    fn brute_force_sse(values: &[f64]) -> f64 {
        let mut xs = values.to_vec();
        xs.sort_by(f64::total_cmp);
        (1..xs.len())
            .map(|k| {
                let (a, b) = xs.split_at(k);
                sse(a, mean(a)) + sse(b, mean(b))
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn kmeans_small_cases() {
        let km = kmeans2_1d(&[10.0, 0.0, 10.0, 0.0]).unwrap();
        assert_eq!((km.c1, km.c2), (0.0, 10.0));
        assert!(!km.degenerate);
        let km = kmeans2_1d(&[1.0; 4]).unwrap();
        assert_eq!((km.c1, km.c2), (1.0, 1.0));
        assert!(km.degenerate);
        assert!(kmeans2_1d(&[1.0]).is_err());
        assert!(kmeans2_1d(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn kmeans_matches_brute_force() {
        let mut rng = rng_from(11);
        for _ in 0..300 {
            let n = rng.random_range(2..=200);
            let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
            let km = kmeans2_1d(&v).unwrap();
            let bf = brute_force_sse(&v);
            assert!((km.sse - bf).abs() <= 1e-9 * bf.max(1.0), "{} vs {bf}", km.sse);
            assert!(km.c1 <= km.c2);
        }
    }

    #[test]
    fn threshold_cases() {
        let m = matrix(vec![vec![0.0, 0.0, 10.0, 10.0]; 3], "c");
        assert_eq!(learnable_threshold(&m).unwrap().beta, 5.0);
        let m = matrix(vec![vec![2.0, 4.0]], "c");
        assert_eq!(learnable_threshold(&m).unwrap().beta, 3.0);
        let single = matrix(vec![vec![1.0], vec![3.0]], "c");
        let th = learnable_threshold(&single).unwrap();
        assert_eq!(th.beta, 2.0);
        assert_eq!(th.degenerate_rows, vec![0, 1]);
    }

    #[test]
    fn missing_rows_are_skipped() {
        let m = matrix(vec![vec![f64::NAN, f64::NAN], vec![2.0, 4.0]], "c");
        let th = learnable_threshold(&m).unwrap();
        assert_eq!(th.beta, 3.0);
        assert_eq!(th.skipped_rows, vec![0]);
        assert!(learnable_threshold(&matrix(vec![vec![f64::NAN, f64::NAN]], "c")).is_err());
    }

    #[test]
    fn counting_is_strict() {
        assert_eq!(count_learnable(&[0.1, 0.6, 0.7], 0.5), 2);
        assert_eq!(count_learnable(&[0.5, 0.5], 0.5), 0);
        assert_eq!(count_learnable(&[0.0, 0.3, 9.0], -1.0), 3);
        assert_eq!(count_learnable(&[f64::NAN, 1.0], 0.5), 1);
    }

    #[test]
    fn lp_average_cases() {
        assert_eq!(lp_average(&matrix(vec![vec![0.0; 3]; 4], "x"), 0.1), 0.0);
        assert_eq!(lp_average(&matrix(vec![vec![2.0; 3]; 4], "x"), 0.1), 3.0);
    }

    #[test]
    fn self_distance_is_one() {
        let m = matrix(
            vec![vec![0.1, 0.9, 0.4], vec![0.05, 0.5, 0.2], vec![0.01, 0.3, 0.1]],
            "c",
        );
        let r = unlearnable_distance(&m, &m).unwrap();
        assert_eq!(r.ud, 1.0);
        assert_eq!(r.lambda_clean, r.lambda_poisoned);
    }

    #[test]
    fn distance_uses_independent_epoch_averages() {
        let clean = matrix(vec![vec![0.0, 0.0, 10.0, 10.0]; 2], "c");
        let poisoned = matrix(vec![vec![0.0, 0.0, 0.0, 10.0], vec![0.0; 4], vec![0.0; 4]], "p");
        let r = unlearnable_distance(&poisoned, &clean).unwrap();
        assert_eq!(r.beta, 5.0);
        assert_eq!(r.lambda_clean, vec![2, 2]);
        assert_eq!(r.lambda_poisoned, vec![1, 0, 0]);
        assert_eq!(r.lp_poisoned, 1.0 / 3.0);
        assert_eq!(r.ud, (1.0 / 3.0) / 2.0);
        assert_eq!(r.runs.poisoned, "p");
    }

    #[test]
    fn undefined_when_clean_never_learns() {
        let clean = matrix(vec![vec![1.0, 1.0]; 3], "c");
        assert!(matches!(unlearnable_distance(&clean, &clean), Err(Error::Undefined(_))));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let a = matrix(vec![vec![0.0, 1.0]], "a");
        let b = matrix(vec![vec![0.0, 1.0, 2.0]], "b");
        assert!(unlearnable_distance(&a, &b).is_err());
        let mut c = a.clone();
        c.probe.epsilon = 0.1;
        assert!(unlearnable_distance(&c, &a).is_err());
    }

    #[test]
    fn report_json_fields() {
        let m = matrix(vec![vec![0.1, 0.9]], "c");
        let r = unlearnable_distance(&m, &m).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in [
            "beta",
            "lp_clean",
            "lp_poisoned",
            "ud",
            "lambda_clean",
            "lambda_poisoned",
            "probe",
            "runs",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #[test]
        fn threshold_is_scale_homogeneous(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 4), 1..6),
            c in 0.01f64..100.0,
        ) {
            let m = matrix(rows, "c");
            let b = learnable_threshold(&m).unwrap().beta;
            let bs = learnable_threshold(&m.scaled(c)).unwrap().beta;
            prop_assert!((bs - c * b).abs() <= 1e-9 * (c * b).abs().max(1e-12));
        }

        #[test]
        fn ratio_is_consistent(
            clean in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 3), 2..6),
            poisoned in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 3), 1..6),
        ) {
            let (c, p) = (matrix(clean, "c"), matrix(poisoned, "p"));
            if let Ok(r) = unlearnable_distance(&p, &c) {
                prop_assert!((r.ud * r.lp_clean - r.lp_poisoned).abs() <= 1e-12 * r.lp_poisoned.max(1.0));
                prop_assert!(r.lambda_poisoned.iter().all(|&l| l <= 3));
            }
        }
    }
}
