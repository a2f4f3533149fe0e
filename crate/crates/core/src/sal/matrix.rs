use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sal_layer, SalProbeConfig};
use crate::datasets::{eval_subset, Dataset};
use crate::diffcore::Model;
use crate::error::{Error, Result};
use crate::io::{csv_reader, csv_writer, fmt_cell, read_json, write_json};
use crate::seed::derive;
use crate::trainer::TrainRecord;

/// A flagged `(epoch row, layer id)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalCell {
    pub row: usize,
    pub layer: usize,
    pub note: String,
}

/// Epochs x dense layers. Missing cells hold NaN and are listed in `missing`.
#[derive(Clone, Debug, PartialEq)]
pub struct SalMatrix {
    pub values: Vec<Vec<f64>>,
    /// Model layer index of every column.
    pub layer_ids: Vec<usize>,
    /// 1-based epoch of every row.
    pub epochs: Vec<usize>,
    pub probe: SalProbeConfig,
    pub run_id: String,
    pub missing: Vec<SalCell>,
    pub degenerate: Vec<SalCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SalManifest {
    pub version: u32,
    pub run_id: String,
    pub probe: SalProbeConfig,
    pub layer_ids: Vec<usize>,
    pub epochs: Vec<usize>,
    pub eval_rows: usize,
    pub missing: Vec<SalCell>,
    pub degenerate: Vec<SalCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl SalMatrix {
    pub fn n_epochs(&self) -> usize {
        self.values.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_ids.len()
    }

    /// Finite values of one epoch row.
    pub fn row_values(&self, t: usize) -> Vec<f64> {
        self.values[t].iter().copied().filter(|v| v.is_finite()).collect()
    }

    /// Mean over the finite entries of each row; NaN for an all-missing row.
    pub fn epoch_means(&self) -> Vec<f64> {
        (0..self.n_epochs())
            .map(|t| {
                let r = self.row_values(t);
                if r.is_empty() {
                    f64::NAN
                } else {
                    r.iter().sum::<f64>() / r.len() as f64
                }
            })
            .collect()
    }

    pub fn scaled(&self, c: f64) -> SalMatrix {
        let mut out = self.clone();
        for row in &mut out.values {
            row.iter_mut().for_each(|v| *v *= c);
        }
        out
    }

    /// Writes `sal.csv` (header `epoch,layer_<id>...`) and `sal.json`.
    pub fn save(&self, dir: &Path, eval_rows: usize, config_hash: Option<&str>) -> Result<()> {
        let comment = config_hash.map(|h| format!("config_hash={h}"));
        let mut w = csv_writer(&dir.join("sal.csv"), comment.as_deref())?;
        let mut header = vec!["epoch".to_string()];
        header.extend(self.layer_ids.iter().map(|l| format!("layer_{l}")));
        w.write_record(&header)?;
        for (e, row) in self.epochs.iter().zip(&self.values) {
            let mut rec = vec![e.to_string()];
            rec.extend(row.iter().map(|v| fmt_cell(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        write_json(
            &dir.join("sal.json"),
            &SalManifest {
                version: 1,
                run_id: self.run_id.clone(),
                probe: self.probe.clone(),
                layer_ids: self.layer_ids.clone(),
                epochs: self.epochs.clone(),
                eval_rows,
                missing: self.missing.clone(),
                degenerate: self.degenerate.clone(),
                config_hash: config_hash.map(str::to_owned),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<SalMatrix> {
        let m: SalManifest = read_json(&dir.join("sal.json"))?;
        let mut r = csv_reader(&dir.join("sal.csv"))?;
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .map(|c| {
                    if c.is_empty() {
                        Ok(f64::NAN)
                    } else {
                        c.parse::<f64>()
                            .map_err(|e| Error::invalid(format!("bad SAL cell {c:?}: {e}")))
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != m.layer_ids.len() {
                return Err(Error::shape("sal.csv row width differs from manifest"));
            }
            values.push(row);
        }
        if values.len() != m.epochs.len() {
            return Err(Error::shape("sal.csv row count differs from manifest"));
        }
        Ok(SalMatrix {
            values,
            layer_ids: m.layer_ids,
            epochs: m.epochs,
            probe: m.probe,
            run_id: m.run_id,
            missing: m.missing,
            degenerate: m.degenerate,
        })
    }
}

/// SAL for every (checkpoint, dense layer) of a training run, probed on one
/// fixed evaluation batch drawn from `train_data`.
pub fn sal_matrix(record: &TrainRecord, train_data: &Dataset, cfg: &SalProbeConfig, run_id: &str) -> Result<SalMatrix> {
    sal_matrix_models(&record.checkpoints, train_data, cfg, run_id)
}

/// [`sal_matrix`] over an explicit checkpoint list (epoch `t + 1` for index `t`).
pub fn sal_matrix_models(
    checkpoints: &[Model],
    train_data: &Dataset,
    cfg: &SalProbeConfig,
    run_id: &str,
) -> Result<SalMatrix> {
    cfg.validate()?;
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::invalid("SAL matrix needs at least one checkpoint"))?;
    let layer_ids = first.dense_indices();
    if checkpoints.iter().any(|m| m.dense_indices() != layer_ids) {
        return Err(Error::shape("checkpoints differ in architecture"));
    }
    let batch = eval_subset(train_data, cfg.eval_subset, derive(cfg.seed, "sal-eval"));
    let cells: Vec<(usize, usize)> = (0..checkpoints.len())
        .flat_map(|t| layer_ids.iter().map(move |&l| (t, l)))
        .collect();
    let results: Vec<Result<super::Ascent>> = cells
        .par_iter()
        .map(|&(t, l)| sal_layer(&checkpoints[t], l, &batch, cfg))
        .collect();

    let mut values = vec![vec![f64::NAN; layer_ids.len()]; checkpoints.len()];
    let mut missing = Vec::new();
    let mut degenerate = Vec::new();
    for (&(t, l), res) in cells.iter().zip(results) {
        let col = layer_ids.iter().position(|&x| x == l).expect("layer id");
        match res {
            Ok(a) => {
                values[t][col] = a.value;
                if a.degenerate {
                    degenerate.push(SalCell {
                        row: t,
                        layer: l,
                        note: "zero gradient at the unperturbed point".into(),
                    });
                }
            }
            Err(Error::Shape(msg)) => return Err(Error::Shape(msg)),
            Err(e) => missing.push(SalCell {
                row: t,
                layer: l,
                note: e.to_string(),
            }),
        }
    }
    Ok(SalMatrix {
        values,
        layer_ids,
        epochs: (1..=checkpoints.len()).collect(),
        probe: cfg.clone(),
        run_id: run_id.to_string(),
        missing,
        degenerate,
    })
}
