use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::datasets::{eval_subset, make_classification, normalize, split, Dataset};
use crate::diffcore::Model;
use crate::error::{Error, Result};
use crate::io::{csv_writer, fmt_cell, write_json};
use crate::landscape::{build_plane, loss_grid, write_landscape, PcaManifest, Trajectory};
use crate::poisons::{em_perturb, lsp_perturb, ops_perturb, tap_perturb, PoisonMethod, PoisonedDataset};
use crate::sal::{sal_matrix, SalMatrix, SalProbeConfig};
use crate::seed::{derive, rng_from};
use crate::trainer::{median_abs_param, param_cdf, train, TrainConfig, TrainRecord};
use crate::unlearnability::{unlearnable_distance, UdReport};

pub const VANILLA: &str = "vanilla";

/// Clean data split and the shared initial model of one experiment.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub init: Model,
}

/// One trained run with its probes.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub name: String,
    pub record: TrainRecord,
    pub sal: SalMatrix,
    /// Training set the run saw (poisoned for poisoned runs).
    pub train_set: Dataset,
}

/// Drives every stage of an experiment from one validated config. All
/// sub-seeds derive from the master seed.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub hash: String,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Experiment { cfg, hash })
    }

    fn seed(&self, label: &str) -> u64 {
        derive(self.cfg.seed, label)
    }

    pub fn prepare(&self) -> Result<Prepared> {
        let raw = make_classification(&self.cfg.data.generator, self.seed("data"))?;
        let (train, test) = split(&normalize(&raw), self.cfg.data.test_frac, self.seed("split"))?;
        let init = self.cfg.model.build(&mut rng_from(self.seed("init")))?;
        Ok(Prepared { train, test, init })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed("train"),
            ..self.cfg.train.clone()
        }
    }

    pub fn probe_config(&self) -> SalProbeConfig {
        SalProbeConfig {
            seed: derive(self.seed("sal"), &self.cfg.sal.seed.to_string()),
            ..self.cfg.sal.clone()
        }
    }

    /// Trains from the shared initialization; a run that stopped on a numeric
    /// failure is an error here.
    pub fn train_on(&self, prep: &Prepared, train_set: &Dataset) -> Result<TrainRecord> {
        let rec = train(&prep.init, train_set, &prep.test, &self.train_config())?;
        match &rec.aborted {
            Some(msg) => Err(Error::NonFinite(format!("training aborted at {msg}"))),
            None => Ok(rec),
        }
    }

    pub fn run(&self, prep: &Prepared, name: &str, train_set: Dataset) -> Result<RunOutput> {
        let record = self.train_on(prep, &train_set)?;
        let sal = sal_matrix(&record, &train_set, &self.probe_config(), name)?;
        Ok(RunOutput {
            name: name.to_string(),
            record,
            sal,
            train_set,
        })
    }

    /// Crafts `method` on the clean training split. TAP attacks `clean_model`.
    pub fn poison(
        &self,
        prep: &Prepared,
        method: PoisonMethod,
        clean_model: Option<&Model>,
    ) -> Result<PoisonedDataset> {
        let p = &self.cfg.poison;
        match method {
            PoisonMethod::Em => Ok(em_perturb(
                &prep.train,
                &self.cfg.model,
                &self.cfg.em_config(),
                self.seed("poison-em"),
            )?
            .0),
            PoisonMethod::Ops => ops_perturb(&prep.train, p.ops_value),
            PoisonMethod::Tap => {
                let m = clean_model.ok_or_else(|| Error::invalid("TAP needs a clean model"))?;
                tap_perturb(&prep.train, m, p.budget, p.tap.pgd_steps, p.tap.step_size)
            }
            PoisonMethod::Lsp => lsp_perturb(&prep.train, p.budget, self.seed("poison-lsp")),
        }
    }

    /// Clean model used as the TAP source: the final clean checkpoint.
    pub fn clean_model(&self, prep: &Prepared) -> Result<Model> {
        let rec = self.train_on(prep, &prep.train)?;
        Ok(rec.final_model().expect("at least one epoch").clone())
    }

    fn comment(&self) -> String {
        format!("config_hash={}", self.hash)
    }

    pub fn save_run(&self, dir: &Path, run: &RunOutput) -> Result<()> {
        run.record.save(dir, Some(&self.hash))?;
        run.sal
            .save(dir, self.cfg.sal.eval_subset.min(run.train_set.len()), Some(&self.hash))?;
        let model = run.record.final_model().expect("checkpoint");
        let mut w = csv_writer(&dir.join("cdf.csv"), Some(&self.comment()))?;
        w.write_record(["abs_value", "fraction"])?;
        for (v, f) in param_cdf(model) {
            w.write_record([fmt_cell(v), fmt_cell(f)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_ud(&self, path: &Path, report: &UdReport) -> Result<()> {
        let mut r = report.clone();
        r.config_hash = Some(self.hash.clone());
        r.save(path)
    }

    /// Planes for every configured rank pair, written under `dir/plane_<i>_<j>`.
    pub fn landscapes(&self, dir: &Path, run: &RunOutput) -> Result<Vec<PcaManifest>> {
        let traj = Trajectory::from_record(&run.record, run.name.clone())?;
        let batch = eval_subset(
            &run.train_set,
            self.cfg.sal.eval_subset,
            derive(self.probe_config().seed, "sal-eval"),
        );
        let template = run.record.final_model().expect("checkpoint");
        let l = &self.cfg.landscape;
        let mut out = Vec::new();
        for &(i, j) in &l.planes {
            let plane = build_plane(&traj, (i, j))?;
            let grid = loss_grid(&plane, template, &batch, l.res, l.pad)?;
            out.push(write_landscape(
                &dir.join(format!("plane_{i}_{j}")),
                &run.name,
                &plane,
                &grid,
                l.pad,
                Some(&self.hash),
            )?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub test_acc: Option<f64>,
    pub lp: Option<f64>,
    pub ud: Option<f64>,
    /// `ok`, or `error: <message>`.
    pub status: String,
}

impl BenchRow {
    fn failed(method: &str, e: &Error) -> Self {
        BenchRow {
            method: method.to_string(),
            test_acc: None,
            lp: None,
            ud: None,
            status: format!("error: {e}"),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodDetail {
    pub method: String,
    pub median_abs_param: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub poison_report: Option<crate::poisons::PoisonReport>,
    pub pc12_variance: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub rows: Vec<BenchRow>,
    pub details: Vec<MethodDetail>,
    pub beta: f64,
    pub total_seconds: f64,
}

impl RunSummary {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }

    pub fn row(&self, method: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn detail(&self, method: &str) -> Option<&MethodDetail> {
        self.details.iter().find(|r| r.method == method)
    }
}

/// `bench.csv`: hash comment, header `method,test_acc,lp,ud,status`, one row
/// per run. Timings live in `summary.json` only.
pub fn write_bench(path: &Path, hash: &str, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv_writer(path, Some(&format!("config_hash={hash}")))?;
    w.write_record(["method", "test_acc", "lp", "ud", "status"])?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, fmt_cell);
    for r in rows {
        w.write_record([
            r.method.clone(),
            cell(r.test_acc),
            cell(r.lp),
            cell(r.ud),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Full benchmark: the clean run, then every configured poison from the same
/// initialization. A failing method becomes an error row; the clean run
/// failing is fatal.
pub fn run_experiment(exp: &Experiment, out: &Path) -> Result<RunSummary> {
    let t0 = Instant::now();
    let prep = exp.prepare()?;
    let clean = exp.run(&prep, VANILLA, prep.train.clone())?;
    let clean_dir = out.join(VANILLA);
    exp.save_run(&clean_dir, &clean)?;
    let self_ud = unlearnable_distance(&clean.sal, &clean.sal)?;
    exp.save_ud(&clean_dir.join("ud.json"), &self_ud)?;
    let clean_model = clean.record.final_model().expect("checkpoint").clone();
    let mut clean_detail = detail(VANILLA, &clean, None, t0.elapsed().as_secs_f64());
    if exp.cfg.landscape.enabled {
        clean_detail.pc12_variance = top2(&exp.landscapes(&clean_dir.join("landscape"), &clean)?);
    }

    let outcomes: Vec<(BenchRow, MethodDetail)> = exp
        .cfg
        .poison
        .methods
        .par_iter()
        .map(|&m| {
            let started = Instant::now();
            let name = m.name();
            let res = (|| -> Result<(BenchRow, MethodDetail)> {
                let poisoned = exp.poison(&prep, m, Some(&clean_model))?;
                let dir = out.join(name);
                poisoned.save(&dir.join("poison"), exp.cfg.seed, Some(&exp.hash))?;
                let run = exp.run(&prep, name, poisoned.materialize())?;
                exp.save_run(&dir, &run)?;
                let ud = unlearnable_distance(&run.sal, &clean.sal)?;
                exp.save_ud(&dir.join("ud.json"), &ud)?;
                let mut d = detail(name, &run, Some(poisoned.report.clone()), 0.0);
                if exp.cfg.landscape.enabled {
                    d.pc12_variance = top2(&exp.landscapes(&dir.join("landscape"), &run)?);
                }
                d.seconds = started.elapsed().as_secs_f64();
                Ok((
                    BenchRow {
                        method: name.to_string(),
                        test_acc: run.record.final_test_acc(),
                        lp: Some(ud.lp_poisoned),
                        ud: Some(ud.ud),
                        status: "ok".into(),
                    },
                    d,
                ))
            })();
            res.unwrap_or_else(|e| {
                (
                    BenchRow::failed(name, &e),
                    MethodDetail {
                        method: name.to_string(),
                        median_abs_param: None,
                        final_train_acc: None,
                        poison_report: None,
                        pc12_variance: None,
                        seconds: started.elapsed().as_secs_f64(),
                    },
                )
            })
        })
        .collect();

    let mut rows = vec![BenchRow {
        method: VANILLA.into(),
        test_acc: clean.record.final_test_acc(),
        lp: Some(self_ud.lp_clean),
        ud: Some(self_ud.ud),
        status: "ok".into(),
    }];
    let mut details = vec![clean_detail];
    for (r, d) in outcomes {
        rows.push(r);
        details.push(d);
    }
    write_bench(&out.join("bench.csv"), &exp.hash, &rows)?;
    let summary = RunSummary {
        config_hash: exp.hash.clone(),
        rows,
        details,
        beta: self_ud.beta,
        total_seconds: t0.elapsed().as_secs_f64(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_json(&out.join("config.json"), &exp.cfg)?;
    Ok(summary)
}

fn detail(name: &str, run: &RunOutput, report: Option<crate::poisons::PoisonReport>, seconds: f64) -> MethodDetail {
    MethodDetail {
        method: name.to_string(),
        median_abs_param: run.record.final_model().map(median_abs_param),
        final_train_acc: run.record.curves.last().map(|c| c.train_acc),
        poison_report: report,
        pc12_variance: None,
        seconds,
    }
}

fn top2(manifests: &[PcaManifest]) -> Option<f64> {
    manifests.first().map(|m| m.top2_variance)
}

/// Clean run plus the configured landscape poison, each mapped on every
/// configured plane under `out/<run>/plane_<i>_<j>`.
pub fn run_landscape(exp: &Experiment, out: &Path) -> Result<Vec<(String, PcaManifest)>> {
    let prep = exp.prepare()?;
    let clean = exp.run(&prep, VANILLA, prep.train.clone())?;
    let method = exp.cfg.landscape.poison;
    let clean_model = clean.record.final_model().expect("checkpoint").clone();
    let poisoned = exp.poison(&prep, method, Some(&clean_model))?;
    let run = exp.run(&prep, method.name(), poisoned.materialize())?;
    let mut out_list = Vec::new();
    for r in [&clean, &run] {
        for m in exp.landscapes(&out.join(&r.name), r)? {
            out_list.push((r.name.clone(), m));
        }
    }
    Ok(out_list)
}

/// Resolves a run name (`vanilla` or a poison method) to its training set.
pub fn training_set(exp: &Experiment, prep: &Prepared, method: Option<PoisonMethod>) -> Result<Dataset> {
    match method {
        None => Ok(prep.train.clone()),
        Some(m) => {
            let clean_model = if m == PoisonMethod::Tap {
                Some(exp.clean_model(prep)?)
            } else {
                None
            };
            Ok(exp.poison(prep, m, clean_model.as_ref())?.materialize())
        }
    }
}

pub fn run_dir(out: &Path, method: Option<PoisonMethod>) -> PathBuf {
    out.join(method.map_or(VANILLA, PoisonMethod::name))
}
