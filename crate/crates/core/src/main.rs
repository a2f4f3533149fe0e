use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use unlearn_core::io::write_json;
use unlearn_core::pipeline::{
    read_table, run_dir, run_experiment, run_landscape, table_check, training_set, Experiment, ExperimentConfig,
};
use unlearn_core::poisons::PoisonMethod;
use unlearn_core::sal::{sal_matrix, SalMatrix};
use unlearn_core::unlearnability::unlearnable_distance;
use unlearn_core::Error;

#[derive(Parser)]
#[command(
    name = "unlearn",
    version,
    about = "Score how unlearnable a poisoned training set is"
)]
struct Cli {
    /// Experiment config (JSON). The built-in toy config is used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate, normalize and split the dataset.
    GenData,
    /// Craft one poison on the training split.
    Poison {
        #[arg(long)]
        method: PoisonMethod,
    },
    /// Train on the clean or a poisoned training split.
    Train {
        #[arg(long)]
        method: Option<PoisonMethod>,
    },
    /// Train and probe every epoch checkpoint.
    Sal {
        #[arg(long)]
        method: Option<PoisonMethod>,
    },
    /// Unlearnable distance between two saved SAL directories.
    Ud {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        poisoned: PathBuf,
    },
    /// Loss landscapes for the clean run and the configured poison.
    Landscape,
    /// Full benchmark: clean run plus every configured poison.
    Run,
    /// Verify the arithmetic of reported benchmark tables.
    TableCheck {
        #[arg(required = true)]
        tables: Vec<PathBuf>,
    },
    /// Print the built-in toy config.
    DefaultConfig,
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Version { .. } | Error::Json(_) => Failure::Config(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn experiment(cli: &Cli) -> Result<(Experiment, PathBuf), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::File { .. } => Failure::Config(e.to_string()),
            other => other.into(),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    let out = cfg.out.clone();
    Ok((Experiment::new(cfg)?, out))
}

fn dispatch(cli: &Cli) -> Result<u8, Failure> {
    match &cli.cmd {
        Cmd::DefaultConfig => {
            println!(
                "{}",
                serde_json::to_string_pretty(&ExperimentConfig::default()).expect("serializable")
            );
            Ok(0)
        }
        Cmd::TableCheck { tables } => {
            let mut all = true;
            for t in tables {
                let rows = read_table(t).map_err(|e| Failure::Config(e.to_string()))?;
                let v = table_check(&rows)?;
                println!("{}\n{v}\n{}", t.display(), if v.pass() { "PASS" } else { "FAIL" });
                all &= v.pass();
            }
            Ok(if all { 0 } else { 2 })
        }
        Cmd::Ud { clean, poisoned } => {
            let c = SalMatrix::load(clean)?;
            let p = SalMatrix::load(poisoned)?;
            let report = unlearnable_distance(&p, &c)?;
            let path = cli.out.clone().unwrap_or_else(|| poisoned.join("ud.json"));
            write_json(&path, &report)?;
            println!(
                "beta {} lp_clean {} lp_poisoned {} ud {}",
                report.beta, report.lp_clean, report.lp_poisoned, report.ud
            );
            Ok(0)
        }
        cmd => {
            let (exp, out) = experiment(cli)?;
            staged(cmd, &exp, &out)
        }
    }
}

fn staged(cmd: &Cmd, exp: &Experiment, out: &Path) -> Result<u8, Failure> {
    let comment = format!("config_hash={}", exp.hash);
    match cmd {
        Cmd::GenData => {
            let prep = exp.prepare()?;
            let dir = out.join("data");
            prep.train.write_csv(&dir.join("train.csv"), Some(&comment))?;
            prep.test.write_csv(&dir.join("test.csv"), Some(&comment))?;
            write_json(
                &dir.join("scale.json"),
                &serde_json::json!({ "config_hash": exp.hash, "feature_scale": prep.train.feature_scale }),
            )?;
            println!(
                "{} train / {} test rows -> {}",
                prep.train.len(),
                prep.test.len(),
                dir.display()
            );
            Ok(0)
        }
        Cmd::Poison { method } => {
            let prep = exp.prepare()?;
            let clean = if *method == PoisonMethod::Tap {
                Some(exp.clean_model(&prep)?)
            } else {
                None
            };
            let p = exp.poison(&prep, *method, clean.as_ref())?;
            let dir = run_dir(out, Some(*method)).join("poison");
            p.save(&dir, exp.cfg.seed, Some(&exp.hash))?;
            println!("{method}: max |delta| {:.6} -> {}", p.max_delta(), dir.display());
            Ok(0)
        }
        Cmd::Train { method } => {
            let prep = exp.prepare()?;
            let ts = training_set(exp, &prep, *method)?;
            let rec = exp.train_on(&prep, &ts)?;
            let dir = run_dir(out, *method);
            rec.save(&dir, Some(&exp.hash))?;
            println!(
                "test accuracy {:.4} -> {}",
                rec.final_test_acc().unwrap_or(f64::NAN),
                dir.display()
            );
            Ok(0)
        }
        Cmd::Sal { method } => {
            let prep = exp.prepare()?;
            let ts = training_set(exp, &prep, *method)?;
            let name = method.map_or("vanilla", PoisonMethod::name);
            let rec = exp.train_on(&prep, &ts)?;
            let sal = sal_matrix(&rec, &ts, &exp.probe_config(), name)?;
            let dir = run_dir(out, *method);
            rec.save(&dir, Some(&exp.hash))?;
            sal.save(&dir, exp.cfg.sal.eval_subset.min(ts.len()), Some(&exp.hash))?;
            println!(
                "{} x {} SAL matrix -> {}",
                sal.n_epochs(),
                sal.n_layers(),
                dir.display()
            );
            Ok(u8::from(!sal.missing.is_empty()) * 2)
        }
        Cmd::Landscape => {
            let dir = out.join("landscape");
            for (run, m) in run_landscape(exp, &dir)? {
                println!(
                    "{run} plane {:?}: top-2 variance {:.4}, {} missing cells",
                    m.ranks, m.top2_variance, m.missing_cells
                );
            }
            Ok(0)
        }
        Cmd::Run => {
            let s = run_experiment(exp, out)?;
            println!("{:<8} {:>9} {:>8} {:>8}  status", "method", "test_acc", "lp", "ud");
            for r in &s.rows {
                let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
                println!(
                    "{:<8} {:>9} {:>8} {:>8}  {}",
                    r.method,
                    f(r.test_acc),
                    f(r.lp),
                    f(r.ud),
                    r.status
                );
            }
            println!("-> {}", out.join("bench.csv").display());
            Ok(if s.failures() > 0 { 2 } else { 0 })
        }
        Cmd::DefaultConfig | Cmd::TableCheck { .. } | Cmd::Ud { .. } => unreachable!("handled before loading a config"),
    }
}
