use std::fs;

use unlearn_core::pipeline::{run_landscape, Experiment, ExperimentConfig};
use unlearn_core::poisons::PoisonMethod;

#[test]
fn landscape_writes_four_file_triples() {
    let exp = Experiment::new(ExperimentConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifests = run_landscape(&exp, dir.path()).unwrap();
    assert_eq!(manifests.len(), 4);
    let every = exp.cfg.train.snapshot_every;
    for run in ["vanilla", "ops"] {
        for plane in ["plane_1_2", "plane_3_4"] {
            let d = dir.path().join(run).join(plane);
            for f in ["landscape.csv", "path.csv", "pca.json"] {
                assert!(d.join(f).is_file(), "{}/{f}", d.display());
            }
            let path = fs::read_to_string(d.join("path.csv")).unwrap();
            let steps: Vec<usize> = path
                .lines()
                .skip(2)
                .map(|l| l.split(',').next().unwrap().parse().unwrap())
                .collect();
            assert!(steps.len() >= 3);
            assert!(steps.iter().all(|s| s % every == 0));
            let grid = fs::read_to_string(d.join("landscape.csv")).unwrap();
            let res = exp.cfg.landscape.res;
            assert_eq!(grid.lines().count(), 2 + res * res);
        }
    }
    for (_, m) in &manifests {
        assert!(m.top2_variance > 0.0 && m.top2_variance <= 1.0 + 1e-12);
        assert_eq!(m.missing_cells, 0);
    }
}

#[test]
fn em_at_larger_budget_drops_accuracy() {
    let mut cfg = ExperimentConfig::default();
    cfg.poison.budget = 0.2;
    let exp = Experiment::new(cfg).unwrap();
    let prep = exp.prepare().unwrap();
    let clean = exp.train_on(&prep, &prep.train).unwrap().final_test_acc().unwrap();
    let poisoned = exp.poison(&prep, PoisonMethod::Em, None).unwrap().materialize();
    let em = exp.train_on(&prep, &poisoned).unwrap().final_test_acc().unwrap();
    assert!(clean - em >= 0.30, "clean {clean} vs EM {em}");
}
