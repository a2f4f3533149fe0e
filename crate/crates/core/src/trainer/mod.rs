//! Clean and poisoned training runs with per-epoch checkpoints, trajectory
//! snapshots and optional defenses.

mod augment;
mod record;

pub use augment::{adv_train_step, craft_adversarial, cutout_batch, cutout_with, mixup_batch, mixup_with, one_hot};
pub use record::{EpochCurve, Snapshot, TrainRecord, SNAPSHOT_VERSION};

pub(crate) use augment::{add, sign};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::diffcore::{Model, SgdMomentum, Target};
use crate::error::{Error, Result};
use crate::seed::rng_from;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Defense {
    #[default]
    None,
    Mixup {
        alpha: f64,
    },
    Cutout {
        width: usize,
        fill: f64,
    },
    AdvTrain {
        budget: f64,
        inner_steps: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Multiplier applied at each milestone.
    pub lr_decay: f64,
    /// Fractions of `epochs` at which the learning rate decays.
    pub milestones: Vec<f64>,
    pub batch_size: usize,
    pub snapshot_every: usize,
    pub defense: Defense,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.1,
            momentum: 0.0,
            lr_decay: 0.1,
            milestones: vec![0.5, 0.75],
            batch_size: 64,
            snapshot_every: 5,
            defense: Defense::None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.snapshot_every == 0 {
            return Err(Error::invalid("snapshot_every must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("need lr >= 0 and momentum in [0, 1)"));
        }
        if !(self.lr_decay > 0.0) || self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::invalid("lr_decay must be > 0 and milestones in [0, 1]"));
        }
        match self.defense {
            Defense::Mixup { alpha } if !(alpha > 0.0) => Err(Error::invalid("mixup alpha must be > 0")),
            Defense::AdvTrain { budget, .. } if !(budget > 0.0) => {
                Err(Error::invalid("adversarial training budget must be > 0"))
            }
            _ => Ok(()),
        }
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize && m > 0.0)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// Full mini-batch SGD run from `model0`. The test set is always evaluated
/// clean. A numeric failure ends the run early; the record keeps everything
/// up to the last good checkpoint and carries the failure message.
pub fn train(model0: &Model, train_ds: &Dataset, test_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainRecord> {
    cfg.validate()?;
    if train_ds.dim() != model0.input_dim() || test_ds.dim() != model0.input_dim() {
        return Err(Error::shape("dataset dimension differs from model input"));
    }
    if train_ds.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut rng = rng_from(cfg.seed);
    let mut model = model0.clone();
    let mut opt = SgdMomentum::new();
    let mut record = TrainRecord::new(cfg.clone());
    let mut step = 0usize;
    record.snapshots.push(Snapshot {
        step,
        params: model.flatten(),
    });
    let n = train_ds.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = train_ds.features.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| train_ds.labels[i]).collect();
            let outcome = batch_update(&mut model, &mut opt, &xb, &yb, train_ds.n_classes, lr, cfg, &mut rng);
            if let Err(e) = outcome {
                record.aborted = Some(format!("epoch {epoch}, step {step}: {e}"));
                return Ok(record);
            }
            step += 1;
            if step.is_multiple_of(cfg.snapshot_every) {
                record.snapshots.push(Snapshot {
                    step,
                    params: model.flatten(),
                });
            }
        }
        let curve = (|| -> Result<EpochCurve> {
            let train_loss = model.loss(&train_ds.features, Target::Labels(&train_ds.labels))?;
            Ok(EpochCurve {
                epoch: epoch + 1,
                train_loss,
                train_acc: model.accuracy(&train_ds.features, &train_ds.labels)?,
                test_acc: model.accuracy(&test_ds.features, &test_ds.labels)?,
            })
        })();
        match curve {
            Ok(c) => {
                record.curves.push(c);
                record.checkpoints.push(model.clone());
            }
            Err(e) => {
                record.aborted = Some(format!("epoch {epoch} evaluation: {e}"));
                return Ok(record);
            }
        }
    }
    Ok(record)
}

#[allow(clippy::too_many_arguments)]
fn batch_update(
    model: &mut Model,
    opt: &mut SgdMomentum,
    xb: &crate::diffcore::Tensor,
    yb: &[usize],
    n_classes: usize,
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut crate::seed::DetRng,
) -> Result<()> {
    let grads = match cfg.defense {
        Defense::None => model.loss_and_grad(xb, Target::Labels(yb), false)?.grads,
        Defense::Mixup { alpha } => {
            let (xm, ym) = mixup_batch(xb, yb, n_classes, alpha, rng)?;
            model.loss_and_grad(&xm, Target::Soft(&ym), false)?.grads
        }
        Defense::Cutout { width, fill } => {
            let xc = cutout_batch(xb, width, fill.clamp(0.0, 1.0), rng)?;
            model.loss_and_grad(&xc, Target::Labels(yb), false)?.grads
        }
        Defense::AdvTrain { budget, inner_steps } => {
            adv_train_step(model, opt, xb, yb, budget, inner_steps, lr, cfg.momentum)?;
            return check_finite(model);
        }
    };
    opt.step(model, &grads, lr, cfg.momentum)?;
    check_finite(model)
}

fn check_finite(model: &Model) -> Result<()> {
    if model.flatten().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("parameters after update".into()))
    }
}

/// Empirical CDF of absolute parameter values: ascending `(value, fraction <= value)`.
pub fn param_cdf(model: &Model) -> Vec<(f64, f64)> {
    let mut vals: Vec<f64> = model.flatten().iter().map(|v| v.abs()).collect();
    vals.sort_by(f64::total_cmp);
    let p = vals.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, v) in vals.iter().enumerate() {
        let frac = (i + 1) as f64 / p;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => out.push((*v, frac)),
        }
    }
    out
}

/// Median of the absolute parameter values.
pub fn median_abs_param(model: &Model) -> f64 {
    let mut vals: Vec<f64> = model.flatten().iter().map(|v| v.abs()).collect();
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_classification, normalize, split, ClassificationSpec};
    use crate::diffcore::{Architecture, Dense, Layer};

    fn toy() -> (Dataset, Dataset) {
        let ds = normalize(&make_classification(&ClassificationSpec::default(), 0).unwrap());
        split(&ds, 0.2, 1).unwrap()
    }

    #[test]
    fn lr_schedule_milestones() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(4), 0.1);
        assert!((cfg.lr_at(5) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(9) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_single_batch_keeps_init() {
        let (tr, te) = toy();
        let model0 = Architecture::linear(12, 10).build(&mut rng_from(1)).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            batch_size: tr.len(),
            ..Default::default()
        };
        let rec = train(&model0, &tr, &te, &cfg).unwrap();
        assert_eq!(rec.checkpoints.len(), 1);
        assert_eq!(rec.checkpoints[0], model0);
    }

    #[test]
    fn toy_baseline_learns_and_is_reproducible() {
        let (tr, te) = toy();
        let model0 = Architecture::linear(12, 10).build(&mut rng_from(1)).unwrap();
        let cfg = TrainConfig {
            lr_decay: 1.0,
            ..Default::default()
        };
        let rec = train(&model0, &tr, &te, &cfg).unwrap();
        assert_eq!(rec.checkpoints.len(), 10);
        let last = rec.curves.last().unwrap();
        assert!(last.test_acc >= 0.70, "test acc {}", last.test_acc);
        let again = train(&model0, &tr, &te, &cfg).unwrap();
        assert_eq!(rec.curves, again.curves);
        // 4000 / 64 -> 63 steps per epoch
        assert_eq!(rec.snapshots.len(), 630 / 5 + 1);
        assert!(rec.snapshots.windows(2).all(|w| w[0].step < w[1].step));
        assert!(rec.snapshots.iter().all(|s| s.step % 5 == 0));
    }

    #[test]
    fn defenses_run_and_stay_finite() {
        let (tr, te) = toy();
        let model0 = Architecture::linear(12, 10).build(&mut rng_from(1)).unwrap();
        for defense in [
            Defense::Mixup { alpha: 1.0 },
            Defense::Cutout { width: 3, fill: 0.0 },
            Defense::AdvTrain {
                budget: 0.03,
                inner_steps: 3,
            },
        ] {
            let cfg = TrainConfig {
                epochs: 2,
                defense,
                ..Default::default()
            };
            let rec = train(&model0, &tr, &te, &cfg).unwrap();
            assert!(rec.aborted.is_none());
            assert!(rec.curves.iter().all(|c| c.train_loss.is_finite()));
        }
    }

    #[test]
    fn divergence_is_reported_with_partial_record() {
        let (tr, te) = toy();
        let model0 = Architecture::linear(12, 10).build(&mut rng_from(1)).unwrap();
        let cfg = TrainConfig {
            lr: f64::MAX,
            ..Default::default()
        };
        let rec = train(&model0, &tr, &te, &cfg).unwrap();
        assert!(rec.aborted.is_some());
        assert!(rec.checkpoints.len() < 10);
        assert!(rec
            .checkpoints
            .iter()
            .all(|m| m.flatten().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (tr, te) = toy();
        let model0 = Architecture::linear(12, 10).build(&mut rng_from(1)).unwrap();
        for cfg in [
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                snapshot_every: 0,
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
        ] {
            assert!(train(&model0, &tr, &te, &cfg).is_err());
        }
    }

    #[test]
    fn cdf_properties() {
        let model = Architecture::linear(12, 10).build(&mut rng_from(2)).unwrap();
        let cdf = param_cdf(&model);
        assert!((cdf[0].1 - 1.0 / 130.0).abs() < 1e-15);
        assert_eq!(cdf.last().unwrap().1, 1.0);
        assert!(cdf.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        let zero = Model::new(vec![Layer::Dense(Dense::zeros(3, 2))]).unwrap();
        assert_eq!(param_cdf(&zero), vec![(0.0, 1.0)]);
    }
}
