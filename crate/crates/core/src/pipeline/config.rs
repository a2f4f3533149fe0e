use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::ClassificationSpec;
use crate::diffcore::Architecture;
use crate::error::{Error, Result};
use crate::poisons::{EmConfig, PoisonMethod, DEFAULT_BUDGET};
use crate::sal::SalProbeConfig;
use crate::trainer::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: ClassificationSpec,
    pub test_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            generator: ClassificationSpec::default(),
            test_frac: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TapConfig {
    pub pgd_steps: usize,
    pub step_size: Option<f64>,
}

impl Default for TapConfig {
    fn default() -> Self {
        TapConfig {
            pgd_steps: 20,
            step_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoisonConfig {
    pub methods: Vec<PoisonMethod>,
    /// l-inf budget for EM, TAP and LSP.
    pub budget: f64,
    /// Value written into the OPS shortcut coordinate.
    pub ops_value: f64,
    /// Budget and step settings inside are overridden by `budget`.
    pub em: EmConfig,
    pub tap: TapConfig,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        PoisonConfig {
            methods: PoisonMethod::ALL.to_vec(),
            budget: DEFAULT_BUDGET,
            ops_value: 1.0,
            em: EmConfig::default(),
            tap: TapConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeConfig {
    pub enabled: bool,
    pub res: usize,
    pub pad: f64,
    pub planes: Vec<(usize, usize)>,
    /// Poison whose run is mapped next to the clean run by `landscape`.
    pub poison: PoisonMethod,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            enabled: true,
            res: 51,
            pad: 0.2,
            planes: vec![(1, 2), (3, 4)],
            poison: PoisonMethod::Ops,
        }
    }
}

/// Everything one experiment needs. Serialized as JSON; unknown keys are
/// rejected. The defaults describe the toy task: 5000 samples, 12 features,
/// 10 classes, one linear layer, plain SGD at lr 0.1 for 10 epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: Architecture,
    pub poison: PoisonConfig,
    pub train: TrainConfig,
    pub sal: SalProbeConfig,
    pub landscape: LandscapeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            out: PathBuf::from("runs/toy"),
            data: DataConfig::default(),
            model: Architecture::linear(12, 10),
            poison: PoisonConfig::default(),
            train: TrainConfig {
                batch_size: 4,
                lr_decay: 1.0,
                milestones: vec![],
                ..TrainConfig::default()
            },
            sal: SalProbeConfig::default(),
            landscape: LandscapeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        if self.version != CONFIG_VERSION {
            return Err(Error::Version {
                what: "experiment config".into(),
                found: self.version,
                expected: CONFIG_VERSION,
            });
        }
        self.data.generator.validate().map_err(wrap)?;
        if !(self.data.test_frac > 0.0 && self.data.test_frac < 1.0) {
            return Err(Error::Config("data.test_frac must lie in (0, 1)".into()));
        }
        self.model.validate().map_err(wrap)?;
        if self.model.input_dim != self.data.generator.n_features
            || self.model.n_classes != self.data.generator.n_classes
        {
            return Err(Error::Config("model dimensions do not match the dataset".into()));
        }
        self.train.validate().map_err(wrap)?;
        self.sal.validate().map_err(wrap)?;
        if !(self.poison.budget >= 0.0 && self.poison.budget <= 1.0) {
            return Err(Error::Config("poison.budget must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.poison.ops_value) {
            return Err(Error::Config("poison.ops_value must lie in [0, 1]".into()));
        }
        let mut seen = self.poison.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.poison.methods.len() {
            return Err(Error::Config("poison.methods lists a method twice".into()));
        }
        if self.poison.methods.contains(&PoisonMethod::Ops)
            && self.data.generator.n_classes > self.data.generator.n_features
        {
            return Err(Error::Config("OPS needs at least as many features as classes".into()));
        }
        let l = &self.landscape;
        if l.enabled {
            if l.res < 2 || !(l.pad >= 0.0) {
                return Err(Error::Config("landscape needs res >= 2 and pad >= 0".into()));
            }
            if l.planes.iter().any(|&(i, j)| i == 0 || j == 0 || i == j) {
                return Err(Error::Config("landscape planes need distinct 1-based ranks".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with `out` blanked, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&ExperimentConfig {
            out: PathBuf::new(),
            ..self.clone()
        })
        .expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            budget: self.poison.budget,
            ..self.poison.em.clone()
        }
    }
}
