//! Run configuration: a TOML document holding the experiment knobs, with
//! command-line flags layered on top. The fully resolved spec is frozen
//! next to the results so any run can be repeated from its output
//! directory alone.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cells::CellKind;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ClassifierArch;
use crate::optim::TrainConfig;
use crate::train::SemiArch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub cell: String,
    pub hidden: usize,
    pub head: Vec<usize>,
    pub dropout: Vec<f64>,
    /// Inferred from the manifest when absent.
    pub num_classes: Option<usize>,
    pub use_biases: bool,
    /// Hidden size of the semi-supervised predictor; defaults to `hidden`.
    pub predictor_hidden: Option<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            cell: "gru".to_string(),
            hidden: 64,
            head: Vec::new(),
            dropout: Vec::new(),
            num_classes: None,
            use_biases: true,
            predictor_hidden: None,
        }
    }
}

impl ArchConfig {
    pub fn cell_kind(&self) -> Result<CellKind> {
        CellKind::from_str(&self.cell)
    }

    pub fn classifier(&self, input_dim: usize, num_classes: usize) -> Result<ClassifierArch> {
        let arch = ClassifierArch {
            cell: self.cell_kind()?,
            input_dim,
            hidden: self.hidden,
            head: self.head.clone(),
            dropout: self.dropout.clone(),
            num_classes: self.num_classes.unwrap_or(num_classes),
            use_biases: self.use_biases,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn semi(&self, input_dim: usize, num_classes: usize) -> Result<SemiArch> {
        Ok(SemiArch {
            cell: self.cell_kind()?,
            input_dim,
            predictor_hidden: self.predictor_hidden.unwrap_or(self.hidden),
            classifier_hidden: self.hidden,
            head: self.head.clone(),
            dropout: self.dropout.clone(),
            num_classes: self.num_classes.unwrap_or(num_classes),
            use_biases: self.use_biases,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSpec {
    pub manifest: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
    pub output: PathBuf,
    /// Held-out fraction for the `train` command; 0 trains on everything.
    pub holdout: f64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub k: usize,
    pub parallel_folds: usize,
    pub label_fraction: u32,
    pub fine_tune: bool,
    pub fractions: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            manifest: None,
            data_root: None,
            output: PathBuf::from("runs/out"),
            holdout: 0.2,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            k: 5,
            parallel_folds: 1,
            label_fraction: 5,
            fine_tune: false,
            fractions: vec![10.0, 40.0, 70.0, 100.0],
            checkpoint: None,
            synth: None,
        }
    }
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<RunSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let spec: RunSpec =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.cell_kind()?;
        self.train.validate().map_err(|e| match e {
            Error::Argument(m) => Error::Config(format!("train: {m}")),
            other => other,
        })?;
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::config("holdout must be in [0, 1)".to_string()));
        }
        if self.parallel_folds == 0 {
            return Err(Error::config("parallel_folds must be >= 1".to_string()));
        }
        if self.fractions.iter().any(|&f| !(f > 0.0 && f <= 100.0)) {
            return Err(Error::config("fractions must be in (0, 100]".to_string()));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::config("no manifest given (flag --manifest or config key)".to_string()))
    }

    /// Write the resolved spec next to the results.
    pub fn freeze(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("config serialization failed: {e}")))?;
        std::fs::write(dir.join("config.toml"), text)?;
        Ok(())
    }
}
