//! Checkpoint files: a binary container with a magic header and format
//! version, a JSON metadata block (architecture, training configuration,
//! normalization statistics), and the raw parameter arrays as
//! little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassifierArch, ClassifierModel, PredictorArch, SemiSupervisedModel};
use crate::optim::TrainConfig;
use crate::sequence::NormStats;

const MAGIC: &[u8; 8] = b"TRNNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointModel {
    Classifier(ClassifierModel),
    SemiSupervised(SemiSupervisedModel),
}

impl CheckpointModel {
    fn descriptor(&self) -> ArchDescriptor {
        match self {
            CheckpointModel::Classifier(m) => ArchDescriptor::Classifier {
                arch: m.arch.clone(),
            },
            CheckpointModel::SemiSupervised(m) => ArchDescriptor::SemiSupervised {
                predictor: m.predictor.arch.clone(),
                classifier: m.classifier.arch.clone(),
                freeze_predictor: m.freeze_predictor,
            },
        }
    }

    /// Every parameter slice, bias slices included regardless of the
    /// architecture's bias setting, in a stable order.
    fn full_slices(&self) -> Vec<&[f64]> {
        match self {
            CheckpointModel::Classifier(m) => classifier_full_slices(m),
            CheckpointModel::SemiSupervised(m) => {
                let mut out = m.predictor.cell.param_slices(true);
                out.push(m.predictor.readout.w.as_slice());
                out.push(m.predictor.readout.b.as_slice());
                out.extend(classifier_full_slices(&m.classifier));
                out
            }
        }
    }

    fn full_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            CheckpointModel::Classifier(m) => classifier_full_slices_mut(m),
            CheckpointModel::SemiSupervised(m) => {
                let mut out = m.predictor.cell.param_slices_mut(true);
                out.push(m.predictor.readout.w.as_mut_slice());
                out.push(m.predictor.readout.b.as_mut_slice());
                out.extend(classifier_full_slices_mut(&mut m.classifier));
                out
            }
        }
    }
}

fn classifier_full_slices(m: &ClassifierModel) -> Vec<&[f64]> {
    let mut out = m.cell.param_slices(true);
    for l in &m.head {
        out.push(l.w.as_slice());
        out.push(l.b.as_slice());
    }
    out
}

fn classifier_full_slices_mut(m: &mut ClassifierModel) -> Vec<&mut [f64]> {
    let mut out = m.cell.param_slices_mut(true);
    for l in &mut m.head {
        out.push(l.w.as_mut_slice());
        out.push(l.b.as_mut_slice());
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
enum ArchDescriptor {
    Classifier {
        arch: ClassifierArch,
    },
    SemiSupervised {
        predictor: PredictorArch,
        classifier: ClassifierArch,
        freeze_predictor: bool,
    },
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    descriptor: ArchDescriptor,
    config: TrainConfig,
    norm: NormStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CheckpointModel,
    pub config: TrainConfig,
    pub norm: NormStats,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Metadata {
            descriptor: self.model.descriptor(),
            config: self.config.clone(),
            norm: self.norm.clone(),
        };
        let meta_bytes = serde_json::to_vec(&meta)
            .map_err(|e| Error::checkpoint(format!("metadata serialization failed: {e}")))?;
        let slices = self.model.full_slices();
        let count: usize = slices.iter().map(|s| s.len()).sum();

        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&meta_bytes)?;
        w.write_all(&(count as u64).to_le_bytes())?;
        for s in slices {
            for &v in s {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::checkpoint(format!(
                "{} is not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(Error::checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        r.read_exact(&mut u32buf)?;
        let meta_len = u32::from_le_bytes(u32buf) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes)?;
        let meta: Metadata = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::checkpoint(format!("corrupt metadata: {e}")))?;

        let mut model = match meta.descriptor {
            ArchDescriptor::Classifier { arch } => CheckpointModel::Classifier(arch.build(0)?),
            ArchDescriptor::SemiSupervised {
                predictor,
                classifier,
                freeze_predictor,
            } => CheckpointModel::SemiSupervised(SemiSupervisedModel {
                predictor: predictor.build(0)?,
                classifier: classifier.build(0)?,
                freeze_predictor,
            }),
        };

        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let mut slices = model.full_slices_mut();
        let expected: usize = slices.iter().map(|s| s.len()).sum();
        if count != expected {
            return Err(Error::checkpoint(format!(
                "parameter count {count} does not match architecture ({expected})"
            )));
        }
        let mut f64buf = [0u8; 8];
        for s in &mut slices {
            for v in s.iter_mut() {
                r.read_exact(&mut f64buf)?;
                *v = f64::from_le_bytes(f64buf);
            }
        }
        Ok(Checkpoint {
            model,
            config: meta.config,
            norm: meta.norm,
        })
    }
}
