//! Checkpoint files.
//!
//! ```text
//! "CFCK" | u32 version | u32 header length | JSON header
//! u64 length | CFW1 blob of parameters and buffers
//! u64 length | CFW1 blob of optimizer moments
//! ```
//!
//! Integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capsule::{CapsuleNet, CapsuleNetConfig};
use crate::error::{Error, Result};
use crate::pipeline::Preprocess;
use crate::vgg::{InputNormalization, VggPrefix};
use crate::weights::{self, Record};

use super::{AdamConfig, AdamState, BestEpoch, EpochReport, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: CapsuleNetConfig,
    pub train: TrainConfig,
    pub adam: AdamConfig,
    pub adam_t: u64,
    pub epoch: usize,
    pub history: Vec<EpochReport>,
    #[serde(default)]
    pub best: Option<BestEpoch>,
    pub class_names: Vec<String>,
    pub preprocess: Preprocess,
    pub normalization: InputNormalization,
    pub prefix_trainable: bool,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub prefix: VggPrefix<f32>,
    pub net: CapsuleNet<f32>,
    pub adam: AdamState<f32>,
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("checkpoint truncated in {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer<f32>, class_names: &[String], preprocess: Preprocess) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                model: *trainer.net.config(),
                train: trainer.config,
                adam: trainer.adam.config,
                adam_t: trainer.adam.t(),
                epoch: trainer.epoch,
                history: trainer.history.clone(),
                best: trainer.best,
                class_names: class_names.to_vec(),
                preprocess,
                normalization: trainer.prefix.normalization,
                prefix_trainable: trainer.prefix.trainable,
            },
            prefix: trainer.prefix.clone(),
            net: trainer.net.clone(),
            adam: trainer.adam.clone(),
        }
    }

    pub fn into_trainer(self) -> Trainer<f32> {
        let mut prefix = self.prefix;
        prefix.trainable = self.header.prefix_trainable;
        Trainer {
            prefix,
            net: self.net,
            adam: self.adam,
            config: self.header.train,
            epoch: self.header.epoch,
            history: self.header.history,
            best: self.header.best,
        }
    }

    /// Fail with a dimension error unless the stored network has `expected`'s
    /// capsule and class counts.
    pub fn check_model(&self, expected: &CapsuleNetConfig) -> Result<()> {
        let m = &self.header.model;
        if (m.capsules, m.classes) != (expected.capsules, expected.classes) {
            return Err(Error::dim(
                "checkpoint",
                format!(
                    "checkpoint holds {} capsules x {} classes, expected {} x {}",
                    m.capsules, m.classes, expected.capsules, expected.classes
                ),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut records = self.prefix.store().to_records();
        records.extend(self.net.to_records());
        let params = weights::to_bytes(&records);
        let moments = weights::to_bytes(&self.adam.to_records());
        let mut out = Vec::with_capacity(12 + header.len() + 16 + params.len() + moments.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for blob in [params, moments] {
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        if take(&mut rest, 4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(&mut rest, 4, "version")?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(take(&mut rest, 4, "header length")?.try_into().expect("4 bytes")) as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(&mut rest, hlen, "header")?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut blob = |what: &str| -> Result<Vec<Record>> {
            let n = u64::from_le_bytes(take(&mut rest, 8, what)?.try_into().expect("8 bytes"));
            let n = usize::try_from(n).map_err(|_| Error::Format(format!("{what} too large")))?;
            weights::from_bytes(take(&mut rest, n, what)?)
        };
        let params = blob("parameters")?;
        let moments = blob("optimizer state")?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
        }
        let (vgg, head): (Vec<Record>, Vec<Record>) = params.into_iter().partition(|(n, _)| n.starts_with("vgg."));
        let mut prefix = VggPrefix::from_records(&vgg, header.normalization)?;
        prefix.trainable = header.prefix_trainable;
        let net = CapsuleNet::from_records(header.model, &head)?;
        let adam = AdamState::from_records(header.adam, header.adam_t, &moments)?;
        Ok(Checkpoint {
            header,
            prefix,
            net,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
