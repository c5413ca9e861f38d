//! Run configuration (TOML).
//!
//! ```toml
//! [model]
//! capsules = 3
//! classes = 2
//! input_size = 128
//! [model.routing]
//! r = 2
//! noise_sigma = 0.1
//! dropout_p = 0.05
//!
//! [train]
//! epochs = 25
//! lr = 5e-4
//! seed = 0
//!
//! [data]
//! manifest = "data/manifest.jsonl"
//! class_names = ["real", "fake"]
//! frames_train = 100
//! frames_eval = 10
//! crop = "bbox"
//!
//! [io]
//! checkpoint_dir = "runs/ckpt"
//! report_dir = "runs/report"
//! ```
//!
//! Unknown keys are rejected. Relative paths are taken as given.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::capsule::{CapsuleNetConfig, RoutingConfig, MIN_FEATURE_SIDE};
use crate::error::{Error, Result};
use crate::pipeline::{CropMode, Preprocess};
use crate::training::TrainConfig;
use crate::vgg;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub capsules: usize,
    pub classes: usize,
    /// Square side inputs are resized to; `None` keeps crops as they are.
    pub input_size: Option<usize>,
    pub routing: RoutingConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            capsules: 3,
            classes: 2,
            input_size: None,
            routing: RoutingConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    /// Manifest labels in class-index order; defaults to `real, fake` for
    /// two classes and `class0, class1, …` otherwise.
    pub class_names: Option<Vec<String>>,
    pub patch_size: Option<usize>,
    pub frames_train: usize,
    pub frames_eval: usize,
    pub crop: CropMode,
    /// Decision threshold on the positive-class probability.
    pub threshold: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            class_names: None,
            patch_size: None,
            frames_train: 100,
            frames_eval: 10,
            crop: CropMode::None,
            threshold: crate::metrics::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    /// Pretrained prefix weights (CFW1); random initialization when absent.
    pub weights: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            weights: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub io: IoSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}{}", e.message(), tail(&e))))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn class_names(&self) -> Vec<String> {
        match &self.data.class_names {
            Some(n) => n.clone(),
            None if self.model.classes == 2 => vec!["real".into(), "fake".into()],
            None => (0..self.model.classes).map(|i| format!("class{i}")).collect(),
        }
    }

    pub fn net_config(&self) -> CapsuleNetConfig {
        CapsuleNetConfig {
            capsules: self.model.capsules,
            classes: self.model.classes,
            routing: self.model.routing,
        }
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            crop: self.data.crop,
            input_size: self.model.input_size,
            patch_size: self.data.patch_size,
        }
    }

    /// Side of the square network input, when known.
    pub fn network_side(&self) -> Option<usize> {
        self.data.patch_size.or(self.model.input_size).or(match self.data.crop {
            CropMode::Center(s) => Some(s),
            _ => None,
        })
    }

    /// Check everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.train.validate()?;
        self.net_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        let names = self.class_names();
        if names.len() != self.model.classes {
            return cfg(format!("{} class names for {} classes", names.len(), self.model.classes));
        }
        if names.iter().collect::<HashSet<_>>().len() != names.len() {
            return cfg("class names must be unique".into());
        }
        let min_side = vgg::MIN_INPUT.max(MIN_FEATURE_SIDE * 8);
        for (key, v) in [
            ("model.input_size", self.model.input_size),
            ("data.patch_size", self.data.patch_size),
        ] {
            if let Some(s) = v {
                if s < min_side {
                    return cfg(format!("{key} = {s} is below the minimum of {min_side}"));
                }
            }
        }
        if let (Some(p), Some(s)) = (self.data.patch_size, self.model.input_size) {
            if p > s {
                return cfg(format!("data.patch_size {p} exceeds model.input_size {s}"));
            }
        }
        if self.data.frames_train == 0 || self.data.frames_eval == 0 {
            return cfg("data.frames_train and data.frames_eval must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.data.threshold) {
            return cfg(format!("data.threshold {} outside [0, 1]", self.data.threshold));
        }
        if let CropMode::Center(0) = self.data.crop {
            return cfg("center crop size must be positive".into());
        }
        Ok(())
    }
}

fn tail(e: &toml::de::Error) -> String {
    match e.span() {
        Some(s) => format!(" (at byte {})", s.start),
        None => String::new(),
    }
}
