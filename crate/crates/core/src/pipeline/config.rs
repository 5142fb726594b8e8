//! Run configuration: one JSON file, overridden field by field from the
//! command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::RegistrationConfig;
use crate::segmenter::SegmenterSpec;
use crate::tiling::LatticeSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Template used by `fit` (defaults to the first atlas). Segmentation
    /// always uses the template stored in the model.
    pub template: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
    pub lattice: LatticeSpec,
    pub segmenter: SegmenterSpec,
    /// Number of labels; defaults to the model's.
    pub label_count: Option<usize>,
    /// Worker threads; 0 means one per available core.
    pub jobs: usize,
    /// Run as `<command> <input> <output>` before registration.
    pub pre_hook: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub keep_intermediates: bool,
    pub registration: RegistrationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            template: None,
            model_dir: None,
            lattice: LatticeSpec::default(),
            segmenter: SegmenterSpec::default(),
            label_count: None,
            jobs: 0,
            pre_hook: None,
            output_dir: None,
            keep_intermediates: true,
            registration: RegistrationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.label_count {
            if l < 2 {
                return Err(Error::Config(format!("label_count must be at least 2, got {l}")));
            }
        }
        if let Some(hook) = &self.pre_hook {
            if shlex::split(hook).is_none_or(|v| v.is_empty()) {
                return Err(Error::Config(format!("cannot parse pre-hook command {hook:?}")));
            }
        }
        if self.registration.levels == 0 {
            return Err(Error::Config("registration needs at least one pyramid level".into()));
        }
        self.segmenter.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })
    }

    /// Effective worker count.
    pub fn threads(&self) -> usize {
        if self.jobs > 0 {
            self.jobs
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
