//! One serialized container for every calibration model this crate fits.
//!
//! Models are stored as a single JSON object whose `type` field selects the
//! concrete model: `ts`, `mdts`, `histbin` or `isotonic`. Writes are
//! atomic (temp file + rename), so a crash never leaves a half-written
//! model behind.

use crate::baselines::{HistogramBinningModel, IsotonicModel};
use crate::error::{Error, Result};
use crate::fileio::atomic_write;
use crate::mdts::MdtsModel;
use crate::prob::Calibrator;
use crate::ts::TemperatureModel;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Model {
    Ts(TemperatureModel),
    Mdts(MdtsModel),
    Histbin(HistogramBinningModel),
    Isotonic(IsotonicModel),
}

impl Model {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Ts(_) => "ts",
            Model::Mdts(_) => "mdts",
            Model::Histbin(_) => "histbin",
            Model::Isotonic(_) => "isotonic",
        }
    }

    pub fn as_calibrator(&self) -> &dyn Calibrator {
        match self {
            Model::Ts(m) => m,
            Model::Mdts(m) => m,
            Model::Histbin(m) => m,
            Model::Isotonic(m) => m,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::ModelFormat {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        atomic_write(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile { path: path.to_path_buf(), source: e }
            } else {
                Error::IoFailure { path: path.to_path_buf(), source: e }
            }
        })?;
        serde_json::from_str(&text).map_err(|e| Error::ModelFormat {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

impl Calibrator for Model {
    fn calibrate(&self, logits: &[f64], embedding: &[f64]) -> Result<crate::prob::Prediction> {
        self.as_calibrator().calibrate(logits, embedding)
    }
}
