//! Run configuration for the command-line tool.
//!
//! Settings are layered: built-in defaults (the training preset of the chosen
//! design, or the generic defaults when no design is named), then the JSON
//! config file, then command-line flags. Keys in the file are merged into the
//! defaults recursively, so a file only needs the values it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{DncError, Result};
use crate::geosim::Design;
use crate::model::{Architecture, DesignLayout};
use crate::posterior::DEFAULT_DRAWS;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Selects the training preset used as the base layer.
    pub design: Option<Design>,
    pub architecture: Architecture,
    /// Training settings; its `seed` is always overwritten by the top-level `seed`.
    pub train: TrainConfig,
    /// Monte Carlo draws per prediction.
    pub samples: usize,
    pub seed: u64,
    pub design_layout: Option<DesignLayout>,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_design(None)
    }
}

impl RunConfig {
    pub fn for_design(design: Option<Design>) -> Self {
        let train = match design {
            Some(Design::Stationary) => TrainConfig::stationary(),
            Some(Design::Deepgp) => TrainConfig::deepgp(),
            None => TrainConfig::default(),
        };
        Self {
            design,
            architecture: Architecture::default(),
            train,
            samples: DEFAULT_DRAWS,
            seed: 0,
            design_layout: None,
            train_path: None,
            val_path: None,
            test_path: None,
            model_path: None,
            out: None,
        }
    }

    /// Defaults overlaid with a parsed config document. `design` overrides
    /// the document's own `design` key when given.
    pub fn from_value(doc: Value, design: Option<Design>) -> Result<Self> {
        let Value::Object(map) = &doc else {
            return Err(DncError::Config("config must be a JSON object".into()));
        };
        if map
            .get("train")
            .and_then(Value::as_object)
            .is_some_and(|t| t.contains_key("seed"))
        {
            return Err(DncError::Config(
                "set the seed with the top-level 'seed' key, not 'train.seed'".into(),
            ));
        }
        let design = match (design, map.get("design")) {
            (Some(d), _) => Some(d),
            (None, None | Some(Value::Null)) => None,
            (None, Some(v)) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|e| DncError::Config(format!("design: {e}")))?,
            ),
        };
        let mut merged = serde_json::to_value(Self::for_design(design))
            .map_err(|e| DncError::Config(e.to_string()))?;
        merge(&mut merged, doc);
        let mut cfg: RunConfig =
            serde_json::from_value(merged).map_err(|e| DncError::Config(e.to_string()))?;
        cfg.design = design;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path, design: Option<Design>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DncError::io(path, e))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| DncError::Config(format!("{}:{}: {e}", path.display(), e.line())))?;
        Self::from_value(doc, design)
            .map_err(|e| DncError::Config(format!("{}: {}", path.display(), strip(e))))
    }

    /// Defaults, or the given file layered over them.
    pub fn resolve(path: Option<&Path>, design: Option<Design>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p, design),
            None => Ok(Self::for_design(design)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| DncError::Config(strip(e)))?;
        if self.samples < 2 {
            return Err(DncError::Config(format!(
                "samples must be at least 2, got {}",
                self.samples
            )));
        }
        let arch = &self.architecture;
        if arch.factor_hidden.iter().chain(&arch.loading_hidden).any(|&w| w == 0) {
            return Err(DncError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

fn strip(e: DncError) -> String {
    match e {
        DncError::Config(m) | DncError::InvalidParameter(m) => m,
        other => other.to_string(),
    }
}

/// Recursively overlays `top` onto `base`; objects merge key by key, any
/// other value replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
