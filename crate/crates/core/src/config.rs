//! Run configuration, read from TOML with one table per component.
//!
//! ```toml
//! [backbone]
//! layers = 4
//!
//! [stream]
//! seed = 2024
//! shift_strength = 0.6
//!
//! [adapt]
//! mode = "sam"
//!
//! [adapt.lr]
//! norm = 0.01
//!
//! [adapt.fusion]
//! alpha = 0.7
//! ```
//!
//! Missing keys take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::engine::AdaptConfig;
use crate::error::{Error, Result};
use crate::eval::source::SourceConfig;
use crate::eval::stream::StreamConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub stream: StreamConfig,
    pub source: SourceConfig,
    pub adapt: AdaptConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.stream.validate(&self.backbone)?;
        self.source.validate()?;
        self.adapt.validate(self.backbone.classes)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<config>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialise config: {e}")))
    }

    /// The same run with every learning rate set to zero.
    pub fn frozen(&self) -> RunConfig {
        let mut cfg = *self;
        cfg.adapt.lr = crate::engine::LearningRates::ZERO;
        cfg
    }
}
