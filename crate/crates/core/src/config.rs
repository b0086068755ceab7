//! Experiment configuration: one JSON object holding every knob of the
//! model, the context arrangement and training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::context::GaSpec;
use crate::error::{spec_err, Error, Result};
use crate::gald::{Arrangement, LdSpec};
use crate::segnet::{BackboneSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaldConfig {
    /// Width `C` of the backbone output and of the context modules.
    pub channels: usize,
    pub num_classes: usize,
    pub ga: GaSpec,
    pub ld: LdSpec,
    pub arrangement: Arrangement,
    pub backbone: BackboneSpec,
    pub train: TrainConfig,
    /// Training set directory.
    pub dataset: PathBuf,
    pub output: PathBuf,
}

impl Default for GaldConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            num_classes: 3,
            ga: GaSpec::default(),
            ld: LdSpec::default(),
            arrangement: Arrangement::Gald,
            backbone: BackboneSpec::default(),
            train: TrainConfig::default(),
            dataset: PathBuf::from("data/train"),
            output: PathBuf::from("runs/default"),
        }
    }
}

impl GaldConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The configuration with every optional field made explicit.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.ga = c.ga.resolved();
        c
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.resolved()).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(spec_err(format!("num_classes {} outside [2, 255]", self.num_classes)));
        }
        self.backbone.validate()?;
        if self.backbone.out_channels() != self.channels {
            return Err(spec_err(format!(
                "backbone ends at {} channels but channels = {}",
                self.backbone.out_channels(),
                self.channels
            )));
        }
        if self.arrangement.has_ga() {
            if self.ga.channels != self.channels {
                return Err(spec_err(format!(
                    "ga.channels = {} but channels = {}",
                    self.ga.channels, self.channels
                )));
            }
            self.ga.validate()?;
        }
        if self.arrangement.has_ld() {
            self.ld.validate()?;
        }
        self.train.validate()
    }

    /// Checks that an `h x w` input fits the output stride and the LD ratio.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let s = self.backbone.stride();
        if !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(spec_err(format!(
                "input {h}x{w} is not divisible by the output stride {s}"
            )));
        }
        if self.arrangement.has_ld() && (h / s < self.ld.d || w / s < self.ld.d) {
            return Err(Error::InvalidSpec(format!(
                "LD ratio {} needs features of at least {0}x{0}, input {h}x{w} gives {}x{}",
                self.ld.d,
                h / s,
                w / s
            )));
        }
        Ok(())
    }
}
