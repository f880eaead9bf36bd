//! Architecture and training hyperparameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DESK: &str = include_str!("../presets/desk.toml");
const PAPER: &str = include_str!("../presets/paper.toml");

/// Every free hyperparameter of the model plus the training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of atrous branches in the context aggregator; branch `d` uses
    /// dilation `d`.
    pub m: usize,
    /// Number of encoder stages.
    pub k: usize,
    /// Blocks per stage (`2·n_i`).
    pub depths: Vec<usize>,
    /// Attention heads per stage.
    pub heads: Vec<usize>,
    /// Channel width of the stride-4 stem output.
    pub c_i: usize,
    /// Attention window side `M`.
    pub window: usize,
    /// Shared decoder width.
    pub c_d: usize,
    /// Number of segmentation classes `K`.
    pub classes: usize,
    /// Square model input side after preprocessing.
    pub input_side: usize,
    /// Centre-crop side applied before resizing to `input_side`.
    pub crop: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub eval_every: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_augment")]
    pub augment: bool,
    /// Joint gradient norm ceiling applied before each SGD step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

fn default_batch() -> usize {
    2
}

fn default_augment() -> bool {
    true
}

fn bad(field: &'static str, msg: impl Into<String>) -> Error {
    Error::Config { field, msg: msg.into() }
}

impl ModelConfig {
    /// Desk-scale preset (`k=4`, `C^I=16`, `M=4`, 64×64 input).
    pub fn desk() -> Self {
        Self::from_toml(DESK).expect("desk preset is valid")
    }

    /// Full-size preset (`C^I=96`, depths `[2,2,6,2]`, `M=7`).
    pub fn paper() -> Self {
        Self::from_toml(PAPER).expect("paper preset is valid")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config {
            field: "document",
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, or a preset when `path` names one (`desk`,
    /// `paper`).
    pub fn load(path: &Path) -> Result<Self> {
        if let Some(cfg) = path.to_str().and_then(Self::preset) {
            return Ok(cfg);
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Channel width of stage `i` (0-based): `2^i · C^I`.
    pub fn stage_width(&self, stage: usize) -> usize {
        self.c_i << stage
    }

    /// Spatial side of stage `i` (0-based) for a square input of `side`.
    pub fn stage_side(side: usize, stage: usize) -> usize {
        side / (4 << stage)
    }

    /// Effective window of a stage: `min(M, H_i, W_i)`.
    pub fn effective_window(&self, h: usize, w: usize) -> usize {
        self.window.min(h).min(w)
    }

    /// Checks that an `h × w` input is valid for the architecture.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let unit = 4 << (self.k - 1);
        if !h.is_multiple_of(unit) || !w.is_multiple_of(unit) || h == 0 || w == 0 {
            return Err(Error::invalid(
                "model",
                format!("input {h}×{w} must be a positive multiple of {unit} on both sides"),
            ));
        }
        for stage in 0..self.k {
            let (sh, sw) = (h / (4 << stage), w / (4 << stage));
            let m = self.effective_window(sh, sw);
            if sh % m != 0 || sw % m != 0 {
                return Err(Error::invalid(
                    "model",
                    format!(
                        "stage {} extent {sh}×{sw} is not divisible into {m}×{m} windows",
                        stage + 1
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.m) {
            return Err(bad("m", format!("must lie in [1, 8], got {}", self.m)));
        }
        if self.k == 0 || self.k > 8 {
            return Err(bad("k", format!("must lie in [1, 8], got {}", self.k)));
        }
        if self.depths.len() != self.k {
            return Err(bad(
                "depths",
                format!("expected {} entries, got {}", self.k, self.depths.len()),
            ));
        }
        if self.heads.len() != self.k {
            return Err(bad(
                "heads",
                format!("expected {} entries, got {}", self.k, self.heads.len()),
            ));
        }
        if let Some(d) = self.depths.iter().find(|&&d| d == 0 || d % 2 != 0) {
            return Err(bad("depths", format!("every depth must be even and positive, got {d}")));
        }
        if self.c_i == 0 {
            return Err(bad("c_i", "must be positive"));
        }
        for (i, &h) in self.heads.iter().enumerate() {
            let d = self.stage_width(i);
            if h == 0 || !d.is_multiple_of(h) {
                return Err(bad(
                    "heads",
                    format!("stage {} width {d} is not divisible by {h} heads", i + 1),
                ));
            }
        }
        if self.window == 0 {
            return Err(bad("window", "window side M must be positive"));
        }
        if self.c_d < 4 || !self.c_d.is_multiple_of(4) {
            return Err(bad(
                "c_d",
                format!("must be a positive multiple of 4, got {}", self.c_d),
            ));
        }
        if self.classes < 2 {
            return Err(bad("classes", format!("need at least 2 classes, got {}", self.classes)));
        }
        self.check_input(self.input_side, self.input_side)
            .map_err(|e| bad("input_side", e.to_string()))?;
        if self.crop == 0 {
            return Err(bad("crop", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", format!("must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if self.eval_every == 0 {
            return Err(bad("eval_every", "must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(bad("grad_clip", format!("must be finite and positive, got {c}")));
            }
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive"));
        }
        Ok(())
    }
}
