use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Feedforward nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Smooth rectifier; used for finite-difference checks.
    Softplus,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Number of classes per episode; the label table has one extra row.
    pub n_way: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub blocks: usize,
    pub activation: Activation,
    pub phi_on_input: bool,
    pub merge_projection: bool,
    /// When non-zero the input is split into chunks of this size, each
    /// embedded by one shared linear map and averaged.
    pub patch_dim: usize,
    /// Constant initial value of the learning-rate row of every `W_0`.
    pub beta_init: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            n_way: 5,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            blocks: 2,
            activation: Activation::Relu,
            phi_on_input: false,
            merge_projection: false,
            patch_dim: 0,
            beta_init: -3.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn embed_in_dim(&self) -> usize {
        if self.patch_dim > 0 {
            self.patch_dim
        } else {
            self.input_dim
        }
    }

    /// Index of the unknown-label token in the label table.
    pub fn unknown_label(&self) -> usize {
        self.n_way
    }

    /// Checks every field and reports all offending ones at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("blocks", self.blocks),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.n_way < 2 {
            problems.push(format!("n_way must be at least 2, got {}", self.n_way));
        }
        if self.heads > 0 && !self.d_model.is_multiple_of(self.heads) {
            problems.push(format!(
                "d_model ({}) must be divisible by heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.patch_dim > 0 && !self.input_dim.is_multiple_of(self.patch_dim) {
            problems.push(format!(
                "input_dim ({}) must be divisible by patch_dim ({})",
                self.input_dim, self.patch_dim
            ));
        }
        if !(self.norm_eps > 0.0) {
            problems.push("norm_eps must be > 0".into());
        }
        if !self.beta_init.is_finite() {
            problems.push("beta_init must be finite".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_lists_every_offending_field() {
        let cfg = ModelConfig {
            d_model: 30,
            heads: 4,
            blocks: 0,
            n_way: 1,
            ..ModelConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("blocks"), "{msg}");
        assert!(msg.contains("divisible"), "{msg}");
        assert!(msg.contains("n_way"), "{msg}");
    }
}
