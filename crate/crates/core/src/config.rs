//! Model and training configuration with `desk` and `paper` presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoders::Pooling;
use crate::error::{FsanError, Result};
use crate::layers::{Activation, AttentionScale};
use crate::objectives::{LossWeights, OuterLossForm};

pub const SEED_ENV: &str = "FSAN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden size shared by both modalities.
    pub d: usize,
    pub heads: usize,
    pub icim_layers: usize,
    pub text_encoder_layers: usize,
    /// Latent size of the alignment projection.
    pub d_l: usize,
    pub n_clips: usize,
    /// Width of the token embedding table.
    pub embed_dim: usize,
    pub ffn_mult: usize,
    pub ffn_activation: Activation,
    pub max_tokens: usize,
    pub dropout: f64,
    pub delta: f64,
    pub lambdas: [f64; 3],
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub no_cross_modal: bool,
    pub no_inner_modal: bool,
    pub no_sap_losses: bool,
    pub outer_loss_form: OuterLossForm,
    pub normalize_inner_sum: bool,
    pub include_full_span: bool,
    pub detach_sc_weights: bool,
    pub attention_scale: AttentionScale,
    pub pooling: Pooling,
    pub max_negative_resamples: usize,
    /// (train, val, test) fractions, split by video id.
    pub split_ratios: [f64; 3],
    pub embedding_file: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small model that trains in seconds on a CPU.
    pub fn desk() -> Self {
        ModelConfig {
            d: 32,
            heads: 2,
            icim_layers: 2,
            text_encoder_layers: 1,
            d_l: 16,
            n_clips: 16,
            embed_dim: 32,
            ffn_mult: 4,
            ffn_activation: Activation::Relu,
            max_tokens: 30,
            dropout: 0.1,
            delta: 0.5,
            lambdas: [1.0 / 3.0; 3],
            lr: 1e-4,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            no_cross_modal: false,
            no_inner_modal: false,
            no_sap_losses: false,
            outer_loss_form: OuterLossForm::AsWritten,
            normalize_inner_sum: false,
            include_full_span: true,
            detach_sc_weights: true,
            attention_scale: AttentionScale::HeadDim,
            pooling: Pooling::Mean,
            max_negative_resamples: 10,
            split_ratios: [0.8, 0.0, 0.2],
            embedding_file: None,
        }
    }

    /// Published model scale.
    pub fn paper() -> Self {
        ModelConfig {
            d: 512,
            heads: 8,
            icim_layers: 6,
            d_l: 256,
            embed_dim: 300,
            lr: 1e-4,
            batch_size: 128,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(FsanError::Config(format!("unknown preset {other:?}"))),
        }
    }

    /// Parses a JSON object of overrides on top of its `"preset"` (default `desk`).
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| FsanError::Config(format!("config JSON: {e}")))?;
        let Value::Object(mut overrides) = value else {
            return Err(FsanError::Config("config must be a JSON object".into()));
        };
        let preset = match overrides.remove("preset") {
            Some(Value::String(p)) => p,
            Some(_) => return Err(FsanError::Config("preset must be a string".into())),
            None => "desk".to_owned(),
        };
        let base = serde_json::to_value(Self::preset(&preset)?).expect("config serializes");
        let Value::Object(mut merged) = base else { unreachable!() };
        merged.extend(overrides);
        let cfg: ModelConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| FsanError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FsanError::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the `FSAN_SEED` environment override, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| FsanError::Config(format!("{SEED_ENV}={s:?} is not an integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FsanError::Config(m));
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("heads {} must divide d {}", self.heads, self.d));
        }
        if self.d < 2 || self.d_l == 0 || self.embed_dim == 0 || self.ffn_mult == 0 {
            return bad("dimensions must be positive (d >= 2)".into());
        }
        if self.icim_layers == 0 {
            return bad("icim_layers must be at least 1".into());
        }
        if self.n_clips < 2 {
            return bad("n_clips must be at least 2".into());
        }
        if self.max_tokens == 0 || self.batch_size == 0 {
            return bad("max_tokens and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr <= 1.0) {
            return bad(format!("lr {} must lie in (0, 1]", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.delta.is_nan() || self.delta <= 0.0 {
            return bad("delta must be positive".into());
        }
        LossWeights::new(self.lambdas[0], self.lambdas[1], self.lambdas[2])?;
        let total: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|r| *r < 0.0) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios {:?} must be nonnegative and sum to 1", self.split_ratios));
        }
        Ok(())
    }

    /// Loss weights actually used; `no_sap_losses` forces `(1, 0, 0)`.
    pub fn loss_weights(&self) -> LossWeights {
        if self.no_sap_losses {
            LossWeights::matching_only()
        } else {
            LossWeights::new(self.lambdas[0], self.lambdas[1], self.lambdas[2])
                .expect("validated config")
        }
    }
}
