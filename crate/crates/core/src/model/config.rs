use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softsign,
}

/// Architecture and loss weights. Defaults follow the reference
/// hyperparameter table (German-style task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub gls_layers: usize,
    pub txt_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub lambda_gls: f64,
    pub lambda_txt: f64,
    pub lambda_mle: f64,
    pub gloss_vocab: usize,
    pub text_vocab: usize,
    pub feature_dim: usize,
    pub downsample: usize,
    pub max_positions: usize,
    pub init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            heads: 4,
            gls_layers: 5,
            txt_layers: 1,
            dec_layers: 6,
            ff_dim: 4096,
            activation: Activation::Relu,
            dropout: 0.3,
            label_smoothing: 0.1,
            lambda_gls: 1.0,
            lambda_txt: 1.0,
            lambda_mle: 1.0,
            gloss_vocab: 20,
            text_vocab: 28,
            feature_dim: 16,
            downsample: 2,
            max_positions: 512,
            init_gain: 0.5,
        }
    }
}

impl ModelConfig {
    /// Chinese-style preset: heavier CTC weights and Softsign activation.
    pub fn chinese_style() -> Self {
        Self {
            activation: Activation::Softsign,
            lambda_gls: 5.0,
            lambda_txt: 2.0,
            lambda_mle: 1.0,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Index of `<eos>` in the decoder output vocabulary.
    pub fn eos(&self) -> usize {
        self.text_vocab
    }

    /// Index of the decoder start symbol (input side only).
    pub fn bos(&self) -> usize {
        self.text_vocab + 1
    }

    /// Decoder output classes: text tokens plus `<eos>`.
    pub fn decoder_classes(&self) -> usize {
        self.text_vocab + 1
    }

    /// The text CTC head exists unless there is neither a text stack nor a
    /// text CTC loss, which is the shared-encoder layout.
    pub fn has_txt_ctc(&self) -> bool {
        self.txt_layers > 0 || self.lambda_txt > 0.0
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.gls_layers == 0 || self.dec_layers == 0 {
            return bad("gls_layers and dec_layers must be at least 1".into());
        }
        for (name, v) in [
            ("lambda_gls", self.lambda_gls),
            ("lambda_txt", self.lambda_txt),
            ("lambda_mle", self.lambda_mle),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.gloss_vocab == 0 || self.text_vocab == 0 || self.feature_dim == 0 {
            return bad("vocabularies and feature_dim must be non-empty".into());
        }
        if self.downsample == 0 || self.ff_dim == 0 || self.max_positions == 0 {
            return bad("downsample, ff_dim and max_positions must be positive".into());
        }
        if !(self.init_gain > 0.0) {
            return bad(format!("init_gain must be positive, got {}", self.init_gain));
        }
        Ok(())
    }
}
