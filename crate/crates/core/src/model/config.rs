use serde::{Deserialize, Serialize};

use crate::attention::HeadConfig;
use crate::context::ContextConfig;
use crate::data::RESERVED_IDS;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStyle {
    /// Layer norm before each sublayer, plus a final norm per block.
    #[default]
    Pre,
    /// Layer norm after each residual addition.
    Post,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    #[serde(default)]
    pub context: ContextConfig,
    #[serde(default)]
    pub norm_style: NormStyle,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_true")]
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            src_vocab: 16,
            tgt_vocab: 16,
            max_len: 64,
            context: ContextConfig::default(),
            norm_style: NormStyle::Pre,
            seed: 1,
            dropout: 0.0,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        HeadConfig::new(self.d_model, self.n_heads)?;
        if self.src_vocab < RESERVED_IDS || self.tgt_vocab < RESERVED_IDS {
            return Err(Error::Config(format!(
                "vocabularies must hold at least the {RESERVED_IDS} reserved ids"
            )));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        if self.d_ff == 0 || self.max_len < 2 {
            return Err(Error::Config("d_ff must be positive and max_len at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.context.validate()
    }

    pub fn heads(&self) -> HeadConfig {
        HeadConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
        }
    }
}
