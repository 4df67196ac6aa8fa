//! Model and training configuration.
//!
//! Config files are flat TOML documents with one key per field of
//! [`ModelConfig`]; missing keys take the toy defaults. Individual keys can be
//! overridden with `key=value` strings (the value is parsed as a TOML scalar,
//! falling back to a bare string).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width shared by every module.
    pub d: usize,
    /// Latent causal-feature width.
    pub d_f: usize,
    /// Width of context sequences fed to the context-aware attention.
    pub d_c: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub max_frames: usize,
    /// Maximum number of generated positions after BOS (the last is forced EOS).
    pub max_expl_len: usize,
    /// Raw per-frame visual feature width.
    pub d_in_v: usize,
    /// Raw acoustic feature width.
    pub d_in_a: usize,
    /// Width of pre-extracted text features; 0 disables the text adapter.
    /// Feature matrices as wide as `vocab_size` are read as one-hot tokens.
    pub d_in_t: usize,
    /// Text encoder depth (stand-in for the pretrained text encoder).
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Depth of the bidirectional explanation encoder.
    pub bitrans_layers: usize,
    /// The fusion block runs after this many text-encoder layers.
    pub atf_insertion_layer: usize,
    /// Probability of substituting the ground-truth explanation during training.
    pub intervention_epsilon: f64,
    /// Monte-Carlo samples of the latent per training example.
    pub mc_samples: usize,
    pub seed: u64,
    pub lr_base: f64,
    pub lr_new: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// 1 selects greedy decoding.
    pub beam_width: usize,
    /// Decode generated explanations once per epoch instead of per batch.
    pub cache_explanations: bool,
    /// Evaluate on the held-out split every this many epochs (0 disables).
    pub eval_every: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_f: 32,
            d_c: 64,
            n_heads: 2,
            ffn_dim: 128,
            vocab_size: 128,
            max_text_len: 12,
            max_frames: 4,
            max_expl_len: 8,
            d_in_v: 16,
            d_in_a: 8,
            d_in_t: 0,
            encoder_layers: 1,
            decoder_layers: 2,
            bitrans_layers: 2,
            atf_insertion_layer: 1,
            intervention_epsilon: 0.1,
            mc_samples: 1,
            seed: 0,
            lr_base: 1e-4,
            lr_new: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            batch_size: 8,
            beam_width: 1,
            cache_explanations: false,
            eval_every: 10,
        }
    }
}

impl ModelConfig {
    /// Every violated invariant, or `Ok(())`.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errors = Vec::new();
        let dims = [
            ("d", self.d),
            ("d_f", self.d_f),
            ("d_c", self.d_c),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("max_frames", self.max_frames),
            ("max_expl_len", self.max_expl_len),
            ("d_in_v", self.d_in_v),
            ("d_in_a", self.d_in_a),
            ("decoder_layers", self.decoder_layers),
            ("bitrans_layers", self.bitrans_layers),
            ("batch_size", self.batch_size),
            ("beam_width", self.beam_width),
        ];
        for (name, value) in dims {
            if value < 1 {
                errors.push(format!("{name} must be >= 1"));
            }
        }
        if self.n_heads >= 1 && !self.d.is_multiple_of(self.n_heads) {
            errors.push(format!("d not divisible by n_heads ({} % {} != 0)", self.d, self.n_heads));
        }
        if !(0.0..=1.0).contains(&self.intervention_epsilon) {
            errors.push(format!("epsilon out of range [0, 1]: {}", self.intervention_epsilon));
        }
        if self.d_c != self.d {
            errors.push(format!("d_c ({}) must equal d ({}) for the fusion block", self.d_c, self.d));
        }
        if self.mc_samples < 1 {
            errors.push("mc_samples (H) must be >= 1".to_string());
        }
        if self.atf_insertion_layer > self.encoder_layers {
            errors.push(format!(
                "atf_insertion_layer {} exceeds encoder_layers {}",
                self.atf_insertion_layer, self.encoder_layers
            ));
        }
        if self.vocab_size <= crate::vocab::FIRST_ORDINARY {
            errors.push(format!("vocab_size must exceed the {} reserved ids", crate::vocab::FIRST_ORDINARY));
        }
        for (name, lr) in [("lr_base", self.lr_base), ("lr_new", self.lr_new)] {
            if !(lr.is_finite() && lr >= 0.0) {
                errors.push(format!("{name} must be a finite non-negative number"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    pub fn validated(self) -> Result<Self> {
        self.validate().map_err(Error::Config)?;
        Ok(self)
    }

    /// Loads a config file and applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                text.parse::<toml::Table>().map_err(|e| Error::Format {
                    path: p.to_path_buf(),
                    msg: e.to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(vec![format!("override `{item}` is not key=value")]))?;
            table.insert(key.trim().to_string(), parse_scalar(value.trim()));
        }
        let cfg: ModelConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        cfg.validated()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
