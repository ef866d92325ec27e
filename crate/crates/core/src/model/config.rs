use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::layout::SequenceFormat;
use super::vocab::VocabLayout;

/// Hard ceiling on the learned positional table.
pub const MAX_POSITIONS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab: VocabLayout,
    pub rng_seed: u64,
    /// Prompt region length, BOS included.
    pub prompt_len: usize,
    pub image_side: usize,
    pub response_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            max_seq_len: 86,
            vocab: VocabLayout {
                text_vocab_size: 64,
                image_vocab_size: 16,
            },
            rng_seed: 0,
            prompt_len: 4,
            image_side: 8,
            response_len: 16,
        }
    }
}

impl ModelConfig {
    /// A model small enough for exhaustive gradient checks (under 1e3
    /// parameters).
    pub fn tiny() -> Self {
        Self {
            num_layers: 1,
            model_dim: 4,
            num_heads: 2,
            ffn_dim: 8,
            max_seq_len: 16,
            vocab: VocabLayout {
                text_vocab_size: 6,
                image_vocab_size: 4,
            },
            rng_seed: 0,
            prompt_len: 3,
            image_side: 2,
            response_len: 4,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn image_tokens(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn format(&self) -> SequenceFormat {
        SequenceFormat {
            vocab: self.vocab,
            prompt_len: self.prompt_len,
            image_tokens: self.image_tokens(),
            response_len: self.response_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.model_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return bad("layers, dims and heads must be positive".into());
        }
        if self.model_dim % self.num_heads != 0 {
            return bad(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.max_seq_len > MAX_POSITIONS {
            return bad(format!(
                "max_seq_len {} exceeds the positional table limit {MAX_POSITIONS}",
                self.max_seq_len
            ));
        }
        if self.prompt_len < 1 || self.image_side == 0 {
            return bad("prompt_len and image_side must be positive".into());
        }
        let need = self.format().max_len();
        if self.max_seq_len < need {
            return bad(format!(
                "max_seq_len {} is below prompt + image + response = {need}",
                self.max_seq_len
            ));
        }
        VocabLayout::new(self.vocab.text_vocab_size, self.vocab.image_vocab_size)?;
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, p, d, f) = (
            self.vocab.total_size() as usize,
            self.max_seq_len,
            self.model_dim,
            self.ffn_dim,
        );
        let layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        v * d + p * d + self.num_layers * layer + 2 * d + d * v + v
    }

    pub fn to_kv(&self) -> String {
        self.kv_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model.num_layers", self.num_layers.to_string()),
            ("model.model_dim", self.model_dim.to_string()),
            ("model.num_heads", self.num_heads.to_string()),
            ("model.ffn_dim", self.ffn_dim.to_string()),
            ("model.max_seq_len", self.max_seq_len.to_string()),
            ("model.text_vocab", self.vocab.text_vocab_size.to_string()),
            ("model.image_vocab", self.vocab.image_vocab_size.to_string()),
            ("model.seed", self.rng_seed.to_string()),
            ("model.prompt_len", self.prompt_len.to_string()),
            ("model.image_side", self.image_side.to_string()),
            ("model.response_len", self.response_len.to_string()),
        ]
    }

    /// Applies one `model.*` key. Returns false for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let parse = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
        };
        let n = || parse(value).map(|x| x as usize);
        match key {
            "model.num_layers" => self.num_layers = n()?,
            "model.model_dim" => self.model_dim = n()?,
            "model.num_heads" => self.num_heads = n()?,
            "model.ffn_dim" => self.ffn_dim = n()?,
            "model.max_seq_len" => self.max_seq_len = n()?,
            "model.text_vocab" => self.vocab.text_vocab_size = n()? as u32,
            "model.image_vocab" => self.vocab.image_vocab_size = n()? as u32,
            "model.seed" => self.rng_seed = parse(value)?,
            "model.prompt_len" => self.prompt_len = n()?,
            "model.image_side" => self.image_side = n()?,
            "model.response_len" => self.response_len = n()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let mut cfg = Self::default();
        for (k, v) in &map {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown model key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are an
/// error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim().to_string();
        if map.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("duplicate key {k:?}")));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 16);
        assert_eq!(c.format().max_len(), 86);
    }

    #[test]
    fn kv_roundtrip() {
        let mut c = ModelConfig::default();
        c.rng_seed = 99;
        c.num_layers = 3;
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(ModelConfig::from_kv("model.colour = 3\n").is_err());
        assert!(ModelConfig::from_kv("model.num_layers = x\n").is_err());
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut c = ModelConfig::default();
        c.num_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.max_seq_len = 10;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.max_seq_len = MAX_POSITIONS + 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_is_under_a_thousand() {
        let c = ModelConfig::tiny();
        c.validate().unwrap();
        assert!(c.param_count() <= 1000, "{}", c.param_count());
    }
}
