use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Graph, KeyPattern, Real, Tensor, Var};

use super::config::ModelConfig;
use super::layout::{shared_mask, TokenSeq};

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Embedding,
    /// N(0, 1/fan_in) with fan_in the first dimension.
    Linear,
    Zeros,
    Ones,
}

/// Parameter names, shapes and initializers in canonical order.
fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, d, f) = (c.vocab.total_size() as usize, c.model_dim, c.ffn_dim);
    let mut specs = vec![
        ("tok_emb".to_string(), vec![v, d], Init::Embedding),
        ("pos_emb".to_string(), vec![c.max_seq_len, d], Init::Embedding),
    ];
    for l in 0..c.num_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        specs.extend([
            (p("ln1.gamma"), vec![d], Init::Ones),
            (p("ln1.beta"), vec![d], Init::Zeros),
            (p("attn.qkv.w"), vec![d, 3 * d], Init::Linear),
            (p("attn.qkv.b"), vec![3 * d], Init::Zeros),
            (p("attn.out.w"), vec![d, d], Init::Linear),
            (p("attn.out.b"), vec![d], Init::Zeros),
            (p("ln2.gamma"), vec![d], Init::Ones),
            (p("ln2.beta"), vec![d], Init::Zeros),
            (p("ffn.up.w"), vec![d, f], Init::Linear),
            (p("ffn.up.b"), vec![f], Init::Zeros),
            (p("ffn.down.w"), vec![f, d], Init::Linear),
            (p("ffn.down.b"), vec![d], Init::Zeros),
        ]);
    }
    specs.extend([
        ("ln_f.gamma".to_string(), vec![d], Init::Ones),
        ("ln_f.beta".to_string(), vec![d], Init::Zeros),
        ("head.w".to_string(), vec![d, v], Init::Linear),
        ("head.b".to_string(), vec![v], Init::Zeros),
    ]);
    specs
}

/// Pre-LN transformer over the unified vocabulary with a single output head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
}

/// Seeded initialization: scaled-normal weights, zero biases, unit LN gains.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let params = param_specs(config)
        .into_iter()
        .map(|(_, shape, init)| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Embedding | Init::Linear => {
                    let std = if init == Init::Embedding {
                        EMBED_STD
                    } else {
                        1.0 / (shape[0] as f64).sqrt()
                    };
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
                }
            };
            Tensor::new(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        config: *config,
        params,
    })
}

impl Model {
    pub fn param_names(&self) -> Vec<String> {
        param_specs(&self.config).into_iter().map(|s| s.0).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// FNV-1a over the raw parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.params {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Logits `[len × total_vocab]` for one sequence.
    pub fn forward(&self, seq: &TokenSeq) -> Result<Tensor> {
        self.forward_batch(std::slice::from_ref(seq))
    }

    /// Logits `[B·L × total_vocab]` for equal-length sequences, without a
    /// gradient tape.
    pub fn forward_batch(&self, batch: &[TokenSeq]) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let vars = bind(&mut g, &self.params, false);
        let refs: Vec<&TokenSeq> = batch.iter().collect();
        let out = forward_graph(&self.config, &mut g, &vars, &refs)?;
        Ok(g.into_value(out))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            metadata: self.config.to_kv(),
            tensors: self.param_names().into_iter().zip(self.params.iter().cloned()).collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_kv(&ck.metadata)?;
        let specs = param_specs(&config);
        if specs.len() != ck.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, config expects {}",
                ck.tensors.len(),
                specs.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape, _), (cname, t)) in specs.into_iter().zip(ck.tensors) {
            if name != cname || shape != t.shape() {
                return Err(Error::Format(format!(
                    "expected {name} {shape:?}, found {cname} {:?}",
                    t.shape()
                )));
            }
            params.push(t);
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Registers parameters as graph leaves.
pub fn bind<T: Real>(g: &mut Graph<T>, params: &[Tensor<T>], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| {
            if trainable {
                g.param(p.clone())
            } else {
                g.constant(p.clone())
            }
        })
        .collect()
}

/// Builds the forward pass for a batch of equal-length sequences and returns
/// the logits node `[B·L × total_vocab]`. Row `b·L + i` holds the logits of
/// position `i` of sequence `b`.
pub fn forward_graph<T: Real>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    vars: &[Var],
    batch: &[&TokenSeq],
) -> Result<Var> {
    let patterns: Vec<Arc<KeyPattern>> = batch.iter().map(|s| shared_mask(&s.layout)).collect();
    forward_with_patterns(config, g, vars, batch, &patterns)
}

/// [`forward_graph`] with precomputed attention patterns.
pub fn forward_with_patterns<T: Real>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    vars: &[Var],
    batch: &[&TokenSeq],
    patterns: &[Arc<KeyPattern>],
) -> Result<Var> {
    let Some(first) = batch.first() else {
        return Err(Error::dim("forward", "empty batch"));
    };
    let len = first.len();
    if len == 0 || len > config.max_seq_len {
        return Err(Error::dim(
            "forward",
            format!("sequence length {len} outside 1..={}", config.max_seq_len),
        ));
    }
    if let Some(s) = batch.iter().find(|s| s.len() != len || s.layout.len() != len) {
        return Err(Error::dim(
            "forward",
            format!("mixed lengths in batch: {} vs {len}", s.len()),
        ));
    }
    if vars.len() != param_specs(config).len() {
        return Err(Error::dim(
            "forward",
            format!("{} parameter nodes for this config", vars.len()),
        ));
    }
    let vocab = config.vocab.total_size();
    let mut ids = Vec::with_capacity(batch.len() * len);
    for s in batch {
        for &t in &s.tokens {
            if t >= vocab {
                return Err(Error::Index(format!("token id {t} ≥ vocabulary size {vocab}")));
            }
            ids.push(t as usize);
        }
    }
    let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..len).collect();

    let tok = g.embedding(vars[0], &ids)?;
    let pos = g.embedding(vars[1], &positions)?;
    let mut x = g.add(tok, pos)?;
    let mut p = 2;
    for _ in 0..config.num_layers {
        let w = &vars[p..p + 12];
        let h = g.layer_norm(x, w[0], w[1])?;
        let qkv = g.linear(h, w[2], w[3])?;
        let a = g.attention(qkv, config.num_heads, patterns)?;
        let o = g.linear(a, w[4], w[5])?;
        x = g.add(x, o)?;
        let h = g.layer_norm(x, w[6], w[7])?;
        let u = g.linear(h, w[8], w[9])?;
        let u = g.gelu(u);
        let dn = g.linear(u, w[10], w[11])?;
        x = g.add(x, dn)?;
        p += 12;
    }
    let h = g.layer_norm(x, vars[p], vars[p + 1])?;
    g.linear(h, vars[p + 2], vars[p + 3])
}
