//! Teacher training: mask-token prediction on grids, next-token prediction
//! on captions and on pure text.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PairExample, ToyTaskSpec};
use crate::denoise::SamplingConfig;
use crate::error::{Error, Result};
use crate::model::{bind, init_model, Model, ModelConfig};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Tensor};

use super::eval::{caption_score, image_agreement, unique_prompts, TextDecoder};
use super::losses::{ar_loss, caption_loss, mtp_loss, MtpItem};
use super::metrics::MetricsWriter;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub train_steps: usize,
    /// Grids per step for mask-token prediction.
    pub batch_size: usize,
    pub caption_batch: usize,
    pub text_batch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Linear warm-up steps, then cosine decay to 10% of the peak.
    pub warmup: usize,
    /// Probability of replacing the prompt by the NULL branch.
    pub prompt_dropout: f64,
    /// Uniform mass mixed into the mask-token targets.
    pub label_smoothing: f64,
    pub caption_weight: f64,
    pub text_weight: f64,
    pub seed: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
    pub eval_size: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            train_steps: 3000,
            batch_size: 24,
            caption_batch: 8,
            text_batch: 8,
            learning_rate: 2e-3,
            weight_decay: 0.0,
            warmup: 100,
            prompt_dropout: 0.1,
            label_smoothing: 0.0,
            caption_weight: 1.0,
            text_weight: 0.5,
            seed: 0,
            eval_every: 500,
            eval_size: 48,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("teacher batch size and learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return Err(Error::Config(format!("prompt dropout {} outside [0, 1]", self.prompt_dropout)));
        }
        if !(self.caption_weight >= 0.0 && self.text_weight >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("teacher weights must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if t < self.warmup {
            return self.learning_rate * (t + 1) as f64 / self.warmup as f64;
        }
        let span = self.train_steps.saturating_sub(self.warmup).max(1);
        let frac = ((t - self.warmup) as f64 / span as f64).min(1.0);
        self.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

pub struct TeacherData<'a> {
    pub spec: &'a ToyTaskSpec,
    pub train: &'a [PairExample],
    pub text: &'a [Vec<u32>],
    pub heldout: &'a [PairExample],
}

#[derive(Clone, Debug, Serialize)]
struct StepRecord {
    step: usize,
    lr: f64,
    loss: f64,
    mtp: f64,
    caption: f64,
    text: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub image_agreement: f64,
    pub caption_exact: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub evals: Vec<EvalRecord>,
}

/// Held-out score: 16-step greedy CFG-0 image agreement and AR caption
/// exact match.
pub fn evaluate_teacher(model: &Model, spec: &ToyTaskSpec, heldout: &[PairExample], limit: usize, step: usize) -> Result<EvalRecord> {
    let pairs = &heldout[..limit.min(heldout.len())];
    let prompts = unique_prompts(pairs);
    let steps = model.config.format().image_tokens.min(16);
    Ok(EvalRecord {
        step,
        image_agreement: image_agreement(model, spec, &prompts, &SamplingConfig::greedy(steps, 0.0))?,
        caption_exact: caption_score(model, spec, pairs, TextDecoder::Ar, 0)?.exact_match,
    })
}

/// Masks a uniformly drawn fraction (at least one cell) of each grid.
fn mtp_batch(rng: &mut ChaCha8Rng, pairs: &[&PairExample], m: usize, dropout: f64) -> Vec<MtpItem> {
    pairs
        .iter()
        .map(|p| {
            let ratio: f64 = rng.random_range(0.0..1.0);
            let count = ((ratio * m as f64).ceil() as usize).clamp(1, m);
            let mut masked = sample(rng, m, count).into_vec();
            masked.sort_unstable();
            let prompt = (!rng.random_bool(dropout)).then(|| p.prompt.clone());
            MtpItem {
                prompt,
                grid: p.grid.clone(),
                masked,
            }
        })
        .collect()
}

/// One weighted step over the three objectives. Returns the loss values
/// `[total, mtp, caption, text]`.
pub fn teacher_step(
    model: &mut Model,
    opt: &mut AdamState,
    rng: &mut ChaCha8Rng,
    tc: &TeacherConfig,
    spec: &ToyTaskSpec,
    train: &[PairExample],
    text: &[Vec<u32>],
) -> Result<[f64; 4]> {
    let cfg = model.config;
    let m = cfg.format().image_tokens;
    let pick = |rng: &mut ChaCha8Rng, n: usize| -> Vec<&PairExample> {
        (0..n).map(|_| &train[rng.random_range(0..train.len())]).collect()
    };
    let grids = pick(rng, tc.batch_size);
    let mtp_items = mtp_batch(rng, &grids, m, tc.prompt_dropout);
    let caps: Vec<(Vec<u32>, Vec<u32>)> = pick(rng, tc.caption_batch)
        .into_iter()
        .map(|p| (p.grid.clone(), spec.padded_caption(&p.attributes)))
        .collect();
    let texts: Vec<Vec<u32>> = if text.is_empty() {
        Vec::new()
    } else {
        (0..tc.text_batch)
            .map(|_| text[rng.random_range(0..text.len())].clone())
            .collect()
    };

    let mut g = Graph::<f32>::new();
    let vars = bind(&mut g, &model.params, true);
    let mut terms = Vec::new();
    let mut vals = [0.0; 4];
    if let Some(l) = mtp_loss(&cfg, &mut g, &vars, &mtp_items, tc.label_smoothing)? {
        vals[1] = g.value(l).item() as f64;
        terms.push((l, 1.0));
    }
    if !caps.is_empty() && tc.caption_weight > 0.0 {
        let items: Vec<(&[u32], &[u32])> = caps.iter().map(|(a, b)| (&a[..], &b[..])).collect();
        let l = caption_loss(&cfg, &mut g, &vars, &items)?;
        vals[2] = g.value(l).item() as f64;
        terms.push((l, tc.caption_weight));
    }
    if !texts.is_empty() && tc.text_weight > 0.0 {
        let len = texts.iter().map(|t| t.len() + 1).max().unwrap_or(1);
        let l = ar_loss(&cfg, &mut g, &vars, &texts, len)?;
        vals[3] = g.value(l).item() as f64;
        terms.push((l, tc.text_weight));
    }
    if terms.is_empty() {
        return Ok(vals);
    }
    let total = g.weighted_sum(&terms)?;
    vals[0] = g.value(total).item() as f64;
    if !vals[0].is_finite() {
        return Err(Error::Numeric(format!("teacher loss is {}", vals[0])));
    }
    g.backward(total)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).ok_or_else(|| Error::State("parameter without gradient".into())))
        .collect::<Result<_>>()?;
    adam_step(&mut model.params, &grads, opt)?;
    Ok(vals)
}

/// Trains a teacher from `init` (a fresh model when `None`).
pub fn train_teacher(
    config: &ModelConfig,
    tc: &TeacherConfig,
    data: &TeacherData,
    init: Option<Model>,
    metrics: &mut MetricsWriter,
) -> Result<(Model, TeacherReport)> {
    tc.validate()?;
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("teacher corpus has no pairs".into()));
    }
    let mut model = match init {
        Some(m) => m,
        None => init_model(config)?,
    };
    let mut opt = AdamState::new(
        AdamConfig {
            lr: tc.learning_rate,
            weight_decay: tc.weight_decay,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut report = TeacherReport {
        steps: tc.train_steps,
        losses: Vec::with_capacity(tc.train_steps),
        evals: Vec::new(),
    };
    for step in 0..tc.train_steps {
        opt.config.lr = tc.lr_at(step);
        let vals = teacher_step(&mut model, &mut opt, &mut rng, tc, data.spec, data.train, data.text)?;
        report.losses.push(vals[0]);
        metrics.record(&StepRecord {
            step,
            lr: opt.config.lr,
            loss: vals[0],
            mtp: vals[1],
            caption: vals[2],
            text: vals[3],
        })?;
        let last = step + 1 == tc.train_steps;
        if tc.eval_every > 0 && !data.heldout.is_empty() && ((step + 1) % tc.eval_every == 0 || last) {
            let e = evaluate_teacher(&model, data.spec, data.heldout, tc.eval_size, step + 1)?;
            log::info!(
                "teacher step {}: loss {:.4}, image {:.4}, caption {:.4}",
                step + 1,
                vals[0],
                e.image_agreement,
                e.caption_exact
            );
            metrics.record(&e)?;
            report.evals.push(e);
        }
    }
    Ok((model, report))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{generate_pairs, verify_image};
    use crate::denoise::sample_image;

    /// Default sequence format, narrow network.
    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            model_dim: 32,
            num_heads: 2,
            ffn_dim: 64,
            ..ModelConfig::default()
        }
    }

    fn distinct_prompts(spec: &ToyTaskSpec, n: usize) -> Vec<PairExample> {
        let mut seen = std::collections::HashSet::new();
        generate_pairs(spec, 4, 378)
            .unwrap()
            .into_iter()
            .filter(|p| seen.insert(p.prompt.clone()))
            .take(n)
            .collect()
    }

    #[test]
    fn loss_falls_over_first_hundred_steps() {
        let spec = ToyTaskSpec::default();
        let train = generate_pairs(&spec, 1, 200).unwrap();
        let text = crate::corpus::generate_pure_text(2, 50, 24, spec.vocab.eos());
        let tc = TeacherConfig {
            train_steps: 100,
            batch_size: 8,
            caption_batch: 4,
            text_batch: 4,
            warmup: 10,
            eval_every: 0,
            ..TeacherConfig::default()
        };
        let data = TeacherData {
            spec: &spec,
            train: &train,
            text: &text,
            heldout: &[],
        };
        let (_, rep) = train_teacher(&small_config(), &tc, &data, None, &mut MetricsWriter::discard()).unwrap();
        let windows: Vec<f64> = rep.losses.chunks(20).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    }

    #[test]
    fn overfits_ten_pairs() {
        let spec = ToyTaskSpec::default();
        let train = distinct_prompts(&spec, 10);
        let tc = TeacherConfig {
            train_steps: 800,
            batch_size: 10,
            caption_batch: 0,
            text_batch: 0,
            warmup: 20,
            prompt_dropout: 0.0,
            eval_every: 0,
            ..TeacherConfig::default()
        };
        let data = TeacherData {
            spec: &spec,
            train: &train,
            text: &[],
            heldout: &[],
        };
        let (model, _) = train_teacher(&small_config(), &tc, &data, None, &mut MetricsWriter::discard()).unwrap();
        let scores: Vec<f64> = train
            .iter()
            .map(|p| {
                let t = sample_image(&model, &p.prompt, &SamplingConfig::greedy(16, 0.0)).unwrap();
                verify_image(&spec, &p.prompt, t.final_state()).unwrap()
            })
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!(mean >= 0.99 && scores.iter().all(|&s| s >= 0.95), "{scores:?}");
    }

    #[test]
    fn lr_schedule_shape() {
        let tc = TeacherConfig::default();
        assert!(tc.lr_at(0) < tc.lr_at(tc.warmup - 1));
        assert!((tc.lr_at(tc.warmup) - tc.learning_rate).abs() < 1e-12);
        assert!((tc.lr_at(tc.train_steps) - 0.1 * tc.learning_rate).abs() < 1e-12);
    }
}
