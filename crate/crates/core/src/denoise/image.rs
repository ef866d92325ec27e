use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, TokenSeq, VocabLayout};

use super::schedule::{cosine_schedule, MaskSchedule};
use super::trajectory::{ImageTrajectory, StepRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    /// `None` keeps the whole image vocabulary.
    pub top_k: Option<usize>,
    pub temperature: f64,
    pub greedy: bool,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            steps: 16,
            cfg_scale: 0.0,
            top_k: None,
            temperature: 1.0,
            greedy: true,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn greedy(steps: usize, cfg_scale: f64) -> Self {
        Self {
            steps,
            cfg_scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sample steps must be positive".into()));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("cfg_scale {} must be ≥ 0", self.cfg_scale)));
        }
        if !self.greedy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// `l_cond + w·(l_cond − l_uncond)`.
pub fn cfg_combine(cond: &[f32], uncond: &[f32], w: f64) -> Result<Vec<f32>> {
    if cond.len() != uncond.len() {
        return Err(Error::dim(
            "cfg_combine",
            format!("{} vs {} logits", cond.len(), uncond.len()),
        ));
    }
    let w = w as f32;
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| c + w * (c - u)).collect())
}

/// Keeps the `k` largest logits (lower index wins ties at the cutoff) and
/// sets the rest to −∞.
pub fn top_k_filter(logits: &[f32], k: usize) -> Vec<f32> {
    let k = if k > logits.len() {
        log::warn!("top_k {k} exceeds vocabulary {}; clamped", logits.len());
        logits.len()
    } else {
        k.max(1)
    };
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut out = vec![f32::NEG_INFINITY; logits.len()];
    for &i in &order[..k] {
        out[i] = logits[i];
    }
    out
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Result of one sampler step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: Vec<u32>,
    /// Positions that stay decoded, ascending.
    pub committed: Vec<usize>,
    /// `(position, token, confidence)` for every position that was masked.
    pub decoded: Vec<(usize, u32, f32)>,
}

/// One MaskGIT step on an image grid.
///
/// `logits` holds image-codebook logits `[m × I]` for every grid position.
/// Every MASK position gets a candidate; the `masked_counts[k+1]`
/// lowest-confidence candidates (ties: lower position first) revert to MASK.
pub fn maskgit_step<R: Rng + ?Sized>(
    state: &[u32],
    logits: &[f32],
    schedule: &MaskSchedule,
    k: usize,
    config: &SamplingConfig,
    vocab: &VocabLayout,
    rng: &mut R,
) -> Result<StepOutcome> {
    let iv = vocab.image_vocab_size as usize;
    let m = state.len();
    if logits.len() != m * iv {
        return Err(Error::dim(
            "maskgit_step",
            format!("{} logits for {m} positions × {iv} codes", logits.len()),
        ));
    }
    if k >= schedule.steps() {
        return Err(Error::State(format!("step {k} past schedule of {} steps", schedule.steps())));
    }
    let masked: Vec<usize> = (0..m).filter(|&i| state[i] == vocab.mask()).collect();
    if masked.len() != schedule.masked_counts[k] {
        return Err(Error::State(format!(
            "state has {} MASK tokens, schedule expects {} at step {k}",
            masked.len(),
            schedule.masked_counts[k]
        )));
    }
    let mut decoded = Vec::with_capacity(masked.len());
    for &pos in &masked {
        let row = &logits[pos * iv..(pos + 1) * iv];
        let (code, conf) = if config.greedy {
            let c = argmax(row);
            (c, softmax(row)[c])
        } else {
            let t = config.temperature as f32;
            let scaled: Vec<f32> = row.iter().map(|&l| l / t).collect();
            let probs = softmax(&scaled);
            let pool = match config.top_k {
                Some(kk) => softmax(&top_k_filter(&scaled, kk)),
                None => probs.clone(),
            };
            let c = WeightedIndex::new(&pool)
                .map_err(|e| Error::Numeric(format!("sampling weights: {e}")))?
                .sample(rng);
            (c, probs[c])
        };
        decoded.push((pos, vocab.image_token(code as u32), conf as f32));
    }
    let revert = schedule.masked_counts[k + 1];
    let mut order: Vec<usize> = (0..decoded.len()).collect();
    order.sort_by(|&a, &b| {
        decoded[a]
            .2
            .total_cmp(&decoded[b].2)
            .then(decoded[a].0.cmp(&decoded[b].0))
    });
    let mut keep = vec![true; decoded.len()];
    for &i in &order[..revert] {
        keep[i] = false;
    }
    let mut next = state.to_vec();
    let mut committed = Vec::with_capacity(decoded.len() - revert);
    for (i, &(pos, tok, _)) in decoded.iter().enumerate() {
        if keep[i] {
            next[pos] = tok;
            committed.push(pos);
        }
    }
    Ok(StepOutcome {
        next,
        committed,
        decoded,
    })
}

/// `P^k` from `P^{k−1}`: positions already known before step `k` carry their
/// label; positions that were masked take this step's logits, so a position
/// committed at step `k` keeps the logits it was decided with.
pub fn update_reg_label(
    prev_label: &[f32],
    prev_state: &[u32],
    step_logits: &[f32],
    mask_id: u32,
) -> Result<Vec<f32>> {
    let m = prev_state.len();
    if m == 0 || prev_label.len() != step_logits.len() || prev_label.len() % m != 0 {
        return Err(Error::State(format!(
            "label of {} values, logits of {}, grid of {m}",
            prev_label.len(),
            step_logits.len()
        )));
    }
    let iv = prev_label.len() / m;
    let mut out = prev_label.to_vec();
    for (j, &tok) in prev_state.iter().enumerate() {
        if tok == mask_id {
            out[j * iv..(j + 1) * iv].copy_from_slice(&step_logits[j * iv..(j + 1) * iv]);
        }
    }
    Ok(out)
}

/// Image-codebook logits `[m × I]` at the grid positions of a sequence.
pub fn image_logits(model: &Model, seq: &TokenSeq) -> Result<Vec<f32>> {
    let fmt = model.config.format();
    let logits = model.forward(seq)?;
    let range = fmt.vocab.image_range();
    let mut out = Vec::with_capacity(fmt.image_tokens * range.len());
    for p in fmt.image_positions() {
        out.extend_from_slice(&logits.row(p)[range.clone()]);
    }
    Ok(out)
}

/// Conditional logits, CFG-combined with the NULL-prompt branch when the
/// scale is positive.
pub fn guided_logits(model: &Model, prompt: &[u32], state: &[u32], cfg_scale: f64) -> Result<Vec<f32>> {
    let fmt = model.config.format();
    let cond = image_logits(model, &fmt.t2i(prompt, state)?)?;
    if cfg_scale > 0.0 {
        let uncond = image_logits(model, &fmt.t2i_null(state)?)?;
        cfg_combine(&cond, &uncond, cfg_scale)
    } else {
        Ok(cond)
    }
}

/// Runs the sampler from `start`, whose MASK positions are the free ones.
fn run_sampler(model: &Model, prompt: &[u32], start: Vec<u32>, config: &SamplingConfig) -> Result<ImageTrajectory> {
    config.validate()?;
    let vocab = model.config.vocab;
    let iv = vocab.image_vocab_size as usize;
    let m = start.len();
    let free = start.iter().filter(|&&t| t == vocab.mask()).count();
    let mut traj = ImageTrajectory {
        prompt: prompt.to_vec(),
        cfg_scale: config.cfg_scale,
        image_vocab: iv,
        states: vec![start],
        steps: Vec::new(),
        reg_labels: vec![vec![0.0; m * iv]],
    };
    if free == 0 {
        return Ok(traj);
    }
    let steps = config.steps.min(free);
    if steps < config.steps {
        log::debug!("{} steps clamped to {free} free positions", config.steps);
    }
    let schedule = cosine_schedule(steps, free)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for k in 0..steps {
        let state = traj.states.last().expect("non-empty");
        let logits = guided_logits(model, prompt, state, config.cfg_scale)?;
        let out = maskgit_step(state, &logits, &schedule, k, config, &vocab, &mut rng)?;
        let label = update_reg_label(traj.reg_labels.last().expect("non-empty"), state, &logits, vocab.mask())?;
        let conf: std::collections::HashMap<usize, f32> =
            out.decoded.iter().map(|&(p, _, c)| (p, c)).collect();
        let mut record = StepRecord::default();
        for &p in &out.committed {
            record.positions.push(p as u32);
            record.confidences.push(conf[&p]);
            record.logits.extend_from_slice(&logits[p * iv..(p + 1) * iv]);
        }
        traj.steps.push(record);
        traj.reg_labels.push(label);
        traj.states.push(out.next);
    }
    Ok(traj)
}

/// Samples an image grid from a fully masked start.
pub fn sample_image(model: &Model, prompt: &[u32], config: &SamplingConfig) -> Result<ImageTrajectory> {
    let fmt = model.config.format();
    if config.steps > fmt.image_tokens {
        return Err(Error::Schedule(format!(
            "{} steps exceed the {}-token image block",
            config.steps, fmt.image_tokens
        )));
    }
    let start = vec![fmt.vocab.mask(); fmt.image_tokens];
    run_sampler(model, prompt, start, config)
}

/// Fills the MASK positions of `partial`; other positions are kept as given.
/// The schedule covers the free positions only, with the step count clamped
/// to their number.
pub fn inpaint(model: &Model, partial: &[u32], prompt: &[u32], config: &SamplingConfig) -> Result<ImageTrajectory> {
    let fmt = model.config.format();
    let v = fmt.vocab;
    if partial.len() != fmt.image_tokens {
        return Err(Error::dim(
            "inpaint",
            format!("{} cells, expected {}", partial.len(), fmt.image_tokens),
        ));
    }
    if let Some(&bad) = partial.iter().find(|&&t| !(v.is_image(t) || t == v.mask())) {
        return Err(Error::Data(format!("fixed cell holds non-image token {bad}")));
    }
    run_sampler(model, prompt, partial.to_vec(), config)
}
