//! Task scores of a model on the synthetic corpus.

use serde::{Deserialize, Serialize};

use crate::corpus::{verify_caption, verify_image, CaptionVerdict, PairExample, ToyTaskSpec};
use crate::denoise::{ar_decode, jacobi_decode, default_max_iters, sample_image, SamplingConfig};
use crate::error::Result;
use crate::model::Model;

/// Mean `verify_image` agreement over `prompts`. Prompt `i` samples with
/// seed `config.seed + i`.
pub fn image_agreement(model: &Model, spec: &ToyTaskSpec, prompts: &[Vec<u32>], config: &SamplingConfig) -> Result<f64> {
    if prompts.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, p) in prompts.iter().enumerate() {
        let sc = SamplingConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        let traj = sample_image(model, p, &sc)?;
        total += verify_image(spec, p, traj.final_state())?;
    }
    Ok(total / prompts.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextDecoder {
    Ar,
    Jacobi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionScore {
    pub exact_match: f64,
    /// Forward passes per 16-token block; the block length for AR decoding.
    pub mean_iterations: f64,
    pub capped_blocks: usize,
}

/// Captions each pair's grid and checks the result against its attributes.
/// Pair `i` starts Jacobi from seed `seed + i`.
pub fn caption_score(model: &Model, spec: &ToyTaskSpec, pairs: &[PairExample], decoder: TextDecoder, seed: u64) -> Result<CaptionScore> {
    let fmt = model.config.format();
    let n = fmt.response_len;
    let eos = fmt.vocab.eos();
    let mut hits = 0usize;
    let mut iters = 0usize;
    let mut capped = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let ctx = fmt.mmu(&pair.grid, &[])?;
        let out = match decoder {
            TextDecoder::Ar => {
                iters += n;
                ar_decode(model, &ctx, n)?
            }
            TextDecoder::Jacobi => {
                let t = jacobi_decode(model, &ctx, n, default_max_iters(n), seed.wrapping_add(i as u64))?;
                iters += t.converged_iteration();
                capped += usize::from(t.capped);
                t.output(eos).to_vec()
            }
        };
        hits += usize::from(verify_caption(spec, &pair.grid, &out) == CaptionVerdict::Match);
    }
    let count = pairs.len().max(1) as f64;
    Ok(CaptionScore {
        exact_match: hits as f64 / count,
        mean_iterations: iters as f64 / count,
        capped_blocks: capped,
    })
}

/// Distinct prompts of a pair list, first-seen order.
pub fn unique_prompts(pairs: &[PairExample]) -> Vec<Vec<u32>> {
    let mut seen = std::collections::HashSet::new();
    pairs
        .iter()
        .filter(|p| seen.insert(p.prompt.clone()))
        .map(|p| p.prompt.clone())
        .collect()
}
