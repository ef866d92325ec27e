use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, TokenSeq};

use super::image::argmax;
use super::trajectory::TextTrajectory;

/// Greedy text prediction (text tokens plus EOS) at each row of `logits`.
fn greedy_text(model: &Model, logits: &crate::numerics::Tensor, rows: std::ops::Range<usize>) -> Vec<u32> {
    let r = model.config.vocab.text_output_range();
    rows.map(|i| argmax(&logits.row(i)[r.clone()]) as u32).collect()
}

fn check_room(model: &Model, context: &TokenSeq, n: usize) -> Result<()> {
    if context.is_empty() {
        return Err(Error::Data("decoding needs a non-empty context".into()));
    }
    if context.len() + n > model.config.max_seq_len {
        return Err(Error::Data(format!(
            "context of {} plus {n} tokens exceeds max_seq_len {}",
            context.len(),
            model.config.max_seq_len
        )));
    }
    Ok(())
}

/// Greedy next-token decoding after `context`, stopping after EOS (which is
/// included) or `max_len` tokens.
pub fn ar_decode(model: &Model, context: &TokenSeq, max_len: usize) -> Result<Vec<u32>> {
    check_room(model, context, max_len)?;
    let eos = model.config.vocab.eos();
    let mut seq = context.clone();
    let mut out = Vec::new();
    while out.len() < max_len {
        let logits = model.forward(&seq)?;
        let last = seq.len() - 1;
        let t = greedy_text(model, &logits, last..last + 1)[0];
        out.push(t);
        seq.extend_response(&[t]);
        if t == eos {
            break;
        }
    }
    Ok(out)
}

/// Default iteration cap for an `n`-token block: the `n+1` bound plus one.
pub fn default_max_iters(n: usize) -> usize {
    n + 2
}

/// Jacobi fixed-point decoding of one `n`-token block.
///
/// `v^0` is drawn uniformly from the text vocabulary with `seed`. Each
/// iteration is one causal forward over `[context, v^k]`; every position
/// takes the greedy prediction given the previous iterate. Stops when an
/// iteration changes nothing or after `max_iters` forwards.
pub fn jacobi_decode(
    model: &Model,
    context: &TokenSeq,
    n: usize,
    max_iters: usize,
    seed: u64,
) -> Result<TextTrajectory> {
    if n == 0 {
        return Err(Error::Data("block length must be ≥ 1".into()));
    }
    check_room(model, context, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = model.config.vocab.text_vocab_size;
    let v0: Vec<u32> = (0..n).map(|_| rng.random_range(0..t)).collect();
    let mut iterates = vec![v0];
    let start = context.len() - 1;
    let mut capped = true;
    while iterates.len() <= max_iters {
        let mut seq = context.clone();
        seq.extend_response(iterates.last().expect("non-empty"));
        let logits = model.forward(&seq)?;
        let next = greedy_text(model, &logits, start..start + n);
        let done = &next == iterates.last().expect("non-empty");
        iterates.push(next);
        if done {
            capped = false;
            break;
        }
    }
    if capped {
        log::warn!("jacobi block hit the {max_iters}-iteration cap");
    }
    Ok(TextTrajectory {
        context: context.clone(),
        iterates,
        capped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongDecode {
    /// Output cut after the first EOS.
    pub tokens: Vec<u32>,
    pub blocks: Vec<TextTrajectory>,
    pub forward_passes: usize,
}

impl LongDecode {
    pub fn mean_iterations(&self) -> f64 {
        if self.blocks.is_empty() {
            return 0.0;
        }
        self.forward_passes as f64 / self.blocks.len() as f64
    }

    pub fn tokens_per_forward(&self) -> f64 {
        if self.forward_passes == 0 {
            return 0.0;
        }
        self.tokens.len() as f64 / self.forward_passes as f64
    }
}

/// Blockwise Jacobi decoding of up to `total_len` tokens; each fixed point
/// joins the context before the next block. Stops after a block containing
/// EOS. Block `b` uses seed `seed + b`.
pub fn decode_text_long(model: &Model, context: &TokenSeq, total_len: usize, block: usize, seed: u64) -> Result<LongDecode> {
    if block == 0 || total_len % block != 0 {
        return Err(Error::Data(format!(
            "total length {total_len} is not a multiple of block {block}"
        )));
    }
    check_room(model, context, total_len)?;
    let eos = model.config.vocab.eos();
    let mut ctx = context.clone();
    let mut out = LongDecode {
        tokens: Vec::new(),
        blocks: Vec::new(),
        forward_passes: 0,
    };
    for b in 0..total_len / block {
        let traj = jacobi_decode(model, &ctx, block, default_max_iters(block), seed.wrapping_add(b as u64))?;
        out.forward_passes += traj.converged_iteration();
        let fp = traj.fixed_point().to_vec();
        let piece = traj.output(eos).to_vec();
        out.blocks.push(traj);
        out.tokens.extend_from_slice(&piece);
        if piece.last() == Some(&eos) {
            break;
        }
        ctx.extend_response(&fp);
    }
    Ok(out)
}
