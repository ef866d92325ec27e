use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of still-masked tokens after each step, `K+1` entries from `m`
/// down to 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub masked_counts: Vec<usize>,
}

impl MaskSchedule {
    pub fn steps(&self) -> usize {
        self.masked_counts.len() - 1
    }

    pub fn block_len(&self) -> usize {
        self.masked_counts[0]
    }
}

/// `round(m·cos(π/2·k/K))`, clamped into `[K−k, c_{k−1}−1]` so every step
/// unmasks at least one token and there is room for the rest.
pub fn cosine_schedule(steps: usize, m: usize) -> Result<MaskSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("at least one step is required".into()));
    }
    if steps > m {
        return Err(Error::Schedule(format!(
            "{steps} steps cannot each unmask a token of a {m}-token block"
        )));
    }
    let mut counts = Vec::with_capacity(steps + 1);
    counts.push(m);
    for k in 1..=steps {
        let raw = (m as f64 * (FRAC_PI_2 * k as f64 / steps as f64).cos()).round() as usize;
        let prev = counts[k - 1];
        counts.push(raw.min(prev - 1).max(steps - k));
    }
    Ok(MaskSchedule {
        masked_counts: counts,
    })
}
