use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 20.0,
            gamma: 100.0,
            delta: 2.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {all:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationPlan {
    pub num_segments: usize,
    pub boundaries: Vec<usize>,
}

impl SegmentationPlan {
    pub fn steps(&self) -> usize {
        *self.boundaries.last().expect("at least [0, K]")
    }

    /// Endpoint of the segment holding step `k`: the first boundary above
    /// `k`, or `K` itself for `k = K`.
    pub fn endpoint(&self, k: usize) -> usize {
        self.boundaries
            .iter()
            .copied()
            .find(|&b| b > k)
            .unwrap_or_else(|| self.steps())
    }

    /// `[start, end)` of segment `s`.
    pub fn segment(&self, s: usize) -> (usize, usize) {
        (self.boundaries[s], self.boundaries[s + 1])
    }
}

/// Splits `[0, K]` into `S` contiguous spans whose lengths differ by at most
/// one, longer spans first.
pub fn segment_boundaries(k: usize, s: usize) -> Result<SegmentationPlan> {
    if s == 0 || s > k {
        return Err(Error::Plan(format!("cannot split {k} steps into {s} segments")));
    }
    let (base, extra) = (k / s, k % s);
    let mut b = vec![0];
    for i in 0..s {
        let len = base + usize::from(i < extra);
        b.push(b[i] + len);
    }
    Ok(SegmentationPlan {
        num_segments: s,
        boundaries: b,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSource {
    Original,
    PreviousStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub name: String,
    pub steps: usize,
    pub cfg_scale: f64,
    pub num_segments: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub teacher: TeacherSource,
    pub batch_size: usize,
    /// Jacobi trajectories recorded per caption context.
    pub text_seeds: usize,
}

impl StagePlan {
    pub fn stage1() -> Self {
        Self {
            name: "turbo-star".into(),
            steps: 16,
            cfg_scale: 10.0,
            num_segments: 4,
            train_steps: 1500,
            learning_rate: 3e-4,
            weights: LossWeights::default(),
            teacher: TeacherSource::Original,
            batch_size: 32,
            text_seeds: 2,
        }
    }

    /// Halved steps and segments, lower guidance, previous stage as teacher.
    pub fn stage2() -> Self {
        let s1 = Self::stage1();
        Self {
            name: "turbo".into(),
            steps: s1.steps / 2,
            cfg_scale: 1.5,
            num_segments: s1.num_segments / 2,
            teacher: TeacherSource::PreviousStage,
            ..s1
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        segment_boundaries(self.steps, self.num_segments)?;
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config(format!("stage {}: cfg must be ≥ 0", self.name)));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.text_seeds == 0 {
            return Err(Error::Config(format!(
                "stage {}: learning rate, batch size and text seeds must be positive",
                self.name
            )));
        }
        Ok(())
    }
}
