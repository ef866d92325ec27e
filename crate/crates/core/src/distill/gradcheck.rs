//! Finite-difference checks of every distillation term on a small model.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::denoise::{jacobi_decode, sample_image, default_max_iters, ImageTrajectory, SamplingConfig, TextTrajectory};
use crate::error::{Error, Result};
use crate::model::{bind, Model, ModelConfig};
use crate::numerics::{finite_diff_check, FnObjective, GradCheckOptions, GradCheckReport, Graph, Real, Tensor};

use super::losses::{distill_terms, total_loss, DistillBatch, ImageSample, TextSample};
use super::plan::{segment_boundaries, LossWeights};

/// Std of the offset between student and frozen parameters. Large enough
/// that layer norms see well-spread inputs and the consistency terms sit away
/// from their minimum.
const STUDENT_NOISE: f32 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    ImageConsistency,
    TextConsistency,
    ImageReg,
    TextReg,
    Ar,
    Total,
}

pub const TERMS: [Term; 6] = [
    Term::ImageConsistency,
    Term::TextConsistency,
    Term::ImageReg,
    Term::TextReg,
    Term::Ar,
    Term::Total,
];

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::ImageConsistency => "image_consistency",
            Term::TextConsistency => "text_consistency",
            Term::ImageReg => "image_reg",
            Term::TextReg => "text_reg",
            Term::Ar => "ar",
            Term::Total => "total",
        }
    }
}

/// Fixed trajectories and text drawn from a model, with that model's
/// parameters as the frozen copy and a perturbed copy as the student point
/// the gradients are taken at.
#[derive(Clone, Debug)]
pub struct LossFixture {
    pub config: ModelConfig,
    pub frozen: Vec<Tensor>,
    pub student: Vec<Tensor>,
    pub images: Vec<(ImageTrajectory, usize, usize)>,
    pub texts: Vec<(TextTrajectory, usize, usize)>,
    pub ar: Vec<Vec<u32>>,
    pub ar_len: usize,
    pub weights: LossWeights,
    /// Multiplies the analytic gradient; anything but 1 must fail the check.
    pub grad_scale: f64,
}

impl LossFixture {
    pub fn build(model: &Model, seed: u64) -> Result<Self> {
        let cfg = model.config;
        let fmt = cfg.format();
        let v = cfg.vocab;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = fmt.image_tokens.clamp(1, 2);
        let mut images = Vec::new();
        let mut texts = Vec::new();
        for i in 0..2 {
            let plen = rng.random_range(0..cfg.prompt_len);
            let prompt: Vec<u32> = (0..plen).map(|_| rng.random_range(0..v.text_vocab_size)).collect();
            let sc = SamplingConfig {
                seed: seed + i,
                ..SamplingConfig::greedy(steps, 1.5)
            };
            let traj = sample_image(model, &prompt, &sc)?;
            let plan = segment_boundaries(traj.num_steps(), 1)?;
            let k = rng.random_range(0..traj.num_steps());
            let grid = traj.final_state().to_vec();
            images.push((traj, k, plan.endpoint(k)));

            let ctx = fmt.mmu(&grid, &[])?;
            let n = cfg.response_len;
            let t = jacobi_decode(model, &ctx, n, default_max_iters(n), seed + i)?;
            let kk = t.converged_iteration();
            let plan = segment_boundaries(kk, kk.min(2))?;
            let k = rng.random_range(0..kk);
            let e = plan.endpoint(k);
            texts.push((t, k, e));
        }
        let ar_len = cfg.response_len + 2;
        let ar = (0..3)
            .map(|_| {
                let n = rng.random_range(0..ar_len - 1);
                let mut s: Vec<u32> = (0..n).map(|_| rng.random_range(0..v.text_vocab_size)).collect();
                s.push(v.eos());
                s
            })
            .collect();
        let noise = Normal::new(0.0f32, STUDENT_NOISE).map_err(|e| Error::Numeric(e.to_string()))?;
        let student = model
            .params
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.data_mut().iter_mut().for_each(|x| *x += noise.sample(&mut rng));
                q
            })
            .collect();
        Ok(Self {
            config: cfg,
            frozen: model.params.clone(),
            student,
            images,
            texts,
            ar,
            ar_len,
            weights: LossWeights::default(),
            grad_scale: 1.0,
        })
    }

    pub fn batch(&self) -> DistillBatch<'_> {
        DistillBatch {
            images: self
                .images
                .iter()
                .map(|(traj, k, e)| ImageSample { traj, k: *k, e: *e })
                .collect(),
            texts: self
                .texts
                .iter()
                .map(|(traj, k, e)| TextSample { traj, k: *k, e: *e })
                .collect(),
            ar: self.ar.clone(),
            ar_len: self.ar_len,
        }
    }

    /// Value and parameter gradient of one term.
    pub fn evaluate<T: Real>(&self, params: &[Tensor<T>], term: Term) -> Result<(f64, Vec<Tensor<T>>)> {
        let frozen: Vec<Tensor<T>> = self.frozen.iter().map(Tensor::cast).collect();
        let mut g = Graph::<T>::new();
        let vars = bind(&mut g, params, true);
        let terms = distill_terms(&self.config, &mut g, &vars, &frozen, &self.batch())?;
        let out = match term {
            Term::ImageConsistency => terms.image_consistency,
            Term::TextConsistency => terms.text_consistency,
            Term::ImageReg => terms.image_reg,
            Term::TextReg => terms.text_reg,
            Term::Ar => terms.ar,
            Term::Total => total_loss(&mut g, &terms, &self.weights)?,
        };
        g.backward(out)?;
        let value = g.value(out).item().to_f64();
        let grads = vars
            .iter()
            .map(|&v| {
                let mut gr = g.grad(v).ok_or_else(|| Error::State("parameter without gradient".into()))?;
                if self.grad_scale != 1.0 {
                    for x in gr.data_mut() {
                        *x = T::from_f64(x.to_f64() * self.grad_scale);
                    }
                }
                Ok(gr)
            })
            .collect::<Result<_>>()?;
        Ok((value, grads))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TermReport {
    pub term: Term,
    pub value: f64,
    pub report: GradCheckReport,
}

/// Runs the check for every term at precision `T`.
pub fn check_terms<T: Real>(fixture: &LossFixture, opts: &GradCheckOptions) -> Result<Vec<TermReport>> {
    let params: Vec<Tensor<T>> = fixture.student.iter().map(Tensor::cast).collect();
    TERMS
        .iter()
        .map(|&term| {
            let objective = FnObjective(|p: &[Tensor<T>]| fixture.evaluate(p, term));
            let value = fixture.evaluate(&params, term)?.0;
            let report = finite_diff_check(&objective, &params, opts)?;
            Ok(TermReport { term, value, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn fixture() -> LossFixture {
        let model = init_model(&ModelConfig::tiny()).unwrap();
        LossFixture::build(&model, 3).unwrap()
    }

    fn all_coords(mut o: GradCheckOptions) -> GradCheckOptions {
        o.samples = usize::MAX;
        o
    }

    #[test]
    fn every_term_passes_in_f64() {
        let fx = fixture();
        for r in check_terms::<f64>(&fx, &all_coords(GradCheckOptions::double_precision())).unwrap() {
            assert!(r.report.passed, "{:?}: {:?}", r.term, r.report);
            assert!(r.value >= -1e-7, "{:?} = {}", r.term, r.value);
        }
    }

    #[test]
    fn every_term_passes_in_f32() {
        let fx = fixture();
        for r in check_terms::<f32>(&fx, &all_coords(GradCheckOptions::single_precision())).unwrap() {
            assert!(r.report.passed, "{:?}: {:?}", r.term, r.report);
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut fx = fixture();
        fx.grad_scale = 1.5;
        let reports = check_terms::<f64>(&fx, &GradCheckOptions::double_precision()).unwrap();
        assert!(reports.iter().all(|r| !r.report.passed));
    }

    #[test]
    fn fixture_terms_are_nontrivial() {
        let fx = fixture();
        let p: Vec<Tensor<f64>> = fx.student.iter().map(Tensor::cast).collect();
        for term in TERMS {
            assert!(fx.evaluate(&p, term).unwrap().0 > 1e-3, "{term:?}");
        }
    }
}
