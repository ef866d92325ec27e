//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

use super::scalar::Real;
use super::tensor::Tensor;

/// A differentiable scalar function of a parameter list.
pub trait Objective<T: Real> {
    fn value(&self, params: &[Tensor<T>]) -> Result<f64>;
    fn value_and_grad(&self, params: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)>;
}

/// Adapts a closure returning `(loss, grads)` into an [`Objective`].
pub struct FnObjective<F>(pub F);

impl<T, F> Objective<T> for FnObjective<F>
where
    T: Real,
    F: Fn(&[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)>,
{
    fn value(&self, params: &[Tensor<T>]) -> Result<f64> {
        (self.0)(params).map(|(v, _)| v)
    }

    fn value_and_grad(&self, params: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
        (self.0)(params)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates to probe; all of them when the model is smaller.
    pub samples: usize,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error. Scaled by
    /// `max(1, |f(x)|)`, the size of the rounding noise in a difference of
    /// two loss values.
    pub floor: f64,
    pub seed: u64,
}

impl GradCheckOptions {
    /// h = 1e-3, relative error ≤ 1e-2.
    pub fn single_precision() -> Self {
        Self {
            step: 1e-3,
            samples: 64,
            tolerance: 1e-2,
            floor: 1e-1,
            seed: 0,
        }
    }

    /// h = 1e-5, relative error ≤ 1e-5.
    pub fn double_precision() -> Self {
        Self {
            step: 1e-5,
            samples: 64,
            tolerance: 1e-5,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoordinateCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub checked: usize,
    pub worst: Option<CoordinateCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of `objective` with central differences on a
/// seeded sample of coordinates.
pub fn finite_diff_check<T: Real>(
    objective: &dyn Objective<T>,
    params: &[Tensor<T>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (base, grads) = objective.value_and_grad(params)?;
    let floor = opts.floor * base.abs().max(1.0);
    let again = objective.value(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Numeric(format!(
            "loss function is not deterministic: {base} then {again}"
        )));
    }
    if grads.len() != params.len() {
        return Err(Error::dim(
            "finite_diff_check",
            format!("{} grads for {} params", grads.len(), params.len()),
        ));
    }

    let offsets: Vec<usize> = params
        .iter()
        .scan(0usize, |acc, p| {
            let start = *acc;
            *acc += p.numel();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords: Vec<usize> = if opts.samples >= total {
        (0..total).collect()
    } else {
        sample(&mut rng, total, opts.samples).into_vec()
    };
    coords.sort_unstable();

    let mut work = params.to_vec();
    let mut worst: Option<CoordinateCheck> = None;
    for flat in coords.iter().copied() {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let idx = flat - offsets[p];
        let orig = work[p].data()[idx];
        work[p].data_mut()[idx] = T::from_f64(orig.to_f64() + opts.step);
        let plus_h = work[p].data()[idx].to_f64() - orig.to_f64();
        let up = objective.value(&work)?;
        work[p].data_mut()[idx] = T::from_f64(orig.to_f64() - opts.step);
        let minus_h = orig.to_f64() - work[p].data()[idx].to_f64();
        let down = objective.value(&work)?;
        work[p].data_mut()[idx] = orig;

        // Use the representable step actually taken.
        let numeric = (up - down) / (plus_h + minus_h);
        let analytic = grads[p].data()[idx].to_f64();
        let rel_error = relative_error(analytic, numeric, floor);
        if worst.as_ref().is_none_or(|w| rel_error > w.rel_error) {
            worst = Some(CoordinateCheck {
                param: p,
                index: idx,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(GradCheckReport {
        max_rel_error,
        tolerance: opts.tolerance,
        passed: max_rel_error <= opts.tolerance,
        checked: coords.len(),
        worst,
    })
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;
    use crate::numerics::Graph;

    /// ‖p‖² for every parameter, as a row·column product through the tape.
    fn squared_norm<T: Real>(params: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut g = Graph::<T>::new();
        let mut terms = Vec::new();
        let mut leaves = Vec::new();
        for p in params {
            let n = p.numel();
            let r = g.param(p.clone().reshape(vec![1, n])?);
            let c = g.param(p.clone().reshape(vec![n, 1])?);
            terms.push((g.matmul(r, c)?, 1.0));
            leaves.push((r, c));
        }
        let loss = g.weighted_sum(&terms)?;
        g.backward(loss)?;
        let grads = params
            .iter()
            .zip(&leaves)
            .map(|(p, &(r, c))| {
                let mut t = g.grad(r).unwrap().reshape(p.shape().to_vec())?;
                let other = g.grad(c).unwrap();
                t.data_mut().iter_mut().zip(other.data()).for_each(|(a, b)| *a += *b);
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((g.value(loss).item().to_f64(), grads))
    }

    #[test]
    fn quadratic_matches_in_double_precision() {
        let params = vec![
            Tensor::<f64>::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap(),
            Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, -0.5, 0.25]).unwrap(),
        ];
        let mut opts = GradCheckOptions::double_precision();
        opts.tolerance = 1e-6;
        let report = finite_diff_check(&FnObjective(squared_norm::<f64>), &params, &opts).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, 7);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let params = vec![Tensor::<f64>::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap()];
        let bad = |p: &[Tensor<f64>]| {
            let (v, mut g) = squared_norm(p)?;
            g[0].data_mut()[1] *= 1.5;
            Ok((v, g))
        };
        let report =
            finite_diff_check(&FnObjective(bad), &params, &GradCheckOptions::double_precision())
                .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 0.1);
        assert_eq!(report.worst.unwrap().index, 1);
    }

    #[test]
    fn nondeterministic_loss_detected() {
        let calls = Cell::new(0u32);
        let flaky = |p: &[Tensor<f64>]| {
            calls.set(calls.get() + 1);
            Ok((calls.get() as f64, vec![p[0].clone()]))
        };
        let params = vec![Tensor::<f64>::new(vec![1], vec![1.0]).unwrap()];
        let err = finite_diff_check(
            &FnObjective(flaky),
            &params,
            &GradCheckOptions::double_precision(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
