use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }
}

/// One optimizer step. Rejects the whole update, leaving parameters and state
/// untouched, if any gradient is non-finite.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter {i} at element {pos}; update rejected"
            )));
        }
    }

    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            let gf = gv as f64;
            let m_new = beta1 * *mv as f64 + (1.0 - beta1) * gf;
            let v_new = beta2 * *vv as f64 + (1.0 - beta2) * gf * gf;
            *mv = m_new as f32;
            *vv = v_new as f32;
            let update = (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
            *pv = (*pv as f64 * decay - lr * update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut params = vec![scalar(0.7), Tensor::full(&[2, 2], 1.5)];
        let grads = vec![scalar(0.0), Tensor::zeros(&[2, 2])];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        let before = params.clone();
        adam_step(&mut params, &grads, &mut st).unwrap();
        assert_eq!(params, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g² after bias correction, so the step is lr·g/|g|.
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut params = vec![scalar(1.0)];
        let mut st = AdamState::new(cfg, &params);
        adam_step(&mut params, &[scalar(1.0)], &mut st).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((params[0].item() as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut params = vec![scalar(2.0)];
        let mut st = AdamState::new(cfg, &params);
        adam_step(&mut params, &[scalar(0.0)], &mut st).unwrap();
        assert!((params[0].item() - 2.0 * 0.99).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_rejected_without_side_effects() {
        let mut params = vec![scalar(1.0), scalar(2.0)];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        let err = adam_step(&mut params, &[scalar(0.5), scalar(f32::NAN)], &mut st).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(params[0].item(), 1.0);
        assert_eq!(st.step_count(), 0);
        assert!(st.first_moment().iter().all(|m| m.data() == [0.0]));
    }

    #[test]
    fn moments_track_param_shapes() {
        let params = vec![Tensor::zeros(&[3, 4]), Tensor::zeros(&[5])];
        let st = AdamState::new(AdamConfig::default(), &params);
        for (p, (m, v)) in params
            .iter()
            .zip(st.first_moment().iter().zip(st.second_moment()))
        {
            assert_eq!(p.shape(), m.shape());
            assert_eq!(p.shape(), v.shape());
        }
    }
}
