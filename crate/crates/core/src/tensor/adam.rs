//! Adam optimizer with bias correction, operating in place on a
//! [`ParamSet`].

use super::{ParamSet, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let m = params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        let v = params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self { cfg, t: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// Used by plateau schedules.
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }
}

/// One Adam update, in place. `grads` must align with `params` in order
/// and shape.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() {
        return Err(TensorError::InvalidArg {
            op: "adam_step",
            msg: format!("{} grads for {} params", grads.len(), params.len()),
        });
    }
    for (p, g) in params.tensors().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let AdamConfig { lr, beta1, beta2, eps } = state.cfg;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.tensors_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: Vec<f64>) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("p", Tensor::from_vec(v));
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut ps = one_param(vec![1.5, -0.5]);
        let before = ps.get("p").unwrap().clone();
        let mut st = AdamState::new(AdamConfig::default(), &ps);
        adam_step(&mut ps, &[Tensor::from_vec(vec![0.0, 0.0])], &mut st).unwrap();
        assert_eq!(ps.get("p").unwrap().data(), before.data());
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_close_to_lr() {
        // t=1, m=v=0, g constant: mhat = g, vhat = g^2, step = lr*g/(|g|+eps)
        let mut ps = one_param(vec![0.0]);
        let mut st = AdamState::new(AdamConfig::with_lr(0.01), &ps);
        adam_step(&mut ps, &[Tensor::from_vec(vec![3.0])], &mut st).unwrap();
        let got = ps.get("p").unwrap().data()[0];
        assert!((got + 0.01).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn step_counter_increments() {
        let mut ps = one_param(vec![1.0]);
        let mut st = AdamState::new(AdamConfig::default(), &ps);
        let g = [Tensor::from_vec(vec![1.0])];
        adam_step(&mut ps, &g, &mut st).unwrap();
        adam_step(&mut ps, &g, &mut st).unwrap();
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut ps = one_param(vec![1.0, 2.0]);
        let mut st = AdamState::new(AdamConfig::default(), &ps);
        let err = adam_step(&mut ps, &[Tensor::from_vec(vec![1.0])], &mut st).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }
}
