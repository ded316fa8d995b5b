use super::{ParamStore, Result, TensorError};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one pair per parameter block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<S> {
    pub first: Vec<Vec<S>>,
    pub second: Vec<Vec<S>>,
    pub step: u64,
}

/// One bias-corrected Adam update of a flat parameter array.
///
/// `step` is the 1-based step index after increment.
pub fn adam_step<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    first: &mut [S],
    second: &mut [S],
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || first.len() != params.len() || second.len() != params.len() {
        return Err(TensorError::Shape {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), first.len(), second.len()],
        });
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(TensorError::Invalid {
            op: "adam_step",
            msg: format!("betas ({}, {}) outside [0, 1)", cfg.beta1, cfg.beta2),
        });
    }
    let t = step as i32;
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let c1 = S::one() - S::lit(cfg.beta1.powi(t));
    let c2 = S::one() - S::lit(cfg.beta2.powi(t));
    let (lr, eps) = (S::lit(cfg.lr), S::lit(cfg.eps));
    for i in 0..params.len() {
        let g = grads[i];
        first[i] = b1 * first[i] + (S::one() - b1) * g;
        second[i] = b2 * second[i] + (S::one() - b2) * g * g;
        let mhat = first[i] / c1;
        let vhat = second[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over every trainable block of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub state: AdamState<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, store: &ParamStore<S>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![S::zero(); t.numel()]).collect();
        Self {
            config,
            state: AdamState {
                first: zeros(),
                second: zeros(),
                step: 0,
            },
        }
    }

    /// Applies one update using the accumulated `grad` buffers. Blocks that
    /// are frozen or received no gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if self.state.first.len() != store.len() {
            return Err(TensorError::Shape {
                op: "adam",
                lhs: vec![self.state.first.len()],
                rhs: vec![store.len()],
            });
        }
        self.state.step += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            if !t.requires_grad() || t.grad().is_none() {
                continue;
            }
            let grads = t.grad().expect("checked").to_vec();
            let i = id.index();
            adam_step(
                t.data_mut(),
                &grads,
                &mut self.state.first[i],
                &mut self.state.second[i],
                self.state.step,
                &self.config,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0f64, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.lr, 1e-4);
        for g in [0.3f64, -5.0] {
            let mut p = vec![0.0];
            let (mut m, mut v) = (vec![0.0], vec![0.0]);
            adam_step(&mut p, &[g], &mut m, &mut v, 1, &cfg).unwrap();
            // mhat = g, vhat = g^2 at t = 1
            let expect = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p[0] - expect).abs() < 1e-18);
            assert!((p[0] + cfg.lr * g.signum()).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = vec![0.0f64; 2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        assert!(adam_step(&mut p, &[1.0], &mut m, &mut v, 1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn store_step_counts_and_skips_frozen() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::new(vec![1], vec![1.0]).unwrap().trainable()).unwrap();
        let b = s.add("b", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        s.get_mut(a).grad_mut()[0] = 1.0;
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &s);
        opt.step(&mut s).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(opt.state.step, 2);
        assert!(s.get(a).data()[0] < 1.0);
        assert_eq!(s.get(b).data()[0], 1.0);
    }
}
