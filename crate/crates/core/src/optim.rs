//! AMSGrad with L2 weight decay folded into the gradient.

use basisconv_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmsGradConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AmsGradConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6 }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    v_max: Vec<T>,
}

/// Bias-corrected Adam that divides by the running maximum of the second
/// moment.
#[derive(Clone, Debug)]
pub struct AmsGrad<T> {
    pub config: AmsGradConfig,
    step: u64,
    state: Vec<Moments<T>>,
}

impl<T: Scalar> AmsGrad<T> {
    pub fn new(config: AmsGradConfig) -> Self {
        Self { config, step: 0, state: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Invalid(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|p| Moments {
                    m: vec![T::zero(); p.numel()],
                    v: vec![T::zero(); p.numel()],
                    v_max: vec![T::zero(); p.numel()],
                })
                .collect();
        }
        if self.state.len() != params.len() {
            return Err(Error::Invalid("parameter list changed between steps".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit((1.0 - c.beta2.powi(t)).sqrt());
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, eps, wd) = (T::lit(c.lr), T::lit(c.eps), T::lit(c.weight_decay));
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.state) {
            if p.shape() != g.shape() {
                return Err(Error::Invalid(format!("gradient shape {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let pd = p.data_mut();
            for (i, (w, &gi)) in pd.iter_mut().zip(g.data()).enumerate() {
                let gi = gi + wd * *w;
                s.m[i] = b1 * s.m[i] + (T::one() - b1) * gi;
                s.v[i] = b2 * s.v[i] + (T::one() - b2) * gi * gi;
                s.v_max[i] = s.v_max[i].max(s.v[i]);
                let denom = s.v_max[i].sqrt() / bc2 + eps;
                *w = *w - lr * (s.m[i] / bc1) / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::from_f64([2], &[1.0, -1.0]).unwrap();
        let g = Tensor::<f64>::from_f64([2], &[0.5, -3.0]).unwrap();
        let mut opt = AmsGrad::new(AmsGradConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.data()[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Tensor::<f32>::from_f64([3], &[0.1, 0.2, -0.3]).unwrap();
        let before = p.clone();
        let g = Tensor::<f32>::from_f64([3], &[1.0, -2.0, 3.0]).unwrap();
        let mut opt = AmsGrad::new(AmsGradConfig { lr: 0.0, ..Default::default() });
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p, before);
    }
}
