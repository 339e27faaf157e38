//! First-order optimizer used by training and all solvers.

use crate::tensor::Tensor;

/// Adam with bias correction; one state per parameter tensor.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Tensor,
    v: Tensor,
}

impl Adam {
    pub fn new(lr: f64, shape: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }

    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor) {
        assert_eq!(param.shape(), grad.shape(), "adam: parameter/gradient shape mismatch");
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        let (m, v) = (self.m.data_mut(), self.v.data_mut());
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad.data()[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / b1t;
            let vhat = v[i] / b2t;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        // min (x-3)^2: gradient 2(x-3)
        let mut x = Tensor::scalar(0.0);
        let mut opt = Adam::new(0.1, &[1]);
        for _ in 0..500 {
            let g = Tensor::scalar(2.0 * (x.item() - 3.0));
            opt.step(&mut x, &g);
        }
        assert!((x.item() - 3.0).abs() < 1e-3);
    }
}
