//! Flow schedules and velocity fields.
//!
//! A schedule fixes the interpolation coefficients of the probability path;
//! velocity fields give the right-hand side of the generation ODE. Three
//! field families ship: closed-form Gaussian, closed-form Gaussian mixture,
//! and a trainable MLP regressed onto conditional velocities.

mod gaussian;
mod gmm;
mod mlp;

pub use gaussian::{GaussianPrior, GaussianVelocity};
pub use gmm::{GmmPrior, GmmVelocity};
pub use mlp::{train_fm, MlpVelocityField, TrainReport};

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Interpolation coefficients (alpha, beta) with their time derivatives.
/// The path runs from pure source noise at t=0 to data at t=1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowSchedule {
    Linear,
}

impl FlowSchedule {
    pub fn alpha(self, t: f64) -> f64 {
        match self {
            FlowSchedule::Linear => t,
        }
    }

    pub fn beta(self, t: f64) -> f64 {
        match self {
            FlowSchedule::Linear => 1.0 - t,
        }
    }

    pub fn dalpha(self, _t: f64) -> f64 {
        match self {
            FlowSchedule::Linear => 1.0,
        }
    }

    pub fn dbeta(self, _t: f64) -> f64 {
        match self {
            FlowSchedule::Linear => -1.0,
        }
    }

    pub fn alpha_node(self, _tape: &Tape, t: Var) -> Var {
        match self {
            FlowSchedule::Linear => t,
        }
    }

    pub fn beta_node(self, tape: &Tape, t: Var) -> Var {
        match self {
            FlowSchedule::Linear => {
                let one = tape.constf(1.0);
                tape.sub(one, t)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FlowSchedule::Linear => "linear",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(FlowSchedule::Linear),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

/// Evaluable velocity v(z, t), both as a graph builder (for differentiable
/// generation) and as a plain numeric function (for sampling and
/// calibration). Implementations must keep the two paths consistent.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;

    /// Record v(z, t) on the tape; `z` has shape [dim], `t` is scalar.
    fn velocity_node(&self, tape: &Tape, z: Var, t: Var) -> Var;

    /// Numeric evaluation of v(z, t).
    fn velocity(&self, z: &Tensor, t: f64) -> Tensor;
}

/// Per-sample target velocity of the conditional path toward `x`:
/// dalpha·x + dbeta·z0, with z0 recovered from the on-path state. Singular
/// as t approaches 1, where beta vanishes.
pub fn conditional_velocity(z: &Tensor, t: f64, x: &Tensor, s: FlowSchedule) -> Result<Tensor> {
    if t >= 1.0 - 1e-9 {
        return Err(Error::Singularity(format!(
            "conditional velocity undefined at t = {t} (needs t < 1 - 1e-9)"
        )));
    }
    assert_eq!(z.shape(), x.shape(), "conditional_velocity: shape mismatch");
    let beta = s.beta(t);
    // z0 = (z - alpha x) / beta
    let alpha = s.alpha(t);
    let z0 = z.zip_map(x, |zi, xi| (zi - alpha * xi) / beta);
    Ok(x.scale(s.dalpha(t)).add(&z0.scale(s.dbeta(t))))
}

/// Test-side Monte-Carlo conditioning oracle: local-linear kernel
/// regression of on-path velocities onto the state. Gaussian-kernel
/// weighted least squares with an affine design; exactly unbiased when
/// the conditional mean is affine, second-order accurate otherwise.
#[cfg(test)]
pub(crate) mod testkit {
    use nalgebra::DMatrix;

    pub(crate) struct LocalLinear {
        target: Vec<f64>,
        h2: f64,
        xtwx: DMatrix<f64>,
        xtwu: DMatrix<f64>,
    }

    impl LocalLinear {
        pub fn new(target: &[f64], dim_u: usize, h: f64) -> Self {
            let p = target.len() + 1;
            LocalLinear {
                target: target.to_vec(),
                h2: h * h,
                xtwx: DMatrix::zeros(p, p),
                xtwu: DMatrix::zeros(p, dim_u),
            }
        }

        pub fn add(&mut self, z: &[f64], u: &[f64]) {
            let d2: f64 = z
                .iter()
                .zip(&self.target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let w = (-d2 / (2.0 * self.h2)).exp();
            if w < 1e-300 {
                return;
            }
            let p = self.target.len() + 1;
            let mut x = vec![1.0; p];
            for (i, (zi, ti)) in z.iter().zip(&self.target).enumerate() {
                x[i + 1] = zi - ti;
            }
            for i in 0..p {
                for j in 0..p {
                    self.xtwx[(i, j)] += w * x[i] * x[j];
                }
                for (k, uk) in u.iter().enumerate() {
                    self.xtwu[(i, k)] += w * x[i] * uk;
                }
            }
        }

        /// Intercept row of the weighted least-squares fit.
        pub fn estimate(&self) -> Vec<f64> {
            let sol = self
                .xtwx
                .clone()
                .lu()
                .solve(&self.xtwu)
                .expect("local-linear system is singular");
            (0..self.xtwu.ncols()).map(|k| sol[(0, k)]).collect()
        }
    }
}
