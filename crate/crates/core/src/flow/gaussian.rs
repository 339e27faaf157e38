//! Gaussian target distribution and its closed-form marginal velocity.
//!
//! For a target N(mu, Sigma) under the linear schedule, the marginal state
//! at time t is N(t mu, C_t) with C_t = t^2 Sigma + (1-t)^2 I, and the
//! marginal velocity is
//!
//!     v(z, t) = mu + (t Sigma - (1-t) I) C_t^{-1} (z - t mu).
//!
//! Sigma is eigendecomposed once at construction, so both the numeric and
//! the recorded evaluation reduce to two rotations and a per-eigenvalue
//! rational coefficient in t; C_t stays invertible for t < 1 even when
//! Sigma is singular.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::VelocityField;

#[derive(Clone, Debug)]
pub struct GaussianPrior {
    mean: Tensor,
    cov: Tensor,
    /// Columns are eigenvectors.
    eigvecs: Tensor,
    eigvecs_t: Tensor,
    eigvals: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Tensor, cov: Tensor) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != [d, d] {
            return Err(Error::ShapeMismatch {
                op: "GaussianPrior::new",
                detail: format!("mean dim {d}, covariance shape {:?}", cov.shape()),
            });
        }
        let scale = cov.data().iter().fold(1.0f64, |a, &x| a.max(x.abs()));
        for i in 0..d {
            for j in 0..i {
                if (cov.at2(i, j) - cov.at2(j, i)).abs() > 1e-9 * scale {
                    return Err(Error::LinearAlgebra(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let m = DMatrix::from_row_slice(d, d, cov.data());
        let eig = SymmetricEigen::new(m);
        let mut eigvals = Vec::with_capacity(d);
        for &l in eig.eigenvalues.iter() {
            if l < -1e-9 * scale.max(1.0) {
                return Err(Error::LinearAlgebra(format!("negative eigenvalue {l}")));
            }
            eigvals.push(l.max(0.0));
        }
        // nalgebra stores column-major; re-pack row-major.
        let mut q = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                q[i * d + j] = eig.eigenvectors[(i, j)];
            }
        }
        let eigvecs = Tensor::new(vec![d, d], q);
        let eigvecs_t = eigvecs.transpose();
        Ok(GaussianPrior { mean, cov, eigvecs, eigvecs_t, eigvals })
    }

    /// Standard normal in d dimensions.
    pub fn standard(d: usize) -> Self {
        Self::new(Tensor::zeros(&[d]), Tensor::eye(d)).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn cov(&self) -> &Tensor {
        &self.cov
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    /// Eigenvector matrix Q (columns are eigenvectors).
    pub fn eigvecs(&self) -> &Tensor {
        &self.eigvecs
    }

    pub fn eigvecs_t(&self) -> &Tensor {
        &self.eigvecs_t
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Tensor {
        let d = self.dim();
        let xi: Vec<f64> = (0..d)
            .map(|i| {
                let g: f64 = rng.sample(StandardNormal);
                g * self.eigvals[i].sqrt()
            })
            .collect();
        self.mean.add(&self.eigvecs.matvec(&Tensor::from_vec(xi)))
    }

    /// E[||x||^2] = ||mu||^2 + tr(Sigma).
    pub fn second_moment(&self) -> f64 {
        self.mean.squared_norm() + self.eigvals.iter().sum::<f64>()
    }

    /// Per-eigendirection velocity coefficient (t*lam - (1-t)) / (t^2*lam + (1-t)^2).
    fn coeffs(&self, t: f64) -> Vec<f64> {
        let omt = 1.0 - t;
        self.eigvals
            .iter()
            .map(|&l| (t * l - omt) / (t * t * l + omt * omt))
            .collect()
    }
}

/// Marginal velocity field transporting N(0, I) to a Gaussian prior.
#[derive(Clone, Debug)]
pub struct GaussianVelocity {
    prior: GaussianPrior,
}

impl GaussianVelocity {
    pub fn new(prior: GaussianPrior) -> Self {
        GaussianVelocity { prior }
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }
}

impl VelocityField for GaussianVelocity {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn velocity_node(&self, tape: &Tape, z: Var, t: Var) -> Var {
        let p = &self.prior;
        let d = p.dim();
        let mu = tape.constant(p.mean.clone());
        let lam = tape.constant(Tensor::from_slice(&p.eigvals));
        let ones = tape.constant(Tensor::filled(&[d], 1.0));
        let q = tape.constant(p.eigvecs.clone());
        let qt = tape.constant(p.eigvecs_t.clone());

        let tmu = tape.mul_scalar(mu, t);
        let centered = tape.sub(z, tmu);
        let w = tape.matvec(qt, centered);

        let one = tape.constf(1.0);
        let omt = tape.sub(one, t);
        let t2 = tape.mul(t, t);
        let omt2 = tape.mul(omt, omt);
        let numer = tape.sub(tape.mul_scalar(lam, t), tape.mul_scalar(ones, omt));
        let denom = tape.add(tape.mul_scalar(lam, t2), tape.mul_scalar(ones, omt2));
        let coeff = tape.div(numer, denom);

        let scaled = tape.mul(coeff, w);
        let rotated = tape.matvec(q, scaled);
        tape.add(mu, rotated)
    }

    fn velocity(&self, z: &Tensor, t: f64) -> Tensor {
        let p = &self.prior;
        debug_assert!(t < 1.0, "velocity evaluated at t = {t}");
        let centered = z.sub(&p.mean.scale(t));
        let mut w = p.eigvecs_t.matvec(&centered);
        for (wi, c) in w.data_mut().iter_mut().zip(p.coeffs(t)) {
            *wi *= c;
        }
        p.mean.add(&p.eigvecs.matvec(&w))
    }
}
