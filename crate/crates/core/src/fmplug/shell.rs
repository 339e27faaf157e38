//! Norm-shell constraint and its closed-form projection.
//!
//! Standard Gaussian vectors in d dimensions concentrate in the thin shell
//! (1-eps)sqrt(d) <= ||z|| <= (1+eps)sqrt(d); constraining the latent to
//! that shell keeps it where the generator was actually trained. Euclidean
//! projection just rescales to the nearer boundary.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct ShellConstraint {
    dim: usize,
    eps: f64,
}

impl ShellConstraint {
    pub fn new(dim: usize, eps: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("shell dimension must be positive".into()));
        }
        if !(0.0..1.0).contains(&eps) || eps == 0.0 {
            return Err(Error::Config(format!("shell eps {eps} outside (0, 1)")));
        }
        Ok(ShellConstraint { dim, eps })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// (lower, upper) norm bounds.
    pub fn bounds(&self) -> (f64, f64) {
        let root_d = (self.dim as f64).sqrt();
        ((1.0 - self.eps) * root_d, (1.0 + self.eps) * root_d)
    }

    pub fn contains_norm(&self, norm: f64) -> bool {
        let (lo, hi) = self.bounds();
        (lo..=hi).contains(&norm)
    }

    /// Euclidean projection onto the shell: rescale to the nearer boundary,
    /// direction preserved; identity inside. The origin has no nearest
    /// point direction, so it maps to a seeded random direction on the
    /// inner boundary (measure-zero tie-break, logged).
    pub fn project(&self, z: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        assert_eq!(z.len(), self.dim, "project: dimension mismatch");
        let (lo, hi) = self.bounds();
        let norm = z.norm();
        if norm == 0.0 {
            log::warn!("shell projection at the origin; substituting a seeded random direction");
            let dir: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
            let dir = Tensor::from_vec(dir);
            return dir.scale(lo / dir.norm());
        }
        if norm > hi {
            z.scale(hi / norm)
        } else if norm < lo {
            z.scale(lo / norm)
        } else {
            z.clone()
        }
    }
}
