//! Gaussian-mixture target and its marginal velocity.
//!
//! The mixture field is the responsibility-weighted combination of the
//! per-component Gaussian fields, with responsibilities proportional to
//! pi_k N(z; t mu_k, C_{t,k}). Responsibility logits go through a
//! max-shifted softmax, so uniformly tiny densities renormalize instead
//! of underflowing.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::{GaussianPrior, GaussianVelocity, VelocityField};

#[derive(Clone, Debug)]
pub struct GmmPrior {
    weights: Vec<f64>,
    components: Vec<GaussianPrior>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianPrior>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::Config(format!(
                "mixture needs matching weights/components, got {}/{}",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("mixture weights must be nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {sum}, expected 1")));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::Config("mixture components disagree on dimension".into()));
        }
        Ok(GmmPrior { weights, components })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianPrior] {
        &self.components
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Tensor {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for (w, c) in self.weights.iter().zip(&self.components) {
            cum += w;
            if u <= cum {
                return c.sample(rng);
            }
        }
        self.components.last().unwrap().sample(rng)
    }

    pub fn second_moment(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w * c.second_moment())
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct GmmVelocity {
    prior: GmmPrior,
    fields: Vec<GaussianVelocity>,
}

impl GmmVelocity {
    pub fn new(prior: GmmPrior) -> Self {
        let fields = prior
            .components
            .iter()
            .cloned()
            .map(GaussianVelocity::new)
            .collect();
        GmmVelocity { prior, fields }
    }

    pub fn prior(&self) -> &GmmPrior {
        &self.prior
    }

    /// Posterior component responsibilities at state (z, t). Sums to one.
    pub fn responsibilities(&self, z: &Tensor, t: f64) -> Vec<f64> {
        assert!(z.is_finite(), "responsibilities: non-finite state");
        let logits: Vec<f64> = (0..self.prior.k()).map(|k| self.logit(k, z, t)).collect();
        let hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - hi).exp()).collect();
        let z_norm: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z_norm).collect()
    }

    /// log pi_k + log N(z; t mu_k, C_{t,k}), dropping the shared constant.
    fn logit(&self, k: usize, z: &Tensor, t: f64) -> f64 {
        let comp = &self.prior.components[k];
        let omt = 1.0 - t;
        let centered = z.sub(&comp.mean().scale(t));
        let w = comp.eigvecs_t().matvec(&centered);
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for (wi, &l) in w.data().iter().zip(comp.eigvals()) {
            let denom = t * t * l + omt * omt;
            quad += wi * wi / denom;
            logdet += denom.ln();
        }
        self.prior.weights[k].max(f64::MIN_POSITIVE).ln() - 0.5 * quad - 0.5 * logdet
    }
}

impl VelocityField for GmmVelocity {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn velocity_node(&self, tape: &Tape, z: Var, t: Var) -> Var {
        let kk = self.prior.k();
        if kk == 1 {
            return self.fields[0].velocity_node(tape, z, t);
        }
        let one = tape.constf(1.0);
        let omt = tape.sub(one, t);
        let t2 = tape.mul(t, t);
        let omt2 = tape.mul(omt, omt);

        let mut logits = Vec::with_capacity(kk);
        let mut velocities = Vec::with_capacity(kk);
        for k in 0..kk {
            let comp = &self.prior.components[k];
            let d = comp.dim();
            let lam = tape.constant(Tensor::from_slice(comp.eigvals()));
            let ones = tape.constant(Tensor::filled(&[d], 1.0));
            let qt = tape.constant(comp.eigvecs_t().clone());
            let q = tape.constant(comp.eigvecs().clone());
            let mu = tape.constant(comp.mean().clone());

            let tmu = tape.mul_scalar(mu, t);
            let centered = tape.sub(z, tmu);
            let w = tape.matvec(qt, centered);
            let denom = tape.add(tape.mul_scalar(lam, t2), tape.mul_scalar(ones, omt2));

            // component velocity
            let numer = tape.sub(tape.mul_scalar(lam, t), tape.mul_scalar(ones, omt));
            let coeff = tape.div(numer, denom);
            let vk = tape.add(mu, tape.matvec(q, tape.mul(coeff, w)));
            velocities.push(vk);

            // responsibility logit
            let quad = tape.sum(tape.div(tape.mul(w, w), denom));
            let logdet = tape.sum(tape.log(denom));
            let base = tape.constf(self.prior.weights[k].max(f64::MIN_POSITIVE).ln());
            let halves = tape.add(tape.scale(quad, -0.5), tape.scale(logdet, -0.5));
            logits.push(tape.add(base, halves));
        }

        let logits_vec = tape.stack_scalars(&logits);
        let resp = tape.softmax(logits_vec);
        let mut out = None;
        for (k, vk) in velocities.into_iter().enumerate() {
            let wk = tape.slice(resp, k, 1);
            let term = tape.mul_scalar(vk, wk);
            out = Some(match out {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
        }
        out.unwrap()
    }

    fn velocity(&self, z: &Tensor, t: f64) -> Tensor {
        if self.prior.k() == 1 {
            return self.fields[0].velocity(z, t);
        }
        let resp = self.responsibilities(z, t);
        let mut out = Tensor::zeros(&[self.dim()]);
        for (k, field) in self.fields.iter().enumerate() {
            if resp[k] > 0.0 {
                out.add_assign(&field.velocity(z, t).scale(resp[k]));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn two_component_1d() -> GmmVelocity {
        let c1 = GaussianPrior::new(Tensor::scalar(-2.0), Tensor::new(vec![1, 1], vec![0.3])).unwrap();
        let c2 = GaussianPrior::new(Tensor::scalar(2.0), Tensor::new(vec![1, 1], vec![0.5])).unwrap();
        GmmVelocity::new(GmmPrior::new(vec![0.4, 0.6], vec![c1, c2]).unwrap())
    }

    #[test]
    fn single_component_reduces_to_gaussian() {
        let mean = Tensor::from_slice(&[0.7, -0.2]);
        let cov = Tensor::new(vec![2, 2], vec![1.2, 0.1, 0.1, 0.4]);
        let g = GaussianVelocity::new(GaussianPrior::new(mean.clone(), cov.clone()).unwrap());
        let m = GmmVelocity::new(
            GmmPrior::new(vec![1.0], vec![GaussianPrior::new(mean, cov).unwrap()]).unwrap(),
        );
        let mut r = rng::stream_from(2);
        for _ in 0..10 {
            let z = Tensor::randn(&[2], &mut r);
            let t = rand::Rng::gen_range(&mut r, 0.05..0.95);
            assert!(m.velocity(&z, t).max_abs_diff(&g.velocity(&z, t)) < 1e-12);
        }
    }

    #[test]
    fn symmetric_mixture_cancels_at_origin() {
        let mu = Tensor::from_slice(&[1.5, 0.0]);
        let cov = Tensor::eye(2).scale(0.4);
        let c1 = GaussianPrior::new(mu.clone(), cov.clone()).unwrap();
        let c2 = GaussianPrior::new(mu.scale(-1.0), cov).unwrap();
        let f = GmmVelocity::new(GmmPrior::new(vec![0.5, 0.5], vec![c1, c2]).unwrap());
        for &t in &[0.1, 0.4, 0.8] {
            let v = f.velocity(&Tensor::zeros(&[2]), t);
            // component along mu direction cancels by symmetry
            assert!(v.at(0).abs() < 1e-12, "t={t}: v = {:?}", v.data());
        }
    }

    #[test]
    fn responsibilities_form_a_simplex() {
        let f = two_component_1d();
        let mut r = rng::stream_from(3);
        for _ in 0..50 {
            let z = Tensor::randn(&[1], &mut r).scale(3.0);
            let t = rand::Rng::gen_range(&mut r, 0.01..0.99);
            let resp = f.responsibilities(&z, t);
            assert!(resp.iter().all(|&w| w >= 0.0));
            assert!((resp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn node_matches_numeric() {
        let f = two_component_1d();
        let mut r = rng::stream_from(4);
        for _ in 0..10 {
            let z = Tensor::randn(&[1], &mut r);
            let t = rand::Rng::gen_range(&mut r, 0.05..0.95);
            let tape = Tape::new();
            let zv = tape.var(z.clone());
            let tv = tape.var(Tensor::scalar(t));
            let v = tape.value(f.velocity_node(&tape, zv, tv));
            assert!(v.max_abs_diff(&f.velocity(&z, t)) < 1e-10);
        }
    }

    /// Kernel-weighted Monte-Carlo estimate of E[x - z0 | z_t near z*] for a
    /// bimodal 1-D mixture; local-linear fit keeps the smoothing bias at
    /// second order in the bandwidth.
    #[test]
    fn matches_mc_conditioning_oracle_1d() {
        let f = two_component_1d();
        let t = 0.5;
        let target = [0.2];
        let closed = f.velocity(&Tensor::scalar(target[0]), t).item();

        let mut r = rng::stream_from(77);
        let mut fit = crate::flow::testkit::LocalLinear::new(&target, 1, 0.04);
        for _ in 0..4_000_000 {
            let x = f.prior.sample(&mut r);
            let z0 = Tensor::randn(&[1], &mut r);
            let zt = t * x.item() + (1.0 - t) * z0.item();
            fit.add(&[zt], &[x.item() - z0.item()]);
        }
        let est = fit.estimate()[0];
        let rel = (est - closed).abs() / closed.abs().max(0.05);
        assert!(rel < 0.02, "closed {closed} vs MC {est}");
    }
}
