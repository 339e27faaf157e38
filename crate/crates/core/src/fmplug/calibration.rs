//! Mean-variance calibration of flowed states.
//!
//! Unconditional samples pushed through the generator give, per time-grid
//! point, the scalar mean and variance over all coordinates; piecewise
//! linear interpolation makes both continuous in t so the calibrated state
//! stays differentiable along the optimization path. Calibration rescales
//! a state to match those predicted moments exactly.

use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::generator::Generator;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct CalibrationModel {
    ts: Vec<f64>,
    means: Vec<f64>,
    vars: Vec<f64>,
}

impl CalibrationModel {
    pub fn new(ts: Vec<f64>, means: Vec<f64>, vars: Vec<f64>) -> Result<Self> {
        if ts.len() < 2 || ts.len() != means.len() || ts.len() != vars.len() {
            return Err(Error::Calibration("grid needs at least two matching points".into()));
        }
        if ts[0] != 0.0 || *ts.last().unwrap() != 1.0 {
            return Err(Error::Calibration("grid must cover [0, 1]".into()));
        }
        if ts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Calibration("grid t-values must be strictly increasing".into()));
        }
        if let Some(i) = vars.iter().position(|&v| v <= 0.0) {
            return Err(Error::Calibration(format!(
                "nonpositive variance {} at t = {}",
                vars[i], ts[i]
            )));
        }
        Ok(CalibrationModel { ts, means, vars })
    }

    pub fn grid(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.ts, &self.means, &self.vars)
    }

    fn segment(&self, t: f64) -> usize {
        // rightmost segment with ts[i] <= t, clamped to the grid
        match self.ts.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(self.ts.len() - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(self.ts.len() - 2),
        }
    }

    /// Predicted (mean, variance) at t, linearly interpolated and clamped
    /// to the grid ends.
    pub fn predict(&self, t: f64) -> (f64, f64) {
        let i = self.segment(t);
        let w = ((t - self.ts[i]) / (self.ts[i + 1] - self.ts[i])).clamp(0.0, 1.0);
        (
            self.means[i] + w * (self.means[i + 1] - self.means[i]),
            self.vars[i] + w * (self.vars[i + 1] - self.vars[i]),
        )
    }

    /// Interpolation as graph nodes; the active segment is chosen by the
    /// current value of t (the interpolant is piecewise affine).
    pub fn predict_node(&self, tape: &Tape, t: Var) -> (Var, Var) {
        let tv = tape.item(t);
        let i = self.segment(tv);
        let (t0, t1) = (self.ts[i], self.ts[i + 1]);
        let inv = 1.0 / (t1 - t0);
        let t0c = tape.constf(t0);
        let w = tape.scale(tape.sub(t, t0c), inv);
        let mean = {
            let m0 = tape.constf(self.means[i]);
            let dm = tape.scale(w, self.means[i + 1] - self.means[i]);
            tape.add(m0, dm)
        };
        let var = {
            let v0 = tape.constf(self.vars[i]);
            let dv = tape.scale(w, self.vars[i + 1] - self.vars[i]);
            tape.add(v0, dv)
        };
        (mean, var)
    }
}

/// Estimate the calibration model by integrating `n_samples` source draws
/// forward and recording scalar moments at `grid_size` evenly spaced times.
/// One heun step spans each grid interval. Deterministic given the seed.
pub fn fit_calibration(
    g: &Generator,
    n_samples: usize,
    grid_size: usize,
    seed: u64,
) -> Result<CalibrationModel> {
    if n_samples < 2 {
        return Err(Error::Calibration("need at least 2 samples".into()));
    }
    if grid_size < 2 {
        return Err(Error::Calibration("need at least 2 grid points".into()));
    }
    let d = g.dim();
    let field = g.field();
    let t_cap = g.t_end();
    let ts: Vec<f64> = (0..grid_size)
        .map(|j| j as f64 / (grid_size - 1) as f64)
        .collect();

    let mut rng = crate::rng::stream_from(seed);
    // Accumulate sums and sums of squares per grid point.
    let mut sum = vec![0.0f64; grid_size];
    let mut sumsq = vec![0.0f64; grid_size];
    for _ in 0..n_samples {
        let mut state: Tensor = {
            let data = (0..d).map(|_| rand::Rng::sample(&mut rng, StandardNormal)).collect();
            Tensor::new(vec![d], data)
        };
        for (j, &tj) in ts.iter().enumerate() {
            if j > 0 {
                // advance from the previous grid time with one heun step
                let t_prev = ts[j - 1].min(t_cap);
                let t_now = tj.min(t_cap);
                let h = t_now - t_prev;
                if h > 0.0 {
                    let k1 = field.velocity(&state, t_prev);
                    let pred = state.add(&k1.scale(h));
                    let k2 = field.velocity(&pred, t_now);
                    state = state.add(&k1.add(&k2).scale(0.5 * h));
                }
                if !state.is_finite() {
                    return Err(Error::Divergence {
                        step: j,
                        what: "non-finite state during calibration".into(),
                    });
                }
            }
            for &v in state.data() {
                sum[j] += v;
                sumsq[j] += v * v;
            }
        }
    }

    let n = (n_samples * d) as f64;
    let mut means = Vec::with_capacity(grid_size);
    let mut vars = Vec::with_capacity(grid_size);
    for j in 0..grid_size {
        let m = sum[j] / n;
        let v = sumsq[j] / n - m * m;
        if v < 1e-12 {
            return Err(Error::Calibration(format!("degenerate variance {v} at t = {}", ts[j])));
        }
        means.push(m);
        vars.push(v);
    }
    CalibrationModel::new(ts, means, vars)
}

/// Rescale a flowed state so its coordinate mean and population variance
/// match the model's prediction at t. States with vanishing variance pass
/// through unchanged (logged).
pub fn calibrate_state(tape: &Tape, z_t: Var, t: Var, cal: &CalibrationModel) -> Var {
    let n = tape.value(z_t).len();
    assert!(n >= 2, "calibrate_state: need at least 2 coordinates");
    let state_var = tape.value(z_t).variance();
    if state_var < 1e-12 {
        log::warn!("calibration skipped: state variance {state_var} below threshold");
        return z_t;
    }
    let (pred_mean, pred_var) = cal.predict_node(tape, t);
    let state_mean = tape.mean(z_t);
    let centered = {
        let neg = tape.neg(state_mean);
        tape.add_scalar(z_t, neg)
    };
    // population variance = ||centered||^2 / n
    let var = tape.scale(tape.squared_norm(centered), 1.0 / n as f64);
    let ratio = tape.sqrt(tape.div(pred_var, var));
    let scaled = tape.mul_scalar(centered, ratio);
    tape.add_scalar(scaled, pred_mean)
}
