//! Trainable MLP velocity field and its regression loop.
//!
//! The field maps the state with time appended as an extra coordinate
//! through silu hidden layers; training regresses it onto per-sample
//! conditional velocities over a seeded stream of (x, z0, t) triples.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::textio;
use crate::{Error, Result};

use super::{FlowSchedule, VelocityField};

/// Training never samples t above this; the linear conditional field is
/// singular at t = 1.
pub const TRAIN_T_MAX: f64 = 1.0 - 1e-3;

#[derive(Clone, Debug)]
pub struct MlpVelocityField {
    dim: usize,
    hidden: Vec<usize>,
    /// Per layer: weight [out, in] and bias [out].
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl MlpVelocityField {
    /// Xavier-uniform initialization from a seeded stream.
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Self {
        assert!(dim >= 1 && !hidden.is_empty());
        let mut rng = crate::rng::stream_from(seed);
        let mut sizes = vec![dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            weights.push(Tensor::new(vec![fan_out, fan_in], data));
            biases.push(Tensor::zeros(&[fan_out]));
        }
        MlpVelocityField { dim, hidden: hidden.to_vec(), weights, biases }
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn params(&self) -> (&[Tensor], &[Tensor]) {
        (&self.weights, &self.biases)
    }

    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Batched forward pass on a tape; `x` is [batch, dim + 1], parameters
    /// enter as the given vars. Returns [batch, dim].
    fn forward_batch(&self, tape: &Tape, x: Var, ws: &[Var], bs: &[Var]) -> Var {
        let mut h = x;
        for l in 0..self.n_layers() {
            let wt = tape.transpose(ws[l]);
            let lin = tape.add_row(tape.matmul(h, wt), bs[l]);
            h = if l + 1 < self.n_layers() { tape.silu(lin) } else { lin };
        }
        h
    }

    pub fn save(&self, path: &Path, schedule: FlowSchedule) -> Result<()> {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let header = format!(
            "fmplug-ckpt v1 dim={} hidden={} activation=silu schedule={}",
            self.dim,
            hidden.join(","),
            schedule.name()
        );
        let mut arrays = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            arrays.push((format!("w{l}"), w));
            arrays.push((format!("b{l}"), b));
        }
        textio::save(path, &header, &arrays)
    }

    pub fn load(path: &Path) -> Result<(Self, FlowSchedule)> {
        let (header, arrays) = textio::load(path)?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("fmplug-ckpt") || fields.next() != Some("v1") {
            return Err(Error::Parse(format!("unrecognized checkpoint header: {header}")));
        }
        let mut dim = None;
        let mut hidden = None;
        let mut schedule = None;
        for kv in fields {
            match kv.split_once('=') {
                Some(("dim", v)) => {
                    dim = Some(v.parse::<usize>().map_err(|_| Error::Parse("bad dim".into()))?)
                }
                Some(("hidden", v)) => {
                    let hs: std::result::Result<Vec<usize>, _> =
                        v.split(',').map(str::parse).collect();
                    hidden = Some(hs.map_err(|_| Error::Parse("bad hidden sizes".into()))?);
                }
                Some(("activation", v)) => {
                    if v != "silu" {
                        return Err(Error::Parse(format!("unsupported activation {v}")));
                    }
                }
                Some(("schedule", v)) => schedule = Some(FlowSchedule::from_name(v)?),
                _ => return Err(Error::Parse(format!("bad header field {kv:?}"))),
            }
        }
        let dim = dim.ok_or_else(|| Error::Parse("header missing dim".into()))?;
        let hidden = hidden.ok_or_else(|| Error::Parse("header missing hidden".into()))?;
        let schedule = schedule.ok_or_else(|| Error::Parse("header missing schedule".into()))?;

        let mut field = MlpVelocityField::new(dim, &hidden, 0);
        let n = field.n_layers();
        if arrays.len() != 2 * n {
            return Err(Error::Parse(format!("expected {} arrays, got {}", 2 * n, arrays.len())));
        }
        for (name, t) in arrays {
            let (kind, idx) = name.split_at(1);
            let l: usize = idx.parse().map_err(|_| Error::Parse(format!("bad array {name}")))?;
            match kind {
                "w" => {
                    if t.shape() != field.weights[l].shape() {
                        return Err(Error::Parse(format!("array {name}: wrong shape")));
                    }
                    field.weights[l] = t;
                }
                "b" => {
                    if t.shape() != field.biases[l].shape() {
                        return Err(Error::Parse(format!("array {name}: wrong shape")));
                    }
                    field.biases[l] = t;
                }
                _ => return Err(Error::Parse(format!("unexpected array {name}"))),
            }
        }
        Ok((field, schedule))
    }
}

impl VelocityField for MlpVelocityField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity_node(&self, tape: &Tape, z: Var, t: Var) -> Var {
        let t1 = tape.reshape(t, &[1]);
        let mut h = tape.concat(z, t1, 0);
        for l in 0..self.n_layers() {
            let w = tape.constant(self.weights[l].clone());
            let b = tape.constant(self.biases[l].clone());
            let lin = tape.add(tape.matvec(w, h), b);
            h = if l + 1 < self.n_layers() { tape.silu(lin) } else { lin };
        }
        h
    }

    fn velocity(&self, z: &Tensor, t: f64) -> Tensor {
        let mut h: Vec<f64> = z.data().to_vec();
        h.push(t);
        let mut h = Tensor::from_vec(h);
        for l in 0..self.n_layers() {
            let mut lin = self.weights[l].matvec(&h);
            lin.add_assign(&self.biases[l]);
            h = if l + 1 < self.n_layers() {
                lin.map(|x| x / (1.0 + (-x).exp()))
            } else {
                lin
            };
        }
        h
    }
}

pub struct TrainReport {
    pub loss_trace: Vec<f64>,
}

/// Regress the field onto conditional velocities of the schedule's path,
/// drawing targets from `sampler`. t is sampled uniformly on [0, 1 - 1e-3].
/// Deterministic given the seed.
pub fn train_fm<S>(
    mut sampler: S,
    field: &mut MlpVelocityField,
    schedule: FlowSchedule,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainReport>
where
    S: FnMut(&mut ChaCha8Rng) -> Tensor,
{
    assert!(batch >= 1, "train_fm: batch must be at least 1");
    let d = field.dim;
    let mut rng = crate::rng::stream_from(seed);
    let mut opts: Vec<Adam> = field
        .weights
        .iter()
        .chain(&field.biases)
        .map(|p| Adam::new(lr, p.shape()))
        .collect();
    let mut trace = Vec::with_capacity(steps);

    for step in 0..steps {
        // Assemble the batch: rows [z_t ; t], targets u(z_t, t | x).
        let mut xs = Vec::with_capacity(batch * (d + 1));
        let mut us = Vec::with_capacity(batch * d);
        for _ in 0..batch {
            let x = sampler(&mut rng);
            assert_eq!(x.len(), d, "train_fm: sampler returned wrong dimension");
            let z0 = Tensor::randn(&[d], &mut rng);
            let t: f64 = rng.gen_range(0.0..TRAIN_T_MAX);
            let (a, b) = (schedule.alpha(t), schedule.beta(t));
            let (da, db) = (schedule.dalpha(t), schedule.dbeta(t));
            for i in 0..d {
                xs.push(a * x.at(i) + b * z0.at(i));
            }
            xs.push(t);
            for i in 0..d {
                us.push(da * x.at(i) + db * z0.at(i));
            }
        }
        let x_batch = Tensor::new(vec![batch, d + 1], xs);
        let u_batch = Tensor::new(vec![batch, d], us);

        let tape = Tape::new();
        let xc = tape.constant(x_batch);
        let uc = tape.constant(u_batch);
        let ws: Vec<Var> = field.weights.iter().map(|w| tape.var(w.clone())).collect();
        let bs: Vec<Var> = field.biases.iter().map(|b| tape.var(b.clone())).collect();
        let pred = field.forward_batch(&tape, xc, &ws, &bs);
        let resid = tape.sub(pred, uc);
        let loss = tape.scale(tape.squared_norm(resid), 1.0 / (batch * d) as f64);

        let loss_val = tape.item(loss);
        if !loss_val.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        trace.push(loss_val);

        let grads = tape.backward(loss)?;
        let n = field.weights.len();
        for (l, w) in field.weights.iter_mut().enumerate() {
            opts[l].step(w, &grads.wrt(ws[l]));
        }
        for (l, b) in field.biases.iter_mut().enumerate() {
            opts[n + l].step(b, &grads.wrt(bs[l]));
        }
    }
    Ok(TrainReport { loss_trace: trace })
}
