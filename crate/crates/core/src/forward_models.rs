//! Linear measurement operators and observation noise.
//!
//! Every operator compiles to an explicit dense matrix at construction
//! (identity short-circuits), so linearity and adjoint consistency are
//! exact by construction and the same matrix backs the recorded, numeric,
//! and oracle paths. Desk-scale signals keep this affordable.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub enum OperatorKind {
    Identity,
    /// Keep the listed coordinates (sorted, deduplicated).
    InpaintMask { keep: Vec<usize> },
    /// Separable Gaussian blur with symmetric-reflection padding.
    GaussianBlur { kernel_size: usize, kernel_std: f64 },
    /// Box-average downsampling by an integer factor per axis.
    Downsample { factor: usize },
    /// Row-orthonormal real DFT subsampling: lowest frequencies first,
    /// remainder drawn seeded from the rest.
    SubsampledDft { keep_frac: f64, seed: u64 },
    /// Dense sensing matrix with N(0, 1/m) entries.
    RandomGaussian { m: usize, seed: u64 },
}

impl OperatorKind {
    fn name(&self) -> &'static str {
        match self {
            OperatorKind::Identity => "identity",
            OperatorKind::InpaintMask { .. } => "inpaint_mask",
            OperatorKind::GaussianBlur { .. } => "gaussian_blur",
            OperatorKind::Downsample { .. } => "downsample",
            OperatorKind::SubsampledDft { .. } => "subsampled_dft",
            OperatorKind::RandomGaussian { .. } => "random_gaussian",
        }
    }
}

#[derive(Clone)]
pub struct ForwardModel {
    kind: OperatorKind,
    signal_shape: Vec<usize>,
    noise_std: f64,
    /// Dense [m, d]; None only for identity.
    matrix: Option<Tensor>,
}

impl ForwardModel {
    pub fn identity(signal_shape: &[usize], noise_std: f64) -> Self {
        Self::build(OperatorKind::Identity, signal_shape, noise_std).unwrap()
    }

    pub fn inpaint(signal_shape: &[usize], keep: Vec<usize>, noise_std: f64) -> Result<Self> {
        Self::build(OperatorKind::InpaintMask { keep }, signal_shape, noise_std)
    }

    /// Keep a seeded random fraction of the coordinates.
    pub fn inpaint_random(
        signal_shape: &[usize],
        keep_frac: f64,
        seed: u64,
        noise_std: f64,
    ) -> Result<Self> {
        let d: usize = signal_shape.iter().product();
        let m = ((d as f64 * keep_frac).round() as usize).clamp(1, d);
        let mut idx: Vec<usize> = (0..d).collect();
        let mut rng = crate::rng::stream_from(seed);
        // partial Fisher-Yates: first m entries are the kept set
        for i in 0..m {
            let j = rng.gen_range(i..d);
            idx.swap(i, j);
        }
        let mut keep = idx[..m].to_vec();
        keep.sort_unstable();
        Self::build(OperatorKind::InpaintMask { keep }, signal_shape, noise_std)
    }

    pub fn gaussian_blur(
        signal_shape: &[usize],
        kernel_size: usize,
        kernel_std: f64,
        noise_std: f64,
    ) -> Result<Self> {
        Self::build(
            OperatorKind::GaussianBlur { kernel_size, kernel_std },
            signal_shape,
            noise_std,
        )
    }

    pub fn downsample(signal_shape: &[usize], factor: usize, noise_std: f64) -> Result<Self> {
        Self::build(OperatorKind::Downsample { factor }, signal_shape, noise_std)
    }

    pub fn subsampled_dft(
        signal_shape: &[usize],
        keep_frac: f64,
        seed: u64,
        noise_std: f64,
    ) -> Result<Self> {
        Self::build(OperatorKind::SubsampledDft { keep_frac, seed }, signal_shape, noise_std)
    }

    pub fn random_gaussian(
        signal_shape: &[usize],
        m: usize,
        seed: u64,
        noise_std: f64,
    ) -> Result<Self> {
        Self::build(OperatorKind::RandomGaussian { m, seed }, signal_shape, noise_std)
    }

    fn build(kind: OperatorKind, signal_shape: &[usize], noise_std: f64) -> Result<Self> {
        assert!(noise_std >= 0.0, "noise_std must be nonnegative");
        let d: usize = signal_shape.iter().product();
        if d == 0 {
            return Err(Error::Config("empty signal shape".into()));
        }
        let matrix = match &kind {
            OperatorKind::Identity => None,
            OperatorKind::InpaintMask { keep } => {
                if keep.is_empty() {
                    return Err(Error::Config("inpaint mask keeps no coordinates".into()));
                }
                let mut seen = vec![false; d];
                let mut mat = Tensor::zeros(&[keep.len(), d]);
                for (r, &i) in keep.iter().enumerate() {
                    if i >= d {
                        return Err(Error::Config(format!("mask index {i} out of range {d}")));
                    }
                    if seen[i] {
                        return Err(Error::Config(format!("mask index {i} repeated")));
                    }
                    seen[i] = true;
                    mat.data_mut()[r * d + i] = 1.0;
                }
                Some(mat)
            }
            OperatorKind::GaussianBlur { kernel_size, kernel_std } => {
                Some(blur_matrix(signal_shape, *kernel_size, *kernel_std)?)
            }
            OperatorKind::Downsample { factor } => {
                Some(downsample_matrix(signal_shape, *factor)?)
            }
            OperatorKind::SubsampledDft { keep_frac, seed } => {
                Some(dft_matrix(signal_shape, *keep_frac, *seed)?)
            }
            OperatorKind::RandomGaussian { m, seed } => {
                if *m == 0 {
                    return Err(Error::Config("sensing matrix needs m >= 1".into()));
                }
                let mut rng = crate::rng::stream_from(*seed);
                let scale = 1.0 / (*m as f64).sqrt();
                let data = (0..m * d)
                    .map(|_| {
                        let g: f64 = rng.sample(StandardNormal);
                        g * scale
                    })
                    .collect();
                Some(Tensor::new(vec![*m, d], data))
            }
        };
        Ok(ForwardModel { kind, signal_shape: signal_shape.to_vec(), noise_std, matrix })
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn kind_name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn signal_shape(&self) -> &[usize] {
        &self.signal_shape
    }

    pub fn signal_dim(&self) -> usize {
        self.signal_shape.iter().product()
    }

    pub fn measurement_dim(&self) -> usize {
        match &self.matrix {
            Some(m) => m.rows(),
            None => self.signal_dim(),
        }
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Dense matrix representation (identity materializes on demand).
    pub fn matrix(&self) -> Tensor {
        match &self.matrix {
            Some(m) => m.clone(),
            None => Tensor::eye(self.signal_dim()),
        }
    }

    fn check_signal(&self, x: &Tensor, op: &'static str) -> Result<()> {
        if x.len() != self.signal_dim() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected {} elements, got {}", self.signal_dim(), x.len()),
            });
        }
        Ok(())
    }

    /// Noise-free measurement A x.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check_signal(x, "apply")?;
        Ok(match &self.matrix {
            Some(m) => m.matvec(&x.reshape(&[x.len()])),
            None => x.reshape(&[x.len()]),
        })
    }

    /// Record A x on the tape.
    pub fn apply_node(&self, tape: &Tape, x: Var) -> Var {
        match &self.matrix {
            Some(m) => {
                let mc = tape.constant(m.clone());
                tape.matvec(mc, x)
            }
            None => x,
        }
    }

    /// Transpose action A^T u.
    pub fn adjoint(&self, u: &Tensor) -> Result<Tensor> {
        if u.len() != self.measurement_dim() {
            return Err(Error::ShapeMismatch {
                op: "adjoint",
                detail: format!("expected {} elements, got {}", self.measurement_dim(), u.len()),
            });
        }
        Ok(match &self.matrix {
            Some(m) => m.matvec_t(&u.reshape(&[u.len()])),
            None => u.reshape(&[u.len()]),
        })
    }

    /// A x + noise, noise drawn N(0, noise_std^2 I) from the seeded stream.
    pub fn measure(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        let mut clean = self.apply(x)?;
        if self.noise_std > 0.0 {
            let mut rng = crate::rng::stream(seed, crate::rng::PURPOSE_NOISE, 0);
            for v in clean.data_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *v += self.noise_std * g;
            }
        }
        Ok(clean)
    }
}

fn gaussian_kernel(size: usize, std: f64) -> Result<Vec<f64>> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::Config(format!("kernel size {size} must be odd and positive")));
    }
    if std <= 0.0 {
        return Err(Error::Config("kernel std must be positive".into()));
    }
    let c = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * std * std)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    Ok(k)
}

/// Symmetric reflection: ...2 1 0 | 0 1 2 ... n-1 | n-1 n-2...
fn reflect(mut i: i64, n: i64) -> usize {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn blur_matrix_1d(n: usize, kernel: &[f64]) -> Tensor {
    let r = (kernel.len() / 2) as i64;
    let mut mat = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for (o, &kv) in kernel.iter().enumerate() {
            let j = reflect(i as i64 + o as i64 - r, n as i64);
            mat.data_mut()[i * n + j] += kv;
        }
    }
    mat
}

fn blur_matrix(shape: &[usize], size: usize, std: f64) -> Result<Tensor> {
    let kernel = gaussian_kernel(size, std)?;
    match shape {
        [n] => Ok(blur_matrix_1d(*n, &kernel)),
        [h, w] => {
            let bh = blur_matrix_1d(*h, &kernel);
            let bw = blur_matrix_1d(*w, &kernel);
            // Kronecker product: out[(r,c),(r',c')] = bh[r,r'] * bw[c,c']
            let d = h * w;
            let mut mat = Tensor::zeros(&[d, d]);
            for r in 0..*h {
                for c in 0..*w {
                    let row = r * w + c;
                    for rp in 0..*h {
                        let a = bh.at2(r, rp);
                        if a == 0.0 {
                            continue;
                        }
                        for cp in 0..*w {
                            let b = bw.at2(c, cp);
                            if b != 0.0 {
                                mat.data_mut()[row * d + rp * w + cp] = a * b;
                            }
                        }
                    }
                }
            }
            Ok(mat)
        }
        other => Err(Error::Config(format!("blur supports 1-D/2-D signals, got {other:?}"))),
    }
}

fn downsample_matrix(shape: &[usize], f: usize) -> Result<Tensor> {
    if f == 0 {
        return Err(Error::Config("downsample factor must be positive".into()));
    }
    match shape {
        [n] => {
            if n % f != 0 {
                return Err(Error::Config(format!("length {n} not divisible by {f}")));
            }
            let m = n / f;
            let mut mat = Tensor::zeros(&[m, *n]);
            let w = 1.0 / f as f64;
            for i in 0..m {
                for o in 0..f {
                    mat.data_mut()[i * n + i * f + o] = w;
                }
            }
            Ok(mat)
        }
        [h, w_] => {
            if h % f != 0 || w_ % f != 0 {
                return Err(Error::Config(format!("shape {h}x{w_} not divisible by {f}")));
            }
            let (mh, mw) = (h / f, w_ / f);
            let d = h * w_;
            let mut mat = Tensor::zeros(&[mh * mw, d]);
            let weight = 1.0 / (f * f) as f64;
            for i in 0..mh {
                for j in 0..mw {
                    let row = i * mw + j;
                    for oi in 0..f {
                        for oj in 0..f {
                            let col = (i * f + oi) * w_ + (j * f + oj);
                            mat.data_mut()[row * d + col] = weight;
                        }
                    }
                }
            }
            Ok(mat)
        }
        other => Err(Error::Config(format!("downsample supports 1-D/2-D, got {other:?}"))),
    }
}

/// Full real DFT row basis in radial-frequency order: for each canonical
/// frequency (pairing k with -k mod n) a cosine row and, when nonzero, a
/// sine row. Rows are mutually orthogonal and unit-normalized.
fn dft_rows(shape: &[usize]) -> Vec<(u64, Vec<f64>)> {
    let dims: Vec<usize> = shape.to_vec();
    let d: usize = dims.iter().product();
    let freq_axes: Vec<Vec<usize>> = dims.iter().map(|&n| (0..n).collect()).collect();

    // enumerate frequency tuples
    let mut tuples: Vec<Vec<usize>> = vec![vec![]];
    for axis in &freq_axes {
        let mut next = Vec::with_capacity(tuples.len() * axis.len());
        for t in &tuples {
            for &k in axis {
                let mut t2 = t.clone();
                t2.push(k);
                next.push(t2);
            }
        }
        tuples = next;
    }

    let conj = |t: &[usize]| -> Vec<usize> {
        t.iter().zip(&dims).map(|(&k, &n)| (n - k) % n).collect()
    };
    let radial = |t: &[usize]| -> u64 {
        t.iter()
            .zip(&dims)
            .map(|(&k, &n)| {
                let m = k.min(n - k) as u64;
                m * m
            })
            .sum()
    };

    let mut rows = Vec::with_capacity(d);
    let mut canonical: Vec<Vec<usize>> = tuples
        .into_iter()
        .filter(|t| *t <= conj(t))
        .collect();
    canonical.sort_by_key(|t| (radial(t), t.clone()));

    // index tuples of the signal grid
    let index_tuples: Vec<Vec<usize>> = {
        let mut acc: Vec<Vec<usize>> = vec![vec![]];
        for &n in &dims {
            let mut next = Vec::with_capacity(acc.len() * n);
            for t in &acc {
                for i in 0..n {
                    let mut t2 = t.clone();
                    t2.push(i);
                    next.push(t2);
                }
            }
            acc = next;
        }
        acc
    };

    for freq in canonical {
        let self_conjugate = freq == conj(&freq);
        let phase = |idx: &[usize]| -> f64 {
            let mut p = 0.0;
            for ((&k, &i), &n) in freq.iter().zip(idx).zip(&dims) {
                p += (k * i) as f64 / n as f64;
            }
            std::f64::consts::TAU * p
        };
        let cos_row: Vec<f64> = index_tuples.iter().map(|i| phase(i).cos()).collect();
        rows.push((radial(&freq), normalize(cos_row)));
        if !self_conjugate {
            let sin_row: Vec<f64> = index_tuples.iter().map(|i| phase(i).sin()).collect();
            rows.push((radial(&freq), normalize(sin_row)));
        }
    }
    debug_assert_eq!(rows.len(), d);
    rows
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    debug_assert!(norm > 0.0);
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn dft_matrix(shape: &[usize], keep_frac: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&keep_frac) || keep_frac == 0.0 {
        return Err(Error::Config(format!("keep_frac {keep_frac} outside (0, 1]")));
    }
    let d: usize = shape.iter().product();
    let rows = dft_rows(shape);
    let m = ((d as f64 * keep_frac).round() as usize).clamp(1, d);
    // lowest half of the budget by radial order, remainder seeded random
    let low = m / 2;
    let mut selected: Vec<usize> = (0..low).collect();
    let mut rest: Vec<usize> = (low..d).collect();
    let mut rng = crate::rng::stream_from(seed);
    for i in 0..(m - low) {
        let j = rng.gen_range(i..rest.len());
        rest.swap(i, j);
    }
    selected.extend_from_slice(&rest[..m - low]);
    selected.sort_unstable();

    let mut mat = Tensor::zeros(&[m, d]);
    for (r, &idx) in selected.iter().enumerate() {
        mat.data_mut()[r * d..(r + 1) * d].copy_from_slice(&rows[idx].1);
    }
    Ok(mat)
}
