//! Radial kernels and the multilevel circulant approximation of their Gram matrix.
//!
//! The circulant column is built from kernel values on a q-dimensional lattice with
//! steps `h`, folded so that the result is multilevel-symmetric. It depends only on
//! the lattice, never on the feature vectors: sample `i` of the training set is
//! simply identified with lattice site `i` in input order.

use faer::Mat;

use crate::data_io::FeatureMatrix;
use crate::error::{KlrError, Result};
use crate::mcm::DENSE_CAP;
use crate::tensor_fft::LevelOrder;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    /// `g(r) = exp(-σ r²)`
    Gaussian,
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = KlrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(KernelFamily::Gaussian),
            other => Err(KlrError::InvalidParameter(format!("unknown kernel {other:?}"))),
        }
    }
}

/// `exp(-x)` drops below `f64::MIN_POSITIVE` past this point.
const GAUSSIAN_FLUSH: f64 = 708.39;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialKernel {
    family: KernelFamily,
    sigma: f64,
}

impl RadialKernel {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, sigma)
    }

    pub fn new(family: KernelFamily, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(KlrError::InvalidParameter(format!(
                "kernel width sigma must be positive and finite, got {sigma}"
            )));
        }
        Ok(Self { family, sigma })
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Radial profile `g(r)`.
    pub fn profile(&self, r: f64) -> f64 {
        self.profile_sq(r * r)
    }

    /// Profile as a function of the squared distance. Values that would be subnormal
    /// are flushed to zero: they never matter numerically and are slow to produce.
    #[inline]
    pub fn profile_sq(&self, r2: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let e = self.sigma * r2;
                if e > GAUSSIAN_FLUSH {
                    0.0
                } else {
                    (-e).exp()
                }
            }
        }
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.profile_sq(squared_distance(a, b))
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lattice steps together with the level order they apply to.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    h: Vec<f64>,
    order: LevelOrder,
}

impl GridSpec {
    pub fn new(h: Vec<f64>, order: LevelOrder) -> Result<Self> {
        if h.len() != order.q() {
            return Err(KlrError::InvalidParameter(format!(
                "{} lattice steps given for a {}-level order",
                h.len(),
                order.q()
            )));
        }
        if let Some(bad) = h.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(KlrError::InvalidParameter(format!(
                "lattice steps must be positive, got {bad}"
            )));
        }
        Ok(Self { h, order })
    }

    /// Unit steps on every level.
    pub fn unit(order: LevelOrder) -> Self {
        Self {
            h: vec![1.0; order.q()],
            order,
        }
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn order(&self) -> &LevelOrder {
        &self.order
    }
}

/// `t_i = g(‖(i_s h_s)_s‖₂)` for every multilevel index `i`.
pub fn lattice_values(kernel: &RadialKernel, grid: &GridSpec) -> Vec<f64> {
    let order = grid.order();
    (0..order.n())
        .map(|f| {
            let r2: f64 = order
                .multi_index(f)
                .iter()
                .zip(grid.h())
                .map(|(&i, &h)| {
                    let x = i as f64 * h;
                    x * x
                })
                .sum();
            kernel.profile_sq(r2)
        })
        .collect()
}

/// First column of the circulant approximation.
///
/// For each level, `D_{i,s}` is `{0}` when `i_s = 0` and the set `{i_s, n_s - i_s}`
/// otherwise (a single element when the two coincide). `k_i` sums the lattice values
/// over the Cartesian product of those sets.
pub fn construct_column(kernel: &RadialKernel, grid: &GridSpec) -> Vec<f64> {
    let t = lattice_values(kernel, grid);
    fold_lattice(&t, grid.order())
}

fn fold_lattice(t: &[f64], order: &LevelOrder) -> Vec<f64> {
    let dims = order.dims();
    let q = dims.len();
    let mut sets: Vec<[usize; 2]> = vec![[0, 0]; q];
    let mut lens = vec![0usize; q];
    let mut cursor = vec![0usize; q];
    let mut idx = vec![0usize; q];
    (0..order.n())
        .map(|f| {
            let multi = order.multi_index(f);
            for s in 0..q {
                let (i, n) = (multi[s], dims[s]);
                if i == 0 || i == n - i {
                    sets[s] = [i, i];
                    lens[s] = 1;
                } else {
                    // sorted, so i and its negation sum in the same order
                    sets[s] = [i.min(n - i), i.max(n - i)];
                    lens[s] = 2;
                }
                cursor[s] = 0;
            }
            let mut sum = 0.0;
            loop {
                for s in 0..q {
                    idx[s] = sets[s][cursor[s]];
                }
                sum += t[order.flat_index(&idx)];
                // odometer over the product set
                let mut s = q;
                loop {
                    if s == 0 {
                        return sum;
                    }
                    s -= 1;
                    cursor[s] += 1;
                    if cursor[s] < lens[s] {
                        break;
                    }
                    cursor[s] = 0;
                }
            }
        })
        .collect()
}

/// Exact Gram matrix `K_ij = g(‖x_i − x_j‖)`, refused above [`DENSE_CAP`] rows.
pub fn exact_gram(kernel: &RadialKernel, x: &FeatureMatrix) -> Result<Mat<f64>> {
    exact_gram_capped(kernel, x, DENSE_CAP)
}

pub fn exact_gram_capped(kernel: &RadialKernel, x: &FeatureMatrix, cap: usize) -> Result<Mat<f64>> {
    let n = x.rows();
    if n > cap {
        return Err(KlrError::DenseCapExceeded { n, cap });
    }
    let mut k = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = kernel.profile_sq(0.0);
        for j in 0..i {
            let v = kernel.eval(x.row(i), x.row(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Rows `[start, start + out.len()/train.rows())` of the cross-Gram between `queries`
/// and `train`, written row-major into `out`. No size cap.
pub fn gram_block(
    kernel: &RadialKernel,
    queries: &FeatureMatrix,
    start: usize,
    train: &FeatureMatrix,
    out: &mut [f64],
) {
    let m = train.rows();
    for (r, row_out) in out.chunks_exact_mut(m).enumerate() {
        let q = queries.row(start + r);
        for (j, o) in row_out.iter_mut().enumerate() {
            *o = kernel.eval(q, train.row(j));
        }
    }
}
