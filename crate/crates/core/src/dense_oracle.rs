//! Exact kernel logistic regression on the dense kernel matrix.
//!
//! This is the O(n³)-per-iteration baseline: the true objective, gradient and Hessian,
//! and Newton directions from the simplified system `(ΛK + nλI) d = y − p − nλα`.
//! It doubles as the reference the circulant solver is checked against on small
//! problems.

use std::sync::Arc;
use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::Mat;

use crate::data_io::Dataset;
use crate::error::{KlrError, Result};
use crate::kernel::exact_gram_capped;
use crate::klr_fast::{
    backtrack, binary_targets, norm2, sigmoid, BinaryModel, SolverKind, TrainConfig,
    TrainDiagnostics,
};
use crate::mcm::DENSE_CAP;
use crate::tensor_fft::LevelOrder;

#[derive(Debug, Clone)]
pub struct DenseProblem {
    k: Mat<f64>,
    y: Vec<f64>,
    lambda: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Residual-based acceptance for a dense solve.
const SOLVE_RESIDUAL_TOL: f64 = 1e-6;

impl DenseProblem {
    pub fn new(k: Mat<f64>, y: Vec<f64>, lambda: f64) -> Result<Self> {
        Self::with_cap(k, y, lambda, DENSE_CAP)
    }

    pub fn with_cap(k: Mat<f64>, y: Vec<f64>, lambda: f64, cap: usize) -> Result<Self> {
        let n = k.nrows();
        if n > cap {
            return Err(KlrError::DenseCapExceeded { n, cap });
        }
        if k.ncols() != n || y.len() != n {
            return Err(KlrError::Dimension(format!(
                "kernel is {}x{}, labels have length {}",
                n,
                k.ncols(),
                y.len()
            )));
        }
        if n == 0 {
            return Err(KlrError::Validation("empty problem".into()));
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (k[(i, j)], k[(j, i)]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(KlrError::Validation(format!(
                        "kernel matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { k, y, lambda })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn kernel(&self) -> &Mat<f64> {
        &self.k
    }

    /// `K·x`, using the symmetry of `K` for contiguous column access.
    pub fn kernel_mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|i| dot(self.k.col_as_slice(i), x)).collect()
    }

    pub fn probabilities(&self, alpha: &[f64]) -> Vec<f64> {
        self.kernel_mul(alpha).into_iter().map(sigmoid).collect()
    }

    pub fn objective(&self, alpha: &[f64]) -> f64 {
        let z = self.kernel_mul(alpha);
        self.objective_at(alpha, &z)
    }

    /// Objective with a precomputed `z = Kα`.
    pub fn objective_at(&self, alpha: &[f64], z: &[f64]) -> f64 {
        let n = self.n() as f64;
        let fit: f64 = z
            .iter()
            .zip(&self.y)
            .map(|(&z, &y)| {
                let p = sigmoid(z);
                y * p.ln() + (1.0 - y) * (1.0 - p).ln()
            })
            .sum();
        0.5 * self.lambda * dot(alpha, z) - fit / n
    }

    /// `∇F = λKα − (1/n)K(y − p)`.
    pub fn exact_gradient(&self, alpha: &[f64]) -> Vec<f64> {
        let p = self.probabilities(alpha);
        self.gradient_with(alpha, &p)
    }

    fn gradient_with(&self, alpha: &[f64], p: &[f64]) -> Vec<f64> {
        let n = self.n() as f64;
        let inner: Vec<f64> = alpha
            .iter()
            .zip(p)
            .zip(&self.y)
            .map(|((&a, &p), &y)| self.lambda * a - (y - p) / n)
            .collect();
        self.kernel_mul(&inner)
    }

    /// `∇²F = (1/n) Kᵀ Λ K + λK`, `Λ = diag(p(1 − p))`.
    pub fn exact_hessian(&self, alpha: &[f64]) -> Mat<f64> {
        let p = self.probabilities(alpha);
        let n = self.n();
        let lam: Vec<f64> = p.iter().map(|p| p * (1.0 - p)).collect();
        let scaled = Mat::from_fn(n, n, |i, j| lam[i] * self.k[(i, j)]);
        let ktlk = self.k.transpose() * &scaled;
        Mat::from_fn(n, n, |i, j| ktlk[(i, j)] / n as f64 + self.lambda * self.k[(i, j)])
    }

    /// Solves `(ΛK + nλI) d = y − p − nλα`.
    pub fn exact_newton_direction(&self, alpha: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        let (a, rhs) = self.simplified_system(alpha, p, 0.0);
        match solve_checked(&a, &rhs) {
            Some(d) => Ok(d),
            None => {
                let (a, rhs) = self.simplified_system(alpha, p, self.jitter());
                solve_checked(&a, &rhs).ok_or_else(|| {
                    KlrError::Numerical("Newton system is singular even after jitter".into())
                })
            }
        }
    }

    /// Solves the unsimplified system `(KᵀΛK + nλK) d = K(y − p − nλα)`.
    pub fn full_newton_direction(&self, alpha: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        let (a, rhs) = self.full_system(alpha, p);
        match solve_checked(&a, &rhs) {
            Some(d) => Ok(d),
            None => {
                let mut a = a;
                let j = self.jitter();
                for i in 0..self.n() {
                    a[(i, i)] += j;
                }
                solve_checked(&a, &rhs).ok_or_else(|| {
                    KlrError::Numerical("full Newton system is singular even after jitter".into())
                })
            }
        }
    }

    /// Matrix and right-hand side of `(ΛK + nλI) d = y − p − nλα`, with `jitter`
    /// added to the diagonal of `K`.
    pub fn simplified_system(&self, alpha: &[f64], p: &[f64], jitter: f64) -> (Mat<f64>, Vec<f64>) {
        let n = self.n();
        let nl = n as f64 * self.lambda;
        let a = Mat::from_fn(n, n, |i, j| {
            let kij = self.k[(i, j)] + if i == j { jitter } else { 0.0 };
            p[i] * (1.0 - p[i]) * kij + if i == j { nl } else { 0.0 }
        });
        let rhs = (0..n).map(|i| self.y[i] - p[i] - nl * alpha[i]).collect();
        (a, rhs)
    }

    /// Matrix and right-hand side of `(KᵀΛK + nλK) d = K(y − p − nλα)`.
    pub fn full_system(&self, alpha: &[f64], p: &[f64]) -> (Mat<f64>, Vec<f64>) {
        let n = self.n();
        let nl = n as f64 * self.lambda;
        let lam: Vec<f64> = p.iter().map(|p| p * (1.0 - p)).collect();
        let scaled = Mat::from_fn(n, n, |i, j| lam[i] * self.k[(i, j)]);
        let ktlk = self.k.transpose() * &scaled;
        let a = Mat::from_fn(n, n, |i, j| ktlk[(i, j)] + nl * self.k[(i, j)]);
        let r: Vec<f64> = (0..n).map(|i| self.y[i] - p[i] - nl * alpha[i]).collect();
        (a, self.kernel_mul(&r))
    }

    fn jitter(&self) -> f64 {
        let n = self.n();
        let trace: f64 = (0..n).map(|i| self.k[(i, i)]).sum();
        1e-10 * trace / n as f64
    }
}

/// Dense `A·x`.
pub fn mat_vec(a: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(a.col_as_slice(j)) {
            *o += v * xj;
        }
    }
    out
}

/// LU solve, rejected when the result is non-finite or its residual is poor
/// (the factorization's way of saying "near-singular").
fn solve_checked(a: &Mat<f64>, rhs: &[f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    let b = Mat::from_fn(n, 1, |i, _| rhs[i]);
    let sol = a.partial_piv_lu().solve(&b);
    let x: Vec<f64> = (0..n).map(|i| sol[(i, 0)]).collect();
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let ax = mat_vec(a, &x);
    let res = norm2(&ax.iter().zip(rhs).map(|(a, b)| a - b).collect::<Vec<_>>());
    (res <= SOLVE_RESIDUAL_TOL * norm2(rhs).max(f64::MIN_POSITIVE)).then_some(x)
}

/// Exact Newton with Armijo backtracking on the dense kernel.
pub fn train_exact(data: &Dataset, config: &TrainConfig) -> Result<BinaryModel> {
    train_exact_capped(data, config, DENSE_CAP)
}

pub fn train_exact_capped(data: &Dataset, config: &TrainConfig, cap: usize) -> Result<BinaryModel> {
    config.validate()?;
    if data.n() > cap {
        return Err(KlrError::DenseCapExceeded { n: data.n(), cap });
    }
    if data.n() < 2 {
        return Err(KlrError::Validation("training needs at least two samples".into()));
    }
    let y = binary_targets(data)?;
    let start = Instant::now();
    let k = exact_gram_capped(&config.kernel, data.x(), cap)?;
    let problem = DenseProblem::with_cap(k, y, config.lambda, cap)?;
    let n = problem.n();
    let params = config.armijo();

    let mut alpha = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
    let mut objective = problem.objective_at(&alpha, &z);
    let mut grad = problem.gradient_with(&alpha, &p);
    let mut grad_norm = norm2(&grad);
    let mut diag = TrainDiagnostics {
        objective_trace: vec![objective],
        grad_norm_trace: vec![grad_norm],
        setup_seconds: start.elapsed().as_secs_f64(),
        ..TrainDiagnostics::default()
    };

    while diag.iterations < config.t_max && grad_norm > config.eps {
        let it_start = Instant::now();
        let d = problem.exact_newton_direction(&alpha, &p)?;
        let dz = problem.kernel_mul(&d);
        let slope = dot(&grad, &d);
        let mut ta = vec![0.0; n];
        let mut tz = vec![0.0; n];
        let ls = backtrack(objective, slope, &params, |r| {
            for i in 0..n {
                ta[i] = alpha[i] + r * d[i];
                tz[i] = z[i] + r * dz[i];
            }
            problem.objective_at(&ta, &tz)
        });
        if !ls.objective.is_finite() {
            return Err(KlrError::Diverged(format!(
                "objective became {} at iteration {}",
                ls.objective,
                diag.iterations + 1
            )));
        }
        for i in 0..n {
            alpha[i] += ls.step * d[i];
            z[i] += ls.step * dz[i];
            p[i] = sigmoid(z[i]);
        }
        objective = ls.objective;
        grad = problem.gradient_with(&alpha, &p);
        grad_norm = norm2(&grad);

        diag.iterations += 1;
        diag.line_search_stalls += usize::from(ls.stalled);
        diag.objective_trace.push(objective);
        diag.grad_norm_trace.push(grad_norm);
        diag.step_trace.push(ls.step);
        diag.backtrack_trace.push(ls.backtracks);
        diag.iteration_seconds.push(it_start.elapsed().as_secs_f64());
    }
    diag.final_grad_norm = grad_norm;
    diag.converged = grad_norm <= config.eps;

    Ok(BinaryModel {
        solver: SolverKind::Exact,
        alpha,
        config: config.clone(),
        order: LevelOrder::new(vec![n])?,
        h: Vec::new(),
        column: Vec::new(),
        train: Arc::new(data.x().clone()),
        classes: data.meta().label_values.clone(),
        diagnostics: diag,
    })
}
