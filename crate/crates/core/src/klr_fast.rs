//! Fast Newton training of kernel logistic regression on a multilevel circulant
//! approximation of the kernel matrix.
//!
//! With `K_q` the circulant approximation, the solver minimizes
//!
//! ```text
//! F(α) = (λ/2) αᵀ K_q α − (1/n) Σ_i [y_i ln p_i + (1 − y_i) ln(1 − p_i)],   p = sigmoid(K_q α)
//! ```
//!
//! The Newton matrix `Λ K_q + nλ I` (with `Λ = diag(p(1 − p))`) is replaced by its best
//! circulant approximation `τ K_q + nλ I`, `τ = mean(Λ)`, so every direction is one
//! shifted circulant solve:
//!
//! ```text
//! d = (1/τ) (K_q + (nλ/τ) I)⁻¹ (y − p − nλ α)
//! ```
//!
//! followed by Armijo backtracking. When the sample count `m` is not a product of the
//! level order, vectors are padded to `N ≥ m` and a 0/1 mask keeps the padding out of
//! the data-fit term, `τ`, and the right-hand side; `n` above is then `m`.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::data_io::{Dataset, FeatureMatrix};
use crate::error::{KlrError, Result};
use crate::kernel::{construct_column, GridSpec, RadialKernel};
use crate::mcm::{MultilevelCirculant, SolveDiagnostic, SpectrumDiagnostic, Workspace};
use crate::tensor_fft::{LevelOrder, TransformCounts};

/// Probabilities are kept inside `[P_CLAMP, 1 − P_CLAMP]`.
pub const P_CLAMP: f64 = 1e-15;

/// How the level order and lattice steps are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum GridChoice {
    /// Smallest `levels`-level order covering the sample count. `h` holds either
    /// nothing (unit steps), one step for all levels, or one step per level.
    Auto { levels: usize, h: Vec<f64> },
    /// An explicit grid; its order must cover the sample count.
    Fixed(GridSpec),
}

impl Default for GridChoice {
    fn default() -> Self {
        GridChoice::Auto {
            levels: 3,
            h: Vec::new(),
        }
    }
}

impl GridChoice {
    pub fn resolve(&self, m: usize) -> Result<GridSpec> {
        match self {
            GridChoice::Auto { levels, h } => {
                let order = LevelOrder::covering(m, *levels)?;
                let steps = match h.len() {
                    0 => vec![1.0; *levels],
                    1 => vec![h[0]; *levels],
                    _ => h.clone(),
                };
                GridSpec::new(steps, order)
            }
            GridChoice::Fixed(grid) => {
                if grid.order().n() < m {
                    return Err(KlrError::InvalidParameter(format!(
                        "level order {} holds {} sites, fewer than {m} samples",
                        grid.order(),
                        grid.order().n()
                    )));
                }
                Ok(grid.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub kernel: RadialKernel,
    pub grid: GridChoice,
    pub t_max: usize,
    pub eps: f64,
    pub armijo_delta: f64,
    pub armijo_beta: f64,
    pub max_backtracks: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults: `T_max = 30`, `ε = 1e-5`, `δ = 0.5`, `β = 0.1`, 20 backtracks,
    /// automatic 3-level grid with unit steps.
    pub fn new(lambda: f64, kernel: RadialKernel) -> Self {
        Self {
            lambda,
            kernel,
            grid: GridChoice::default(),
            t_max: 30,
            eps: 1e-5,
            armijo_delta: 0.5,
            armijo_beta: 0.1,
            max_backtracks: 20,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(KlrError::InvalidParameter(msg));
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1".into());
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.armijo_delta > 0.0 && self.armijo_delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.armijo_delta));
        }
        if !(self.armijo_beta > 0.0 && self.armijo_beta < 0.5) {
            return bad(format!("beta must lie in (0, 0.5), got {}", self.armijo_beta));
        }
        if self.max_backtracks == 0 {
            return bad("max_backtracks must be at least 1".into());
        }
        if let GridChoice::Auto { levels, h } = &self.grid {
            if *levels == 0 {
                return bad("grid needs at least one level".into());
            }
            if h.len() > 1 && h.len() != *levels {
                return bad(format!("{} lattice steps for {levels} levels", h.len()));
            }
            if h.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return bad("lattice steps must be positive".into());
            }
        }
        Ok(())
    }

    pub fn armijo(&self) -> ArmijoParams {
        ArmijoParams {
            delta: self.armijo_delta,
            beta: self.armijo_beta,
            max_backtracks: self.max_backtracks,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoParams {
    pub delta: f64,
    pub beta: f64,
    pub max_backtracks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchOutcome {
    pub step: f64,
    pub backtracks: usize,
    pub objective: f64,
    pub stalled: bool,
}

/// Armijo backtracking: the first `r = δ^m`, `m = 0..=max_backtracks`, with
/// `F(α + r d) ≤ F(α) + β r ⟨∇F, d⟩`. When none qualifies the last trial is
/// returned with `stalled = true`; the search also stops early, stalled, once the
/// required decrease `β r |⟨∇F, d⟩|` is below the rounding noise of `F(α)`.
pub fn backtrack(
    f0: f64,
    slope: f64,
    params: &ArmijoParams,
    mut eval: impl FnMut(f64) -> f64,
) -> LineSearchOutcome {
    let mut step = 1.0;
    let mut objective = f64::NAN;
    for m in 0..=params.max_backtracks {
        objective = eval(step);
        if objective <= f0 + params.beta * step * slope {
            return LineSearchOutcome {
                step,
                backtracks: m,
                objective,
                stalled: false,
            };
        }
        // once the required decrease is below the rounding noise of F, shorter
        // steps cannot pass the test either
        let noise = 4.0 * f64::EPSILON * f0.abs();
        if (params.beta * step * slope).abs() <= noise {
            return LineSearchOutcome {
                step,
                backtracks: m,
                objective,
                stalled: true,
            };
        }
        if m < params.max_backtracks {
            step *= params.delta;
        }
    }
    LineSearchOutcome {
        step,
        backtracks: params.max_backtracks,
        objective,
        stalled: true,
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

/// `τ = (1/n_eff) Σ_{mask} p_i (1 − p_i)`.
pub fn tau(p: &[f64], mask: &[f64]) -> f64 {
    let (sum, n_eff) = p
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m != 0.0)
        .fold((0.0, 0.0), |(s, c), (&p, _)| (s + p * (1.0 - p), c + 1.0));
    sum / n_eff
}

/// Negative mean log-likelihood over the masked-in entries.
pub fn data_fit(z: &[f64], y: &[f64], mask: &[f64], n_eff: f64) -> f64 {
    let mut acc = 0.0;
    for ((&z, &y), &m) in z.iter().zip(y).zip(mask) {
        if m != 0.0 {
            let p = sigmoid(z);
            acc += y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
    }
    -acc / n_eff
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `‖Λ K_q − A‖_F²` for the circulant `A` with first column `a`, where `K_q` has first
/// column `k` and `Λ = diag(weights)`. Every row of a multilevel circulant holds each
/// column entry exactly once, so this is `Σ_i Σ_j (Λ_ii k_j − a_j)²`.
pub fn frobenius_gap(weights: &[f64], k: &[f64], a: &[f64]) -> f64 {
    weights
        .iter()
        .map(|&w| k.iter().zip(a).map(|(&kj, &aj)| (w * kj - aj).powi(2)).sum::<f64>())
        .sum()
}

/// The minimizer of [`frobenius_gap`] over `a`: `mean(weights) · k`.
pub fn best_circulant_column(weights: &[f64], k: &[f64]) -> Vec<f64> {
    let tau = weights.iter().sum::<f64>() / weights.len() as f64;
    k.iter().map(|v| tau * v).collect()
}

/// The approximate objective on one circulant kernel with fixed labels and mask.
#[derive(Debug, Clone, Copy)]
pub struct FastProblem<'a> {
    mcm: &'a MultilevelCirculant,
    y: &'a [f64],
    mask: &'a [f64],
    lambda: f64,
    n_eff: f64,
}

impl<'a> FastProblem<'a> {
    pub fn new(mcm: &'a MultilevelCirculant, y: &'a [f64], mask: &'a [f64], lambda: f64) -> Result<Self> {
        let n = mcm.n();
        if y.len() != n || mask.len() != n {
            return Err(KlrError::Dimension(format!(
                "labels ({}) and mask ({}) must have the matrix size {n}",
                y.len(),
                mask.len()
            )));
        }
        let n_eff = mask.iter().filter(|&&m| m != 0.0).count();
        if n_eff == 0 {
            return Err(KlrError::Validation("mask selects no samples".into()));
        }
        Ok(Self {
            mcm,
            y,
            mask,
            lambda,
            n_eff: n_eff as f64,
        })
    }

    pub fn n_eff(&self) -> f64 {
        self.n_eff
    }

    pub fn mcm(&self) -> &MultilevelCirculant {
        self.mcm
    }

    /// `(z, p)` with `z = K_q α`, `p = sigmoid(z)`.
    pub fn probabilities(&self, ws: &mut Workspace, alpha: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut z = vec![0.0; self.mcm.n()];
        self.mcm.matvec_into(ws, alpha, &mut z)?;
        let p = z.iter().map(|&v| sigmoid(v)).collect();
        Ok((z, p))
    }

    pub fn objective(&self, ws: &mut Workspace, alpha: &[f64]) -> Result<f64> {
        let mut z = vec![0.0; self.mcm.n()];
        self.mcm.matvec_into(ws, alpha, &mut z)?;
        Ok(self.objective_at(alpha, &z))
    }

    /// Objective given a precomputed `z = K_q α`; O(N).
    pub fn objective_at(&self, alpha: &[f64], z: &[f64]) -> f64 {
        0.5 * self.lambda * dot(alpha, z) + data_fit(z, self.y, self.mask, self.n_eff)
    }

    /// `∇F = K_q (λα − (1/n) mask∘(y − p))`; one product.
    pub fn gradient(&self, ws: &mut Workspace, alpha: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        let inner: Vec<f64> = alpha
            .iter()
            .zip(p)
            .zip(self.y.iter().zip(self.mask))
            .map(|((&a, &p), (&y, &m))| self.lambda * a - m * (y - p) / self.n_eff)
            .collect();
        let mut g = vec![0.0; self.mcm.n()];
        self.mcm.matvec_into(ws, &inner, &mut g)?;
        Ok(g)
    }

    pub fn tau(&self, p: &[f64]) -> f64 {
        tau(p, self.mask)
    }

    /// Circulant Newton direction: one forward transform, a diagonal solve and one
    /// adjoint transform.
    pub fn newton_direction(
        &self,
        ws: &mut Workspace,
        alpha: &[f64],
        p: &[f64],
    ) -> Result<(Vec<f64>, SolveDiagnostic)> {
        let tau = self.tau(p);
        let n_lambda = self.n_eff * self.lambda;
        let eta: Vec<f64> = alpha
            .iter()
            .zip(p)
            .zip(self.y.iter().zip(self.mask))
            .map(|((&a, &p), (&y, &m))| (m * (y - p) - n_lambda * a) / tau)
            .collect();
        let mut d = vec![0.0; self.mcm.n()];
        let diag = self.mcm.solve_shifted_into(ws, n_lambda / tau, &eta, &mut d)?;
        Ok((d, diag))
    }

    /// Armijo search along `direction` from `alpha`, where `z = K_q α`.
    ///
    /// Computes `Δz = K_q d` once, so every trial is O(N). Returns the outcome and `Δz`.
    #[allow(clippy::too_many_arguments)]
    pub fn armijo_search(
        &self,
        ws: &mut Workspace,
        alpha: &[f64],
        z: &[f64],
        objective: f64,
        grad: &[f64],
        direction: &[f64],
        params: &ArmijoParams,
    ) -> Result<(LineSearchOutcome, Vec<f64>)> {
        let mut dz = vec![0.0; self.mcm.n()];
        self.mcm.matvec_into(ws, direction, &mut dz)?;
        let slope = dot(grad, direction);
        let mut trial_a = vec![0.0; alpha.len()];
        let mut trial_z = vec![0.0; z.len()];
        let outcome = backtrack(objective, slope, params, |r| {
            for ((t, &a), &d) in trial_a.iter_mut().zip(alpha).zip(direction) {
                *t = a + r * d;
            }
            for ((t, &z), &dz) in trial_z.iter_mut().zip(z).zip(&dz) {
                *t = z + r * dz;
            }
            self.objective_at(&trial_a, &trial_z)
        });
        Ok((outcome, dz))
    }
}

/// Which solver produced a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Mcm,
    Exact,
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Mcm => "mcm",
            SolverKind::Exact => "exact",
        }
    }
}

/// Per-run record of the Newton loop. Traces start with the value at `α₀`, so the
/// objective and gradient-norm traces have `iterations + 1` entries and the step
/// trace has `iterations`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub final_grad_norm: f64,
    pub objective_trace: Vec<f64>,
    pub grad_norm_trace: Vec<f64>,
    pub step_trace: Vec<f64>,
    pub backtrack_trace: Vec<usize>,
    pub line_search_stalls: usize,
    pub clamp_count: usize,
    /// Relative imaginary residue of the circulant spectrum (0 for the exact solver).
    pub spectrum_imag: f64,
    pub transforms: TransformCounts,
    pub setup_seconds: f64,
    pub iteration_seconds: Vec<f64>,
}

impl TrainDiagnostics {
    pub fn train_seconds(&self) -> f64 {
        self.setup_seconds + self.iteration_seconds.iter().sum::<f64>()
    }
}

/// A trained binary classifier: coefficients over the training points.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryModel {
    pub solver: SolverKind,
    /// Length `N`; entries past `n_train` belong to padding.
    pub alpha: Vec<f64>,
    pub config: TrainConfig,
    pub order: LevelOrder,
    pub h: Vec<f64>,
    /// Circulant first column (empty for the exact solver).
    pub column: Vec<f64>,
    pub train: Arc<FeatureMatrix>,
    /// Original label values of classes 0 and 1.
    pub classes: Vec<f64>,
    pub diagnostics: TrainDiagnostics,
}

impl BinaryModel {
    pub fn n_train(&self) -> usize {
        self.train.rows()
    }

    pub fn d(&self) -> usize {
        self.train.cols()
    }

    /// Kernel expansion `Σ_j α_j g(‖x − x_j‖)` over the unpadded training points.
    pub fn margins(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        check_dim(self.d(), x)?;
        let alphas = [&self.alpha[..self.n_train()]];
        let out = kernel_expansion(&self.config.kernel, &self.train, &alphas, x);
        Ok(out.into_iter().map(|v| v[0]).collect())
    }

    /// Scores `sigmoid(margin)` in `(0, 1)`.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self.margins(x)?.into_iter().map(sigmoid).collect())
    }

    /// Class 1 iff the score is at least 0.5.
    pub fn predict_class(&self, x: &FeatureMatrix) -> Result<Vec<usize>> {
        Ok(self
            .predict(x)?
            .into_iter()
            .map(|s| usize::from(s >= 0.5))
            .collect())
    }
}

pub(crate) fn check_dim(d: usize, x: &FeatureMatrix) -> Result<()> {
    if x.cols() != d {
        return Err(KlrError::Dimension(format!(
            "model expects {d} features, data has {}",
            x.cols()
        )));
    }
    Ok(())
}

const SCORE_BLOCK: usize = 64;

/// For every query row, `Σ_j alphas[c][j] g(‖x − x_j‖)` for each coefficient vector `c`.
/// Kernel rows are computed once per query and shared by all vectors.
pub(crate) fn kernel_expansion(
    kernel: &RadialKernel,
    train: &FeatureMatrix,
    alphas: &[&[f64]],
    queries: &FeatureMatrix,
) -> Vec<Vec<f64>> {
    let m = train.rows();
    let mut out = vec![vec![0.0; alphas.len()]; queries.rows()];
    out.par_chunks_mut(SCORE_BLOCK)
        .enumerate()
        .for_each(|(b, chunk)| {
            let mut row = vec![0.0; m];
            for (r, acc) in chunk.iter_mut().enumerate() {
                crate::kernel::gram_block(kernel, queries, b * SCORE_BLOCK + r, train, &mut row);
                for (slot, a) in acc.iter_mut().zip(alphas) {
                    *slot = dot(a, &row);
                }
            }
        });
    out
}

/// Level order, lattice and circulant kernel for a given sample count. Independent of
/// labels, so one-vs-all training shares it across classes.
#[derive(Debug, Clone)]
pub struct PreparedKernel {
    pub grid: GridSpec,
    pub mcm: MultilevelCirculant,
    pub setup_seconds: f64,
}

impl PreparedKernel {
    pub fn new(m: usize, config: &TrainConfig) -> Result<Self> {
        let start = Instant::now();
        let grid = config.grid.resolve(m)?;
        let column = construct_column(&config.kernel, &grid);
        let mcm = MultilevelCirculant::from_first_column(column, grid.order())?;
        Ok(Self {
            grid,
            mcm,
            setup_seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn order(&self) -> &LevelOrder {
        self.grid.order()
    }
}

pub(crate) fn binary_targets(data: &Dataset) -> Result<Vec<f64>> {
    if data.n_classes() != 2 {
        return Err(KlrError::Validation(format!(
            "binary training needs exactly two label values, found {}",
            data.n_classes()
        )));
    }
    Ok(data.y().iter().map(|&c| c as f64).collect())
}

/// Trains a binary model with the fast circulant Newton method.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<BinaryModel> {
    config.validate()?;
    if data.n() < 2 {
        return Err(KlrError::Validation("training needs at least two samples".into()));
    }
    let y = binary_targets(data)?;
    let prepared = PreparedKernel::new(data.n(), config)?;
    train_prepared(
        &prepared,
        Arc::new(data.x().clone()),
        &y,
        data.meta().label_values.clone(),
        config,
    )
}

/// Runs the Newton loop on a prepared kernel. `y` holds 0/1 targets for the `m`
/// training rows.
pub fn train_prepared(
    prepared: &PreparedKernel,
    train_x: Arc<FeatureMatrix>,
    y: &[f64],
    classes: Vec<f64>,
    config: &TrainConfig,
) -> Result<BinaryModel> {
    config.validate()?;
    let m = train_x.rows();
    if y.len() != m {
        return Err(KlrError::Dimension(format!("{} targets for {m} samples", y.len())));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(KlrError::Validation("targets must be 0 or 1".into()));
    }
    let start = Instant::now();
    let mcm = &prepared.mcm;
    let n = mcm.n();
    if n < m {
        return Err(KlrError::Dimension(format!(
            "kernel of size {n} cannot hold {m} samples"
        )));
    }
    let mut y_pad = vec![0.0; n];
    y_pad[..m].copy_from_slice(y);
    let mut mask = vec![0.0; n];
    mask[..m].iter_mut().for_each(|v| *v = 1.0);

    let problem = FastProblem::new(mcm, &y_pad, &mask, config.lambda)?;
    let params = config.armijo();
    let mut ws = Workspace::new(mcm.order());
    // the eigenvalue transform done at construction
    let transforms_before = TransformCounts {
        forward: 1,
        adjoint: 0,
    };

    let mut alpha = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
    let mut objective = problem.objective_at(&alpha, &z);
    let mut grad = problem.gradient(&mut ws, &alpha, &p)?;
    let mut grad_norm = norm2(&grad);

    let spectrum: SpectrumDiagnostic = mcm.spectrum();
    let mut diag = TrainDiagnostics {
        objective_trace: vec![objective],
        grad_norm_trace: vec![grad_norm],
        spectrum_imag: spectrum.relative_imag(),
        setup_seconds: prepared.setup_seconds + start.elapsed().as_secs_f64(),
        ..TrainDiagnostics::default()
    };

    while diag.iterations < config.t_max && grad_norm > config.eps {
        let it_start = Instant::now();
        let (direction, solve) = problem.newton_direction(&mut ws, &alpha, &p)?;
        diag.clamp_count += solve.clamped;
        let (ls, dz) =
            problem.armijo_search(&mut ws, &alpha, &z, objective, &grad, &direction, &params)?;
        if !ls.objective.is_finite() {
            return Err(KlrError::Diverged(format!(
                "objective became {} at iteration {}",
                ls.objective,
                diag.iterations + 1
            )));
        }
        for (a, d) in alpha.iter_mut().zip(&direction) {
            *a += ls.step * d;
        }
        for (zi, dzi) in z.iter_mut().zip(&dz) {
            *zi += ls.step * dzi;
        }
        for (pi, &zi) in p.iter_mut().zip(&z) {
            *pi = sigmoid(zi);
        }
        objective = ls.objective;
        grad = problem.gradient(&mut ws, &alpha, &p)?;
        grad_norm = norm2(&grad);
        if !grad_norm.is_finite() {
            return Err(KlrError::Diverged(format!(
                "gradient became non-finite at iteration {}",
                diag.iterations + 1
            )));
        }

        diag.iterations += 1;
        diag.line_search_stalls += usize::from(ls.stalled);
        diag.objective_trace.push(objective);
        diag.grad_norm_trace.push(grad_norm);
        diag.step_trace.push(ls.step);
        diag.backtrack_trace.push(ls.backtracks);
        diag.iteration_seconds.push(it_start.elapsed().as_secs_f64());
    }

    let counts = ws.counts();
    diag.transforms = TransformCounts {
        forward: counts.forward + transforms_before.forward,
        adjoint: counts.adjoint + transforms_before.adjoint,
    };
    diag.final_grad_norm = grad_norm;
    diag.converged = grad_norm <= config.eps;

    Ok(BinaryModel {
        solver: SolverKind::Mcm,
        alpha,
        config: config.clone(),
        order: prepared.order().clone(),
        h: prepared.grid.h().to_vec(),
        column: mcm.column().to_vec(),
        train: train_x,
        classes,
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::FeatureMatrix;
    use faer::linalg::solvers::Solve;
    use faer::Mat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(
        rng: &mut ChaCha8Rng,
        dims: Vec<usize>,
        sigma: f64,
    ) -> (MultilevelCirculant, Vec<f64>, Vec<f64>, Vec<f64>) {
        let order = LevelOrder::new(dims).unwrap();
        let grid = GridSpec::unit(order.clone());
        let col = construct_column(&RadialKernel::gaussian(sigma).unwrap(), &grid);
        let mcm = MultilevelCirculant::from_first_column(col, &order).unwrap();
        let n = order.n();
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
        let mut mask = vec![1.0; n];
        // pad the last quarter
        for v in mask.iter_mut().skip(n - n / 4) {
            *v = 0.0;
        }
        let y: Vec<f64> = y.iter().zip(&mask).map(|(a, b)| a * b).collect();
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        (mcm, y, mask, alpha)
    }

    fn dense_mul(m: &Mat<f64>, x: &[f64]) -> Vec<f64> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum())
            .collect()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        num / norm2(b).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn zero_alpha_gives_half_and_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mcm, y, mask, _) = random_problem(&mut rng, vec![4, 4], 0.5);
        let prob = FastProblem::new(&mcm, &y, &mask, 0.1).unwrap();
        let mut ws = Workspace::new(mcm.order());
        let alpha = vec![0.0; 16];
        let (z, p) = prob.probabilities(&mut ws, &alpha).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(p.iter().all(|&v| v == 0.5));
        let f = prob.objective(&mut ws, &alpha).unwrap();
        assert!((f - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(prob.tau(&p), 0.25);
    }

    #[test]
    fn probability_clamp() {
        assert_eq!(sigmoid(40.0), 1.0 - P_CLAMP);
        assert_eq!(sigmoid(-800.0), P_CLAMP);
        assert!(sigmoid(1e300).is_finite());
        let p = [0.5, 0.5, 0.9, 0.9];
        assert!((tau(&p, &[1.0; 4]) - 0.17).abs() < 1e-15);
        let sat = [P_CLAMP, 1.0 - P_CLAMP];
        let t = tau(&sat, &[1.0, 1.0]);
        assert!(t > 0.0 && t < 1e-14);
    }

    #[test]
    fn probabilities_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mcm, y, mask, alpha) = random_problem(&mut rng, vec![3, 4], 0.3);
        let dense = mcm.to_dense().unwrap();
        let prob = FastProblem::new(&mcm, &y, &mask, 0.05).unwrap();
        let mut ws = Workspace::new(mcm.order());
        let (_, p) = prob.probabilities(&mut ws, &alpha).unwrap();
        let zd = dense_mul(&dense, &alpha);
        for (a, &zb) in p.iter().zip(&zd) {
            assert!((a - sigmoid(zb)).abs() <= 1e-12);
        }
        // objective against a dense evaluation
        let f = prob.objective(&mut ws, &alpha).unwrap();
        let n_eff = mask.iter().sum::<f64>();
        let mut fit = 0.0;
        for i in 0..12 {
            if mask[i] == 1.0 {
                let pi = sigmoid(zd[i]);
                fit += y[i] * pi.ln() + (1.0 - y[i]) * (1.0 - pi).ln();
            }
        }
        let fd = 0.5 * 0.05 * dot(&alpha, &zd) - fit / n_eff;
        assert!((f - fd).abs() <= 1e-12 * fd.abs().max(1.0));
    }

    #[test]
    fn gradient_at_zero_and_mask_annihilation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mcm, y, mask, _) = random_problem(&mut rng, vec![8], 0.7);
        let prob = FastProblem::new(&mcm, &y, &mask, 0.0).unwrap();
        let mut ws = Workspace::new(mcm.order());
        let alpha = vec![0.0; 8];
        let p = vec![0.5; 8];
        let g = prob.gradient(&mut ws, &alpha, &p).unwrap();
        let n_eff = 6.0;
        let inner: Vec<f64> = (0..8).map(|i| -mask[i] * (y[i] - 0.5) / n_eff).collect();
        assert!(inner[6] == 0.0 && inner[7] == 0.0);
        let expect = mcm.matvec(&inner).unwrap();
        assert!(rel(&g, &expect) < 1e-14);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let dims = match trial % 3 {
                0 => vec![16],
                1 => vec![4, 4],
                _ => vec![2, 3, 4],
            };
            let (mcm, y, mask, alpha) = random_problem(&mut rng, dims, 0.2 + 0.1 * trial as f64);
            let alpha: Vec<f64> = alpha.iter().map(|a| a * 0.3).collect();
            let lambda = 0.01 + 0.01 * trial as f64;
            let prob = FastProblem::new(&mcm, &y, &mask, lambda).unwrap();
            let mut ws = Workspace::new(mcm.order());
            let (_, p) = prob.probabilities(&mut ws, &alpha).unwrap();
            let g = prob.gradient(&mut ws, &alpha, &p).unwrap();
            let h = 1e-5;
            let fd: Vec<f64> = (0..alpha.len())
                .map(|i| {
                    let mut a = alpha.clone();
                    a[i] += h;
                    let fp = prob.objective(&mut ws, &a).unwrap();
                    a[i] -= 2.0 * h;
                    let fm = prob.objective(&mut ws, &a).unwrap();
                    (fp - fm) / (2.0 * h)
                })
                .collect();
            assert!(rel(&g, &fd) <= 1e-5, "trial {trial}: {}", rel(&g, &fd));
        }
    }

    #[test]
    fn direction_on_identity() {
        let order = LevelOrder::new(vec![6]).unwrap();
        let id = MultilevelCirculant::identity(&order);
        let y = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let mask = vec![1.0; 6];
        let prob = FastProblem::new(&id, &y, &mask, 1.0 / 6.0).unwrap();
        let mut ws = Workspace::new(&order);
        let (d, diag) = prob.newton_direction(&mut ws, &[0.0; 6], &[0.5; 6]).unwrap();
        assert_eq!(diag.clamped, 0);
        for (di, yi) in d.iter().zip(&y) {
            assert!((di - 0.8 * (yi - 0.5)).abs() < 1e-14);
        }
        // y = p, alpha = 0 gives a zero right-hand side
        let p = vec![0.3; 6];
        let yp = vec![0.3; 6];
        let prob = FastProblem::new(&id, &yp, &mask, 0.2).unwrap();
        let (d, _) = prob.newton_direction(&mut ws, &[0.0; 6], &p).unwrap();
        assert!(d.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn direction_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dims in [vec![5, 5], vec![4, 4, 4], vec![16, 16]] {
            let (mcm, y, mask, alpha) = random_problem(&mut rng, dims, 0.25);
            let alpha: Vec<f64> = alpha.iter().map(|a| a * 0.2).collect();
            let lambda = 0.003;
            let prob = FastProblem::new(&mcm, &y, &mask, lambda).unwrap();
            let mut ws = Workspace::new(mcm.order());
            let (_, p) = prob.probabilities(&mut ws, &alpha).unwrap();
            let (d, diag) = prob.newton_direction(&mut ws, &alpha, &p).unwrap();
            assert_eq!(diag.clamped, 0);
            let n = mcm.n();
            let n_eff = prob.n_eff();
            let t = prob.tau(&p);
            let mut a = mcm.to_dense().unwrap();
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] *= t;
                }
                a[(i, i)] += n_eff * lambda;
            }
            let rhs = Mat::from_fn(n, 1, |i, _| mask[i] * (y[i] - p[i]) - n_eff * lambda * alpha[i]);
            let sol = a.partial_piv_lu().solve(&rhs);
            let expect: Vec<f64> = (0..n).map(|i| sol[(i, 0)]).collect();
            assert!(rel(&d, &expect) <= 1e-8);
        }
    }

    #[test]
    fn line_search_cases() {
        let params = ArmijoParams {
            delta: 0.5,
            beta: 0.1,
            max_backtracks: 20,
        };
        // zero direction: F is flat, condition holds immediately
        let out = backtrack(1.0, 0.0, &params, |_| 1.0);
        assert_eq!((out.step, out.backtracks, out.stalled), (1.0, 0, false));
        // quadratic f(x) = x², x = 1, Newton step d = -1 lands on the minimum
        let out = backtrack(1.0, -2.0, &params, |r| (1.0 - r).powi(2));
        assert_eq!(out.step, 1.0);
        // never satisfiable
        let out = backtrack(0.0, -1.0, &params, |_| 1.0);
        assert!(out.stalled);
        assert_eq!(out.backtracks, 20);
        assert_eq!(out.step, 0.5f64.powi(20));
        // the required decrease is already below rounding: give up at once
        let out = backtrack(1.0, -1e-17, &params, |_| 1.0 + 1e-15);
        assert_eq!((out.backtracks, out.stalled), (0, true));
    }

    #[test]
    fn overshooting_direction_backtracks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // σ = 2 keeps the circulant positive definite; wider kernels on a coarse
        // lattice can make it indefinite and the objective unbounded below
        let (mcm, y, mask, _) = random_problem(&mut rng, vec![4, 4], 2.0);
        assert!(mcm.eigenvalues().iter().all(|&v| v > 0.0));
        let prob = FastProblem::new(&mcm, &y, &mask, 0.01).unwrap();
        let mut ws = Workspace::new(mcm.order());
        let alpha = vec![0.0; 16];
        let (z, p) = prob.probabilities(&mut ws, &alpha).unwrap();
        let f0 = prob.objective_at(&alpha, &z);
        let g = prob.gradient(&mut ws, &alpha, &p).unwrap();
        let (d, _) = prob.newton_direction(&mut ws, &alpha, &p).unwrap();
        let big: Vec<f64> = d.iter().map(|v| v * 100.0).collect();
        let params = ArmijoParams {
            delta: 0.5,
            beta: 0.1,
            max_backtracks: 20,
        };
        let (out, _) = prob.armijo_search(&mut ws, &alpha, &z, f0, &g, &big, &params).unwrap();
        assert!(out.backtracks > 0 && out.step < 1.0);
        assert!(out.objective < f0);
        assert!(!out.stalled);
    }

    #[test]
    fn frobenius_gap_matches_dense_and_is_minimized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mcm, ..) = random_problem(&mut rng, vec![2, 4], 1.5);
        let n = mcm.n();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.25)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kd = mcm.to_dense().unwrap();
        let ad = MultilevelCirculant::from_first_column(a.clone(), mcm.order())
            .unwrap()
            .to_dense()
            .unwrap();
        let mut dense = 0.0;
        for i in 0..n {
            for j in 0..n {
                dense += (w[i] * kd[(i, j)] - ad[(i, j)]).powi(2);
            }
        }
        let gap = frobenius_gap(&w, mcm.column(), &a);
        assert!((gap - dense).abs() <= 1e-12 * dense);
        let best = best_circulant_column(&w, mcm.column());
        let f_best = frobenius_gap(&w, mcm.column(), &best);
        for j in 0..n {
            for eps in [1e-4, -1e-4] {
                let mut b = best.clone();
                b[j] += eps;
                assert!(frobenius_gap(&w, mcm.column(), &b) > f_best);
            }
        }
    }

    fn two_point() -> Dataset {
        let x = FeatureMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        Dataset::with_class_indices(x, vec![0, 1], "two").unwrap()
    }

    #[test]
    fn separable_two_points() {
        let cfg = TrainConfig::new(1e-2, RadialKernel::gaussian(1.0).unwrap());
        let model = train(&two_point(), &cfg).unwrap();
        let d = &model.diagnostics;
        assert!(d.converged, "{d:?}");
        assert!(d.final_grad_norm <= 1e-5);
        assert!(d.iterations <= 10);
        assert_eq!(model.predict_class(model.train.as_ref()).unwrap(), vec![0, 1]);
        for w in d.objective_trace.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn transform_counts_per_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random(), rng.random()]).collect();
        let y: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let ds = Dataset::with_class_indices(FeatureMatrix::from_rows(&rows).unwrap(), y, "r").unwrap();
        let mut cfg = TrainConfig::new(1e-3, RadialKernel::gaussian(0.5).unwrap());
        cfg.eps = 1e-300;
        cfg.t_max = 4;
        let model = train(&ds, &cfg).unwrap();
        let t = model.diagnostics.iterations as u64;
        assert_eq!(t, 4);
        assert_eq!(
            model.diagnostics.transforms,
            TransformCounts {
                forward: 2 + 3 * t,
                adjoint: 1 + 3 * t
            }
        );
    }

    #[test]
    fn training_rejects_bad_input() {
        let cfg = TrainConfig::new(1e-2, RadialKernel::gaussian(1.0).unwrap());
        let x = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let three = Dataset::with_class_indices(x, vec![0, 1, 2], "t").unwrap();
        assert!(matches!(train(&three, &cfg), Err(KlrError::Validation(_))));
        let mut bad = cfg.clone();
        bad.armijo_beta = 0.7;
        assert!(train(&two_point(), &bad).is_err());
        bad = cfg.clone();
        bad.armijo_delta = 1.0;
        assert!(bad.validate().is_err());
        bad = cfg;
        bad.lambda = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_alpha_scores_half() {
        let mut model = train(&two_point(), &TrainConfig::new(1e-2, RadialKernel::gaussian(1.0).unwrap())).unwrap();
        model.alpha.iter_mut().for_each(|a| *a = 0.0);
        let q = FeatureMatrix::from_rows(&[vec![0.3, 9.0], vec![-4.0, 2.0]]).unwrap();
        assert_eq!(model.predict(&q).unwrap(), vec![0.5, 0.5]);
        let wrong = FeatureMatrix::from_rows(&[vec![0.3]]).unwrap();
        assert!(matches!(model.predict(&wrong), Err(KlrError::Dimension(_))));
    }

    #[test]
    fn predict_matches_dense_scoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random(), rng.random(), rng.random()]).collect();
        let y: Vec<usize> = rows.iter().map(|r| usize::from(r[0] > 0.5)).collect();
        let ds = Dataset::with_class_indices(FeatureMatrix::from_rows(&rows).unwrap(), y, "r").unwrap();
        let cfg = TrainConfig::new(1e-3, RadialKernel::gaussian(4.0).unwrap());
        let model = train(&ds, &cfg).unwrap();
        let q: Vec<Vec<f64>> = (0..7).map(|_| vec![rng.random(), rng.random(), rng.random()]).collect();
        let qm = FeatureMatrix::from_rows(&q).unwrap();
        let got = model.predict(&qm).unwrap();
        for (qi, s) in q.iter().zip(&got) {
            let mut acc = 0.0;
            for (j, r) in rows.iter().enumerate() {
                let d2: f64 = r.iter().zip(qi).map(|(a, b)| (a - b).powi(2)).sum();
                acc += model.alpha[j] * (-4.0 * d2).exp();
            }
            assert!((s - sigmoid(acc)).abs() <= 1e-12);
        }
    }

    #[test]
    fn saturated_model_scores_near_one() {
        let mut model = train(&two_point(), &TrainConfig::new(1e-2, RadialKernel::gaussian(1.0).unwrap())).unwrap();
        model.alpha = vec![0.0, 1e3];
        let s = model.predict(&FeatureMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        assert!(s[0] > 1.0 - 1e-12);
    }
}
