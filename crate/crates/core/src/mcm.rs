//! Multilevel circulant matrices.
//!
//! A q-level circulant matrix of level order `[n0, ..., n_{q-1}]` is determined by its
//! first column `k`: the entry at multilevel position `(i, j)` is
//! `k[(i_s - j_s mod n_s)_s]`. It is diagonalized by the tensor DFT,
//! `K = (1/n) φ* diag(φk) φ`, so products and shifted inverses cost one forward and
//! one adjoint transform.
//!
//! Only the first column and the real eigenvalue vector are stored. Columns that are
//! multilevel-symmetric (`k(i) = k(-i)`) have real spectra; for anything else the
//! discarded imaginary part is reported by [`MultilevelCirculant::spectrum`].

use faer::Mat;
use rustfft::num_complex::Complex64;

use crate::error::{KlrError, Result};
use crate::tensor_fft::{FftPlan, LevelOrder, TransformCounts};

/// Default size limit for dense materialization.
pub const DENSE_CAP: usize = 4096;

/// Relative imaginary residue above which a spectrum is flagged as non-symmetric.
pub const SYMMETRY_THRESHOLD: f64 = 1e-8;

/// Relative floor for `|v_j + shift|` in [`MultilevelCirculant::solve_shifted`].
pub const CLAMP_FLOOR: f64 = 1e-12;

/// What was discarded when the eigenvalues were truncated to their real part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumDiagnostic {
    pub max_imag: f64,
    pub max_abs: f64,
}

impl SpectrumDiagnostic {
    /// Whether the imaginary residue is within [`SYMMETRY_THRESHOLD`] of the spectrum scale.
    pub fn is_real(&self) -> bool {
        self.max_imag <= SYMMETRY_THRESHOLD * self.max_abs.max(f64::MIN_POSITIVE)
    }

    pub fn relative_imag(&self) -> f64 {
        if self.max_abs > 0.0 {
            self.max_imag / self.max_abs
        } else {
            self.max_imag
        }
    }
}

/// Number of denominators clamped during a shifted solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveDiagnostic {
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultilevelCirculant {
    order: LevelOrder,
    column: Vec<f64>,
    eigenvalues: Vec<f64>,
    spectrum: SpectrumDiagnostic,
}

impl MultilevelCirculant {
    pub fn from_first_column(column: Vec<f64>, order: &LevelOrder) -> Result<Self> {
        let mut plan = FftPlan::new(order);
        Self::from_first_column_with(column, &mut plan)
    }

    /// Like [`MultilevelCirculant::from_first_column`] but reuses a caller's plan.
    pub fn from_first_column_with(column: Vec<f64>, plan: &mut FftPlan) -> Result<Self> {
        let order = plan.order().clone();
        if column.len() != order.n() {
            return Err(KlrError::Dimension(format!(
                "first column has length {}, level order {order} needs {}",
                column.len(),
                order.n()
            )));
        }
        let mut spec: Vec<Complex64> = column.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        plan.forward(&mut spec)?;
        let mut max_imag = 0.0f64;
        let mut max_abs = 0.0f64;
        let eigenvalues = spec
            .iter()
            .map(|z| {
                max_imag = max_imag.max(z.im.abs());
                max_abs = max_abs.max(z.re.abs());
                z.re
            })
            .collect();
        Ok(Self {
            order,
            column,
            eigenvalues,
            spectrum: SpectrumDiagnostic { max_imag, max_abs },
        })
    }

    /// The all-zero matrix.
    pub fn zeros(order: &LevelOrder) -> Self {
        Self {
            order: order.clone(),
            column: vec![0.0; order.n()],
            eigenvalues: vec![0.0; order.n()],
            spectrum: SpectrumDiagnostic {
                max_imag: 0.0,
                max_abs: 0.0,
            },
        }
    }

    /// The identity, first column `e0`.
    pub fn identity(order: &LevelOrder) -> Self {
        let mut column = vec![0.0; order.n()];
        column[0] = 1.0;
        Self {
            order: order.clone(),
            column,
            eigenvalues: vec![1.0; order.n()],
            spectrum: SpectrumDiagnostic {
                max_imag: 0.0,
                max_abs: 1.0,
            },
        }
    }

    pub fn order(&self) -> &LevelOrder {
        &self.order
    }

    pub fn n(&self) -> usize {
        self.order.n()
    }

    pub fn column(&self) -> &[f64] {
        &self.column
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn spectrum(&self) -> SpectrumDiagnostic {
        self.spectrum
    }

    /// Number of `f64` values held: the first column plus the eigenvalues.
    pub fn payload_len(&self) -> usize {
        self.column.len() + self.eigenvalues.len()
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut ws = Workspace::new(&self.order);
        let mut out = vec![0.0; self.n()];
        self.matvec_into(&mut ws, x, &mut out)?;
        Ok(out)
    }

    /// `out ← K·x` via one forward and one adjoint transform.
    pub fn matvec_into(&self, ws: &mut Workspace, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_vec(x.len(), "matvec input")?;
        self.check_vec(out.len(), "matvec output")?;
        ws.load(x);
        ws.plan.forward(&mut ws.buf)?;
        for (z, &v) in ws.buf.iter_mut().zip(&self.eigenvalues) {
            *z *= v;
        }
        ws.plan.adjoint(&mut ws.buf)?;
        ws.store(out);
        Ok(())
    }

    pub fn solve_shifted(&self, shift: f64, b: &[f64]) -> Result<(Vec<f64>, SolveDiagnostic)> {
        let mut ws = Workspace::new(&self.order);
        let mut out = vec![0.0; self.n()];
        let diag = self.solve_shifted_into(&mut ws, shift, b, &mut out)?;
        Ok((out, diag))
    }

    /// `out ← (K + shift·I)⁻¹ b`.
    ///
    /// Denominators with `|v_j + shift| < 1e-12·(max|v| + shift)` are clamped to that
    /// floor (keeping their sign) and counted in the returned diagnostic.
    pub fn solve_shifted_into(
        &self,
        ws: &mut Workspace,
        shift: f64,
        b: &[f64],
        out: &mut [f64],
    ) -> Result<SolveDiagnostic> {
        if !(shift > 0.0) || !shift.is_finite() {
            return Err(KlrError::InvalidParameter(format!(
                "shift must be positive and finite, got {shift}"
            )));
        }
        self.check_vec(b.len(), "solve right-hand side")?;
        self.check_vec(out.len(), "solve output")?;
        let floor = CLAMP_FLOOR * (self.spectrum.max_abs + shift);
        let mut clamped = 0;
        ws.load(b);
        ws.plan.forward(&mut ws.buf)?;
        for (z, &v) in ws.buf.iter_mut().zip(&self.eigenvalues) {
            let mut den = v + shift;
            if den.abs() < floor {
                den = if den < 0.0 { -floor } else { floor };
                clamped += 1;
            }
            *z /= den;
        }
        ws.plan.adjoint(&mut ws.buf)?;
        ws.store(out);
        Ok(SolveDiagnostic { clamped })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.order != other.order {
            return Err(KlrError::Dimension(format!(
                "cannot add level orders {} and {}",
                self.order, other.order
            )));
        }
        let column = self.column.iter().zip(&other.column).map(|(a, b)| a + b).collect();
        let eigenvalues: Vec<f64> = self
            .eigenvalues
            .iter()
            .zip(&other.eigenvalues)
            .map(|(a, b)| a + b)
            .collect();
        let max_abs = eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(Self {
            order: self.order.clone(),
            column,
            eigenvalues,
            spectrum: SpectrumDiagnostic {
                max_imag: self.spectrum.max_imag + other.spectrum.max_imag,
                max_abs,
            },
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            order: self.order.clone(),
            column: self.column.iter().map(|v| v * c).collect(),
            eigenvalues: self.eigenvalues.iter().map(|v| v * c).collect(),
            spectrum: SpectrumDiagnostic {
                max_imag: self.spectrum.max_imag * c.abs(),
                max_abs: self.spectrum.max_abs * c.abs(),
            },
        }
    }

    /// Dense materialization from the multilevel index formula. Refuses above [`DENSE_CAP`].
    pub fn to_dense(&self) -> Result<Mat<f64>> {
        self.to_dense_capped(DENSE_CAP)
    }

    pub fn to_dense_capped(&self, cap: usize) -> Result<Mat<f64>> {
        let n = self.n();
        if n > cap {
            return Err(KlrError::DenseCapExceeded { n, cap });
        }
        let dims = self.order.dims();
        let multi: Vec<Vec<usize>> = (0..n).map(|f| self.order.multi_index(f)).collect();
        let mut diff = vec![0usize; dims.len()];
        Ok(Mat::from_fn(n, n, |i, j| {
            for (s, &d) in dims.iter().enumerate() {
                diff[s] = (multi[i][s] + d - multi[j][s]) % d;
            }
            self.column[self.order.flat_index(&diff)]
        }))
    }

    fn check_vec(&self, len: usize, what: &str) -> Result<()> {
        if len != self.n() {
            return Err(KlrError::Dimension(format!(
                "{what} has length {len}, matrix is {n}x{n}",
                n = self.n()
            )));
        }
        Ok(())
    }
}

/// Transform plan plus a complex buffer, reused across products and solves.
#[derive(Debug)]
pub struct Workspace {
    plan: FftPlan,
    buf: Vec<Complex64>,
    max_discarded_imag: f64,
}

impl Workspace {
    pub fn new(order: &LevelOrder) -> Self {
        Self {
            plan: FftPlan::new(order),
            buf: vec![Complex64::default(); order.n()],
            max_discarded_imag: 0.0,
        }
    }

    pub fn counts(&self) -> TransformCounts {
        self.plan.counts()
    }

    pub fn reset_counts(&mut self) {
        self.plan.reset_counts();
    }

    pub fn plan_mut(&mut self) -> &mut FftPlan {
        &mut self.plan
    }

    /// Largest `|imag|/|real|`-scale residue dropped by any product or solve so far,
    /// relative to the largest real output of the same call.
    pub fn max_discarded_imag(&self) -> f64 {
        self.max_discarded_imag
    }

    fn load(&mut self, x: &[f64]) {
        for (z, &v) in self.buf.iter_mut().zip(x) {
            *z = Complex64::new(v, 0.0);
        }
    }

    fn store(&mut self, out: &mut [f64]) {
        let inv_n = 1.0 / self.buf.len() as f64;
        let mut max_re = 0.0f64;
        let mut max_im = 0.0f64;
        for (o, z) in out.iter_mut().zip(&self.buf) {
            *o = z.re * inv_n;
            max_re = max_re.max(o.abs());
            max_im = max_im.max(z.im.abs() * inv_n);
        }
        if max_re > 0.0 {
            self.max_discarded_imag = self.max_discarded_imag.max(max_im / max_re);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn symmetric_column(rng: &mut ChaCha8Rng, order: &LevelOrder) -> Vec<f64> {
        let raw: Vec<f64> = (0..order.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
        (0..order.n())
            .map(|i| 0.5 * (raw[i] + raw[order.negated(i)]))
            .collect()
    }

    fn dense_mul(m: &Mat<f64>, x: &[f64]) -> Vec<f64> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum())
            .collect()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(f64::MIN_POSITIVE)
    }

    #[test]
    fn identity_from_delta() {
        let order = LevelOrder::new(vec![4]).unwrap();
        let m = MultilevelCirculant::from_first_column(vec![1.0, 0.0, 0.0, 0.0], &order).unwrap();
        for &v in m.eigenvalues() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let x = [0.3, -1.0, 2.0, 5.5];
        assert!(rel(&m.matvec(&x).unwrap(), &x) < 1e-15);
        let d = m.to_dense().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(d[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn ones_column_is_rank_one() {
        let order = LevelOrder::new(vec![2, 2]).unwrap();
        let m = MultilevelCirculant::from_first_column(vec![1.0; 4], &order).unwrap();
        let expect = [4.0, 0.0, 0.0, 0.0];
        for (v, e) in m.eigenvalues().iter().zip(expect) {
            assert!((v - e).abs() < 1e-14);
        }
        let x = [1.0, 2.0, -0.5, 4.0];
        let y = m.matvec(&x).unwrap();
        for v in y {
            assert!((v - 6.5).abs() < 1e-13);
        }
    }

    #[test]
    fn dense_one_level() {
        let order = LevelOrder::new(vec![2]).unwrap();
        let m = MultilevelCirculant::from_first_column(vec![3.0, 7.0], &order).unwrap();
        let d = m.to_dense().unwrap();
        assert_eq!([d[(0, 0)], d[(0, 1)], d[(1, 0)], d[(1, 1)]], [3.0, 7.0, 7.0, 3.0]);
    }

    #[test]
    fn dense_two_level_index_formula() {
        // k = (k00, k01, k10, k11); entry (i, j) = k[(i0-j0) mod 2, (i1-j1) mod 2]
        let order = LevelOrder::new(vec![2, 2]).unwrap();
        let m = MultilevelCirculant::from_first_column(vec![1.0, 2.0, 3.0, 4.0], &order).unwrap();
        let d = m.to_dense().unwrap();
        let expect = [
            [1.0, 2.0, 3.0, 4.0],
            [2.0, 1.0, 4.0, 3.0],
            [3.0, 4.0, 1.0, 2.0],
            [4.0, 3.0, 2.0, 1.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(d[(i, j)], expect[i][j], "({i},{j})");
            }
        }
    }

    #[test]
    fn matvec_matches_dense_2_3_2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let order = LevelOrder::new(vec![2, 3, 2]).unwrap();
        let m = MultilevelCirculant::from_first_column(symmetric_column(&mut rng, &order), &order)
            .unwrap();
        assert!(m.spectrum().is_real());
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expect = dense_mul(&m.to_dense().unwrap(), &x);
        assert!(rel(&m.matvec(&x).unwrap(), &expect) <= 1e-10);
    }

    #[test]
    fn shifted_solves() {
        let order = LevelOrder::new(vec![3, 2]).unwrap();
        let b = [1.0, -2.0, 3.0, 0.5, 0.25, 8.0];
        let (x, diag) = MultilevelCirculant::identity(&order).solve_shifted(1.0, &b).unwrap();
        assert_eq!(diag.clamped, 0);
        assert!(rel(&x, &b.map(|v| v / 2.0)) < 1e-15);
        let (x, _) = MultilevelCirculant::zeros(&order).solve_shifted(0.25, &b).unwrap();
        assert!(rel(&x, &b.map(|v| v * 4.0)) < 1e-15);
    }

    #[test]
    fn shifted_solve_matches_dense_lu() {
        use faer::linalg::solvers::Solve;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let order = LevelOrder::new(vec![8]).unwrap();
        let m = MultilevelCirculant::from_first_column(symmetric_column(&mut rng, &order), &order)
            .unwrap();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = m.to_dense().unwrap();
        for i in 0..8 {
            a[(i, i)] += 0.5;
        }
        let rhs = Mat::from_fn(8, 1, |i, _| b[i]);
        let sol = a.partial_piv_lu().solve(&rhs);
        let expect: Vec<f64> = (0..8).map(|i| sol[(i, 0)]).collect();
        let (x, diag) = m.solve_shifted(0.5, &b).unwrap();
        assert_eq!(diag.clamped, 0);
        assert!(rel(&x, &expect) <= 1e-8);
    }

    #[test]
    fn clamping_is_reported_not_fatal() {
        let order = LevelOrder::new(vec![2]).unwrap();
        // eigenvalues (0, -2): shift 2 makes the second denominator exactly zero
        let m = MultilevelCirculant::from_first_column(vec![-1.0, 1.0], &order).unwrap();
        let (x, diag) = m.solve_shifted(2.0, &[1.0, 1.0]).unwrap();
        assert_eq!(diag.clamped, 1);
        assert!(x.iter().all(|v| v.is_finite()));
        assert!(m.solve_shifted(0.0, &[1.0, 1.0]).is_err());
        assert!(m.solve_shifted(-1.0, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn add_and_scale() {
        let order = LevelOrder::new(vec![3]).unwrap();
        let id = MultilevelCirculant::identity(&order);
        let two = id.add(&id).unwrap();
        assert_eq!(two.column(), &[2.0, 0.0, 0.0]);
        assert_eq!(id.add(&MultilevelCirculant::zeros(&order)).unwrap(), id);
        assert_eq!(id.scale(1.0), id);
        assert!(id.scale(0.0).column().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = MultilevelCirculant::from_first_column(symmetric_column(&mut rng, &order), &order)
            .unwrap();
        let da = a.to_dense().unwrap();
        let ds = a.scale(2.5).to_dense().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((ds[(i, j)] - 2.5 * da[(i, j)]).abs() < 1e-15);
            }
        }
        let other = LevelOrder::new(vec![1, 3]).unwrap();
        assert!(id.add(&MultilevelCirculant::identity(&other)).is_err());
    }

    #[test]
    fn payload_is_two_n() {
        let order = LevelOrder::new(vec![4, 5, 6]).unwrap();
        let m = MultilevelCirculant::from_first_column(vec![0.5; 120], &order).unwrap();
        assert_eq!(m.payload_len(), 240);
    }

    #[test]
    fn dense_cap_and_dimension_errors() {
        let order = LevelOrder::new(vec![5000]).unwrap();
        let m = MultilevelCirculant::zeros(&order);
        assert!(matches!(m.to_dense(), Err(KlrError::DenseCapExceeded { .. })));
        let small = LevelOrder::new(vec![3]).unwrap();
        assert!(MultilevelCirculant::from_first_column(vec![1.0; 4], &small).is_err());
        assert!(MultilevelCirculant::identity(&small).matvec(&[1.0; 2]).is_err());
    }

    #[test]
    fn asymmetric_column_is_flagged() {
        let order = LevelOrder::new(vec![3]).unwrap();
        let m = MultilevelCirculant::from_first_column(vec![0.0, 1.0, 0.0], &order).unwrap();
        assert!(!m.spectrum().is_real());
    }
}
