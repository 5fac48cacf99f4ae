//! Multidimensional DFT over a vector viewed as a q-level tensor.
//!
//! A vector of length `n = n0 * n1 * ... * n_{q-1}` is laid out row-major, level 0
//! slowest. The operator applied by [`FftPlan::forward`] is the Kronecker product
//! `F_{n0} ⊗ F_{n1} ⊗ ... ⊗ F_{n_{q-1}}` with `F_m[s, t] = exp(+2πi·st/m)`, and
//! [`FftPlan::adjoint`] applies its conjugate transpose. Neither is normalized, so
//! `adjoint(forward(x)) = n·x`.
//!
//! The one-dimensional transforms along each axis come from `rustfft`, which covers
//! arbitrary lengths (mixed radix, Rader, Bluestein).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{KlrError, Result};

/// Factorization `[n0, ..., n_{q-1}]` fixing the block structure of a multilevel
/// circulant matrix and the tensor shape of its transforms.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LevelOrder {
    dims: Vec<usize>,
    n: usize,
}

impl LevelOrder {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(KlrError::InvalidParameter(
                "level order needs at least one level".into(),
            ));
        }
        let mut n: usize = 1;
        for &d in &dims {
            if d == 0 {
                return Err(KlrError::InvalidParameter(format!(
                    "level order {dims:?} has a zero level"
                )));
            }
            n = n.checked_mul(d).ok_or_else(|| {
                KlrError::InvalidParameter(format!("level order {dims:?} overflows usize"))
            })?;
        }
        Ok(Self { dims, n })
    }

    /// The smallest q-level order covering `m` samples whose level sizes have no
    /// prime factor above 7 (prime lengths such as 41 transform several times slower).
    ///
    /// Sizes are searched up to twice the balanced size `⌈m^{1/q}⌉`; among orders with
    /// the smallest product the most balanced wins, and levels are non-increasing.
    pub fn covering(m: usize, q: usize) -> Result<Self> {
        if m == 0 || q == 0 {
            return Err(KlrError::InvalidParameter(format!(
                "cannot build a {q}-level order for {m} samples"
            )));
        }
        let mut c = 1usize;
        while (c as u128).pow(q as u32) < m as u128 {
            c += 1;
        }
        let candidates: Vec<usize> = (1..=2 * c).rev().filter(|&v| next_smooth(v) == v).collect();
        let mut search = CoverSearch {
            m: m as u128,
            q,
            candidates,
            dims: Vec::with_capacity(q),
            best: None,
        };
        search.descend(1, 2 * c);
        let (_, _, dims) = search.best.expect("the balanced smooth order always covers");
        Self::new(dims)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Total length `n = ∏ dims`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of levels.
    pub fn q(&self) -> usize {
        self.dims.len()
    }

    /// Flat position of a multilevel index, level 0 slowest.
    pub fn flat_index(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dims.len());
        multi
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    /// Inverse of [`LevelOrder::flat_index`].
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for (slot, &d) in out.iter_mut().zip(&self.dims).rev() {
            *slot = flat % d;
            flat /= d;
        }
        out
    }

    /// Flat index of `(-i mod n_s)_s`.
    pub fn negated(&self, flat: usize) -> usize {
        let mut multi = self.multi_index(flat);
        for (i, &d) in multi.iter_mut().zip(&self.dims) {
            *i = (d - *i) % d;
        }
        self.flat_index(&multi)
    }
}

struct CoverSearch {
    m: u128,
    q: usize,
    /// Smooth sizes, descending.
    candidates: Vec<usize>,
    dims: Vec<usize>,
    /// (product, spread, dims)
    best: Option<(u128, usize, Vec<usize>)>,
}

impl CoverSearch {
    fn descend(&mut self, product: u128, max: usize) {
        let left = self.q - self.dims.len();
        if left == 1 {
            let v = next_smooth(self.m.div_ceil(product) as usize);
            if v > max {
                return;
            }
            self.dims.push(v);
            let n = product * v as u128;
            let spread = self.dims[0] - v;
            let better = match &self.best {
                None => true,
                Some((bn, bs, _)) => (n, spread) < (*bn, *bs),
            };
            if better {
                self.best = Some((n, spread, self.dims.clone()));
            }
            self.dims.pop();
            return;
        }
        for i in 0..self.candidates.len() {
            let v = self.candidates[i];
            if v > max {
                continue;
            }
            // the remaining levels are at most v each
            if product * (v as u128).pow(left as u32) < self.m {
                break;
            }
            if let Some((bn, _, _)) = &self.best {
                if product * v as u128 > *bn {
                    continue;
                }
            }
            self.dims.push(v);
            self.descend(product * v as u128, v);
            self.dims.pop();
        }
    }
}

/// Smallest integer `>= n` whose prime factors are all at most 7.
fn next_smooth(n: usize) -> usize {
    (n.max(1)..)
        .find(|&v| {
            let mut r = v;
            for p in [2, 3, 5, 7] {
                while r % p == 0 {
                    r /= p;
                }
            }
            r == 1
        })
        .expect("smooth numbers are unbounded")
}

impl fmt::Display for LevelOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for LevelOrder {
    type Err = KlrError;

    fn from_str(s: &str) -> Result<Self> {
        let dims = s
            .split(',')
            .map(|p| {
                p.trim().parse::<usize>().map_err(|_| {
                    KlrError::InvalidParameter(format!("bad level order entry {p:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims)
    }
}

/// Output of the forward transform: `φx` together with its tensor shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralVector {
    values: Vec<Complex64>,
    order: LevelOrder,
}

impl SpectralVector {
    pub fn new(values: Vec<Complex64>, order: LevelOrder) -> Result<Self> {
        check_len(values.len(), &order)?;
        Ok(Self { values, order })
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn order(&self) -> &LevelOrder {
        &self.order
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }
}

/// Number of forward and adjoint transforms a plan has executed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransformCounts {
    pub forward: u64,
    pub adjoint: u64,
}

struct AxisPlan {
    len: usize,
    outer: usize,
    inner: usize,
    forward: Arc<dyn Fft<f64>>,
    adjoint: Arc<dyn Fft<f64>>,
}

/// Strided lines transformed per gather/scatter pass.
const LINE_BATCH: usize = 32;

/// Reusable transform plan for one level order.
///
/// Holds the per-axis FFT kernels and scratch space. A plan is used by one caller
/// at a time; create one plan per thread.
pub struct FftPlan {
    order: LevelOrder,
    axes: Vec<AxisPlan>,
    scratch: Vec<Complex64>,
    lines: Vec<Complex64>,
    counts: TransformCounts,
}

impl fmt::Debug for FftPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FftPlan")
            .field("order", &self.order)
            .field("counts", &self.counts)
            .finish()
    }
}

impl FftPlan {
    pub fn new(order: &LevelOrder) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        let dims = order.dims();
        let mut axes = Vec::with_capacity(dims.len());
        let mut scratch_len = 0;
        let mut lines_len = 0;
        for (s, &len) in dims.iter().enumerate() {
            if len == 1 {
                continue;
            }
            let outer: usize = dims[..s].iter().product();
            let inner: usize = dims[s + 1..].iter().product();
            // φ carries exp(+2πi st/m), which rustfft calls the inverse direction.
            let forward = planner.plan_fft(len, FftDirection::Inverse);
            let adjoint = planner.plan_fft(len, FftDirection::Forward);
            scratch_len = scratch_len
                .max(forward.get_inplace_scratch_len())
                .max(adjoint.get_inplace_scratch_len());
            if inner > 1 {
                lines_len = lines_len.max(len * inner.min(LINE_BATCH));
            }
            axes.push(AxisPlan {
                len,
                outer,
                inner,
                forward,
                adjoint,
            });
        }
        Self {
            order: order.clone(),
            axes,
            scratch: vec![Complex64::default(); scratch_len],
            lines: vec![Complex64::default(); lines_len],
            counts: TransformCounts::default(),
        }
    }

    pub fn order(&self) -> &LevelOrder {
        &self.order
    }

    pub fn counts(&self) -> TransformCounts {
        self.counts
    }

    pub fn reset_counts(&mut self) {
        self.counts = TransformCounts::default();
    }

    /// In-place `buf ← φ·buf`.
    pub fn forward(&mut self, buf: &mut [Complex64]) -> Result<()> {
        check_len(buf.len(), &self.order)?;
        self.counts.forward += 1;
        self.run(buf, true);
        Ok(())
    }

    /// In-place `buf ← φ*·buf`.
    pub fn adjoint(&mut self, buf: &mut [Complex64]) -> Result<()> {
        check_len(buf.len(), &self.order)?;
        self.counts.adjoint += 1;
        self.run(buf, false);
        Ok(())
    }

    fn run(&mut self, buf: &mut [Complex64], forward: bool) {
        for axis in &self.axes {
            let fft = if forward { &axis.forward } else { &axis.adjoint };
            if axis.inner == 1 {
                // Lines along the fastest axis are already contiguous.
                fft.process_with_scratch(buf, &mut self.scratch);
                continue;
            }
            let block = axis.len * axis.inner;
            for o in 0..axis.outer {
                let chunk = &mut buf[o * block..(o + 1) * block];
                // chunk is len x inner (row-major); gather LINE_BATCH columns at a time
                // into contiguous lines so the working set stays in cache.
                for c0 in (0..axis.inner).step_by(LINE_BATCH) {
                    let width = LINE_BATCH.min(axis.inner - c0);
                    let lines = &mut self.lines[..width * axis.len];
                    for (r, row) in chunk.chunks_exact(axis.inner).enumerate() {
                        for (c, &v) in row[c0..c0 + width].iter().enumerate() {
                            lines[c * axis.len + r] = v;
                        }
                    }
                    fft.process_with_scratch(lines, &mut self.scratch);
                    for (r, row) in chunk.chunks_exact_mut(axis.inner).enumerate() {
                        for (c, v) in row[c0..c0 + width].iter_mut().enumerate() {
                            *v = lines[c * axis.len + r];
                        }
                    }
                }
            }
        }
    }
}

fn check_len(len: usize, order: &LevelOrder) -> Result<()> {
    if len != order.n() {
        return Err(KlrError::Dimension(format!(
            "vector length {len} does not match level order {order} (n = {})",
            order.n()
        )));
    }
    Ok(())
}

/// `φx` for a complex input, using a throwaway plan.
pub fn mfft(x: &[Complex64], order: &LevelOrder) -> Result<SpectralVector> {
    check_len(x.len(), order)?;
    let mut values = x.to_vec();
    FftPlan::new(order).forward(&mut values)?;
    Ok(SpectralVector {
        values,
        order: order.clone(),
    })
}

/// `φx` for a real input.
pub fn mfft_real(x: &[f64], order: &LevelOrder) -> Result<SpectralVector> {
    let lifted: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    mfft(&lifted, order)
}

/// `φ*s`, unnormalized.
pub fn mfft_adjoint(s: &SpectralVector) -> Vec<Complex64> {
    let mut values = s.values.clone();
    FftPlan::new(&s.order)
        .adjoint(&mut values)
        .expect("spectral vector length matches its own order");
    values
}
