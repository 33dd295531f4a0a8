//! Sparse and dense multiply kernels, plus the confusion metric.
//!
//! `C = A (*) (B', D)`:
//!
//! ```text
//! C[i][j] = s * sum_u A[i][ floor(u / N) * M + D[u][j / L] ] * B'[u][j]
//! ```
//!
//! with `s = M / N` when [`SpmmOptions::apply_scale`] is set, else 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{NmCompressed, NmConfig};
use crate::kernel::{self, Operand};
use crate::matrix::DenseMatrix;
use crate::planner::BlockPlan;

/// Elementwise tolerance between reassociated kernels: `|x - r| <= TOL * (1 + |r|)`.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpmmOptions {
    /// Multiply the result by `m_window / n_keep`.
    pub apply_scale: bool,
}

impl SpmmOptions {
    pub fn scaled() -> Self {
        Self { apply_scale: true }
    }

    fn factor(&self, config: NmConfig) -> Option<f32> {
        self.apply_scale
            .then(|| config.m_window() as f32 / config.n_keep() as f32)
    }
}

/// Dense `A * B`, accumulating each element in ascending `p` in `f32`.
pub fn gemm_reference(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} * {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = b.cols();
    let mut c = DenseMatrix::zeros(a.rows(), n);
    // i-p-j keeps the per-element order ascending in p while streaming rows of B
    for (i, c_row) in c.as_mut_slice().chunks_exact_mut(n.max(1)).enumerate() {
        for (p, &aip) in a.row(i).iter().enumerate() {
            for (cij, &bpj) in c_row.iter_mut().zip(b.row(p)) {
                *cij += aip * bpj;
            }
        }
    }
    Ok(c)
}

/// Cache-blocked dense `A * B`; the benchmark baseline. The plan must be
/// valid for [`NmConfig::dense`].
pub fn gemm_blocked(a: &DenseMatrix, b: &DenseMatrix, plan: &BlockPlan) -> Result<DenseMatrix> {
    plan.check(NmConfig::dense())?;
    kernel::run(a, &Operand::Dense(b), plan, None)
}

fn check_inner(a: &DenseMatrix, bc: &NmCompressed) -> Result<()> {
    if a.cols() != bc.k_orig() {
        return Err(Error::DimensionMismatch(format!(
            "A has {} columns but B has {} rows (pad A to match)",
            a.cols(),
            bc.k_orig()
        )));
    }
    Ok(())
}

/// Direct evaluation of the N:M product, ascending in the compressed row.
pub fn spmm_naive(a: &DenseMatrix, bc: &NmCompressed, opts: SpmmOptions) -> Result<DenseMatrix> {
    check_inner(a, bc)?;
    let (n, q, l) = (bc.n_cols(), bc.q(), bc.config().vector_len());
    let mut c = DenseMatrix::zeros(a.rows(), n);
    let mut cols = vec![0usize; q];
    for (i, c_row) in c.as_mut_slice().chunks_exact_mut(n.max(1)).enumerate() {
        let a_row = a.row(i);
        for u in 0..bc.w() {
            for (g, col) in cols.iter_mut().enumerate() {
                *col = bc.source_row(u, g);
            }
            let b_row = &bc.values()[u * n..(u + 1) * n];
            for (g, (c_seg, b_seg)) in c_row.chunks_exact_mut(l).zip(b_row.chunks_exact(l)).enumerate() {
                let aiv = a_row[cols[g]];
                for (cij, &b) in c_seg.iter_mut().zip(b_seg) {
                    *cij += aiv * b;
                }
            }
        }
    }
    if let Some(s) = opts.factor(bc.config()) {
        c.scale(s);
    }
    Ok(c)
}

/// Cache-blocked N:M multiply under `plan`, loading full A panels.
pub fn spmm_blocked(
    a: &DenseMatrix,
    bc: &NmCompressed,
    plan: &BlockPlan,
    opts: SpmmOptions,
) -> Result<DenseMatrix> {
    check_inner(a, bc)?;
    plan.check(bc.config())?;
    kernel::run(
        a,
        &Operand::Sparse { bc, pack: None },
        plan,
        opts.factor(bc.config()),
    )
}

/// Deviation of an approximate product from the exact one.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionStats {
    /// `|C' - C| / (m * n)` per element.
    pub per_element: DenseMatrix,
    pub mean_abs_err: f64,
    pub max_abs_err: f64,
}

pub fn confusion(approx: &DenseMatrix, exact: &DenseMatrix) -> Result<ConfusionStats> {
    let (m, n) = (exact.rows(), exact.cols());
    if approx.rows() != m || approx.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {m}x{n}",
            approx.rows(),
            approx.cols()
        )));
    }
    let count = (m * n) as f64;
    let mut per = Vec::with_capacity(m * n);
    let (mut sum, mut max) = (0f64, 0f64);
    for (&x, &e) in approx.as_slice().iter().zip(exact.as_slice()) {
        let d = (x as f64 - e as f64).abs();
        sum += d;
        max = max.max(d);
        per.push((d / count) as f32);
    }
    Ok(ConfusionStats {
        per_element: DenseMatrix::from_vec(m, n, per)?,
        mean_abs_err: if count > 0.0 { sum / count } else { 0.0 },
        max_abs_err: max,
    })
}
