//! Blocked multiply driver shared by the dense baseline and the sparse
//! (plain and packed) kernels.
//!
//! Loop nest per output block `(bi, bj)` of `m_s x n_s`:
//!
//! ```text
//! for panel in 0..w step w_s           // k_s columns of A, w_s rows of B'
//!     load A panel  -> a_buf  (row strips of m_t, column-major inside a strip)
//!     load B' panel -> b_buf  (column strips of n_t)
//!     prefetch D    -> idx    (panel-local A column per compressed row/group)
//!     for micro-panel (m_r x n_r)
//!         for register tile (m_t x n_t)
//!             for u in panel: C_t += A_t(idx[u]) (x) B_t[u]
//! ```
//!
//! Every output element is accumulated in ascending compressed-row order
//! with an `f32` accumulator, the same order as the naive kernel, and each
//! block is owned by exactly one worker, so results do not depend on the
//! plan or on scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::format::NmCompressed;
use crate::matrix::DenseMatrix;
use crate::packing::PackPlan;
use crate::planner::BlockPlan;

/// Where the B operand comes from.
pub(crate) enum Operand<'a> {
    Dense(&'a DenseMatrix),
    Sparse {
        bc: &'a NmCompressed,
        pack: Option<&'a PackPlan>,
    },
}

impl Operand<'_> {
    fn inner_rows(&self) -> usize {
        match self {
            Operand::Dense(b) => b.rows(),
            Operand::Sparse { bc, .. } => bc.w(),
        }
    }

    fn n(&self) -> usize {
        match self {
            Operand::Dense(b) => b.cols(),
            Operand::Sparse { bc, .. } => bc.n_cols(),
        }
    }

    fn k(&self) -> usize {
        match self {
            Operand::Dense(b) => b.rows(),
            Operand::Sparse { bc, .. } => bc.k_orig(),
        }
    }

    fn b_row(&self, u: usize) -> &[f32] {
        match self {
            Operand::Dense(b) => b.row(u),
            Operand::Sparse { bc, .. } => {
                let n = bc.n_cols();
                &bc.values()[u * n..(u + 1) * n]
            }
        }
    }
}

/// Per-worker panel buffers.
struct Panel {
    m_t: usize,
    n_t: usize,
    /// Number of A columns held (`k_s`, or `c` when packed).
    a_cols: usize,
    a: Vec<f32>,
    /// Compressed rows in this panel.
    rows: usize,
    b: Vec<f32>,
    /// Column groups per block (`q_s`); row stride of `idx`.
    groups: usize,
    idx: Vec<u32>,
}

impl Panel {
    #[inline]
    fn a_strip(&self, ti: usize) -> &[f32] {
        let len = self.a_cols * self.m_t;
        &self.a[ti / self.m_t * len..][..len]
    }

    #[inline]
    fn b_strip(&self, tj: usize) -> &[f32] {
        let len = self.rows * self.n_t;
        &self.b[tj / self.n_t * len..][..len]
    }
}

type TileFn = fn(&Panel, usize, usize, &[usize], &mut [f32], usize);

/// Sparse register tile. `SEG` column segments of `NT / SEG` columns each
/// share one index per compressed row; `groups[s]` is the block-local
/// column group of segment `s`.
#[inline(never)]
fn tile_sparse<const MT: usize, const NT: usize, const SEG: usize>(
    p: &Panel,
    ti: usize,
    tj: usize,
    groups: &[usize],
    c: &mut [f32],
    ldc: usize,
) {
    let width = NT / SEG;
    let a = p.a_strip(ti);
    let b = p.b_strip(tj);
    let mut g = [0usize; SEG];
    g.copy_from_slice(&groups[..SEG]);
    let mut acc = [[0f32; NT]; MT];
    for (i, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(ti + i) * ldc + tj..][..NT]);
    }
    for (u, bu) in b.chunks_exact(NT).enumerate() {
        let irow = &p.idx[u * p.groups..][..p.groups];
        for s in 0..SEG {
            let col = irow[g[s]] as usize;
            let au = &a[col * MT..][..MT];
            for i in 0..MT {
                let ai = au[i];
                for jj in 0..width {
                    let j = s * width + jj;
                    acc[i][j] += ai * bu[j];
                }
            }
        }
    }
    for (i, row) in acc.iter().enumerate() {
        c[(ti + i) * ldc + tj..][..NT].copy_from_slice(row);
    }
}

/// Dense register tile: panel row `u` multiplies A column `u`.
#[inline(never)]
fn tile_dense<const MT: usize, const NT: usize>(
    p: &Panel,
    ti: usize,
    tj: usize,
    _groups: &[usize],
    c: &mut [f32],
    ldc: usize,
) {
    let a = p.a_strip(ti);
    let b = p.b_strip(tj);
    let mut acc = [[0f32; NT]; MT];
    for (i, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(ti + i) * ldc + tj..][..NT]);
    }
    for (au, bu) in a.chunks_exact(MT).zip(b.chunks_exact(NT)) {
        for i in 0..MT {
            let ai = au[i];
            for j in 0..NT {
                acc[i][j] += ai * bu[j];
            }
        }
    }
    for (i, row) in acc.iter().enumerate() {
        c[(ti + i) * ldc + tj..][..NT].copy_from_slice(row);
    }
}

/// Any tile shape; `groups` holds one entry per column.
fn tile_generic(p: &Panel, ti: usize, tj: usize, groups: &[usize], c: &mut [f32], ldc: usize) {
    let (mt, nt) = (p.m_t, p.n_t);
    let a = p.a_strip(ti);
    let b = p.b_strip(tj);
    for u in 0..p.rows {
        let irow = &p.idx[u * p.groups..][..p.groups];
        for j in 0..nt {
            let col = irow[groups[j]] as usize;
            let bj = b[u * nt + j];
            for i in 0..mt {
                c[(ti + i) * ldc + tj + j] += a[col * mt + i] * bj;
            }
        }
    }
}

fn tile_generic_dense(p: &Panel, ti: usize, tj: usize, _: &[usize], c: &mut [f32], ldc: usize) {
    let (mt, nt) = (p.m_t, p.n_t);
    let a = p.a_strip(ti);
    let b = p.b_strip(tj);
    for u in 0..p.rows {
        for j in 0..nt {
            let bj = b[u * nt + j];
            for i in 0..mt {
                c[(ti + i) * ldc + tj + j] += a[u * mt + i] * bj;
            }
        }
    }
}

macro_rules! pick_sparse {
    ($mt:expr, $nt:expr, $seg:expr; $( ($m:literal, $n:literal) ),*) => {
        match ($mt, $nt, $seg) {
            $(
                ($m, $n, 1) => Some(tile_sparse::<$m, $n, 1> as TileFn),
                ($m, $n, 2) if $n % 2 == 0 => Some(tile_sparse::<$m, $n, 2> as TileFn),
                ($m, $n, 4) if $n % 4 == 0 => Some(tile_sparse::<$m, $n, 4> as TileFn),
                ($m, $n, 8) if $n % 8 == 0 => Some(tile_sparse::<$m, $n, 8> as TileFn),
            )*
            _ => None,
        }
    };
}

macro_rules! pick_dense {
    ($mt:expr, $nt:expr; $( ($m:literal, $n:literal) ),*) => {
        match ($mt, $nt) {
            $( ($m, $n) => Some(tile_dense::<$m, $n> as TileFn), )*
            _ => None,
        }
    };
}

/// Segments per tile: one when a tile lies inside a single column group,
/// one per group when groups tile it evenly, otherwise one per column.
fn segments(n_t: usize, vector_len: usize) -> usize {
    if vector_len.is_multiple_of(n_t) {
        1
    } else if n_t.is_multiple_of(vector_len) {
        n_t / vector_len
    } else {
        n_t
    }
}

fn select_tile(plan: &BlockPlan, dense: bool, vector_len: usize) -> (TileFn, usize) {
    if dense {
        let f = pick_dense!(plan.m_t, plan.n_t; (4, 4), (8, 4), (4, 8), (8, 8), (16, 4), (4, 16), (8, 16), (16, 8));
        return (f.unwrap_or(tile_generic_dense), 1);
    }
    let seg = segments(plan.n_t, vector_len);
    let f = pick_sparse!(plan.m_t, plan.n_t, seg; (4, 4), (8, 4), (4, 8), (8, 8), (16, 4), (4, 16), (8, 16), (16, 8));
    match f {
        Some(f) => (f, seg),
        None => (tile_generic as TileFn, plan.n_t),
    }
}

/// Multiply `a` by `b` block-wise under `plan`. `plan` must already be
/// checked against the operand's config. `scale` is applied once at the end.
pub(crate) fn run(a: &DenseMatrix, b: &Operand<'_>, plan: &BlockPlan, scale: Option<f32>) -> Result<DenseMatrix> {
    let (m, n, k) = (a.rows(), b.n(), b.k());
    if a.cols() != k {
        return Err(Error::DimensionMismatch(format!(
            "A is {m}x{}, B has {k} rows",
            a.cols()
        )));
    }
    let (nk, mw, vlen, dense) = match b {
        Operand::Dense(_) => (1, 1, 1, true),
        Operand::Sparse { bc, .. } => {
            let c = bc.config();
            (c.n_keep(), c.m_window(), c.vector_len(), false)
        }
    };
    let w = b.inner_rows();
    if let Operand::Sparse { pack: Some(pack), bc } = b {
        pack.check_against(bc, plan)?;
    }
    let mut out = DenseMatrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(out);
    }
    let (tile, seg) = select_tile(plan, dense, vlen);
    let BlockPlan {
        m_s,
        n_s,
        w_s,
        q_s,
        m_t,
        n_t,
        m_r,
        n_r,
        ..
    } = *plan;
    let n_panels = w.div_ceil(w_s);
    let n_bcols = n.div_ceil(n_s);
    let max_a_cols = match b {
        Operand::Sparse { pack: Some(p), .. } => p.max_width(),
        _ => w_s / nk * mw,
    };

    out.as_mut_slice()
        .par_chunks_mut(m_s * n)
        .enumerate()
        .for_each(|(bi, c_rows)| {
            let row0 = bi * m_s;
            let rows = c_rows.len() / n;
            let mut panel = Panel {
                m_t,
                n_t,
                a_cols: 0,
                a: vec![0.0; m_s * max_a_cols],
                rows: 0,
                b: vec![0.0; w_s * n_s],
                groups: q_s,
                idx: vec![0; w_s * q_s],
            };
            let mut c_blk = vec![0f32; m_s * n_s];
            let mut groups = vec![0usize; seg];
            for bj in 0..n_bcols {
                let col0 = bj * n_s;
                let cols = n_s.min(n - col0);
                c_blk.fill(0.0);
                for p in 0..n_panels {
                    let u0 = p * w_s;
                    let u1 = (u0 + w_s).min(w);
                    let k0 = u0 / nk * mw;
                    let kc = (u1 - u0) / nk * mw;
                    panel.rows = u1 - u0;

                    match b {
                        Operand::Sparse { pack: Some(pack), .. } => {
                            let blk = pack.block(p, bj);
                            load_a(&mut panel, a, row0, rows, blk.col_info.iter().map(|&c| c as usize));
                            load_idx_packed(&mut panel, &blk.remapped, blk.groups);
                        }
                        Operand::Sparse { bc, pack: None } => {
                            load_a(&mut panel, a, row0, rows, k0..k0 + kc);
                            load_idx(&mut panel, bc, u0, bj * q_s);
                        }
                        Operand::Dense(_) => {
                            load_a(&mut panel, a, row0, rows, k0..k0 + kc);
                        }
                    }
                    load_b(&mut panel, b, u0, col0, cols);

                    for mr0 in (0..m_s).step_by(m_r) {
                        for nr0 in (0..n_s).step_by(n_r) {
                            for ti in (mr0..mr0 + m_r).step_by(m_t) {
                                if ti >= rows {
                                    break;
                                }
                                for tj in (nr0..nr0 + n_r).step_by(n_t) {
                                    if tj >= cols {
                                        break;
                                    }
                                    let width = n_t / seg;
                                    for (s, g) in groups.iter_mut().enumerate() {
                                        *g = (tj + s * width) / vlen;
                                    }
                                    tile(&panel, ti, tj, &groups, &mut c_blk, n_s);
                                }
                            }
                        }
                    }
                }
                for r in 0..rows {
                    let dst = &mut c_rows[r * n + col0..r * n + col0 + cols];
                    let src = &c_blk[r * n_s..r * n_s + cols];
                    match scale {
                        Some(s) => dst.iter_mut().zip(src).for_each(|(d, v)| *d = s * v),
                        None => dst.copy_from_slice(src),
                    }
                }
            }
        });
    Ok(out)
}

/// Strip-pack `rows` rows of A starting at `row0`, gathering `cols`.
/// Rows past `rows` (up to `m_s`) are zero.
fn load_a(panel: &mut Panel, a: &DenseMatrix, row0: usize, rows: usize, cols: impl Iterator<Item = usize> + Clone) {
    let mt = panel.m_t;
    let ncols = cols.clone().count();
    panel.a_cols = ncols;
    let strip_len = ncols * mt;
    let strips = rows.div_ceil(mt);
    let buf = &mut panel.a[..strips * strip_len];
    for s in 0..strips {
        let strip = &mut buf[s * strip_len..(s + 1) * strip_len];
        for i in 0..mt {
            let r = s * mt + i;
            if r < rows {
                let arow = a.row(row0 + r);
                for (t, c) in cols.clone().enumerate() {
                    strip[t * mt + i] = arow[c];
                }
            } else {
                for t in 0..ncols {
                    strip[t * mt + i] = 0.0;
                }
            }
        }
    }
}

/// Strip-pack the panel's B rows for columns `col0..col0+cols`, zero-filling
/// to a whole number of `n_t` strips.
fn load_b(panel: &mut Panel, b: &Operand<'_>, u0: usize, col0: usize, cols: usize) {
    let nt = panel.n_t;
    let rows = panel.rows;
    let strips = cols.div_ceil(nt);
    let strip_len = rows * nt;
    for s in 0..strips {
        let strip = &mut panel.b[s * strip_len..(s + 1) * strip_len];
        let c0 = s * nt;
        let valid = nt.min(cols - c0);
        for u in 0..rows {
            let src = &b.b_row(u0 + u)[col0 + c0..col0 + c0 + valid];
            let dst = &mut strip[u * nt..(u + 1) * nt];
            dst[..valid].copy_from_slice(src);
            dst[valid..].fill(0.0);
        }
    }
}

/// Panel-local A column for each (compressed row, block group).
fn load_idx(panel: &mut Panel, bc: &NmCompressed, u0: usize, g0: usize) {
    let (nk, mw) = (bc.config().n_keep(), bc.config().m_window());
    let q = bc.q();
    let groups = panel.groups;
    let valid = groups.min(q - g0);
    for u in 0..panel.rows {
        let base = (u / nk * mw) as u32;
        let src = &bc.indices()[(u0 + u) * q + g0..][..valid];
        let dst = &mut panel.idx[u * groups..(u + 1) * groups];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = base + s as u32;
        }
        dst[valid..].fill(0);
    }
}

fn load_idx_packed(panel: &mut Panel, remapped: &[u16], valid: usize) {
    let groups = panel.groups;
    for u in 0..panel.rows {
        let src = &remapped[u * valid..(u + 1) * valid];
        let dst = &mut panel.idx[u * groups..(u + 1) * groups];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s as u32;
        }
        dst[valid..].fill(0);
    }
}
