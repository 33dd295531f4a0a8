//! Vector-wise N:M compressed weights.
//!
//! `B` (`k x n`) is split along `k` into pruning windows of `m_window`
//! consecutive rows, and along `n` into column groups of `vector_len`
//! columns. One window/group cell holds `m_window` vectors of `vector_len`
//! elements; `n_keep` of them survive. Survivors are stored densely in
//! `values` (`w x n`, `w = k * n_keep / m_window`) and their offsets inside
//! the window in `indices` (`w x q`, `q = n / vector_len`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::SeededRng;

pub const MAX_WINDOW: usize = 256;

/// The `(N, M, L)` sparsity pattern descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NmConfig {
    n_keep: usize,
    m_window: usize,
    vector_len: usize,
}

impl NmConfig {
    pub fn new(n_keep: usize, m_window: usize, vector_len: usize) -> Result<Self> {
        if n_keep == 0 || n_keep > m_window || m_window > MAX_WINDOW {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= N <= M <= {MAX_WINDOW}, got {n_keep}:{m_window}"
            )));
        }
        if vector_len == 0 {
            return Err(Error::InvalidConfig("vector length must be >= 1".into()));
        }
        Ok(Self {
            n_keep,
            m_window,
            vector_len,
        })
    }

    /// Fully dense pattern (1:1, unit vectors).
    pub fn dense() -> Self {
        Self {
            n_keep: 1,
            m_window: 1,
            vector_len: 1,
        }
    }

    #[inline]
    pub fn n_keep(&self) -> usize {
        self.n_keep
    }

    #[inline]
    pub fn m_window(&self) -> usize {
        self.m_window
    }

    #[inline]
    pub fn vector_len(&self) -> usize {
        self.vector_len
    }

    pub fn with_vector_len(self, vector_len: usize) -> Result<Self> {
        Self::new(self.n_keep, self.m_window, vector_len)
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.n_keep as f64 / self.m_window as f64
    }

    /// Compressed row count for `k` rows (`k` must be a multiple of `m_window`).
    #[inline]
    pub fn compressed_rows(&self, k: usize) -> usize {
        k / self.m_window * self.n_keep
    }
}

impl fmt::Display for NmConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n_keep, self.m_window)?;
        if self.vector_len != 1 {
            write!(f, ":{}", self.vector_len)?;
        }
        Ok(())
    }
}

/// Parses `N:M` (vector length 1) or `N:M:L`.
impl FromStr for NmConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("cannot parse `{s}`")))
        };
        match parts.as_slice() {
            [n, m] => Self::new(num(n)?, num(m)?, 1),
            [n, m, l] => Self::new(num(n)?, num(m)?, num(l)?),
            _ => Err(Error::InvalidConfig(format!(
                "expected N:M or N:M:L, got `{s}`"
            ))),
        }
    }
}

/// Compressed N:M weights: `values` (`w x n_cols`) and `indices` (`w x q`).
#[derive(Clone, Debug, PartialEq)]
pub struct NmCompressed {
    config: NmConfig,
    k_orig: usize,
    n_cols: usize,
    values: Vec<f32>,
    indices: Vec<u8>,
}

impl NmCompressed {
    /// Assemble from raw parts. Only buffer lengths and dimension
    /// divisibility are checked here; use [`validate`] for the index rules.
    pub fn from_parts(
        config: NmConfig,
        k_orig: usize,
        n_cols: usize,
        values: Vec<f32>,
        indices: Vec<u8>,
    ) -> Result<Self> {
        if !k_orig.is_multiple_of(config.m_window) || !n_cols.is_multiple_of(config.vector_len) {
            return Err(Error::DimensionMismatch(format!(
                "{k_orig}x{n_cols} is not divisible by window {} x vector {}",
                config.m_window, config.vector_len
            )));
        }
        let w = config.compressed_rows(k_orig);
        let q = n_cols / config.vector_len;
        if values.len() != w * n_cols || indices.len() != w * q {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values and {} indices, got {} and {}",
                w * n_cols,
                w * q,
                values.len(),
                indices.len()
            )));
        }
        Ok(Self {
            config,
            k_orig,
            n_cols,
            values,
            indices,
        })
    }

    #[inline]
    pub fn config(&self) -> NmConfig {
        self.config
    }

    /// Row count of the (padded) dense matrix this was compressed from.
    #[inline]
    pub fn k_orig(&self) -> usize {
        self.k_orig
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.config.compressed_rows(self.k_orig)
    }

    #[inline]
    pub fn q(&self) -> usize {
        self.n_cols / self.config.vector_len
    }

    #[inline]
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn indices_mut(&mut self) -> &mut [u8] {
        &mut self.indices
    }

    #[inline]
    pub fn index(&self, u: usize, group: usize) -> usize {
        self.indices[u * self.q() + group] as usize
    }

    /// First row of the dense matrix covered by compressed row `u`.
    #[inline]
    pub fn window_base(&self, u: usize) -> usize {
        u / self.config.n_keep * self.config.m_window
    }

    /// Dense row that compressed row `u` maps to in column group `group`.
    #[inline]
    pub fn source_row(&self, u: usize, group: usize) -> usize {
        self.window_base(u) + self.index(u, group)
    }
}

/// Smallest `(k_pad, n_pad)` divisible by `(m_window, vector_len)`.
pub fn pad_dims(k: usize, n: usize, config: NmConfig) -> (usize, usize) {
    (
        k.next_multiple_of(config.m_window),
        n.next_multiple_of(config.vector_len),
    )
}

fn vector_is_present(b: &DenseMatrix, row: usize, col0: usize, len: usize) -> bool {
    b.row(row)[col0..col0 + len].iter().any(|v| v.to_bits() != 0)
}

fn sq_norm(b: &DenseMatrix, row: usize, col0: usize, len: usize) -> f64 {
    b.row(row)[col0..col0 + len]
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum()
}

/// Zero-pad `b` and keep, in every pruning window, the `n_keep` vectors of
/// largest L2 norm. Equal norms favour the smaller row offset.
pub fn prune_magnitude(b: &DenseMatrix, config: NmConfig) -> Result<DenseMatrix> {
    prune_with(b, config, |padded, row0, col0| {
        let (m, l) = (config.m_window, config.vector_len);
        let norms: Vec<f64> = (0..m).map(|o| sq_norm(padded, row0 + o, col0, l)).collect();
        let mut order: Vec<usize> = (0..m).collect();
        // stable sort keeps ascending offsets among equal norms
        order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
        order.truncate(config.n_keep);
        order
    })
}

/// Zero-pad `b` and keep `n_keep` uniformly drawn distinct vectors per window.
pub fn prune_random(b: &DenseMatrix, config: NmConfig, seed: u64, stream: u64) -> Result<DenseMatrix> {
    let mut rng = SeededRng::new(seed, stream);
    prune_with(b, config, |_, _, _| {
        rng.distinct_sorted(config.m_window, config.n_keep)
    })
}

fn prune_with(
    b: &DenseMatrix,
    config: NmConfig,
    mut keep: impl FnMut(&DenseMatrix, usize, usize) -> Vec<usize>,
) -> Result<DenseMatrix> {
    if b.rows() == 0 || b.cols() == 0 {
        return Err(Error::DimensionMismatch("cannot prune an empty matrix".into()));
    }
    let (k_pad, n_pad) = pad_dims(b.rows(), b.cols(), config);
    let padded = b.padded(k_pad, n_pad)?;
    let (m, l) = (config.m_window, config.vector_len);
    let mut out = DenseMatrix::zeros(k_pad, n_pad);
    let mut kept = vec![false; m];
    for row0 in (0..k_pad).step_by(m) {
        for col0 in (0..n_pad).step_by(l) {
            kept.iter_mut().for_each(|k| *k = false);
            for o in keep(&padded, row0, col0) {
                kept[o] = true;
            }
            for (o, _) in kept.iter().enumerate().filter(|(_, &k)| k) {
                let r = row0 + o;
                let src = &padded.row(r)[col0..col0 + l];
                out.as_mut_slice()[r * n_pad + col0..r * n_pad + col0 + l].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

/// Pack an N:M-conforming dense matrix into values + indices.
///
/// A vector counts as stored when any element has a nonzero bit pattern, so
/// `-0.0` survives a roundtrip. Windows with fewer than `n_keep` stored
/// vectors are filled with zero vectors at the smallest unused offsets.
pub fn compress(b: &DenseMatrix, config: NmConfig) -> Result<NmCompressed> {
    let (k, n) = (b.rows(), b.cols());
    let (m, nk, l) = (config.m_window, config.n_keep, config.vector_len);
    if k == 0 || n == 0 || k % m != 0 || n % l != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{k}x{n} is not divisible by window {m} x vector {l}; pad first"
        )));
    }
    let w = config.compressed_rows(k);
    let q = n / l;
    let mut values = vec![0.0f32; w * n];
    let mut indices = vec![0u8; w * q];
    let mut offsets = Vec::with_capacity(m);
    for (win, row0) in (0..k).step_by(m).enumerate() {
        for g in 0..q {
            let col0 = g * l;
            offsets.clear();
            offsets.extend((0..m).filter(|&o| vector_is_present(b, row0 + o, col0, l)));
            if offsets.len() > nk {
                return Err(Error::TooManyNonzeroVectors {
                    row_start: row0,
                    group: g,
                    found: offsets.len(),
                    allowed: nk,
                });
            }
            let stored = offsets.len();
            let mut fill = 0usize;
            while offsets.len() < nk {
                if !offsets[..stored].contains(&fill) {
                    offsets.push(fill);
                }
                fill += 1;
            }
            offsets.sort_unstable();
            for (slot, &o) in offsets.iter().enumerate() {
                let u = win * nk + slot;
                indices[u * q + g] = o as u8;
                values[u * n + col0..u * n + col0 + l]
                    .copy_from_slice(&b.row(row0 + o)[col0..col0 + l]);
            }
        }
    }
    NmCompressed::from_parts(config, k, n, values, indices)
}

/// Scatter compressed vectors back into a dense `k_orig x n_cols` matrix.
pub fn decompress(bc: &NmCompressed) -> DenseMatrix {
    let (n, l, q) = (bc.n_cols, bc.config.vector_len, bc.q());
    let mut out = DenseMatrix::zeros(bc.k_orig, n);
    let data = out.as_mut_slice();
    for u in 0..bc.w() {
        for g in 0..q {
            let r = bc.source_row(u, g);
            let col0 = g * l;
            data[r * n + col0..r * n + col0 + l]
                .copy_from_slice(&bc.values[u * n + col0..u * n + col0 + l]);
        }
    }
    out
}

/// A broken [`NmCompressed`] invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Shape(String),
    /// `indices[row][group]` is not below `m_window`.
    OutOfRange { row: usize, group: usize, value: u8 },
    /// Offsets of window `window` in column group `group` are not strictly increasing.
    NotStrictlyIncreasing { window: usize, group: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(s) => write!(f, "shape: {s}"),
            Violation::OutOfRange { row, group, value } => {
                write!(f, "index[{row}][{group}] = {value} is out of range")
            }
            Violation::NotStrictlyIncreasing { window, group } => {
                write!(f, "window {window}, group {group}: offsets not strictly increasing")
            }
        }
    }
}

/// Check every structural invariant of `bc`. An empty list means valid.
pub fn validate(bc: &NmCompressed) -> Vec<Violation> {
    let cfg = bc.config;
    let mut out = Vec::new();
    if cfg.n_keep == 0 || cfg.n_keep > cfg.m_window || cfg.vector_len == 0 {
        out.push(Violation::Shape(format!("bad config {cfg}")));
        return out;
    }
    if !bc.k_orig.is_multiple_of(cfg.m_window) {
        out.push(Violation::Shape(format!(
            "k_orig {} not a multiple of {}",
            bc.k_orig, cfg.m_window
        )));
    }
    if !bc.n_cols.is_multiple_of(cfg.vector_len) {
        out.push(Violation::Shape(format!(
            "n_cols {} not a multiple of {}",
            bc.n_cols, cfg.vector_len
        )));
    }
    let (w, q) = (bc.w(), bc.q());
    if bc.values.len() != w * bc.n_cols {
        out.push(Violation::Shape(format!(
            "values has {} entries, expected {}",
            bc.values.len(),
            w * bc.n_cols
        )));
    }
    if bc.indices.len() != w * q {
        out.push(Violation::Shape(format!(
            "indices has {} entries, expected {}",
            bc.indices.len(),
            w * q
        )));
    }
    if !out.is_empty() {
        return out;
    }
    for u in 0..w {
        for g in 0..q {
            let value = bc.indices[u * q + g];
            if value as usize >= cfg.m_window {
                out.push(Violation::OutOfRange { row: u, group: g, value });
            }
        }
    }
    for window in 0..w / cfg.n_keep {
        for g in 0..q {
            let u0 = window * cfg.n_keep;
            let increasing = (u0 + 1..u0 + cfg.n_keep)
                .all(|u| bc.indices[(u - 1) * q + g] < bc.indices[u * q + g]);
            if !increasing {
                out.push(Violation::NotStrictlyIncreasing { window, group: g });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::random_matrix;
    use proptest::prelude::*;

    fn cfg(n: usize, m: usize, l: usize) -> NmConfig {
        NmConfig::new(n, m, l).unwrap()
    }

    fn col(v: &[f32]) -> DenseMatrix {
        DenseMatrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    /// Offsets with any nonzero entry, per (window, group).
    fn present_offsets(b: &DenseMatrix, c: NmConfig, row0: usize, col0: usize) -> Vec<usize> {
        (0..c.m_window())
            .filter(|&o| vector_is_present(b, row0 + o, col0, c.vector_len()))
            .collect()
    }

    #[test]
    fn config_bounds() {
        assert!(NmConfig::new(0, 4, 1).is_err());
        assert!(NmConfig::new(5, 4, 1).is_err());
        assert!(NmConfig::new(1, 257, 1).is_err());
        assert!(NmConfig::new(1, 4, 0).is_err());
        assert!(NmConfig::new(256, 256, 1).is_ok());
        assert_eq!(cfg(1, 4, 1).sparsity(), 0.75);
        assert_eq!(cfg(4, 4, 1).sparsity(), 0.0);
    }

    #[test]
    fn config_parse_and_display() {
        let c: NmConfig = "2:4".parse().unwrap();
        assert_eq!(c, cfg(2, 4, 1));
        let c: NmConfig = "1:8:4".parse().unwrap();
        assert_eq!(c, cfg(1, 8, 4));
        assert_eq!(c.to_string(), "1:8:4");
        assert!("2-4".parse::<NmConfig>().is_err());
        assert!("4:2".parse::<NmConfig>().is_err());
    }

    #[test]
    fn pad_dims_examples() {
        assert_eq!(pad_dims(4096, 4096, cfg(2, 4, 4)), (4096, 4096));
        assert_eq!(pad_dims(5, 5, cfg(2, 4, 4)), (8, 8));
        assert_eq!(pad_dims(9, 10, cfg(1, 8, 4)), (16, 12));
    }

    #[test]
    fn prune_keeps_largest_magnitudes() {
        let p = prune_magnitude(&col(&[1.0, -5.0, 2.0, -3.0]), cfg(2, 4, 1)).unwrap();
        assert_eq!(p.as_slice(), &[0.0, -5.0, 0.0, -3.0]);
    }

    #[test]
    fn prune_keeps_all_when_enough_zeros() {
        let p = prune_magnitude(&col(&[0.0, 0.5, 0.0, -0.1]), cfg(2, 4, 1)).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 0.5, 0.0, -0.1]);
        let p = prune_magnitude(&col(&[0.0, 0.0, 0.0, 7.0]), cfg(2, 4, 1)).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 0.0, 0.0, 7.0]);
    }

    #[test]
    fn prune_ties_prefer_low_offsets() {
        let p = prune_magnitude(&col(&[2.0, -2.0, 2.0, -2.0]), cfg(2, 4, 1)).unwrap();
        assert_eq!(p.as_slice(), &[2.0, -2.0, 0.0, 0.0]);
        // vector norms: (3,4)->5, (5,0)->5, (0,5)->5, (4,3)->5
        let b = DenseMatrix::from_vec(4, 2, vec![3., 4., 5., 0., 0., 5., 4., 3.]).unwrap();
        let p = prune_magnitude(&b, cfg(1, 4, 2)).unwrap();
        assert_eq!(p.as_slice(), &[3., 4., 0., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn prune_pads() {
        let b = DenseMatrix::from_fn(5, 5, |i, j| (i * 5 + j + 1) as f32);
        let p = prune_magnitude(&b, cfg(2, 4, 4)).unwrap();
        assert_eq!((p.rows(), p.cols()), (8, 8));
        // second window is row 4 plus three padding rows: row 4 and one zero row survive
        assert_eq!(p.get(4, 0), b.get(4, 0));
        assert!((5..8).all(|r| p.row(r).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn prune_rejects_empty() {
        assert!(prune_magnitude(&DenseMatrix::zeros(0, 3), cfg(1, 2, 1)).is_err());
    }

    #[test]
    fn compress_example() {
        let b = DenseMatrix::from_vec(4, 2, vec![10., 0., 0., 20., 30., 0., 0., 40.]).unwrap();
        let bc = compress(&b, cfg(2, 4, 1)).unwrap();
        assert_eq!(bc.values(), &[10., 20., 30., 40.]);
        assert_eq!(bc.indices(), &[0, 1, 2, 3]);
        assert_eq!((bc.w(), bc.q()), (2, 2));
        assert!(decompress(&bc).bit_eq(&b));
    }

    #[test]
    fn compress_all_zero() {
        let b = DenseMatrix::zeros(8, 4);
        let bc = compress(&b, cfg(3, 8, 2)).unwrap();
        assert!(bc.values().iter().all(|&v| v == 0.0));
        assert_eq!(bc.indices(), &[0, 0, 1, 1, 2, 2]);
        assert!(validate(&bc).is_empty());
        assert!(decompress(&bc).bit_eq(&b));
    }

    #[test]
    fn compress_underfull_window_fills_lowest_unused() {
        let b = col(&[0.0, 0.0, 9.0, 0.0]);
        let bc = compress(&b, cfg(2, 4, 1)).unwrap();
        assert_eq!(bc.indices(), &[0, 2]);
        assert_eq!(bc.values(), &[0.0, 9.0]);
        let b = col(&[9.0, 0.0, 0.0, 0.0]);
        let bc = compress(&b, cfg(2, 4, 1)).unwrap();
        assert_eq!(bc.indices(), &[0, 1]);
    }

    #[test]
    fn compress_rejects_dense_window() {
        let err = compress(&col(&[1.0, 2.0, 3.0, 4.0]), cfg(2, 4, 1)).unwrap_err();
        assert!(matches!(
            err,
            Error::TooManyNonzeroVectors { found: 4, allowed: 2, .. }
        ));
        assert!(compress(&col(&[1.0, 2.0, 3.0]), cfg(2, 4, 1)).is_err());
    }

    #[test]
    fn decompress_all_zero() {
        let bc = compress(&DenseMatrix::zeros(4, 4), cfg(1, 4, 2)).unwrap();
        assert!(decompress(&bc).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validate_reports_violations() {
        let b = DenseMatrix::from_vec(4, 2, vec![10., 0., 0., 20., 30., 0., 0., 40.]).unwrap();
        let bc = compress(&b, cfg(2, 4, 1)).unwrap();
        assert!(validate(&bc).is_empty());

        let mut bad = bc.clone();
        bad.indices_mut()[2] = 4; // row 1, group 0: [0, 4]
        assert_eq!(
            validate(&bad),
            vec![Violation::OutOfRange { row: 1, group: 0, value: 4 }]
        );

        let mut bad = bc.clone();
        bad.indices_mut()[0] = 2;
        bad.indices_mut()[2] = 1; // group 0: [2, 1]
        assert_eq!(
            validate(&bad),
            vec![Violation::NotStrictlyIncreasing { window: 0, group: 0 }]
        );
    }

    #[test]
    fn from_parts_checks_lengths() {
        let c = cfg(2, 4, 1);
        assert!(NmCompressed::from_parts(c, 4, 2, vec![0.0; 4], vec![0; 4]).is_ok());
        assert!(NmCompressed::from_parts(c, 4, 2, vec![0.0; 3], vec![0; 4]).is_err());
        assert!(NmCompressed::from_parts(c, 5, 2, vec![0.0; 4], vec![0; 4]).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (NmConfig, usize, usize, u64)> {
        (1usize..=8, 1usize..=4, 1usize..=6, 1usize..=12, any::<u64>()).prop_flat_map(
            |(m, l, wins, n, seed)| {
                (1..=m).prop_map(move |nk| (cfg(nk, m, l), wins * m, n, seed))
            },
        )
    }

    proptest! {
        #[test]
        fn prune_is_idempotent_and_respects_keep_count((c, k, n, seed) in arb_case()) {
            let b = random_matrix(k, n, seed, 0);
            let p = prune_magnitude(&b, c).unwrap();
            let pp = prune_magnitude(&p, c).unwrap();
            prop_assert_eq!(&p, &pp);
            for row0 in (0..p.rows()).step_by(c.m_window()) {
                for col0 in (0..p.cols()).step_by(c.vector_len()) {
                    prop_assert!(present_offsets(&p, c, row0, col0).len() <= c.n_keep());
                }
            }
        }

        #[test]
        fn compress_roundtrips_bit_exact((c, k, n, seed) in arb_case()) {
            let b = random_matrix(k, n, seed, 0);
            let p = prune_random(&b, c, seed, 1).unwrap();
            let bc = compress(&p, c).unwrap();
            prop_assert!(validate(&bc).is_empty());
            prop_assert!(decompress(&bc).bit_eq(&p));
        }
    }
}
