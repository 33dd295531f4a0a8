//! Offline column bookkeeping and the packed-A multiply path.
//!
//! For every (panel, block column) pair, `col_info` lists the A columns the
//! block's compressed rows actually touch, and `remapped` rewrites each
//! index of that block as a position in `col_info`. At multiply time only
//! those columns of A are gathered, so at high sparsity the A panel shrinks
//! from `k_s` columns towards `w_s`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{NmCompressed, NmConfig};
use crate::kernel::{self, Operand};
use crate::matrix::DenseMatrix;
use crate::planner::BlockPlan;
use crate::spmm::SpmmOptions;

/// Sparsity at or above which the packed path is chosen.
pub const DEFAULT_PACK_THRESHOLD: f64 = 0.70;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelPath {
    Packed,
    NonPacked,
}

pub fn choose_path(config: NmConfig) -> KernelPath {
    choose_path_with(config, DEFAULT_PACK_THRESHOLD)
}

pub fn choose_path_with(config: NmConfig, threshold: f64) -> KernelPath {
    // exact ratios like 7:10 vs 0.70 must land on the packed side
    if config.sparsity() + 1e-12 >= threshold {
        KernelPath::Packed
    } else {
        KernelPath::NonPacked
    }
}

/// Required A columns of every (panel, block column), before remapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColInfo {
    pub layout: PackLayout,
    /// Panel-major: entry `panel * n_block_cols + block_col`.
    pub blocks: Vec<Vec<u32>>,
}

/// Geometry shared by [`ColInfo`] and [`PackPlan`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PackLayout {
    pub config: NmConfig,
    /// Compressed rows and column groups of the whole matrix.
    pub w: usize,
    pub q: usize,
    pub k_s: usize,
    pub w_s: usize,
    pub q_s: usize,
    pub n_panels: usize,
    pub n_block_cols: usize,
}

impl PackLayout {
    pub fn new(bc: &NmCompressed, plan: &BlockPlan) -> Self {
        let (w, q) = (bc.w(), bc.q());
        Self {
            config: bc.config(),
            w,
            q,
            k_s: plan.k_s,
            w_s: plan.w_s,
            q_s: plan.q_s,
            n_panels: w.div_ceil(plan.w_s),
            n_block_cols: q.div_ceil(plan.q_s),
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.n_panels * self.n_block_cols
    }

    /// Compressed rows `u0..u1` of a panel.
    pub fn panel_rows(&self, panel: usize) -> (usize, usize) {
        let u0 = panel * self.w_s;
        (u0, (u0 + self.w_s).min(self.w))
    }

    /// Column groups `g0..g1` of a block column.
    pub fn block_groups(&self, block_col: usize) -> (usize, usize) {
        let g0 = block_col * self.q_s;
        (g0, (g0 + self.q_s).min(self.q))
    }

    /// First A column of a panel.
    pub fn panel_k_base(&self, panel: usize) -> usize {
        panel * self.k_s
    }
}

/// One block of a [`PackPlan`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackBlock {
    /// Sorted, distinct A columns (absolute).
    pub col_info: Vec<u32>,
    /// `rows x groups`, row-major; positions into `col_info`.
    pub remapped: Vec<u16>,
    pub rows: usize,
    pub groups: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackPlan {
    pub layout: PackLayout,
    pub blocks: Vec<PackBlock>,
}

impl PackPlan {
    /// Both preprocessing steps.
    pub fn build(bc: &NmCompressed, plan: &BlockPlan) -> Result<Self> {
        plan.check(bc.config())?;
        if plan.k_s > u16::MAX as usize + 1 {
            return Err(Error::InvalidPlan(format!(
                "k_s={} is too deep for 16-bit remapped indices",
                plan.k_s
            )));
        }
        Ok(reorder_indices(bc, &query_col_info(bc, plan)))
    }

    pub fn block(&self, panel: usize, block_col: usize) -> &PackBlock {
        &self.blocks[panel * self.layout.n_block_cols + block_col]
    }

    /// Widest packed panel over all blocks.
    pub fn max_width(&self) -> usize {
        self.blocks.iter().map(|b| b.col_info.len()).max().unwrap_or(0)
    }

    pub(crate) fn check_against(&self, bc: &NmCompressed, plan: &BlockPlan) -> Result<()> {
        let expected = PackLayout::new(bc, plan);
        if self.layout != expected || self.blocks.len() != expected.n_blocks() {
            return Err(Error::InvalidPlan(format!(
                "pack plan {:?} does not match operand/plan {:?}",
                self.layout, expected
            )));
        }
        Ok(())
    }
}

/// Sorted union of the A columns referenced by each block.
pub fn query_col_info(bc: &NmCompressed, plan: &BlockPlan) -> ColInfo {
    let layout = PackLayout::new(bc, plan);
    let blocks = (0..layout.n_blocks())
        .into_par_iter()
        .map(|b| block_col_info(bc, &layout, b / layout.n_block_cols, b % layout.n_block_cols))
        .collect();
    ColInfo { layout, blocks }
}

fn block_col_info(bc: &NmCompressed, layout: &PackLayout, panel: usize, block_col: usize) -> Vec<u32> {
    let (u0, u1) = layout.panel_rows(panel);
    let (g0, g1) = layout.block_groups(block_col);
    let k_base = layout.panel_k_base(panel);
    let mut used = vec![false; layout.k_s];
    for u in u0..u1 {
        for g in g0..g1 {
            used[bc.source_row(u, g) - k_base] = true;
        }
    }
    used.iter()
        .enumerate()
        .filter(|(_, &hit)| hit)
        .map(|(t, _)| (k_base + t) as u32)
        .collect()
}

/// Rewrite each block's indices as positions in its `col_info`.
/// `bc` is left untouched.
pub fn reorder_indices(bc: &NmCompressed, col_info: &ColInfo) -> PackPlan {
    let layout = col_info.layout;
    let blocks = col_info
        .blocks
        .par_iter()
        .enumerate()
        .map(|(b, cols)| {
            let (panel, block_col) = (b / layout.n_block_cols, b % layout.n_block_cols);
            let (u0, u1) = layout.panel_rows(panel);
            let (g0, g1) = layout.block_groups(block_col);
            let k_base = layout.panel_k_base(panel);
            let mut position = vec![u16::MAX; layout.k_s];
            for (t, &c) in cols.iter().enumerate() {
                position[c as usize - k_base] = t as u16;
            }
            let mut remapped = Vec::with_capacity((u1 - u0) * (g1 - g0));
            for u in u0..u1 {
                for g in g0..g1 {
                    remapped.push(position[bc.source_row(u, g) - k_base]);
                }
            }
            PackBlock {
                col_info: cols.clone(),
                remapped,
                rows: u1 - u0,
                groups: g1 - g0,
            }
        })
        .collect();
    PackPlan { layout, blocks }
}

/// Gather `packed[i][t] = A[block_row * m_s + i][col_info[t]]` for one block.
/// The last block row may have fewer than `m_s` rows.
pub fn pack_a_block(
    a: &DenseMatrix,
    pack: &PackPlan,
    m_s: usize,
    block_row: usize,
    panel: usize,
    block_col: usize,
) -> Result<DenseMatrix> {
    let row0 = block_row * m_s;
    if row0 >= a.rows() && a.rows() > 0 {
        return Err(Error::DimensionMismatch(format!(
            "block row {block_row} starts past the {} rows of A",
            a.rows()
        )));
    }
    let cols = &pack.block(panel, block_col).col_info;
    if cols.last().is_some_and(|&c| c as usize >= a.cols()) {
        return Err(Error::DimensionMismatch("A has too few columns for the pack plan".into()));
    }
    let rows = m_s.min(a.rows() - row0);
    Ok(DenseMatrix::from_fn(rows, cols.len(), |i, t| {
        a.get(row0 + i, cols[t] as usize)
    }))
}

/// Blocked multiply gathering A panels through `pack`.
pub fn spmm_packed(
    a: &DenseMatrix,
    bc: &NmCompressed,
    pack: &PackPlan,
    plan: &BlockPlan,
    opts: SpmmOptions,
) -> Result<DenseMatrix> {
    if a.cols() != bc.k_orig() {
        return Err(Error::DimensionMismatch(format!(
            "A has {} columns but B has {} rows",
            a.cols(),
            bc.k_orig()
        )));
    }
    plan.check(bc.config())?;
    let scale = opts
        .apply_scale
        .then(|| bc.config().m_window() as f32 / bc.config().n_keep() as f32);
    kernel::run(a, &Operand::Sparse { bc, pack: Some(pack) }, plan, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{compress, prune_random};
    use crate::rng::random_matrix;
    use crate::spmm::{spmm_blocked, spmm_naive};

    fn cfg(n: usize, m: usize, l: usize) -> NmConfig {
        NmConfig::new(n, m, l).unwrap()
    }

    /// Compressed matrix with explicit per-(window, group) offsets.
    fn with_offsets(c: NmConfig, windows: &[Vec<Vec<u8>>]) -> NmCompressed {
        let q = windows[0].len();
        let n = q * c.vector_len();
        let w = windows.len() * c.n_keep();
        let mut idx = vec![0u8; w * q];
        for (win, groups) in windows.iter().enumerate() {
            for (g, offs) in groups.iter().enumerate() {
                for (s, &o) in offs.iter().enumerate() {
                    idx[(win * c.n_keep() + s) * q + g] = o;
                }
            }
        }
        let values = (0..w * n).map(|v| v as f32 * 0.01).collect();
        NmCompressed::from_parts(c, windows.len() * c.m_window(), n, values, idx).unwrap()
    }

    fn one_block_plan(c: NmConfig, k_s: usize) -> BlockPlan {
        BlockPlan::new(c, 32, 32, k_s, 16, 32, 4, 4).unwrap()
    }

    #[test]
    fn path_threshold() {
        assert_eq!(choose_path(cfg(2, 4, 1)), KernelPath::NonPacked);
        assert_eq!(choose_path(cfg(1, 4, 1)), KernelPath::Packed);
        assert_eq!(choose_path(cfg(3, 8, 1)), KernelPath::NonPacked);
        assert_eq!(choose_path(cfg(3, 10, 1)), KernelPath::Packed);
        assert_eq!(choose_path_with(cfg(2, 4, 1), 0.5), KernelPath::Packed);
    }

    #[test]
    fn col_info_single_window() {
        let c = cfg(2, 4, 32);
        let bc = with_offsets(c, &[vec![vec![0, 2]]]);
        let info = query_col_info(&bc, &one_block_plan(c, 4));
        assert_eq!(info.blocks, vec![vec![0, 2]]);
        let pack = reorder_indices(&bc, &info);
        assert_eq!(pack.blocks[0].remapped, vec![0, 1]);
    }

    #[test]
    fn col_info_union_of_two_windows() {
        // two column groups in the same window: {0,2} and {1,2}
        let c = cfg(2, 4, 16);
        let bc = with_offsets(c, &[vec![vec![0, 2], vec![1, 2]]]);
        let pack = PackPlan::build(&bc, &one_block_plan(c, 4)).unwrap();
        let blk = &pack.blocks[0];
        assert_eq!(blk.col_info, vec![0, 1, 2]);
        // row-major rows x groups: row0 = [0, 1], row1 = [2, 2]
        assert_eq!(blk.remapped, vec![0, 1, 2, 2]);
    }

    #[test]
    fn identity_pattern_remaps_to_itself() {
        let c = cfg(4, 4, 8);
        let bc = with_offsets(c, &[vec![vec![0, 1, 2, 3]; 4], vec![vec![0, 1, 2, 3]; 4]]);
        let pack = PackPlan::build(&bc, &one_block_plan(c, 8)).unwrap();
        let blk = &pack.blocks[0];
        assert_eq!(blk.col_info, (0..8).collect::<Vec<u32>>());
        for u in 0..8 {
            for g in 0..4 {
                assert_eq!(blk.remapped[u * 4 + g] as usize, bc.source_row(u, g));
            }
        }
    }

    #[test]
    fn shared_pattern_hits_lower_bound() {
        let c = cfg(1, 8, 4);
        let windows: Vec<Vec<Vec<u8>>> = (0..4).map(|w| vec![vec![(w * 3 % 8) as u8]; 8]).collect();
        let bc = with_offsets(c, &windows);
        let plan = one_block_plan(c, 32);
        let pack = PackPlan::build(&bc, &plan).unwrap();
        assert_eq!(pack.blocks.len(), 1);
        assert_eq!(pack.blocks[0].col_info.len(), plan.w_s);
    }

    #[test]
    fn disjoint_patterns_hit_upper_bound() {
        // 1:4, eight groups whose offsets cover all four rows of each window
        let c = cfg(1, 4, 4);
        let windows: Vec<Vec<Vec<u8>>> = (0..2)
            .map(|_| (0..8).map(|g| vec![(g % 4) as u8]).collect())
            .collect();
        let bc = with_offsets(c, &windows);
        let plan = one_block_plan(c, 8);
        let pack = PackPlan::build(&bc, &plan).unwrap();
        assert_eq!(pack.blocks[0].col_info.len(), plan.k_s);
    }

    #[test]
    fn pack_a_gathers_columns() {
        let c = cfg(2, 4, 32);
        let bc = with_offsets(c, &[vec![vec![0, 2]]]);
        let plan = one_block_plan(c, 4);
        let pack = PackPlan::build(&bc, &plan).unwrap();
        let a = DenseMatrix::from_vec(2, 4, vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let p = pack_a_block(&a, &pack, plan.m_s, 0, 0, 0).unwrap();
        assert_eq!((p.rows(), p.cols()), (2, 2));
        assert_eq!(p.as_slice(), &[1., 3., 5., 7.]);
        assert!(pack_a_block(&a, &pack, plan.m_s, 1, 0, 0).is_err());
    }

    #[test]
    fn full_width_pack_is_contiguous_block() {
        let c = cfg(4, 4, 32);
        let bc = with_offsets(c, &[vec![vec![0, 1, 2, 3]]]);
        let plan = one_block_plan(c, 4);
        let pack = PackPlan::build(&bc, &plan).unwrap();
        let a = random_matrix(3, 4, 1, 0);
        assert_eq!(pack_a_block(&a, &pack, plan.m_s, 0, 0, 0).unwrap(), a);
    }

    #[test]
    fn packed_matches_naive_and_blocked() {
        for (c, m, n, k) in [
            (cfg(1, 8, 4), 70, 96, 128),
            (cfg(2, 4, 1), 33, 40, 64),
            (cfg(3, 8, 8), 64, 64, 64),
            (cfg(4, 4, 4), 64, 64, 64),
        ] {
            let b = prune_random(&random_matrix(k, n, 3, 2), c, 3, 3).unwrap();
            let bc = compress(&b, c).unwrap();
            let a = random_matrix(m, bc.k_orig(), 3, 1);
            let plan = crate::planner::select_plan(m, bc.n_cols(), bc.k_orig(), c, 4096).unwrap();
            let pack = PackPlan::build(&bc, &plan).unwrap();
            let naive = spmm_naive(&a, &bc, SpmmOptions::default()).unwrap();
            let blocked = spmm_blocked(&a, &bc, &plan, SpmmOptions::default()).unwrap();
            let packed = spmm_packed(&a, &bc, &pack, &plan, SpmmOptions::default()).unwrap();
            assert!(packed.bit_eq(&blocked), "{c}");
            assert!(packed.bit_eq(&naive), "{c}");
        }
    }

    #[test]
    fn packed_rejects_mismatched_pack() {
        let c = cfg(1, 4, 4);
        let bc = compress(&prune_random(&random_matrix(64, 64, 1, 2), c, 1, 3).unwrap(), c).unwrap();
        let plan_a = BlockPlan::new(c, 32, 32, 16, 16, 32, 4, 4).unwrap();
        let plan_b = BlockPlan::new(c, 32, 32, 32, 16, 32, 4, 4).unwrap();
        let pack = PackPlan::build(&bc, &plan_a).unwrap();
        let a = random_matrix(8, 64, 1, 1);
        assert!(matches!(
            spmm_packed(&a, &bc, &pack, &plan_b, SpmmOptions::default()),
            Err(Error::InvalidPlan(_))
        ));
    }
}
