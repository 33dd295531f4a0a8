//! Vector-wise N:M structured-sparse matrix multiplication on the CPU.
//!
//! `B` (`k x n`) is pruned so that every window of `M` consecutive rows keeps
//! at most `N` length-`L` row vectors per column group, then stored as a
//! dense `w x n` value matrix (`w = k N / M`) plus `w x n/L` window offsets.
//! `C = A B` is computed by a naive reference kernel, a cache-blocked kernel
//! driven by [`select_plan`], and a packed variant that gathers only the A
//! columns a block touches.
//!
//! ```
//! use nmspmm::{compress, prune_magnitude, select_plan, spmm_blocked, DenseMatrix, NmConfig, SpmmOptions};
//!
//! let cfg: NmConfig = "2:4:4".parse()?;
//! let a = DenseMatrix::from_fn(64, 64, |i, j| ((i * 7 + j) % 5) as f32);
//! let b = DenseMatrix::from_fn(64, 64, |i, j| ((i + 3 * j) % 11) as f32 - 5.0);
//! let bc = compress(&prune_magnitude(&b, cfg)?, cfg)?;
//! let plan = select_plan(64, 64, 64, cfg, 196_608)?;
//! let c = spmm_blocked(&a, &bc, &plan, SpmmOptions::default())?;
//! assert_eq!((c.rows(), c.cols()), (64, 64));
//! # Ok::<(), nmspmm::Error>(())
//! ```

mod error;
mod kernel;

pub mod format;
pub mod harness;
pub mod io;
pub mod matrix;
pub mod packing;
pub mod perf;
pub mod planner;
pub mod rng;
pub mod spmm;

pub use error::{Error, Result};
pub use format::{compress, decompress, prune_magnitude, prune_random, validate, NmCompressed, NmConfig, Violation};
pub use harness::{
    emit_report, generate_workloads, run_bench, BenchOptions, BenchRecord, KernelKind, MaskMode, Preset,
    ReportFormat, Workload,
};
pub use matrix::{max_rel_err, DenseMatrix};
pub use packing::{choose_path, query_col_info, reorder_indices, spmm_packed, ColInfo, KernelPath, PackPlan};
pub use perf::{arithmetic_intensity, footprint, roofline_classify, HardwareProfile, Regime, RooflinePoint};
pub use planner::{classify_size, cmar, select_plan, BlockPlan, SizeClass};
pub use spmm::{confusion, gemm_blocked, gemm_reference, spmm_blocked, spmm_naive, ConfusionStats, SpmmOptions};
