//! Hierarchical blocking parameters.
//!
//! A multiply is tiled three ways: fast-memory blocks (`m_s x n_s` of C,
//! `k_s` columns of A / `w_s` compressed rows of B per panel), micro-panels
//! (`m_r x n_r`) inside a block, and register tiles (`m_t x n_t`) inside a
//! micro-panel. `k_s` is the largest panel depth whose A and B working set,
//! double-buffered, fits the fast-memory budget:
//!
//! ```text
//! 8 * k_s * (m_s + n_keep * n_s / m_window) <= fast_memory_bytes
//! ```

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::NmConfig;

/// 192 KiB, the combined L1/shared memory of one A100 SM.
pub const DEFAULT_FAST_MEMORY: usize = 196_608;

/// Per-thread register file limit the tile shape must respect.
pub const REGISTER_BUDGET: usize = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockPlan {
    pub m_s: usize,
    pub n_s: usize,
    pub k_s: usize,
    pub w_s: usize,
    pub q_s: usize,
    pub m_t: usize,
    pub n_t: usize,
    pub m_r: usize,
    pub n_r: usize,
    #[serde(default = "default_alpha")]
    pub alpha: usize,
}

fn default_alpha() -> usize {
    1
}

impl BlockPlan {
    /// Build a plan from its free parameters; `w_s` and `q_s` are derived.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: NmConfig,
        m_s: usize,
        n_s: usize,
        k_s: usize,
        m_r: usize,
        n_r: usize,
        m_t: usize,
        n_t: usize,
    ) -> Result<Self> {
        let plan = Self {
            m_s,
            n_s,
            k_s,
            w_s: config.compressed_rows(k_s),
            q_s: n_s / config.vector_len(),
            m_t,
            n_t,
            m_r,
            n_r,
            alpha: 1,
        };
        plan.check(config)?;
        Ok(plan)
    }

    /// Structural invariants against `config`. Capacity is checked
    /// separately by [`BlockPlan::fits`], since the plan does not carry it.
    pub fn check(&self, config: NmConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPlan(msg));
        let (m, nk, l) = (config.m_window(), config.n_keep(), config.vector_len());
        let all = [
            self.m_s, self.n_s, self.k_s, self.m_t, self.n_t, self.m_r, self.n_r, self.alpha,
        ];
        if all.contains(&0) {
            return bad(format!("all parameters must be positive: {self:?}"));
        }
        if !self.k_s.is_multiple_of(m) {
            return bad(format!("k_s={} is not a multiple of M={m}", self.k_s));
        }
        if self.w_s * m != self.k_s * nk {
            return bad(format!("w_s={} != k_s*N/M", self.w_s));
        }
        if !self.n_s.is_multiple_of(l) || self.q_s * l != self.n_s {
            return bad(format!("q_s={} != n_s/L with n_s={}, L={l}", self.q_s, self.n_s));
        }
        if !self.m_s.is_multiple_of(32) || !self.n_s.is_multiple_of(32) {
            return bad(format!(
                "m_s={} and n_s={} must be multiples of 32",
                self.m_s, self.n_s
            ));
        }
        if !self.m_r.is_multiple_of(self.m_t) || !self.m_s.is_multiple_of(self.m_r) {
            return bad(format!(
                "m_t={} | m_r={} | m_s={} does not hold",
                self.m_t, self.m_r, self.m_s
            ));
        }
        if !self.n_r.is_multiple_of(self.n_t) || !self.n_s.is_multiple_of(self.n_r) {
            return bad(format!(
                "n_t={} | n_r={} | n_s={} does not hold",
                self.n_t, self.n_r, self.n_s
            ));
        }
        if !registers_ok(self.m_t, self.n_t) {
            return bad(format!(
                "tile {}x{} exceeds the {REGISTER_BUDGET}-register budget",
                self.m_t, self.n_t
            ));
        }
        Ok(())
    }

    /// Left-hand side of the capacity constraint, in bytes.
    pub fn fast_memory_use(&self, config: NmConfig) -> Ratio<u64> {
        let m = config.m_window() as u64;
        let nk = config.n_keep() as u64;
        Ratio::new(
            8 * self.k_s as u64 * (m * self.m_s as u64 + nk * self.n_s as u64),
            m,
        )
    }

    pub fn fits(&self, config: NmConfig, fast_memory_bytes: usize) -> bool {
        self.fast_memory_use(config) <= Ratio::from_integer(fast_memory_bytes as u64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `m_t + n_t + m_t * n_t <= 255`.
pub fn registers_ok(m_t: usize, n_t: usize) -> bool {
    m_t + n_t + m_t * n_t <= REGISTER_BUDGET
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

/// Small up to 512 x 1024; large from 2048 rows or 4096 columns.
pub fn classify_size(m: usize, n: usize, _k: usize) -> SizeClass {
    if m >= 2048 || n >= 4096 {
        SizeClass::Large
    } else if m <= 512 && n <= 1024 {
        SizeClass::Small
    } else {
        SizeClass::Medium
    }
}

/// Recommended block and tile shape for a size class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableParams {
    pub m_s: usize,
    pub n_s: usize,
    pub m_r: usize,
    pub n_r: usize,
    pub m_t: usize,
    pub n_t: usize,
}

pub fn table_params(class: SizeClass) -> TableParams {
    let (m_s, n_s, m_r, n_r, m_t, n_t) = match class {
        SizeClass::Small => (32, 32, 16, 32, 4, 4),
        SizeClass::Medium => (32, 64, 32, 32, 8, 4),
        SizeClass::Large => (64, 128, 64, 32, 8, 8),
    };
    TableParams {
        m_s,
        n_s,
        m_r,
        n_r,
        m_t,
        n_t,
    }
}

/// Largest multiple of `m_window`, at most `k`, satisfying the capacity
/// constraint for an `m_s x n_s` block.
pub fn max_ks(
    m_s: usize,
    n_s: usize,
    config: NmConfig,
    fast_memory_bytes: usize,
    k: usize,
) -> Result<usize> {
    let (m, nk) = (config.m_window() as u128, config.n_keep() as u128);
    // 8 * k_s * (m_s + nk*n_s/m) <= cap  <=>  k_s <= cap*m / (8*(m*m_s + nk*n_s))
    let bound = fast_memory_bytes as u128 * m / (8 * (m * m_s as u128 + nk * n_s as u128));
    let bound = bound.min(k as u128) as usize;
    let k_s = bound / config.m_window() * config.m_window();
    if k_s == 0 {
        return Err(Error::CapacityTooSmall {
            capacity: fast_memory_bytes,
            m_s,
            n_s,
            m_window: config.m_window(),
        });
    }
    Ok(k_s)
}

/// Plan for an `m x n x k` multiply (`k`, `n` already padded).
///
/// When the vector length does not divide the table's `n_s`, `n_s` grows to
/// the least common multiple so every block covers whole column groups.
pub fn select_plan(
    m: usize,
    n: usize,
    k: usize,
    config: NmConfig,
    fast_memory_bytes: usize,
) -> Result<BlockPlan> {
    if m == 0 || n == 0 || k == 0 {
        return Err(Error::DimensionMismatch(format!("empty problem {m}x{n}x{k}")));
    }
    if !k.is_multiple_of(config.m_window()) || !n.is_multiple_of(config.vector_len()) {
        return Err(Error::DimensionMismatch(format!(
            "k={k}, n={n} must be padded to multiples of {} and {}",
            config.m_window(),
            config.vector_len()
        )));
    }
    let t = table_params(classify_size(m, n, k));
    let n_s = lcm(t.n_s, config.vector_len());
    let k_s = max_ks(t.m_s, n_s, config, fast_memory_bytes, k)?;
    BlockPlan::new(config, t.m_s, n_s, k_s, t.m_r, t.n_r, t.m_t, t.n_t)
}

/// Compute-to-memory-access ratio of an `m_t x n_t` register tile.
pub fn cmar(m_t: usize, n_t: usize, alpha: usize) -> Ratio<u64> {
    Ratio::new(
        (m_t * n_t) as u64,
        (alpha * (m_t + n_t)) as u64,
    )
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}
