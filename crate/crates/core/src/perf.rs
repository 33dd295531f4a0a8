//! Arithmetic-intensity and roofline model for one block iteration.
//!
//! Per iteration a block reads an `m_s x k_s` slice of A, a `w_s x n_s`
//! slice of B', and reads and writes its `m_s x n_s` slice of C, while
//! doing `2 * m_s * n_s * w_s` FLOPs:
//!
//! ```text
//! AI = 2 m_s n_s w_s / (m_s k_s + w_s n_s + 2 m_s n_s)   [FLOP / element]
//! ```
//!
//! Index bytes are left out of AI (they are a small fraction of the
//! traffic) but are counted by [`footprint`].

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::NmConfig;
use crate::planner::{BlockPlan, DEFAULT_FAST_MEMORY};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    /// FP32 FLOP/s.
    pub peak_flops: f64,
    /// Bytes/s.
    pub mem_bandwidth: f64,
    pub fast_memory_bytes: usize,
    pub element_bytes: usize,
}

impl HardwareProfile {
    pub fn new(name: &str, peak_flops: f64, mem_bandwidth: f64, fast_memory_bytes: usize) -> Result<Self> {
        if !(peak_flops > 0.0 && mem_bandwidth > 0.0 && fast_memory_bytes > 0) {
            return Err(Error::InvalidConfig(format!(
                "hardware profile `{name}` needs positive rates and capacity"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            peak_flops,
            mem_bandwidth,
            fast_memory_bytes,
            element_bytes: 4,
        })
    }

    pub fn a100() -> Self {
        Self::new("a100", 19.5e12, 1935e9, 196_608).unwrap()
    }

    /// A100 at the clock locked by the profiler (14.7 TFLOPS measured peak).
    pub fn a100_locked() -> Self {
        Self::new("a100-locked", 14.7e12, 1935e9, 196_608).unwrap()
    }

    pub fn rtx3090() -> Self {
        Self::new("rtx3090", 35.6e12, 936e9, 131_072).unwrap()
    }

    pub fn rtx4090() -> Self {
        Self::new("rtx4090", 82.6e12, 1008e9, 131_072).unwrap()
    }

    /// The machine this runs on. Only `fast_memory_bytes` is measured (the
    /// per-core L2 size when the OS reports it); the rates are nominal
    /// placeholders and should be overridden before drawing a roofline.
    pub fn host() -> Self {
        let fast = detect_l2_bytes().unwrap_or(DEFAULT_FAST_MEMORY);
        Self::new("host", 1e11, 2e10, fast).unwrap()
    }

    pub fn presets() -> Vec<Self> {
        vec![Self::a100(), Self::a100_locked(), Self::rtx3090(), Self::rtx4090()]
    }

    /// Machine balance in FLOP per byte.
    pub fn balance(&self) -> f64 {
        self.peak_flops / self.mem_bandwidth
    }
}

impl FromStr for HardwareProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a100" => Ok(Self::a100()),
            "a100-locked" | "a100_locked" => Ok(Self::a100_locked()),
            "rtx3090" | "3090" => Ok(Self::rtx3090()),
            "rtx4090" | "4090" => Ok(Self::rtx4090()),
            "host" => Ok(Self::host()),
            other => Err(Error::UnknownProfile(other.to_string())),
        }
    }
}

/// Size of the level-2 cache of CPU 0, from sysfs.
pub fn detect_l2_bytes() -> Option<usize> {
    let base = std::path::Path::new("/sys/devices/system/cpu/cpu0/cache");
    for entry in std::fs::read_dir(base).ok()? {
        let dir = entry.ok()?.path();
        let level = std::fs::read_to_string(dir.join("level")).ok()?;
        if level.trim() != "2" {
            continue;
        }
        let size = std::fs::read_to_string(dir.join("size")).ok()?;
        return parse_cache_size(size.trim());
    }
    None
}

fn parse_cache_size(s: &str) -> Option<usize> {
    let (digits, mult) = match s.chars().last()? {
        'K' | 'k' => (&s[..s.len() - 1], 1024),
        'M' | 'm' => (&s[..s.len() - 1], 1024 * 1024),
        _ => (s, 1),
    };
    digits.parse::<usize>().ok().map(|v| v * mult)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    ComputeBound,
    MemoryBound,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::ComputeBound => "compute_bound",
            Regime::MemoryBound => "memory_bound",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RooflinePoint {
    pub ai_per_element: f64,
    pub ai_per_byte: f64,
    pub attainable_flops: f64,
    pub regime: Regime,
}

/// Block-level arithmetic intensity in FLOP per element, exact.
pub fn arithmetic_intensity(plan: &BlockPlan) -> Ratio<u64> {
    let (ms, ns, ks, ws) = (
        plan.m_s as u64,
        plan.n_s as u64,
        plan.k_s as u64,
        plan.w_s as u64,
    );
    let num = 2 * ms * ns * ws;
    let den = ms * ks + ws * ns + 2 * ms * ns;
    if den == 0 {
        return Ratio::from_integer(0);
    }
    Ratio::new(num, den)
}

fn to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Place a plan on the roofline of `hw`. Exactly at the ridge counts as
/// compute bound.
pub fn roofline_classify(plan: &BlockPlan, hw: &HardwareProfile) -> RooflinePoint {
    let ai = arithmetic_intensity(plan);
    let ai_per_element = to_f64(ai);
    let ai_per_byte = ai_per_element / hw.element_bytes as f64;
    // ai/eb >= peak/bw  <=>  ai * bw >= peak * eb
    let lhs = *ai.numer() as f64 * hw.mem_bandwidth;
    let rhs = hw.peak_flops * hw.element_bytes as f64 * *ai.denom() as f64;
    let regime = if lhs >= rhs {
        Regime::ComputeBound
    } else {
        Regime::MemoryBound
    };
    let attainable_flops = match regime {
        Regime::ComputeBound => hw.peak_flops,
        Regime::MemoryBound => (ai_per_byte * hw.mem_bandwidth).min(hw.peak_flops),
    };
    RooflinePoint {
        ai_per_element,
        ai_per_byte,
        attainable_flops,
        regime,
    }
}

/// Compute reduction from skipping pruned vectors: `M / N`.
pub fn ideal_speedup(config: NmConfig) -> Ratio<u64> {
    Ratio::new(config.m_window() as u64, config.n_keep() as u64)
}

/// How the A block is brought into fast memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ALoad {
    /// Whole `m_s x k_s` block.
    Full,
    /// Only the `c` columns listed in `col_info`.
    Packed { c: usize },
}

/// Bytes moved per block iteration with 4-byte elements.
pub fn footprint(plan: &BlockPlan, load: ALoad) -> u64 {
    footprint_with(plan, load, 4)
}

pub fn footprint_with(plan: &BlockPlan, load: ALoad, element_bytes: usize) -> u64 {
    let a_cols = match load {
        ALoad::Full => plan.k_s,
        ALoad::Packed { c } => c,
    } as u64;
    let (ms, ns, ws, qs) = (
        plan.m_s as u64,
        plan.n_s as u64,
        plan.w_s as u64,
        plan.q_s as u64,
    );
    element_bytes as u64 * (ms * a_cols + ws * ns + 2 * ms * ns) + ws * qs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{select_plan, BlockPlan};

    fn large(k_s: usize, n: usize, m: usize) -> BlockPlan {
        BlockPlan::new(NmConfig::new(n, m, 4).unwrap(), 64, 128, k_s, 64, 32, 8, 8).unwrap()
    }

    #[test]
    fn ai_examples() {
        assert_eq!(arithmetic_intensity(&large(256, 1, 4)), Ratio::new(128, 5));
        assert_eq!(arithmetic_intensity(&large(192, 2, 4)), Ratio::new(192, 5));
        let mut empty = large(256, 1, 4);
        empty.w_s = 0;
        assert_eq!(arithmetic_intensity(&empty), Ratio::from_integer(0));
    }

    #[test]
    fn roofline_examples() {
        let hw = HardwareProfile::a100_locked();
        assert!((hw.balance() - 7.5969).abs() < 1e-3);
        let p50 = roofline_classify(&large(192, 2, 4), &hw);
        assert_eq!(p50.regime, Regime::ComputeBound);
        assert_eq!(p50.attainable_flops, hw.peak_flops);
        assert!((p50.ai_per_byte - 9.6).abs() < 1e-12);
        let p75 = roofline_classify(&large(256, 1, 4), &hw);
        assert_eq!(p75.regime, Regime::MemoryBound);
        assert!((p75.attainable_flops - 6.4 * 1935e9).abs() < 1.0);
        assert!(p75.attainable_flops < hw.peak_flops);
    }

    #[test]
    fn roofline_ridge_is_compute_bound() {
        // AI 25.6 per element = 6.4 per byte; ridge at 6.4 FLOP/byte
        let hw = HardwareProfile::new("ridge", 6.4e12, 1e12, 196_608).unwrap();
        let p = roofline_classify(&large(256, 1, 4), &hw);
        assert_eq!(p.regime, Regime::ComputeBound);
    }

    #[test]
    fn speedups() {
        assert_eq!(ideal_speedup(NmConfig::new(1, 4, 1).unwrap()), Ratio::from_integer(4));
        assert_eq!(ideal_speedup(NmConfig::new(1, 8, 1).unwrap()), Ratio::from_integer(8));
        assert_eq!(ideal_speedup(NmConfig::new(5, 5, 1).unwrap()), Ratio::from_integer(1));
    }

    #[test]
    fn footprint_bounds() {
        let plan = large(256, 1, 4);
        let idx = (plan.w_s * plan.q_s) as u64;
        let rest = 4 * (plan.w_s * plan.n_s + 2 * plan.m_s * plan.n_s) as u64;
        assert_eq!(footprint(&plan, ALoad::Packed { c: plan.w_s }), 4 * 64 * 64 + rest + idx);
        assert_eq!(footprint(&plan, ALoad::Full), 4 * 64 * 256 + rest + idx);
        assert_eq!(
            footprint(&plan, ALoad::Packed { c: plan.k_s }),
            footprint(&plan, ALoad::Full)
        );
    }

    #[test]
    fn profiles_parse() {
        assert_eq!("a100-locked".parse::<HardwareProfile>().unwrap().peak_flops, 14.7e12);
        assert_eq!("rtx4090".parse::<HardwareProfile>().unwrap().mem_bandwidth, 1008e9);
        assert!("h100".parse::<HardwareProfile>().is_err());
        assert!(HardwareProfile::new("x", 0.0, 1.0, 1).is_err());
    }

    #[test]
    fn cache_size_parse() {
        assert_eq!(parse_cache_size("2048K"), Some(2 << 20));
        assert_eq!(parse_cache_size("1M"), Some(1 << 20));
        assert_eq!(parse_cache_size("512"), Some(512));
        assert_eq!(parse_cache_size("x"), None);
    }

    #[test]
    fn host_profile_is_usable_for_planning() {
        let hw = HardwareProfile::host();
        let c = NmConfig::new(1, 8, 8).unwrap();
        assert!(select_plan(2048, 2048, 2048, c, hw.fast_memory_bytes).is_ok());
    }
}
