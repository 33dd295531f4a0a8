//! Workload generation, timing and reporting for the benchmark driver,
//! plus the oracle grid behind `nmspmm verify`.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{compress, decompress, pad_dims, prune_magnitude, prune_random, NmCompressed, NmConfig};
use crate::matrix::{max_rel_err, DenseMatrix};
use crate::packing::{choose_path_with, spmm_packed, KernelPath, PackPlan, DEFAULT_PACK_THRESHOLD};
use crate::perf::HardwareProfile;
use crate::planner::select_plan;
use crate::rng::{random_matrix, STREAM_A, STREAM_B, STREAM_MASK};
use crate::spmm::{gemm_blocked, gemm_reference, spmm_blocked, spmm_naive, SpmmOptions, TOLERANCE};

/// Representative `(n, k)` shapes of Llama-family linear layers: attention
/// projections, grouped-query K/V projections, MLP up/gate and down
/// projections, and LM heads.
pub const LLAMA_NK: [(usize, usize); 20] = [
    (4096, 4096),
    (11008, 4096),
    (4096, 11008),
    (5120, 5120),
    (13824, 5120),
    (5120, 13824),
    (6656, 6656),
    (17920, 6656),
    (6656, 17920),
    (8192, 8192),
    (22016, 8192),
    (8192, 22016),
    (1024, 8192),
    (28672, 8192),
    (8192, 28672),
    (1024, 4096),
    (14336, 4096),
    (4096, 14336),
    (32000, 4096),
    (32000, 5120),
];

/// Sequence lengths `2^8 ..= 2^12`.
pub const LLAMA_M: [usize; 5] = [256, 512, 1024, 2048, 4096];

/// Labelled small/medium/large shapes `(label, m, n, k)`.
pub const TABLE_AF: [(&str, usize, usize, usize); 6] = [
    ("A", 512, 512, 512),
    ("B", 512, 1024, 1024),
    ("C", 512, 2048, 2048),
    ("D", 1024, 2048, 2048),
    ("E", 2048, 4096, 4096),
    ("F", 4096, 4096, 4096),
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Magnitude,
    #[default]
    Random,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Self::Magnitude),
            "random" => Ok(Self::Random),
            _ => Err(Error::InvalidConfig(format!("unknown mask mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Preset {
    LlamaGrid,
    TableAf,
    Custom { m: usize, n: usize, k: usize },
}

impl Preset {
    /// `dims` is required for `custom` and ignored otherwise.
    pub fn parse(name: &str, dims: Option<(usize, usize, usize)>) -> Result<Self> {
        match name {
            "llama_grid" | "llama" => Ok(Self::LlamaGrid),
            "table_af" | "table" => Ok(Self::TableAf),
            "custom" => {
                let (m, n, k) = dims.ok_or_else(|| {
                    Error::InvalidConfig("custom preset needs m, n and k".into())
                })?;
                if m == 0 || n == 0 || k == 0 {
                    return Err(Error::InvalidConfig("dimensions must be >= 1".into()));
                }
                Ok(Self::Custom { m, n, k })
            }
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    fn shapes(&self) -> Vec<(String, usize, usize, usize)> {
        match self {
            Preset::LlamaGrid => LLAMA_M
                .iter()
                .flat_map(|&m| {
                    LLAMA_NK
                        .iter()
                        .map(move |&(n, k)| (format!("llama_m{m}_n{n}_k{k}"), m, n, k))
                })
                .collect(),
            Preset::TableAf => TABLE_AF
                .iter()
                .map(|&(l, m, n, k)| (l.to_string(), m, n, k))
                .collect(),
            Preset::Custom { m, n, k } => vec![(format!("custom_m{m}_n{n}_k{k}"), *m, *n, *k)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub id: String,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub config: NmConfig,
    pub seed: u64,
    pub mask_mode: MaskMode,
}

impl Workload {
    /// `A` (`m x k_pad`) and the pruned, compressed `B`.
    pub fn materialize(&self) -> Result<(DenseMatrix, NmCompressed)> {
        let (k_pad, _) = pad_dims(self.k, self.n, self.config);
        let a = random_matrix(self.m, self.k, self.seed, STREAM_A).padded(self.m, k_pad)?;
        let b = random_matrix(self.k, self.n, self.seed, STREAM_B);
        let pruned = match self.mask_mode {
            MaskMode::Magnitude => prune_magnitude(&b, self.config)?,
            MaskMode::Random => prune_random(&b, self.config, self.seed, STREAM_MASK)?,
        };
        Ok((a, compress(&pruned, self.config)?))
    }
}

fn mix(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Every preset shape crossed with every config, shapes outermost.
pub fn generate_workloads(
    preset: &Preset,
    configs: &[NmConfig],
    seed: u64,
    mask_mode: MaskMode,
) -> Vec<Workload> {
    preset
        .shapes()
        .into_iter()
        .enumerate()
        .flat_map(|(i, (id, m, n, k))| {
            configs.iter().map(move |&config| Workload {
                id: id.clone(),
                m,
                n,
                k,
                config,
                seed: mix(seed, i as u64),
                mask_mode,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    DenseRef,
    Naive,
    Blocked,
    Packed,
}

impl KernelKind {
    /// Blocked or packed, whichever the sparsity threshold selects.
    pub fn for_config(config: NmConfig, threshold: f64) -> Self {
        match choose_path_with(config, threshold) {
            KernelPath::Packed => Self::Packed,
            KernelPath::NonPacked => Self::Blocked,
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::DenseRef => "dense_ref",
            KernelKind::Naive => "naive",
            KernelKind::Blocked => "blocked",
            KernelKind::Packed => "packed",
        })
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense_ref" | "dense" => Ok(Self::DenseRef),
            "naive" => Ok(Self::Naive),
            "blocked" => Ok(Self::Blocked),
            "packed" => Ok(Self::Packed),
            _ => Err(Error::InvalidConfig(format!("unknown kernel `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub kernels: Vec<KernelKind>,
    pub repeats: usize,
    pub threads: usize,
    /// Compare every kernel output against `spmm_naive`.
    pub check: bool,
    pub hw: HardwareProfile,
    pub opts: SpmmOptions,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            kernels: vec![KernelKind::DenseRef, KernelKind::Blocked, KernelKind::Packed],
            repeats: 3,
            threads: rayon::current_num_threads(),
            check: false,
            hw: HardwareProfile::host(),
            opts: SpmmOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub workload_id: String,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    #[serde(rename = "N")]
    pub n_keep: usize,
    #[serde(rename = "M")]
    pub m_window: usize,
    #[serde(rename = "L")]
    pub vector_len: usize,
    pub sparsity: f64,
    pub kernel: KernelKind,
    pub wall_time_s: f64,
    /// `2 * m * n * w` FLOPs per second / 1e9, for every kernel including
    /// the dense one, so the ratio between records equals the time ratio.
    pub gflops: f64,
    pub speedup_vs_dense: f64,
    pub max_rel_err: Option<f64>,
}

impl BenchRecord {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_none_or(|e| e <= TOLERANCE)
    }
}

/// Run once to warm up, then `repeats` timed runs; returns the warm-up
/// output and the median time.
fn time_median<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let out = f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        let r = f()?;
        times.push(t0.elapsed().as_secs_f64());
        drop(r);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    };
    Ok((out, median))
}

/// Benchmark every (workload, kernel) pair. Matrix generation, pack-plan
/// construction and verification are outside the timed region. The dense
/// baseline is timed once per padded shape.
pub fn run_bench(workloads: &[Workload], opts: &BenchOptions) -> Result<Vec<BenchRecord>> {
    if opts.repeats < 3 {
        return Err(Error::TooFewRepeats(opts.repeats));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut dense_times: HashMap<(usize, usize, usize), f64> = HashMap::new();
        let mut records = Vec::new();
        for wl in workloads {
            let (a, bc) = wl.materialize()?;
            let (m, n, k) = (a.rows(), bc.n_cols(), bc.k_orig());
            let fast = opts.hw.fast_memory_bytes;
            let dense_plan = select_plan(m, n, k, NmConfig::dense(), fast)?;
            let reference = if opts.check {
                Some(spmm_naive(&a, &bc, opts.opts)?)
            } else {
                None
            };
            let dense_b = decompress(&bc);
            let dense_time = match dense_times.get(&(m, n, k)) {
                Some(&t) => t,
                None => {
                    let (_, t) = time_median(opts.repeats, || gemm_blocked(&a, &dense_b, &dense_plan))?;
                    dense_times.insert((m, n, k), t);
                    t
                }
            };
            let plan = select_plan(m, n, k, wl.config, fast)?;
            let flops = 2.0 * m as f64 * n as f64 * bc.w() as f64;
            for &kernel in &opts.kernels {
                let (out, time) = match kernel {
                    KernelKind::DenseRef => {
                        let mut c = gemm_blocked(&a, &dense_b, &dense_plan)?;
                        if opts.opts.apply_scale {
                            let cfg = wl.config;
                            c.scale(cfg.m_window() as f32 / cfg.n_keep() as f32);
                        }
                        (c, dense_time)
                    }
                    KernelKind::Naive => time_median(opts.repeats, || spmm_naive(&a, &bc, opts.opts))?,
                    KernelKind::Blocked => {
                        time_median(opts.repeats, || spmm_blocked(&a, &bc, &plan, opts.opts))?
                    }
                    KernelKind::Packed => {
                        let pack = PackPlan::build(&bc, &plan)?;
                        time_median(opts.repeats, || spmm_packed(&a, &bc, &pack, &plan, opts.opts))?
                    }
                };
                let err = match &reference {
                    Some(r) => Some(max_rel_err(&out, r)?),
                    None => None,
                };
                records.push(BenchRecord {
                    workload_id: wl.id.clone(),
                    m: wl.m,
                    n: wl.n,
                    k: wl.k,
                    n_keep: wl.config.n_keep(),
                    m_window: wl.config.m_window(),
                    vector_len: wl.config.vector_len(),
                    sparsity: wl.config.sparsity(),
                    kernel,
                    wall_time_s: time,
                    gflops: flops / time / 1e9,
                    speedup_vs_dense: dense_time / time,
                    max_rel_err: err,
                });
            }
        }
        Ok(records)
    })
}

/// Default kernel choice threshold re-exported for callers building kernel lists.
pub const PACK_THRESHOLD: f64 = DEFAULT_PACK_THRESHOLD;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::InvalidConfig(format!("unknown report format `{s}`"))),
        }
    }
}

pub const CSV_HEADER: &str =
    "workload_id,m,n,k,N,M,L,sparsity,kernel,wall_time_s,gflops,speedup_vs_dense,max_rel_err";

pub fn write_report<W: Write>(records: &[BenchRecord], format: ReportFormat, out: W) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyReport);
    }
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in records {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, records)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
    }
    Ok(())
}

/// Write `records` to `path`. Nothing is created when `records` is empty.
pub fn emit_report(records: &[BenchRecord], format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyReport);
    }
    let file = BufWriter::new(File::create(path)?);
    write_report(records, format, file)
}

/// One point of the kernel-equivalence grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleCase {
    pub config: NmConfig,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub mask_mode: MaskMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutcome {
    pub case: OracleCase,
    /// `spmm_naive` equals the dense product of the decompressed matrix bit for bit.
    pub naive_exact: bool,
    pub blocked_err: f64,
    pub packed_err: f64,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        self.naive_exact && self.blocked_err <= TOLERANCE && self.packed_err <= TOLERANCE
    }
}

pub const ORACLE_CONFIGS: [(usize, usize); 5] = [(2, 4), (3, 8), (2, 8), (1, 8), (16, 32)];
pub const ORACLE_VECTOR_LENS: [usize; 3] = [1, 4, 8];
pub const ORACLE_SIZES: [(usize, usize, usize); 3] = [(64, 64, 64), (128, 256, 128), (512, 512, 512)];

/// Configs x vector lengths x sizes x mask modes x `seeds`.
pub fn oracle_grid(seeds: &[u64]) -> Vec<OracleCase> {
    let mut cases = Vec::new();
    for &(nk, mw) in &ORACLE_CONFIGS {
        for &l in &ORACLE_VECTOR_LENS {
            let config = NmConfig::new(nk, mw, l).expect("grid configs are valid");
            for &(m, n, k) in &ORACLE_SIZES {
                for mask_mode in [MaskMode::Magnitude, MaskMode::Random] {
                    for &seed in seeds {
                        cases.push(OracleCase {
                            config,
                            m,
                            n,
                            k,
                            mask_mode,
                            seed,
                        });
                    }
                }
            }
        }
    }
    cases
}

/// Run all kernels on one grid point against the dense oracle.
pub fn check_case(case: &OracleCase, fast_memory_bytes: usize) -> Result<OracleOutcome> {
    let wl = Workload {
        id: String::new(),
        m: case.m,
        n: case.n,
        k: case.k,
        config: case.config,
        seed: case.seed,
        mask_mode: case.mask_mode,
    };
    let (a, bc) = wl.materialize()?;
    let opts = SpmmOptions::default();
    let oracle = gemm_reference(&a, &decompress(&bc))?;
    let naive = spmm_naive(&a, &bc, opts)?;
    let plan = select_plan(a.rows(), bc.n_cols(), bc.k_orig(), case.config, fast_memory_bytes)?;
    let blocked = spmm_blocked(&a, &bc, &plan, opts)?;
    let pack = PackPlan::build(&bc, &plan)?;
    let packed = spmm_packed(&a, &bc, &pack, &plan, opts)?;
    Ok(OracleOutcome {
        case: case.clone(),
        naive_exact: naive.bit_eq(&oracle),
        blocked_err: max_rel_err(&blocked, &oracle)?,
        packed_err: max_rel_err(&packed, &oracle)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(s: &str) -> NmConfig {
        s.parse().unwrap()
    }

    #[test]
    fn presets() {
        let t = generate_workloads(&Preset::TableAf, &[cfg("2:4")], 1, MaskMode::Random);
        assert_eq!(t.len(), 6);
        assert!(t.iter().any(|w| (w.m, w.n, w.k) == (512, 512, 512)));
        assert!(t.iter().any(|w| (w.m, w.n, w.k) == (4096, 4096, 4096)));

        let configs = [cfg("2:4:8"), cfg("1:8:8")];
        let l = generate_workloads(&Preset::LlamaGrid, &configs, 1, MaskMode::Random);
        assert_eq!(l.len(), 200);
        for c in configs {
            assert_eq!(l.iter().filter(|w| w.config == c).count(), 100);
        }

        let c = Preset::parse("custom", Some((3, 4, 5))).unwrap();
        let w = generate_workloads(&c, &[cfg("1:4")], 0, MaskMode::Magnitude);
        assert_eq!(w.len(), 1);
        assert_eq!((w[0].m, w[0].n, w[0].k), (3, 4, 5));

        assert!(matches!(Preset::parse("resnet", None), Err(Error::UnknownPreset(_))));
        assert!(Preset::parse("custom", None).is_err());
    }

    #[test]
    fn llama_shapes_fit_wide_windows() {
        for (n, k) in LLAMA_NK {
            assert_eq!(k % 32, 0);
            assert_eq!(n % 8, 0);
        }
    }

    #[test]
    fn materialize_is_reproducible_and_pads() {
        let w = Workload {
            id: "x".into(),
            m: 5,
            n: 7,
            k: 9,
            config: cfg("1:4:2"),
            seed: 11,
            mask_mode: MaskMode::Random,
        };
        let (a1, b1) = w.materialize().unwrap();
        let (a2, b2) = w.materialize().unwrap();
        assert!(a1.bit_eq(&a2));
        assert_eq!(b1, b2);
        assert_eq!((a1.cols(), b1.k_orig(), b1.n_cols()), (12, 12, 8));
    }

    fn small_bench(kernels: Vec<KernelKind>, repeats: usize, check: bool) -> Result<Vec<BenchRecord>> {
        let wl = generate_workloads(
            &Preset::Custom { m: 64, n: 64, k: 64 },
            &[cfg("1:4:4")],
            3,
            MaskMode::Random,
        );
        run_bench(
            &wl,
            &BenchOptions {
                kernels,
                repeats,
                threads: 2,
                check,
                hw: HardwareProfile::a100(),
                opts: SpmmOptions::default(),
            },
        )
    }

    #[test]
    fn bench_records_and_checks() {
        let all = vec![
            KernelKind::DenseRef,
            KernelKind::Naive,
            KernelKind::Blocked,
            KernelKind::Packed,
        ];
        let recs = small_bench(all, 3, true).unwrap();
        assert_eq!(recs.len(), 4);
        for r in &recs {
            assert!(r.passed(), "{r:?}");
            assert!(r.max_rel_err.is_some());
            assert!(r.wall_time_s > 0.0 && r.gflops > 0.0);
            let w = 64 / 4;
            let expect = 2.0 * 64.0 * 64.0 * w as f64 / r.wall_time_s / 1e9;
            assert!((r.gflops - expect).abs() <= 1e-9 * expect);
        }
        assert_eq!(recs[0].speedup_vs_dense, 1.0);
        assert!(matches!(
            small_bench(vec![KernelKind::Blocked], 2, false),
            Err(Error::TooFewRepeats(2))
        ));
        let unchecked = small_bench(vec![KernelKind::Blocked], 3, false).unwrap();
        assert_eq!(unchecked[0].max_rel_err, None);
    }

    #[test]
    fn reports() {
        let recs = small_bench(vec![KernelKind::Blocked], 3, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("r.csv");
        emit_report(&recs, ReportFormat::Csv, &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(text.ends_with('\n'));
        assert!(lines[1].starts_with("custom_m64_n64_k64,64,64,64,1,4,4,0.75,blocked,"));

        let json_path = dir.path().join("r.json");
        emit_report(&recs, ReportFormat::Json, &json_path).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        let obj = v.as_array().unwrap()[0].as_object().unwrap();
        for key in CSV_HEADER.split(',') {
            assert!(obj.contains_key(key), "{key}");
        }

        let empty_path = dir.path().join("empty.csv");
        assert!(matches!(
            emit_report(&[], ReportFormat::Csv, &empty_path),
            Err(Error::EmptyReport)
        ));
        assert!(!empty_path.exists());
    }

    #[test]
    fn kernel_names() {
        for k in [KernelKind::DenseRef, KernelKind::Naive, KernelKind::Blocked, KernelKind::Packed] {
            assert_eq!(k.to_string().parse::<KernelKind>().unwrap(), k);
        }
        assert_eq!(KernelKind::for_config(cfg("1:8"), PACK_THRESHOLD), KernelKind::Packed);
        assert_eq!(KernelKind::for_config(cfg("3:8"), PACK_THRESHOLD), KernelKind::Blocked);
    }

    #[test]
    fn grid_size_and_one_case() {
        assert_eq!(oracle_grid(&[1, 2, 3]).len(), 5 * 3 * 3 * 2 * 3);
        let case = OracleCase {
            config: cfg("3:8:4"),
            m: 64,
            n: 64,
            k: 64,
            mask_mode: MaskMode::Magnitude,
            seed: 5,
        };
        let out = check_case(&case, 196_608).unwrap();
        assert!(out.passed(), "{out:?}");
    }
}
