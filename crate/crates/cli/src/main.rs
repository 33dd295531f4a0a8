use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nmspmm::format::pad_dims;
use nmspmm::harness::{check_case, oracle_grid, write_report, PACK_THRESHOLD};
use nmspmm::io::{load_compressed, load_dense, load_pack, save_compressed, save_dense, save_pack};
use nmspmm::perf::{footprint, ideal_speedup, ALoad};
use nmspmm::planner::DEFAULT_FAST_MEMORY;
use nmspmm::rng::{random_matrix, STREAM_MASK};
use nmspmm::*;

#[derive(Parser)]
#[command(name = "nmspmm", version, about = "Vector-wise N:M sparse matrix multiplication")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded uniform [-1, 1) matrix as .nmdm
    Generate {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        stream: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a dense .nmdm matrix and write the compressed .nms form
    Prune {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 1)]
        vlen: usize,
        #[arg(long, value_enum, default_value_t = Criterion::Magnitude)]
        criterion: Criterion,
        /// Seed for the random criterion
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute the packing plan (.nmp) of a compressed matrix
    Pack {
        #[arg(long)]
        b: PathBuf,
        /// Row count of the A operands the plan will be used with
        #[arg(long)]
        rows: usize,
        #[arg(long, default_value_t = DEFAULT_FAST_MEMORY)]
        fast_memory: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multiply a dense .nmdm A by a compressed .nms B
    Spmm {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SpmmKernel::Blocked)]
        kernel: SpmmKernel,
        /// Multiply by M/N
        #[arg(long)]
        scale: bool,
        /// Packing plan from `nmspmm pack`; built on the fly when absent
        #[arg(long)]
        pack: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_FAST_MEMORY)]
        fast_memory: usize,
        /// Compare against the naive kernel; exit 1 on mismatch
        #[arg(long)]
        verify: bool,
    },
    /// Time kernels over a workload preset
    Bench {
        #[arg(long, default_value = "table_af")]
        preset: String,
        #[arg(long, requires_all = ["n", "k"])]
        m: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        /// Comma-separated N:M or N:M:L configs
        #[arg(long, default_value = "2:4,3:8,1:4,1:8")]
        sparsity_list: String,
        /// Vector length for configs written as N:M
        #[arg(long, default_value_t = 8)]
        vlen: usize,
        /// Comma-separated subset of dense_ref,naive,blocked,packed; `auto`
        /// picks blocked or packed per config
        #[arg(long, default_value = "dense_ref,auto")]
        kernels: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        check: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Criterion::Random)]
        mask: Criterion,
        /// Hardware profile whose fast-memory size drives the planner
        #[arg(long, default_value = "host")]
        profile: String,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Arithmetic intensity and roofline placement of the planned blocks
    Analyze {
        /// Comma-separated presets (a100, a100-locked, rtx3090, rtx4090, host) or `custom`
        #[arg(long, default_value = "a100-locked")]
        profile: String,
        #[arg(long, default_value = "2:4:4,3:8:4,1:4:4,1:8:4")]
        config: String,
        #[arg(long, default_value_t = 4096)]
        m: usize,
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, default_value_t = 4096)]
        k: usize,
        /// FLOP/s, for --profile custom
        #[arg(long)]
        peak_flops: Option<f64>,
        /// Bytes/s, for --profile custom
        #[arg(long)]
        bandwidth: Option<f64>,
        /// Bytes, for --profile custom
        #[arg(long)]
        fast_memory: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Run every kernel over the full equivalence grid
    Verify {
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = DEFAULT_FAST_MEMORY)]
        fast_memory: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Criterion {
    Magnitude,
    Random,
}

impl From<Criterion> for MaskMode {
    fn from(c: Criterion) -> Self {
        match c {
            Criterion::Magnitude => MaskMode::Magnitude,
            Criterion::Random => MaskMode::Random,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SpmmKernel {
    Naive,
    Blocked,
    Packed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

enum Outcome {
    Ok,
    VerificationFailed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Generate { rows, cols, seed, stream, out } => {
            save_dense(&out, &random_matrix(rows, cols, seed, stream))?;
        }
        Command::Prune { input, n, m, vlen, criterion, seed, out } => {
            let config = NmConfig::new(n, m, vlen)?;
            let b = load_dense(&input).with_context(|| format!("reading {}", input.display()))?;
            let pruned = match criterion {
                Criterion::Magnitude => prune_magnitude(&b, config)?,
                Criterion::Random => prune_random(&b, config, seed, STREAM_MASK)?,
            };
            let bc = compress(&pruned, config)?;
            save_compressed(&out, &bc)?;
            eprintln!("{config}: {}x{} -> {} compressed rows", bc.k_orig(), bc.n_cols(), bc.w());
        }
        Command::Pack { b, rows, fast_memory, out } => {
            let bc = load_compressed(&b).with_context(|| format!("reading {}", b.display()))?;
            let plan = select_plan(rows, bc.n_cols(), bc.k_orig(), bc.config(), fast_memory)?;
            let pack = PackPlan::build(&bc, &plan)?;
            save_pack(&out, &pack)?;
            eprintln!("{} blocks, widest packed panel {} of k_s={}", pack.blocks.len(), pack.max_width(), plan.k_s);
        }
        Command::Spmm { a, b, out, kernel, scale, pack, fast_memory, verify } => {
            let bc = load_compressed(&b).with_context(|| format!("reading {}", b.display()))?;
            let a = load_dense(&a).with_context(|| format!("reading {}", a.display()))?;
            if a.cols() > bc.k_orig() {
                bail!("A has {} columns but B has {} rows", a.cols(), bc.k_orig());
            }
            let a = a.padded(a.rows(), bc.k_orig())?;
            let opts = SpmmOptions { apply_scale: scale };
            let plan = select_plan(a.rows(), bc.n_cols(), bc.k_orig(), bc.config(), fast_memory)?;
            let c = match kernel {
                SpmmKernel::Naive => spmm_naive(&a, &bc, opts)?,
                SpmmKernel::Blocked => spmm_blocked(&a, &bc, &plan, opts)?,
                SpmmKernel::Packed => {
                    let pack = match pack {
                        Some(p) => load_pack(&p).with_context(|| format!("reading {}", p.display()))?,
                        None => PackPlan::build(&bc, &plan)?,
                    };
                    spmm_packed(&a, &bc, &pack, &plan, opts)?
                }
            };
            save_dense(&out, &c)?;
            if verify {
                let err = max_rel_err(&c, &spmm_naive(&a, &bc, opts)?)?;
                let ok = err <= nmspmm::spmm::TOLERANCE;
                eprintln!("max_rel_err {err:.3e} {}", if ok { "ok" } else { "FAILED" });
                if !ok {
                    return Ok(Outcome::VerificationFailed);
                }
            }
        }
        Command::Bench {
            preset,
            m,
            n,
            k,
            sparsity_list,
            vlen,
            kernels,
            repeats,
            threads,
            check,
            seed,
            mask,
            profile,
            output,
            format,
        } => {
            let dims = m.zip(n).zip(k).map(|((m, n), k)| (m, n, k));
            let preset = Preset::parse(&preset, dims)?;
            let configs = parse_configs(&sparsity_list, vlen)?;
            let kernels = parse_kernels(&kernels)?;
            let hw: HardwareProfile = profile.parse()?;
            let workloads = generate_workloads(&preset, &configs, seed, mask.into());
            let mut records = Vec::new();
            for wl in &workloads {
                let opts = BenchOptions {
                    kernels: kernels(wl.config),
                    repeats,
                    threads: threads.unwrap_or_else(rayon_default_threads),
                    check,
                    hw: hw.clone(),
                    opts: SpmmOptions::default(),
                };
                let recs = run_bench(std::slice::from_ref(wl), &opts)?;
                for r in &recs {
                    eprintln!(
                        "{} {}:{}:{} {:<9} {:>10.6}s {:>8.2} GFLOP/s x{:.2}",
                        r.workload_id, r.n_keep, r.m_window, r.vector_len, r.kernel, r.wall_time_s, r.gflops, r.speedup_vs_dense
                    );
                }
                records.extend(recs);
            }
            match output {
                Some(path) => emit_report(&records, format.into(), &path)?,
                None => write_report(&records, format.into(), io::stdout().lock())?,
            }
            if records.iter().any(|r| !r.passed()) {
                eprintln!("verification failed for {} records", records.iter().filter(|r| !r.passed()).count());
                return Ok(Outcome::VerificationFailed);
            }
        }
        Command::Analyze {
            profile,
            config,
            m,
            n,
            k,
            peak_flops,
            bandwidth,
            fast_memory,
            output,
            format,
        } => {
            let mut profiles = Vec::new();
            for name in profile.split(',').map(str::trim) {
                if name == "custom" {
                    let (Some(p), Some(b)) = (peak_flops, bandwidth) else {
                        bail!("--profile custom needs --peak-flops and --bandwidth");
                    };
                    profiles.push(HardwareProfile::new("custom", p, b, fast_memory.unwrap_or(DEFAULT_FAST_MEMORY))?);
                } else {
                    let mut hw: HardwareProfile = name.parse()?;
                    if let Some(f) = fast_memory {
                        hw.fast_memory_bytes = f;
                    }
                    profiles.push(hw);
                }
            }
            let configs = parse_configs(&config, 1)?;
            let mut rows = Vec::new();
            for hw in &profiles {
                for &c in &configs {
                    rows.push(analyze_row(hw, c, m, n, k)?);
                }
            }
            let mut sink: Box<dyn Write> = match &output {
                Some(p) => Box::new(io::BufWriter::new(std::fs::File::create(p)?)),
                None => Box::new(io::stdout().lock()),
            };
            match format {
                Format::Json => {
                    serde_json::to_writer_pretty(&mut sink, &rows)?;
                    writeln!(sink)?;
                }
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(sink);
                    for r in &rows {
                        w.serialize(r)?;
                    }
                    w.flush()?;
                }
            }
        }
        Command::Verify { seeds, fast_memory } => {
            let cases = oracle_grid(&seeds);
            let mut failed = 0;
            for case in &cases {
                let out = check_case(case, fast_memory)?;
                if !out.passed() {
                    failed += 1;
                    println!(
                        "FAIL {} {}x{}x{} {:?} seed {}: naive_exact={} blocked={:.3e} packed={:.3e}",
                        case.config, case.m, case.n, case.k, case.mask_mode, case.seed,
                        out.naive_exact, out.blocked_err, out.packed_err
                    );
                }
            }
            println!("{} of {} cases passed", cases.len() - failed, cases.len());
            if failed > 0 {
                return Ok(Outcome::VerificationFailed);
            }
        }
    }
    Ok(Outcome::Ok)
}

fn rayon_default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn parse_configs(list: &str, default_vlen: usize) -> Result<Vec<NmConfig>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let c: NmConfig = s.parse()?;
            Ok(if s.matches(':').count() == 1 {
                c.with_vector_len(default_vlen)?
            } else {
                c
            })
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|v| if v.is_empty() { bail!("empty config list") } else { Ok(v) })
}

/// Kernel list per config; `auto` resolves through the sparsity threshold.
fn parse_kernels(list: &str) -> Result<impl Fn(NmConfig) -> Vec<KernelKind>> {
    let mut fixed = Vec::new();
    let mut auto = false;
    for s in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if s == "auto" {
            auto = true;
        } else {
            fixed.push(s.parse::<KernelKind>()?);
        }
    }
    if fixed.is_empty() && !auto {
        bail!("empty kernel list");
    }
    Ok(move |c: NmConfig| {
        let mut v = fixed.clone();
        let picked = KernelKind::for_config(c, PACK_THRESHOLD);
        if auto && !v.contains(&picked) {
            v.push(picked);
        }
        v
    })
}

#[derive(Serialize)]
struct AnalyzeRow {
    profile: String,
    config: String,
    sparsity: f64,
    m_s: usize,
    n_s: usize,
    k_s: usize,
    w_s: usize,
    ai_element: f64,
    ai_byte: f64,
    regime: Regime,
    attainable_flops: f64,
    ideal_speedup: f64,
    footprint_packed: u64,
    footprint_unpacked: u64,
}

fn analyze_row(hw: &HardwareProfile, config: NmConfig, m: usize, n: usize, k: usize) -> Result<AnalyzeRow> {
    let (k, n) = pad_dims(k, n, config);
    let plan = select_plan(m, n, k, config, hw.fast_memory_bytes)?;
    let point = roofline_classify(&plan, hw);
    let speedup = ideal_speedup(config);
    Ok(AnalyzeRow {
        profile: hw.name.clone(),
        config: config.to_string(),
        sparsity: config.sparsity(),
        m_s: plan.m_s,
        n_s: plan.n_s,
        k_s: plan.k_s,
        w_s: plan.w_s,
        ai_element: point.ai_per_element,
        ai_byte: point.ai_per_byte,
        regime: point.regime,
        attainable_flops: point.attainable_flops,
        ideal_speedup: *speedup.numer() as f64 / *speedup.denom() as f64,
        footprint_packed: footprint(&plan, ALoad::Packed { c: plan.w_s }),
        footprint_unpacked: footprint(&plan, ALoad::Full),
    })
}
