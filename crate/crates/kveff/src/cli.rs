//! `kveff` subcommands: `cost`, `simulate`, `bench`, `sweep`, `defaults`.
//!
//! Exit codes: 0 success, 1 failed check, 2 configuration error, 3 IO error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use kveff_core::cost::{self, GateTerm};
use kveff_core::decode::{self, run_decode_detailed, Backend, Clock, NoClock, SweepGrid};
use serde::Serialize;

use crate::bench::{bench_attention, StdClock};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::formats;

#[derive(Debug, Parser)]
#[command(
    name = "kveff",
    version,
    about = "Chunked, gated KV-cache compression: cost model, simulator and benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analytical FLOPs / memory / Amdahl report.
    Cost(CostArgs),
    /// Decode with the full and the compressed cache and compare.
    Simulate(SimulateArgs),
    /// Time the attend kernel at several cache lengths.
    Bench(BenchArgs),
    /// Run the simulator over a grid of C, W and tau.
    Sweep(SweepArgs),
    /// Print the default configuration as JSON.
    Defaults(DefaultsArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file (flat keys, see `defaults`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[command(flatten)]
    pub common: Common,
    /// Use the 8B-scale reference parameters.
    #[arg(long)]
    pub paper: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Chunk size override.
    #[arg(long = "C")]
    pub chunk_size: Option<String>,
    /// Recent window override.
    #[arg(long = "W")]
    pub window: Option<String>,
    /// Retention threshold override.
    #[arg(long = "tau")]
    pub threshold: Option<String>,
    /// Require zero divergence between backends (exit 1 otherwise). Unless
    /// --W is given, the window is widened to cover the whole sequence.
    #[arg(long)]
    pub equivalence_check: bool,
    /// Directory for trace files (overrides `trace_dir`).
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
    /// Include full output vectors in traces.
    #[arg(long)]
    pub verbose: bool,
    /// Record wall-clock attention time per step (non-deterministic).
    #[arg(long)]
    pub timings: bool,
    /// Also write the summary as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated cache lengths (overrides `bench_lengths`).
    #[arg(long)]
    pub lengths: Option<String>,
    /// Samples per length (overrides `bench_repetitions`).
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated chunk sizes.
    #[arg(long = "C")]
    pub chunk_sizes: Option<String>,
    /// Comma-separated recent windows.
    #[arg(long = "W")]
    pub windows: Option<String>,
    /// Comma-separated thresholds.
    #[arg(long = "tau")]
    pub thresholds: Option<String>,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DefaultsArgs {
    /// Print the 8B-scale reference configuration instead.
    #[arg(long)]
    pub paper: bool,
}

/// Parses `--<axis> a,b,c`; errors name the axis.
pub fn parse_axis<T: std::str::FromStr>(axis: &str, raw: &str) -> Result<Vec<T>, CliError> {
    let values: Result<Vec<T>, _> = raw.split(',').map(|s| s.trim().parse::<T>()).collect();
    match values {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Config(format!(
            "malformed --{axis} list: {raw:?}"
        ))),
    }
}

fn parse_single<T: std::str::FromStr>(axis: &str, raw: &str) -> Result<T, CliError> {
    raw.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("malformed --{axis} value: {raw:?}")))
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io("<stdout>", e))
}

/// Integer part with thousands separators; fractional part kept to 3 places.
fn grouped(x: f64) -> String {
    let neg = x < 0.0;
    let x = x.abs();
    let int = x.trunc() as u128;
    let frac = x - x.trunc();
    let digits = int.to_string();
    let mut s = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            s.push(',');
        }
        s.push(c);
    }
    if frac > 0.0 {
        let f = format!("{frac:.3}");
        s.push_str(&f[1..]);
    }
    if neg {
        s.insert(0, '-');
    }
    s
}

const AMDAHL_GRID: [f64; 7] = [0.5, 0.6, 0.7, 0.75, 0.8, 0.9, 1.0];

#[derive(Serialize)]
struct AmdahlPoint {
    p: f64,
    s_gate_excluded: f64,
    s_gate_included: f64,
}

#[derive(Serialize)]
struct CostJson {
    params: kveff_core::CostParams,
    gate_excluded: kveff_core::CostReport,
    gate_included: kveff_core::CostReport,
    amdahl: Vec<AmdahlPoint>,
    notes: Vec<&'static str>,
}

const AMDAHL_NOTE: &str =
    "end-to-end speedup uses the standard Amdahl form S = 1 / ((1 - P) + P / k)";

pub fn cmd_cost(args: &CostArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    if args.paper {
        cfg.apply_paper_preset();
    }
    let p = cfg.cost_params()?;
    let excl = cost::report(&p, GateTerm::Excluded)?;
    let incl = cost::report(&p, GateTerm::Included)?;
    let amdahl = AMDAHL_GRID
        .iter()
        .map(|&f| {
            Ok(AmdahlPoint {
                p: f,
                s_gate_excluded: cost::end_to_end_speedup(f, excl.attention_speedup)?,
                s_gate_included: cost::end_to_end_speedup(f, incl.attention_speedup)?,
            })
        })
        .collect::<Result<Vec<_>, kveff_core::Error>>()?;

    let mib = |b: u64| b as f64 / (1024.0 * 1024.0);
    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(w, "attention cost per layer per token (2 FLOPs per MAC)");
    let _ = writeln!(
        w,
        "  d_model={} H={} d_k={} kv_heads={} L={} d_g={} C={} W={} r={} bytes/elem={}",
        p.d_model,
        p.n_heads,
        p.head_dim,
        p.kv_heads,
        p.n_layers,
        p.gate_hidden,
        p.chunk_size,
        p.recent_window,
        p.retention_rate,
        p.bytes_per_element
    );
    let _ = writeln!(w, "lengths");
    let _ = writeln!(w, "  {:<24}{:>20}", "n", grouped(p.context_len as f64));
    let _ = writeln!(w, "  {:<24}{:>20}", "chunks formed N_c", excl.n_chunks);
    let _ = writeln!(w, "  {:<24}{:>20}", "chunks retained M", excl.retained);
    let _ = writeln!(
        w,
        "  {:<24}{:>20}",
        "n' = W + M",
        grouped(excl.n_prime as f64)
    );
    let _ = writeln!(
        w,
        "  {:<24}{:>20.3}",
        "retained fraction n'/n", excl.retained_fraction
    );
    let _ = writeln!(w, "flops");
    let _ = writeln!(w, "  {:<24}{:>20}", "base", grouped(excl.flops_base));
    let _ = writeln!(
        w,
        "  {:<24}{:>20}",
        "kv_eff (gate excluded)",
        grouped(excl.flops_kv_eff)
    );
    let _ = writeln!(
        w,
        "  {:<24}{:>20}",
        "kv_eff (gate included)",
        grouped(incl.flops_kv_eff)
    );
    let _ = writeln!(
        w,
        "  {:<24}{:>19.3}%",
        "gate term share",
        (incl.flops_kv_eff / excl.flops_kv_eff - 1.0) * 100.0
    );
    let _ = writeln!(w, "attention speedup");
    let _ = writeln!(
        w,
        "  {:<24}{:>20.3}",
        "gate excluded", excl.attention_speedup
    );
    let _ = writeln!(
        w,
        "  {:<24}{:>20.3}",
        "gate included", incl.attention_speedup
    );
    let _ = writeln!(w, "kv memory (all layers)");
    let _ = writeln!(
        w,
        "  {:<24}{:>20}  ({:.1} MiB)",
        "base bytes",
        grouped(excl.kv_bytes_base as f64),
        mib(excl.kv_bytes_base)
    );
    let _ = writeln!(
        w,
        "  {:<24}{:>20}  ({:.1} MiB)",
        "compressed bytes",
        grouped(excl.kv_bytes_eff as f64),
        mib(excl.kv_bytes_eff)
    );
    let _ = writeln!(
        w,
        "  {:<24}{:>20.3}",
        "memory ratio n/n'", excl.memory_ratio
    );
    let _ = writeln!(w, "end-to-end speedup, Amdahl S = 1 / ((1 - P) + P / k)");
    let _ = writeln!(w, "  {:<8}{:>16}{:>16}", "P", "S gate excl", "S gate incl");
    for a in &amdahl {
        let _ = writeln!(
            w,
            "  {:<8.2}{:>16.3}{:>16.3}",
            a.p, a.s_gate_excluded, a.s_gate_included
        );
    }
    let _ = writeln!(
        w,
        "  {:<8}{:>16.3}{:>16.3}",
        format!("P={}", p.amdahl_fraction),
        excl.end_to_end_speedup,
        incl.end_to_end_speedup
    );
    emit(out, &s)?;

    if let Some(path) = &args.json {
        let doc = CostJson {
            params: p,
            gate_excluded: excl,
            gate_included: incl,
            amdahl,
            notes: vec![AMDAHL_NOTE],
        };
        let text = serde_json::to_string_pretty(&doc).expect("report serializes");
        formats::write_file(path, text.as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SimulateJson<'a> {
    config: &'a RunConfig,
    summary: &'a decode::SimSummary,
}

pub fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(c) = &args.chunk_size {
        cfg.chunk_size = parse_single("C", c)?;
    }
    if let Some(t) = &args.threshold {
        cfg.threshold = parse_single("tau", t)?;
    }
    match &args.window {
        Some(wv) => cfg.recent_window = parse_single("W", wv)?,
        None if args.equivalence_check => cfg.recent_window = cfg.recent_window.max(cfg.seq_len),
        None => {}
    }
    let sim = cfg.sim_config()?;

    let mut std_clock = StdClock::default();
    let mut no_clock = NoClock;
    let clock: &mut dyn Clock = if args.timings {
        &mut std_clock
    } else {
        &mut no_clock
    };
    let (full, _) = run_decode_detailed(&sim, Backend::Full, clock)?;
    let (eff, dump) = run_decode_detailed(&sim, Backend::KvEfficient, clock)?;
    let summary = decode::summarize(&full, &eff)?;

    let dir = args
        .trace_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.trace_dir));
    for (name, trace) in [
        ("trace_full.jsonl", &full),
        ("trace_kv_efficient.jsonl", &eff),
    ] {
        let mut buf = Vec::new();
        formats::write_trace_jsonl(&mut buf, trace, args.verbose).expect("in-memory write");
        formats::write_file(&dir.join(name), &buf)?;
    }
    if let Some(dump) = dump {
        formats::write_file(
            &dir.join("cache_dump.json"),
            formats::cache_dump_json(&dump).as_bytes(),
        )?;
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        "seq_len={} C={} W={} tau={} d_g={} seed={}",
        cfg.seq_len, cfg.chunk_size, cfg.recent_window, cfg.threshold, cfg.gate_hidden, cfg.seed
    );
    let _ = writeln!(
        s,
        "  {:<14}{:>10}{:>20}",
        "backend", "final n'", "est flops/step"
    );
    let _ = writeln!(
        s,
        "  {:<14}{:>10}{:>20}",
        "full",
        summary.final_n_full,
        grouped(summary.est_flops_full)
    );
    let _ = writeln!(
        s,
        "  {:<14}{:>10}{:>20}",
        "kv_efficient",
        summary.final_n_prime,
        grouped(summary.est_flops_per_step)
    );
    let _ = writeln!(
        s,
        "chunks formed={} retained={}  n' reduction {}x",
        summary.chunks_formed,
        summary.retained_chunks,
        format_args!(
            "{:.3}",
            summary.final_n_full as f64 / summary.final_n_prime.max(1) as f64
        )
    );
    let _ = writeln!(
        s,
        "max divergence={:e} mean divergence={:e}",
        summary.max_divergence, summary.mean_divergence
    );
    let _ = writeln!(s, "traces written to {}", dir.display());
    emit(out, &s)?;

    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&SimulateJson {
            config: &cfg,
            summary: &summary,
        })
        .expect("summary serializes");
        formats::write_file(path, text.as_bytes())?;
    }

    if args.equivalence_check {
        if summary.max_divergence != 0.0 {
            return Err(CliError::Check(format!(
                "equivalence check failed: max divergence {:e} with W={} and seq_len={}",
                summary.max_divergence, cfg.recent_window, cfg.seq_len
            )));
        }
        emit(out, "equivalence check passed: outputs identical\n")?;
    }
    Ok(())
}

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let lengths = match &args.lengths {
        Some(raw) if raw.trim().is_empty() => {
            return Err(CliError::Config("--lengths must not be empty".into()))
        }
        Some(raw) => parse_axis::<usize>("lengths", raw)?,
        None => cfg.bench_lengths.clone(),
    };
    let reps = args.repetitions.unwrap_or(cfg.bench_repetitions);
    let report = bench_attention(&cfg.dims(), &lengths, reps, cfg.seed)?;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "attend kernel, H={} d_k={} kv_heads={}; wall-clock ns per call, median of {} (warmup discarded)",
        cfg.n_heads, cfg.head_dim, cfg.kv_heads, reps
    );
    let _ = writeln!(
        s,
        "  {:>8}{:>14}{:>14}{:>14}{:>8}",
        "length", "median_ns", "min_ns", "max_ns", "ratio"
    );
    for r in &report.rows {
        let _ = writeln!(
            s,
            "  {:>8}{:>14.0}{:>14.0}{:>14.0}{:>8.3}",
            r.length, r.median_ns, r.min_ns, r.max_ns, r.ratio_to_first
        );
    }
    for (a, b) in &report.monotonicity_violations {
        let _ = writeln!(s, "  note: length {b} timed faster than length {a}");
    }
    emit(out, &s)?;
    if let Some(path) = &args.csv {
        let mut buf = Vec::new();
        formats::write_bench_csv(&mut buf, &report.rows)
            .map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
        formats::write_file(path, &buf)?;
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let grid = SweepGrid {
        chunk_sizes: match &args.chunk_sizes {
            Some(raw) => parse_axis("C", raw)?,
            None => vec![cfg.chunk_size],
        },
        windows: match &args.windows {
            Some(raw) => parse_axis("W", raw)?,
            None => vec![cfg.recent_window],
        },
        thresholds: match &args.thresholds {
            Some(raw) => parse_axis("tau", raw)?,
            None => vec![cfg.threshold],
        },
    };
    for (c, _, tau) in grid.points() {
        kveff_core::CacheConfig {
            chunk_size: c,
            threshold: tau,
            ..cfg.cache()
        }
        .validate()?;
    }
    let sim = cfg.sim_config()?;
    let rows = decode::sweep(&sim, &grid)?;
    let mut buf = Vec::new();
    formats::write_sweep_csv(&mut buf, &rows).expect("in-memory write");
    match &args.csv {
        Some(path) => {
            formats::write_file(path, &buf)?;
            emit(
                out,
                &format!("{} rows written to {}\n", rows.len(), path.display()),
            )
        }
        None => out.write_all(&buf).map_err(|e| CliError::io("<stdout>", e)),
    }
}

pub fn cmd_defaults(args: &DefaultsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = RunConfig::default();
    if args.paper {
        cfg.apply_paper_preset();
    }
    emit(out, &(cfg.to_json_pretty() + "\n"))
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Cost(a) => cmd_cost(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Defaults(a) => cmd_defaults(a, out),
    }
}

/// Parses `args`, runs the command and returns the exit code. Errors go to
/// stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("kveff: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    run(std::env::args_os(), &mut lock)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouping() {
        assert_eq!(grouped(211_184_512.0), "211,184,512");
        assert_eq!(grouped(174.0), "174");
        assert_eq!(grouped(162_481_755.632), "162,481,755.632");
        assert_eq!(grouped(1000.0), "1,000");
    }

    #[test]
    fn axes() {
        assert_eq!(parse_axis::<usize>("C", "1,2, 4").unwrap(), vec![1, 2, 4]);
        let e = parse_axis::<f64>("tau", "0,x").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("--tau"));
        assert!(parse_axis::<usize>("W", "").is_err());
    }
}
