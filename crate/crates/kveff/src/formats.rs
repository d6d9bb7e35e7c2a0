//! On-disk formats: token replay files, JSON-lines traces, cache dumps and
//! CSV tables.

use std::io::Write;
use std::path::Path;

use kveff_core::cache::GateDecision;
use kveff_core::decode::{DecodeTrace, SweepRow};
use kveff_core::CacheDump;
use serde::Serialize;

use crate::bench::BenchRow;
use crate::error::CliError;

/// Column order of sweep CSV files.
pub const SWEEP_HEADER: &str =
    "C,W,tau,seq_len,final_n_prime,est_flops_per_step,max_divergence,retained_chunks";

/// Column order of bench CSV files. `median_ns`, `min_ns` and `max_ns` are
/// wall-clock and vary between runs.
pub const BENCH_HEADER: &str = "length,repetitions,median_ns,min_ns,max_ns,ratio_to_first";

/// Parses newline-delimited unsigned integers. Blank lines are skipped.
pub fn parse_tokens(text: &str) -> Result<Vec<u32>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<u32>()
                .map_err(|e| format!("line {}: {:?}: {e}", i + 1, l.trim()))
        })
        .collect()
}

pub fn read_token_file(path: &Path) -> Result<Vec<u32>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_tokens(&text).map_err(|e| CliError::Config(format!("token file {}: {e}", path.display())))
}

#[derive(Serialize)]
struct TraceLine<'a> {
    step: usize,
    token: u32,
    next_token: u32,
    n_prime: &'a [usize],
    gate_events: &'a [GateDecision],
    output_norm: Vec<f64>,
    est_flops: &'a [f64],
    /// Wall-clock; absent unless timing was requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    attention_nanos: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    outputs: Option<&'a [Vec<f64>]>,
}

/// One JSON object per step. Full output vectors only when `verbose`.
pub fn write_trace_jsonl<W: Write>(
    mut w: W,
    trace: &DecodeTrace,
    verbose: bool,
) -> std::io::Result<()> {
    for s in &trace.steps {
        let line = TraceLine {
            step: s.step,
            token: s.token,
            next_token: s.next_token,
            n_prime: &s.effective_len,
            gate_events: &s.gate_events,
            output_norm: s
                .outputs
                .iter()
                .map(|o| o.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect(),
            est_flops: &s.est_flops,
            attention_nanos: s.attention_nanos,
            outputs: verbose.then_some(s.outputs.as_slice()),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn cache_dump_json(dump: &CacheDump) -> String {
    serde_json::to_string_pretty(dump).expect("dump serializes")
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(SWEEP_HEADER.split(','))?;
    }
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_bench_csv<W: Write>(w: W, rows: &[BenchRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(BENCH_HEADER.split(','))?;
    }
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use kveff_core::decode::{run_decode, Backend};
    use kveff_core::SimConfig;

    #[test]
    fn tokens_parse() {
        assert_eq!(parse_tokens("1\n2\n\n 30 \n").unwrap(), vec![1, 2, 30]);
        let err = parse_tokens("1\nx\n").unwrap_err();
        assert!(err.starts_with("line 2"), "{err}");
        assert!(parse_tokens("-1").is_err());
    }

    #[test]
    fn sweep_header_exact() {
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), SWEEP_HEADER);

        let row = SweepRow {
            chunk_size: 4,
            recent_window: 8,
            threshold: 0.5,
            seq_len: 10,
            final_n_prime: 9,
            est_flops_per_step: 1.5,
            max_divergence: 0.0,
            retained_chunks: 1,
        };
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), SWEEP_HEADER);
        assert_eq!(lines.next().unwrap(), "4,8,0.5,10,9,1.5,0.0,1");
    }

    #[test]
    fn bench_header_exact() {
        let row = BenchRow {
            length: 3,
            repetitions: 3,
            median_ns: 1.0,
            min_ns: 1.0,
            max_ns: 2.0,
            ratio_to_first: 1.0,
        };
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &[row]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().lines().next().unwrap(),
            BENCH_HEADER
        );
    }

    #[test]
    fn trace_lines() {
        let cfg = SimConfig {
            seq_len: 12,
            ..SimConfig::default()
        };
        let trace = run_decode(&cfg, Backend::KvEfficient).unwrap();
        let mut buf = Vec::new();
        write_trace_jsonl(&mut buf, &trace, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 12);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["step"], 1);
        assert_eq!(first["n_prime"].as_array().unwrap().len(), 2);
        assert!(first.get("outputs").is_none());
        assert!(first.get("attention_nanos").is_none());

        let mut buf = Vec::new();
        write_trace_jsonl(&mut buf, &trace, true).unwrap();
        let v: serde_json::Value =
            serde_json::from_slice(buf.split(|&b| b == b'\n').next().unwrap()).unwrap();
        assert_eq!(v["outputs"][0].as_array().unwrap().len(), 64);
    }
}
