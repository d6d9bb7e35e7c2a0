//! Wall-clock timing of the attend kernel at fixed cache lengths.

use std::hint::black_box;
use std::time::Instant;

use kveff_core::decode::Clock;
use kveff_core::{attend, KvSeq, ModelDims};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::CliError;

const WARMUP_RUNS: usize = 2;
/// Each timed sample covers at least this many cached positions in total,
/// so short caches are not dominated by timer resolution.
const MIN_POSITIONS_PER_SAMPLE: usize = 64 * 1024;

/// `Instant`-backed clock for decoder traces.
#[derive(Debug, Clone, Copy)]
pub struct StdClock {
    origin: Instant,
}

impl Default for StdClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for StdClock {
    fn now_nanos(&mut self) -> Option<u64> {
        Some(self.origin.elapsed().as_nanos() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub length: usize,
    pub repetitions: usize,
    /// Median nanoseconds per attend call.
    pub median_ns: f64,
    pub min_ns: f64,
    pub max_ns: f64,
    /// `median_ns` over the first row's `median_ns`.
    pub ratio_to_first: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Adjacent length pairs `(shorter, longer)` where the longer cache
    /// timed faster. Reported, never fatal.
    pub monotonicity_violations: Vec<(usize, usize)>,
}

fn random_cache(dims: &ModelDims, len: usize, rng: &mut ChaCha8Rng) -> Vec<KvSeq> {
    (0..dims.kv_heads)
        .map(|_| {
            let mut s = KvSeq::with_capacity(dims.head_dim, len);
            let mut k = vec![0.0; dims.head_dim];
            let mut v = vec![0.0; dims.head_dim];
            for _ in 0..len {
                k.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
                v.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
                s.push(&k, &v).expect("widths match");
            }
            s
        })
        .collect()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Times one attend call per length over seeded random caches and reports
/// the median of `repetitions` samples (after discarded warmup runs).
pub fn bench_attention(
    dims: &ModelDims,
    lengths: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<BenchReport, CliError> {
    if lengths.is_empty() {
        return Err(CliError::Config("bench lengths must not be empty".into()));
    }
    if lengths.contains(&0) {
        return Err(CliError::Config("bench lengths must be positive".into()));
    }
    if repetitions < 3 {
        return Err(CliError::Config(
            "bench repetitions must be at least 3".into(),
        ));
    }
    dims.validate()?;

    let mut rows: Vec<BenchRow> = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ len as u64);
        let cache = random_cache(dims, len, &mut rng);
        let query: Vec<f64> = (0..dims.q_width())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let inner = MIN_POSITIONS_PER_SAMPLE.div_ceil(len).max(1);

        for _ in 0..WARMUP_RUNS {
            black_box(attend(black_box(&query), black_box(&cache))?);
        }
        let mut samples = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            for _ in 0..inner {
                black_box(attend(black_box(&query), black_box(&cache))?);
            }
            samples.push(start.elapsed().as_nanos() as f64 / inner as f64);
        }
        samples.sort_by(f64::total_cmp);
        let med = median(&samples);
        let first = rows.first().map_or(med, |r| r.median_ns);
        rows.push(BenchRow {
            length: len,
            repetitions,
            median_ns: med,
            min_ns: samples[0],
            max_ns: samples[samples.len() - 1],
            ratio_to_first: med / first,
        });
    }

    let mut by_len: Vec<&BenchRow> = rows.iter().collect();
    by_len.sort_by_key(|r| r.length);
    let monotonicity_violations = by_len
        .windows(2)
        .filter(|w| w[1].length > w[0].length && w[1].median_ns < w[0].median_ns)
        .map(|w| (w[0].length, w[1].length))
        .collect();
    Ok(BenchReport {
        rows,
        monotonicity_violations,
    })
}
