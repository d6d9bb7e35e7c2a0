//! Desk-scale autoregressive decoder that runs one seeded weight set against
//! either the full cache or the compressed cache.
//!
//! Each block is attention plus a residual connection; there is no MLP, no
//! normalization and no positional encoding. Decoding is greedy.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{attend, FullKvCache, ModelDims};
use crate::cache::{CacheConfig, CacheDump, EfficientKvCache, GateDecision};
use crate::cost::{self, CostParams, GateTerm};
use crate::error::{Error, Result};
use crate::linalg::{LstmParams, Matrix};
use crate::rng;

const TAG_TOKENS: u64 = 0x746f_6b65;
const TAG_EMBED: u64 = 0x656d_6264;
const TAG_LAYER: u64 = 0x6c61_7972;
const TAG_UNEMBED: u64 = 0x756e_656d;

/// Which cache the decoder attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Backend {
    Full,
    KvEfficient,
}

/// Where input tokens come from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum InputMode {
    /// First token drawn from the seed, then greedy feedback.
    #[default]
    Synthetic,
    /// Fixed token sequence; step `t` consumes `tokens[t]`.
    Replay(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dims: ModelDims,
    pub cache: CacheConfig,
    pub seq_len: usize,
    pub seed: u64,
    pub vocab: usize,
    pub input: InputMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dims: ModelDims::DESK,
            cache: CacheConfig::default(),
            seq_len: 256,
            seed: 0,
            vocab: 256,
            input: InputMode::Synthetic,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.cache.validate()?;
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be at least 1".into()));
        }
        if self.vocab == 0 {
            return Err(Error::Config("vocab must be at least 1".into()));
        }
        if let InputMode::Replay(tokens) = &self.input {
            if tokens.len() < self.seq_len {
                return Err(Error::Config(alloc::format!(
                    "replay file has {} tokens, seq_len is {}",
                    tokens.len(),
                    self.seq_len
                )));
            }
            if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
                return Err(Error::Config(alloc::format!(
                    "replay token {} outside vocab of {}",
                    bad,
                    self.vocab
                )));
            }
        }
        Ok(())
    }

    /// Cost-model parameters for this configuration at context length `n`
    /// and retention rate `r`.
    pub fn cost_params(&self, context_len: usize, retention_rate: f64) -> CostParams {
        CostParams {
            d_model: self.dims.d_model,
            n_heads: self.dims.n_heads,
            head_dim: self.dims.head_dim,
            gate_hidden: self.cache.gate_hidden,
            context_len,
            recent_window: self.cache.recent_window.min(context_len),
            chunk_size: self.cache.chunk_size,
            retention_rate,
            kv_heads: self.dims.kv_heads,
            n_layers: self.dims.n_layers,
            bytes_per_element: 8,
            amdahl_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
}

/// Every decoder weight, derived from the seed and the model shape only.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    embed: Matrix,
    layers: Vec<LayerWeights>,
    unembed: Matrix,
}

impl ModelWeights {
    pub fn seeded(dims: &ModelDims, vocab: usize, seed: u64) -> Self {
        let d = dims.d_model;
        let mut r = rng::stream(seed, TAG_EMBED);
        let embed = Matrix::seeded_uniform(vocab, d, 1, &mut r);
        let layers = (0..dims.n_layers)
            .map(|l| {
                let mut r = rng::stream(seed, TAG_LAYER + l as u64);
                LayerWeights {
                    wq: Matrix::seeded_uniform(d, dims.q_width(), d, &mut r),
                    wk: Matrix::seeded_uniform(d, dims.kv_width(), d, &mut r),
                    wv: Matrix::seeded_uniform(d, dims.kv_width(), d, &mut r),
                    wo: Matrix::seeded_uniform(dims.q_width(), d, dims.q_width(), &mut r),
                }
            })
            .collect();
        let mut r = rng::stream(seed, TAG_UNEMBED);
        let unembed = Matrix::seeded_uniform(d, vocab, d, &mut r);
        Self {
            embed,
            layers,
            unembed,
        }
    }

    /// Order-sensitive checksum over every weight.
    pub fn checksum(&self) -> f64 {
        let mut mats: Vec<&Matrix> = vec![&self.embed, &self.unembed];
        for l in &self.layers {
            mats.extend([&l.wq, &l.wk, &l.wv, &l.wo]);
        }
        let mut acc = 0.0;
        let mut k = 1.0;
        for m in mats {
            for x in m.data() {
                acc += k * x;
                k += 1e-4;
            }
        }
        acc
    }
}

/// Monotonic nanosecond source for optional attention timing.
pub trait Clock {
    fn now_nanos(&mut self) -> Option<u64>;
}

/// Clock that never reports; traces carry no timings.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_nanos(&mut self) -> Option<u64> {
        None
    }
}

/// One decoding step.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    /// 1-based step index.
    pub step: usize,
    pub token: u32,
    pub next_token: u32,
    /// Positions attended per layer after this step's append.
    pub effective_len: Vec<usize>,
    pub gate_events: Vec<GateDecision>,
    /// Per-layer attention block output (after the output projection).
    pub outputs: Vec<Vec<f64>>,
    /// Per-layer attention FLOPs estimate at the live length.
    pub est_flops: Vec<f64>,
    /// Wall-clock attention time across layers, when a clock was supplied.
    pub attention_nanos: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecodeTrace {
    pub backend: Backend,
    pub steps: Vec<StepRecord>,
}

impl DecodeTrace {
    /// Largest per-layer effective length at the last step.
    pub fn final_effective_len(&self) -> usize {
        self.steps
            .last()
            .and_then(|s| s.effective_len.iter().copied().max())
            .unwrap_or(0)
    }

    /// Mean per-layer FLOPs estimate at the last step.
    pub fn final_est_flops(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| {
            if s.est_flops.is_empty() {
                0.0
            } else {
                s.est_flops.iter().sum::<f64>() / s.est_flops.len() as f64
            }
        })
    }

    /// Chunks kept across all layers.
    pub fn retained_chunks(&self) -> usize {
        self.steps
            .iter()
            .flat_map(|s| &s.gate_events)
            .filter(|d| d.kept)
            .count()
    }

    pub fn chunks_formed(&self) -> usize {
        self.steps.iter().map(|s| s.gate_events.len()).sum()
    }
}

enum Cache {
    Full(FullKvCache),
    Efficient(EfficientKvCache),
}

pub fn run_decode(config: &SimConfig, backend: Backend) -> Result<DecodeTrace> {
    run_decode_with_clock(config, backend, &mut NoClock)
}

/// Same as [`run_decode`] but times every attend call with `clock`.
pub fn run_decode_with_clock(
    config: &SimConfig,
    backend: Backend,
    clock: &mut dyn Clock,
) -> Result<DecodeTrace> {
    config.validate()?;
    let weights = ModelWeights::seeded(&config.dims, config.vocab, config.seed);
    let gates = crate::cache::seeded_gates(&config.dims, config.cache.gate_hidden, config.seed);
    decode_with(config, backend, &weights, gates, clock).map(|(trace, _)| trace)
}

/// Runs the decoder and also returns the compressed cache's final
/// bookkeeping (`None` for the full backend).
pub fn run_decode_detailed(
    config: &SimConfig,
    backend: Backend,
    clock: &mut dyn Clock,
) -> Result<(DecodeTrace, Option<CacheDump>)> {
    config.validate()?;
    let weights = ModelWeights::seeded(&config.dims, config.vocab, config.seed);
    let gates = crate::cache::seeded_gates(&config.dims, config.cache.gate_hidden, config.seed);
    decode_with(config, backend, &weights, gates, clock)
}

fn decode_with(
    config: &SimConfig,
    backend: Backend,
    weights: &ModelWeights,
    gates: Vec<LstmParams>,
    clock: &mut dyn Clock,
) -> Result<(DecodeTrace, Option<CacheDump>)> {
    let dims = config.dims;
    let mut cache = match backend {
        Backend::Full => Cache::Full(FullKvCache::new(dims)),
        Backend::KvEfficient => Cache::Efficient(EfficientKvCache::new(dims, config.cache, gates)?),
    };

    let mut token = match &config.input {
        InputMode::Synthetic => {
            rng::stream(config.seed, TAG_TOKENS).gen_range(0..config.vocab) as u32
        }
        InputMode::Replay(tokens) => tokens[0],
    };
    let mut steps = Vec::with_capacity(config.seq_len);
    for t in 0..config.seq_len {
        let mut x = weights.embed.row(token as usize).to_vec();
        let mut record = StepRecord {
            step: t + 1,
            token,
            next_token: 0,
            effective_len: Vec::with_capacity(dims.n_layers),
            gate_events: Vec::new(),
            outputs: Vec::with_capacity(dims.n_layers),
            est_flops: Vec::with_capacity(dims.n_layers),
            attention_nanos: None,
        };
        let mut nanos: Option<u64> = Some(0);
        for (l, w) in weights.layers.iter().enumerate() {
            let q = w.wq.vecmat(&x)?;
            let k = w.wk.vecmat(&x)?;
            let v = w.wv.vecmat(&x)?;
            let start = clock.now_nanos();
            let (attn, len, flops) = match &mut cache {
                Cache::Full(c) => {
                    c.append_kv(l, &k, &v)?;
                    let out = attend(&q, c.heads(l))?;
                    let n = c.len(l);
                    let p = config.cost_params(n, 0.0);
                    (out, n, cost::flops_base(&p))
                }
                Cache::Efficient(c) => {
                    if let Some(d) = c.append(l, &k, &v)? {
                        record.gate_events.push(d);
                    }
                    let n = c.effective_length(l);
                    // W = 0 with a dropped chunk leaves nothing to read;
                    // the block then contributes nothing.
                    let out = if n == 0 {
                        vec![0.0; dims.q_width()]
                    } else {
                        attend(&q, &c.attend_view(l))?
                    };
                    let p = config.cost_params(c.steps(l), c.retention_rate(l));
                    (out, n, cost::flops_kv_eff_at(&p, n, GateTerm::Included))
                }
            };
            nanos = match (nanos, start, clock.now_nanos()) {
                (Some(acc), Some(s), Some(e)) => Some(acc + e.saturating_sub(s)),
                _ => None,
            };
            let o = w.wo.vecmat(&attn)?;
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            record.effective_len.push(len);
            record.outputs.push(o);
            record.est_flops.push(flops);
        }
        record.attention_nanos = nanos;
        let logits = weights.unembed.vecmat(&x)?;
        let next = argmax(&logits) as u32;
        record.next_token = next;
        token = match &config.input {
            InputMode::Synthetic => next,
            InputMode::Replay(tokens) => tokens.get(t + 1).copied().unwrap_or(next),
        };
        steps.push(record);
    }
    let dump = match &cache {
        Cache::Full(_) => None,
        Cache::Efficient(c) => Some(c.dump()),
    };
    Ok((DecodeTrace { backend, steps }, dump))
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Output differences between two traces.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Divergence {
    /// Per step: max absolute difference over every layer output.
    pub per_step_max: Vec<f64>,
    /// Per step: mean absolute difference over every layer output.
    pub per_step_mean: Vec<f64>,
    pub max_abs: f64,
    pub mean_abs: f64,
}

pub fn divergence(a: &DecodeTrace, b: &DecodeTrace) -> Result<Divergence> {
    if a.steps.len() != b.steps.len() {
        return Err(Error::Domain("traces differ in length"));
    }
    let mut per_step_max = Vec::with_capacity(a.steps.len());
    let mut per_step_mean = Vec::with_capacity(a.steps.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for (sa, sb) in a.steps.iter().zip(&b.steps) {
        if sa.outputs.len() != sb.outputs.len() {
            return Err(Error::Domain("traces differ in layer count"));
        }
        let mut max = 0.0f64;
        let mut sum = 0.0;
        let mut n = 0usize;
        for (oa, ob) in sa.outputs.iter().zip(&sb.outputs) {
            if oa.len() != ob.len() {
                return Err(Error::Domain("traces differ in output width"));
            }
            for (x, y) in oa.iter().zip(ob) {
                let d = libm::fabs(x - y);
                max = max.max(d);
                sum += d;
                n += 1;
            }
        }
        per_step_max.push(max);
        per_step_mean.push(if n == 0 { 0.0 } else { sum / n as f64 });
        total += sum;
        count += n;
    }
    Ok(Divergence {
        max_abs: per_step_max.iter().copied().fold(0.0, f64::max),
        mean_abs: if count == 0 {
            0.0
        } else {
            total / count as f64
        },
        per_step_max,
        per_step_mean,
    })
}

/// Headline numbers of a full-vs-compressed comparison.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimSummary {
    pub seq_len: usize,
    pub final_n_full: usize,
    pub final_n_prime: usize,
    pub est_flops_full: f64,
    pub est_flops_per_step: f64,
    pub max_divergence: f64,
    pub mean_divergence: f64,
    pub chunks_formed: usize,
    pub retained_chunks: usize,
}

pub fn summarize(full: &DecodeTrace, efficient: &DecodeTrace) -> Result<SimSummary> {
    let div = divergence(full, efficient)?;
    Ok(SimSummary {
        seq_len: efficient.steps.len(),
        final_n_full: full.final_effective_len(),
        final_n_prime: efficient.final_effective_len(),
        est_flops_full: full.final_est_flops(),
        est_flops_per_step: efficient.final_est_flops(),
        max_divergence: div.max_abs,
        mean_divergence: div.mean_abs,
        chunks_formed: efficient.chunks_formed(),
        retained_chunks: efficient.retained_chunks(),
    })
}

/// Runs both backends and summarizes.
pub fn compare(config: &SimConfig) -> Result<(DecodeTrace, DecodeTrace, SimSummary)> {
    let full = run_decode(config, Backend::Full)?;
    let eff = run_decode(config, Backend::KvEfficient)?;
    let summary = summarize(&full, &eff)?;
    Ok((full, eff, summary))
}

/// Grid over chunk size, recent window and threshold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepGrid {
    pub chunk_sizes: Vec<usize>,
    pub windows: Vec<usize>,
    pub thresholds: Vec<f64>,
}

impl SweepGrid {
    pub fn len(&self) -> usize {
        self.chunk_sizes.len() * self.windows.len() * self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points in nested order: chunk size, then window, then threshold.
    pub fn points(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.chunk_sizes.iter().flat_map(move |&c| {
            self.windows
                .iter()
                .flat_map(move |&w| self.thresholds.iter().map(move |&tau| (c, w, tau)))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepRow {
    #[cfg_attr(feature = "serde", serde(rename = "C"))]
    pub chunk_size: usize,
    #[cfg_attr(feature = "serde", serde(rename = "W"))]
    pub recent_window: usize,
    #[cfg_attr(feature = "serde", serde(rename = "tau"))]
    pub threshold: f64,
    pub seq_len: usize,
    pub final_n_prime: usize,
    pub est_flops_per_step: f64,
    pub max_divergence: f64,
    pub retained_chunks: usize,
}

impl SweepRow {
    pub fn from_summary(cache: &CacheConfig, s: &SimSummary) -> Self {
        Self {
            chunk_size: cache.chunk_size,
            recent_window: cache.recent_window,
            threshold: cache.threshold,
            seq_len: s.seq_len,
            final_n_prime: s.final_n_prime,
            est_flops_per_step: s.est_flops_per_step,
            max_divergence: s.max_divergence,
            retained_chunks: s.retained_chunks,
        }
    }
}

/// One row per grid point. The full-cache reference runs once.
pub fn sweep(base: &SimConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    base.validate()?;
    let full = run_decode(base, Backend::Full)?;
    grid.points()
        .map(|(c, w, tau)| {
            let config = SimConfig {
                cache: CacheConfig {
                    chunk_size: c,
                    recent_window: w,
                    threshold: tau,
                    ..base.cache
                },
                ..base.clone()
            };
            let eff = run_decode(&config, Backend::KvEfficient)?;
            Ok(SweepRow::from_summary(
                &config.cache,
                &summarize(&full, &eff)?,
            ))
        })
        .collect()
}
