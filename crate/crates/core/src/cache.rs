//! Chunked, gated KV cache.
//!
//! Per layer the cache holds, in temporal order:
//!
//! 1. an optional protected prefix of raw tokens that are never compressed,
//! 2. retained compressed entries, one position per kept chunk,
//! 3. the in-progress chunk buffer (`< C` raw tokens, still visible),
//! 4. the recent window of the newest `W` raw tokens.
//!
//! A token entering a full window pushes the oldest window token into the
//! chunk buffer. When the buffer reaches `C` tokens it is mean-aggregated,
//! scored once by the layer's LSTM gate and either kept (`score >= tau`) or
//! dropped. The gate state advances for every chunk, kept or not.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::attention::{KvSeq, ModelDims};
use crate::error::{Error, Result};
use crate::linalg::{lstm_step, mean_rows, LstmParams, LstmState, Matrix};
use crate::rng;

/// Compression parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CacheConfig {
    /// Tokens per chunk (`C`).
    pub chunk_size: usize,
    /// Uncompressed recent window (`W`).
    pub recent_window: usize,
    /// Retention threshold (`tau`); a chunk is kept when `score >= tau`.
    pub threshold: f64,
    /// Gate LSTM hidden size (`d_g`).
    pub gate_hidden: usize,
    /// Leading tokens exempt from compression for the whole run.
    pub protected_prefix: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            chunk_size: 4,
            recent_window: 32,
            // untrained seeded gates score near 0.48; keeps about half the chunks
            threshold: 0.48,
            gate_hidden: 16,
            protected_prefix: 0,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(alloc::format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        if self.gate_hidden == 0 {
            return Err(Error::Config("gate_hidden must be at least 1".into()));
        }
        Ok(())
    }

    /// Upper bound on the attend-view length after `t` appends.
    pub fn length_bound(&self, t: usize) -> usize {
        let overflow = t.saturating_sub(self.recent_window + self.protected_prefix);
        self.protected_prefix
            + self.recent_window
            + (self.chunk_size - 1)
            + overflow / self.chunk_size
    }
}

/// One token's keys and values across all KV heads (head-major, flat).
#[derive(Debug, Clone, PartialEq)]
pub struct RawToken {
    pub step: usize,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

/// A kept chunk: the mean key/value per KV head plus its gate score.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedEntry {
    pub key_bar: Vec<f64>,
    pub value_bar: Vec<f64>,
    pub score: f64,
    pub chunk_index: usize,
    /// First and last step (1-based) folded into the chunk.
    pub span: (usize, usize),
}

/// Outcome of gating one completed chunk.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GateDecision {
    pub layer: usize,
    pub chunk_index: usize,
    pub score: f64,
    pub kept: bool,
    pub span: (usize, usize),
}

/// Mean of `chunk_size` tokens, per KV head. Returns `(key_bar, value_bar)`.
pub fn aggregate_chunk(chunk: &[RawToken], chunk_size: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if chunk.len() != chunk_size || chunk.is_empty() {
        return Err(Error::Domain(
            "aggregate_chunk needs exactly chunk_size tokens",
        ));
    }
    let keys: Vec<&[f64]> = chunk.iter().map(|t| t.keys.as_slice()).collect();
    let values: Vec<&[f64]> = chunk.iter().map(|t| t.values.as_slice()).collect();
    let key_bar = mean_rows(&Matrix::from_rows(&keys)?)?;
    let value_bar = mean_rows(&Matrix::from_rows(&values)?)?;
    Ok((key_bar, value_bar))
}

/// Expands a chunk representative to query-head width: `[K̄ per query head;
/// V̄ per query head]`, `2 * n_heads * head_dim` values. Query head `h`
/// takes KV head `h / group_size`.
pub fn gate_input(dims: &ModelDims, key_bar: &[f64], value_bar: &[f64]) -> Result<Vec<f64>> {
    let kv = dims.kv_width();
    if key_bar.len() != kv {
        return Err(Error::shape("chunk key_bar", kv, key_bar.len()));
    }
    if value_bar.len() != kv {
        return Err(Error::shape("chunk value_bar", kv, value_bar.len()));
    }
    let d = dims.head_dim;
    let group = dims.group_size();
    let mut out = Vec::with_capacity(2 * dims.q_width());
    for src in [key_bar, value_bar] {
        for h in 0..dims.n_heads {
            let g = h / group;
            out.extend_from_slice(&src[g * d..(g + 1) * d]);
        }
    }
    Ok(out)
}

/// Scores one chunk representative (width `2 * n_heads * head_dim`).
pub fn gate_chunk(gate: &LstmParams, state: &LstmState, input: &[f64]) -> Result<(LstmState, f64)> {
    lstm_step(gate, state, input)
}

#[derive(Debug, Clone, PartialEq)]
struct LayerState {
    prefix: Vec<RawToken>,
    retained: Vec<CompressedEntry>,
    buffer: Vec<RawToken>,
    recent: VecDeque<RawToken>,
    gate_state: LstmState,
    steps: usize,
    chunks_formed: usize,
}

impl LayerState {
    fn new(gate_hidden: usize) -> Self {
        Self {
            prefix: Vec::new(),
            retained: Vec::new(),
            buffer: Vec::new(),
            recent: VecDeque::new(),
            gate_state: LstmState::zeros(gate_hidden),
            steps: 0,
            chunks_formed: 0,
        }
    }

    fn effective_length(&self) -> usize {
        self.prefix.len() + self.retained.len() + self.buffer.len() + self.recent.len()
    }
}

/// KV cache with chunk compression and recurrent retention gating.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficientKvCache {
    dims: ModelDims,
    config: CacheConfig,
    gates: Vec<LstmParams>,
    layers: Vec<LayerState>,
}

impl EfficientKvCache {
    /// Builds a cache with explicit gate weights, one LSTM per layer.
    pub fn new(dims: ModelDims, config: CacheConfig, gates: Vec<LstmParams>) -> Result<Self> {
        dims.validate()?;
        config.validate()?;
        if gates.len() != dims.n_layers {
            return Err(Error::shape("gate count", dims.n_layers, gates.len()));
        }
        for g in &gates {
            if g.input_dim != 2 * dims.q_width() {
                return Err(Error::shape(
                    "gate input width",
                    2 * dims.q_width(),
                    g.input_dim,
                ));
            }
            if g.hidden_dim != config.gate_hidden {
                return Err(Error::shape(
                    "gate hidden size",
                    config.gate_hidden,
                    g.hidden_dim,
                ));
            }
        }
        let layers = (0..dims.n_layers)
            .map(|_| LayerState::new(config.gate_hidden))
            .collect();
        Ok(Self {
            dims,
            config,
            gates,
            layers,
        })
    }

    /// Builds a cache whose gate weights derive from `seed` and the layer
    /// index only.
    pub fn seeded(dims: ModelDims, config: CacheConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let gates = seeded_gates(&dims, config.gate_hidden, seed);
        Self::new(dims, config, gates)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn gates(&self) -> &[LstmParams] {
        &self.gates
    }

    fn layer(&self, layer: usize) -> &LayerState {
        &self.layers[layer]
    }

    /// Appends one token (`keys`/`values` are `kv_heads * head_dim`).
    /// Returns the gate decision when a chunk completed on this step.
    pub fn append(
        &mut self,
        layer: usize,
        keys: &[f64],
        values: &[f64],
    ) -> Result<Option<GateDecision>> {
        let width = self.dims.kv_width();
        if keys.len() != width {
            return Err(Error::shape("appended keys", width, keys.len()));
        }
        if values.len() != width {
            return Err(Error::shape("appended values", width, values.len()));
        }
        if layer >= self.layers.len() {
            return Err(Error::Domain("layer index out of range"));
        }
        let cfg = self.config;
        let state = &mut self.layers[layer];
        state.steps += 1;
        let token = RawToken {
            step: state.steps,
            keys: keys.to_vec(),
            values: values.to_vec(),
        };
        if state.prefix.len() < cfg.protected_prefix {
            state.prefix.push(token);
            return Ok(None);
        }
        state.recent.push_back(token);
        if state.recent.len() <= cfg.recent_window {
            return Ok(None);
        }
        let evicted = state.recent.pop_front().expect("window overflowed");
        state.buffer.push(evicted);
        if state.buffer.len() < cfg.chunk_size {
            return Ok(None);
        }

        let (key_bar, value_bar) = aggregate_chunk(&state.buffer, cfg.chunk_size)?;
        let input = gate_input(&self.dims, &key_bar, &value_bar)?;
        let (next, score) = gate_chunk(&self.gates[layer], &state.gate_state, &input)?;
        state.gate_state = next;
        let chunk_index = state.chunks_formed;
        state.chunks_formed += 1;
        let span = (state.buffer[0].step, state.buffer[cfg.chunk_size - 1].step);
        state.buffer.clear();
        let kept = score >= cfg.threshold;
        if kept {
            state.retained.push(CompressedEntry {
                key_bar,
                value_bar,
                score,
                chunk_index,
                span,
            });
        }
        Ok(Some(GateDecision {
            layer,
            chunk_index,
            score,
            kept,
            span,
        }))
    }

    /// Per-KV-head keys/values attention reads, oldest first: prefix,
    /// retained chunks, chunk buffer, recent window.
    pub fn attend_view(&self, layer: usize) -> Vec<KvSeq> {
        let state = self.layer(layer);
        let d = self.dims.head_dim;
        let n = state.effective_length();
        let mut heads: Vec<KvSeq> = (0..self.dims.kv_heads)
            .map(|_| KvSeq::with_capacity(d, n))
            .collect();
        let raw = state
            .prefix
            .iter()
            .map(|t| (&t.keys, &t.values))
            .chain(state.retained.iter().map(|e| (&e.key_bar, &e.value_bar)));
        let tail = state
            .buffer
            .iter()
            .chain(state.recent.iter())
            .map(|t| (&t.keys, &t.values));
        for (k, v) in raw.chain(tail) {
            for (h, seq) in heads.iter_mut().enumerate() {
                seq.push(&k[h * d..(h + 1) * d], &v[h * d..(h + 1) * d])
                    .expect("stored widths are validated on append");
            }
        }
        heads
    }

    /// Number of positions attention reads (`n'`).
    pub fn effective_length(&self, layer: usize) -> usize {
        self.layer(layer).effective_length()
    }

    /// Tokens appended to `layer` so far (`t`).
    pub fn steps(&self, layer: usize) -> usize {
        self.layer(layer).steps
    }

    /// Chunks formed so far (`m`).
    pub fn chunks_formed(&self, layer: usize) -> usize {
        self.layer(layer).chunks_formed
    }

    /// Chunks retained so far (`M`).
    pub fn chunks_retained(&self, layer: usize) -> usize {
        self.layer(layer).retained.len()
    }

    /// `M / m`, or 0 before the first chunk.
    pub fn retention_rate(&self, layer: usize) -> f64 {
        let s = self.layer(layer);
        if s.chunks_formed == 0 {
            0.0
        } else {
            s.retained.len() as f64 / s.chunks_formed as f64
        }
    }

    pub fn retained(&self, layer: usize) -> &[CompressedEntry] {
        &self.layer(layer).retained
    }

    pub fn prefix_len(&self, layer: usize) -> usize {
        self.layer(layer).prefix.len()
    }

    pub fn buffer_len(&self, layer: usize) -> usize {
        self.layer(layer).buffer.len()
    }

    pub fn recent_len(&self, layer: usize) -> usize {
        self.layer(layer).recent.len()
    }

    pub fn gate_state(&self, layer: usize) -> &LstmState {
        &self.layer(layer).gate_state
    }

    /// Snapshot of the cache's bookkeeping for debugging.
    pub fn dump(&self) -> CacheDump {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(layer, s)| LayerDump {
                layer,
                steps: s.steps,
                chunks_formed: s.chunks_formed,
                prefix_len: s.prefix.len(),
                retained: s
                    .retained
                    .iter()
                    .map(|e| RetainedSummary {
                        chunk_index: e.chunk_index,
                        score: e.score,
                        span: e.span,
                    })
                    .collect(),
                buffer_len: s.buffer.len(),
                recent_len: s.recent.len(),
                effective_len: s.effective_length(),
                gate_state_norm: s.gate_state.norm(),
            })
            .collect();
        CacheDump { layers }
    }
}

pub(crate) fn seeded_gates(dims: &ModelDims, gate_hidden: usize, seed: u64) -> Vec<LstmParams> {
    (0..dims.n_layers)
        .map(|l| {
            LstmParams::seeded(
                2 * dims.q_width(),
                gate_hidden,
                rng::mix(seed, 0x6761_7465 + l as u64),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RetainedSummary {
    pub chunk_index: usize,
    pub score: f64,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerDump {
    pub layer: usize,
    pub steps: usize,
    pub chunks_formed: usize,
    pub prefix_len: usize,
    pub retained: Vec<RetainedSummary>,
    pub buffer_len: usize,
    pub recent_len: usize,
    pub effective_len: usize,
    pub gate_state_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CacheDump {
    pub layers: Vec<LayerDump>,
}
