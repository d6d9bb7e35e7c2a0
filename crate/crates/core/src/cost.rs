//! Analytical per-layer, per-token attention cost model.
//!
//! FLOPs count 2 per multiply-accumulate. The baseline attends over `n`
//! cached positions; the compressed cache over `n' = W + M`, where
//! `N_c = floor((n - W) / C)` chunks form and `M = round(r * N_c)` are kept.

use crate::error::{Error, Result};

/// Whether the amortized gate cost `r * (12 d_g (2 H d_k + d_g) + 2 d_g) / C`
/// is added to the compressed-cache FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum GateTerm {
    Included,
    Excluded,
}

/// Inputs of the cost model.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub gate_hidden: usize,
    /// Full context length `n`.
    pub context_len: usize,
    pub recent_window: usize,
    pub chunk_size: usize,
    /// Fraction of formed chunks that are kept (`M / N_c`).
    pub retention_rate: f64,
    pub kv_heads: usize,
    pub n_layers: usize,
    pub bytes_per_element: usize,
    /// Share of end-to-end runtime spent in attention (`P`).
    pub amdahl_fraction: f64,
}

impl CostParams {
    /// 8B-scale configuration: `d_model = 4096`, 32 heads of 128, 8 KV heads,
    /// 32 layers, bf16, `n = 4652`, `W = 1542`, `C = 16`, `r = 0.687`,
    /// `d_g = 128`, `P = 0.75`.
    pub const PAPER: CostParams = CostParams {
        d_model: 4096,
        n_heads: 32,
        head_dim: 128,
        gate_hidden: 128,
        context_len: 4652,
        recent_window: 1542,
        chunk_size: 16,
        retention_rate: 0.687,
        kv_heads: 8,
        n_layers: 32,
        bytes_per_element: 2,
        amdahl_fraction: 0.75,
    };

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be at least 1".into()));
        }
        if self.context_len < self.recent_window {
            return Err(Error::Domain(
                "context length n must be at least the recent window W",
            ));
        }
        if !(0.0..=1.0).contains(&self.retention_rate) {
            return Err(Error::Config("retention_rate must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.amdahl_fraction) {
            return Err(Error::Config("amdahl_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Chunk counts and effective length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DerivedLengths {
    /// `N_c`
    pub n_chunks: usize,
    /// `M`
    pub retained: usize,
    /// `n' = W + M`
    pub n_prime: usize,
}

/// KV-cache footprint across all layers.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MemoryReport {
    pub kv_bytes_base: u64,
    pub kv_bytes_eff: u64,
    /// `n / n'`
    pub memory_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostReport {
    pub flops_base: f64,
    pub flops_kv_eff: f64,
    pub gate_term: GateTerm,
    pub attention_speedup: f64,
    pub n_chunks: usize,
    pub retained: usize,
    pub n_prime: usize,
    pub memory_ratio: f64,
    /// `n' / n`
    pub retained_fraction: f64,
    pub kv_bytes_base: u64,
    pub kv_bytes_eff: u64,
    pub end_to_end_speedup: f64,
}

/// Attention FLOPs for one token attending over `len` positions:
/// `8 d_model^2 + 4 H len d_k + 5 H len + H d_k`.
pub fn attention_flops(d_model: usize, n_heads: usize, head_dim: usize, len: usize) -> f64 {
    let (d, h, k, n) = (d_model as f64, n_heads as f64, head_dim as f64, len as f64);
    8.0 * d * d + 4.0 * h * n * k + 5.0 * h * n + h * k
}

/// Amortized per-token gate FLOPs: `r (12 d_g (2 H d_k + d_g) + 2 d_g) / C`.
pub fn gate_flops(
    n_heads: usize,
    head_dim: usize,
    gate_hidden: usize,
    chunk_size: usize,
    retention_rate: f64,
) -> f64 {
    let (h, k, g, c) = (
        n_heads as f64,
        head_dim as f64,
        gate_hidden as f64,
        chunk_size as f64,
    );
    retention_rate * (12.0 * g * (2.0 * h * k + g) + 2.0 * g) / c
}

pub fn flops_base(p: &CostParams) -> f64 {
    attention_flops(p.d_model, p.n_heads, p.head_dim, p.context_len)
}

/// Round-half-up of a non-negative value.
fn round_half_up(x: f64) -> usize {
    libm::floor(x + 0.5) as usize
}

pub fn derive_lengths(p: &CostParams) -> Result<DerivedLengths> {
    if p.context_len < p.recent_window {
        return Err(Error::Domain(
            "context length n must be at least the recent window W",
        ));
    }
    if p.chunk_size == 0 {
        return Err(Error::Config("chunk_size must be at least 1".into()));
    }
    let n_chunks = (p.context_len - p.recent_window) / p.chunk_size;
    let retained = round_half_up(p.retention_rate * n_chunks as f64).min(n_chunks);
    Ok(DerivedLengths {
        n_chunks,
        retained,
        n_prime: p.recent_window + retained,
    })
}

/// Compressed-cache FLOPs at an explicit effective length.
pub fn flops_kv_eff_at(p: &CostParams, n_prime: usize, gate: GateTerm) -> f64 {
    let attn = attention_flops(p.d_model, p.n_heads, p.head_dim, n_prime);
    match gate {
        GateTerm::Excluded => attn,
        GateTerm::Included => {
            attn + gate_flops(
                p.n_heads,
                p.head_dim,
                p.gate_hidden,
                p.chunk_size,
                p.retention_rate,
            )
        }
    }
}

pub fn flops_kv_eff(p: &CostParams, gate: GateTerm) -> Result<f64> {
    Ok(flops_kv_eff_at(p, derive_lengths(p)?.n_prime, gate))
}

pub fn attention_speedup(p: &CostParams, gate: GateTerm) -> Result<f64> {
    let eff = flops_kv_eff(p, gate)?;
    if eff <= 0.0 {
        return Err(Error::Domain("compressed FLOPs must be positive"));
    }
    Ok(flops_base(p) / eff)
}

/// Amdahl's law: `1 / ((1 - P) + P / k)`.
pub fn end_to_end_speedup(fraction: f64, attention_speedup: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Domain("Amdahl fraction must lie in [0, 1]"));
    }
    if attention_speedup <= 0.0 {
        return Err(Error::Domain("attention speedup must be positive"));
    }
    Ok(1.0 / ((1.0 - fraction) + fraction / attention_speedup))
}

/// Bytes for `len` cached positions: K and V, every KV head and layer.
pub fn kv_bytes(p: &CostParams, len: usize) -> u64 {
    2 * len as u64
        * p.kv_heads as u64
        * p.head_dim as u64
        * p.bytes_per_element as u64
        * p.n_layers as u64
}

pub fn memory_report(p: &CostParams) -> Result<MemoryReport> {
    let lens = derive_lengths(p)?;
    let memory_ratio = if lens.n_prime == 0 {
        f64::INFINITY
    } else {
        p.context_len as f64 / lens.n_prime as f64
    };
    Ok(MemoryReport {
        kv_bytes_base: kv_bytes(p, p.context_len),
        kv_bytes_eff: kv_bytes(p, lens.n_prime),
        memory_ratio,
    })
}

pub fn report(p: &CostParams, gate: GateTerm) -> Result<CostReport> {
    p.validate()?;
    let lens = derive_lengths(p)?;
    let base = flops_base(p);
    let eff = flops_kv_eff_at(p, lens.n_prime, gate);
    let speedup = base / eff;
    let mem = memory_report(p)?;
    Ok(CostReport {
        flops_base: base,
        flops_kv_eff: eff,
        gate_term: gate,
        attention_speedup: speedup,
        n_chunks: lens.n_chunks,
        retained: lens.retained,
        n_prime: lens.n_prime,
        memory_ratio: mem.memory_ratio,
        retained_fraction: lens.n_prime as f64 / p.context_len as f64,
        kv_bytes_base: mem.kv_bytes_base,
        kv_bytes_eff: mem.kv_bytes_eff,
        end_to_end_speedup: end_to_end_speedup(p.amdahl_fraction, speedup)?,
    })
}
