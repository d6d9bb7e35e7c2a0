//! Flat JSON run configuration shared by every subcommand.

use std::path::Path;

use kveff_core::decode::InputMode;
use kveff_core::{CacheConfig, CostParams, ModelDims, SimConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::formats;

/// Every tunable, one flat JSON object. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // model shape
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub kv_heads: usize,
    pub n_layers: usize,
    // compression
    pub chunk_size: usize,
    pub recent_window: usize,
    pub threshold: f64,
    pub gate_hidden: usize,
    pub protected_prefix: usize,
    // simulation
    pub seq_len: usize,
    pub seed: u64,
    pub vocab: usize,
    /// Newline-delimited token file; synthetic tokens when null.
    pub token_file: Option<String>,
    pub trace_dir: String,
    // cost model
    pub context_len: usize,
    pub retention_rate: f64,
    pub bytes_per_element: usize,
    pub amdahl_fraction: f64,
    // benchmark
    pub bench_lengths: Vec<usize>,
    pub bench_repetitions: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dims = ModelDims::DESK;
        let cache = CacheConfig::default();
        Self {
            d_model: dims.d_model,
            n_heads: dims.n_heads,
            head_dim: dims.head_dim,
            kv_heads: dims.kv_heads,
            n_layers: dims.n_layers,
            chunk_size: cache.chunk_size,
            recent_window: cache.recent_window,
            threshold: cache.threshold,
            gate_hidden: cache.gate_hidden,
            protected_prefix: cache.protected_prefix,
            seq_len: 256,
            seed: 0,
            vocab: 256,
            token_file: None,
            trace_dir: "kveff-traces".into(),
            context_len: 256,
            retention_rate: 0.5,
            bytes_per_element: 8,
            amdahl_fraction: 0.75,
            bench_lengths: vec![1675, 4652],
            bench_repetitions: 15,
        }
    }
}

impl RunConfig {
    /// Reads a config file; keys absent from the file keep their defaults.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Overwrites the shape and cost keys with the 8B-scale reference
    /// configuration.
    pub fn apply_paper_preset(&mut self) {
        let p = CostParams::PAPER;
        self.d_model = p.d_model;
        self.n_heads = p.n_heads;
        self.head_dim = p.head_dim;
        self.kv_heads = p.kv_heads;
        self.n_layers = p.n_layers;
        self.gate_hidden = p.gate_hidden;
        self.recent_window = p.recent_window;
        self.chunk_size = p.chunk_size;
        self.context_len = p.context_len;
        self.retention_rate = p.retention_rate;
        self.bytes_per_element = p.bytes_per_element;
        self.amdahl_fraction = p.amdahl_fraction;
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            kv_heads: self.kv_heads,
            n_layers: self.n_layers,
        }
    }

    pub fn cache(&self) -> CacheConfig {
        CacheConfig {
            chunk_size: self.chunk_size,
            recent_window: self.recent_window,
            threshold: self.threshold,
            gate_hidden: self.gate_hidden,
            protected_prefix: self.protected_prefix,
        }
    }

    pub fn cost_params(&self) -> Result<CostParams, CliError> {
        let p = CostParams {
            d_model: self.d_model,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            gate_hidden: self.gate_hidden,
            context_len: self.context_len,
            recent_window: self.recent_window,
            chunk_size: self.chunk_size,
            retention_rate: self.retention_rate,
            kv_heads: self.kv_heads,
            n_layers: self.n_layers,
            bytes_per_element: self.bytes_per_element,
            amdahl_fraction: self.amdahl_fraction,
        };
        p.validate()?;
        Ok(p)
    }

    /// Simulator configuration; reads the token file when one is set.
    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        let input = match &self.token_file {
            Some(path) => InputMode::Replay(formats::read_token_file(Path::new(path))?),
            None => InputMode::Synthetic,
        };
        let sim = SimConfig {
            dims: self.dims(),
            cache: self.cache(),
            seq_len: self.seq_len,
            seed: self.seed,
            vocab: self.vocab,
            input,
        };
        sim.validate()?;
        Ok(sim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json_pretty()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 9, "chunk_size": 2}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.chunk_size, 2);
        assert_eq!(c.seq_len, RunConfig::default().seq_len);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"chunk": 2}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("chunk"), "{err}");
    }

    #[test]
    fn paper_preset_matches_cost_constants() {
        let mut c = RunConfig::default();
        c.apply_paper_preset();
        assert_eq!(c.cost_params().unwrap(), CostParams::PAPER);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let c = RunConfig {
            recent_window: 10_000,
            ..RunConfig::default()
        };
        assert_eq!(c.cost_params().unwrap_err().exit_code(), 2);
        let c = RunConfig {
            kv_heads: 3,
            ..RunConfig::default()
        };
        assert_eq!(c.sim_config().unwrap_err().exit_code(), 2);
    }
}
