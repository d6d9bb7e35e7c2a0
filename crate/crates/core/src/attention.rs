//! Full-history multi-head attention with grouped KV heads.
//!
//! Vectors crossing this module are flat and head-major: a query of `H`
//! heads is `H * head_dim` values, a key/value row for one token is
//! `kv_heads * head_dim` values.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{dot, softmax_in_place};

/// Transformer shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub kv_heads: usize,
    pub n_layers: usize,
}

impl ModelDims {
    /// Desk-scale defaults used by the simulator.
    pub const DESK: ModelDims = ModelDims {
        d_model: 64,
        n_heads: 4,
        head_dim: 16,
        kv_heads: 2,
        n_layers: 2,
    };

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.head_dim == 0 || self.kv_heads == 0 || self.n_layers == 0 {
            return Err(Error::Config("model dimensions must be non-zero".into()));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::Config(alloc::format!(
                "n_heads * head_dim ({} * {}) must equal d_model ({})",
                self.n_heads,
                self.head_dim,
                self.d_model
            )));
        }
        if !self.n_heads.is_multiple_of(self.kv_heads) {
            return Err(Error::Config(alloc::format!(
                "kv_heads ({}) must divide n_heads ({})",
                self.kv_heads,
                self.n_heads
            )));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.kv_heads
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::DESK
    }
}

/// Ordered keys and values of one KV head, stored row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvSeq {
    head_dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl KvSeq {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn with_capacity(head_dim: usize, len: usize) -> Self {
        Self {
            head_dim,
            keys: Vec::with_capacity(len * head_dim),
            values: Vec::with_capacity(len * head_dim),
        }
    }

    pub fn push(&mut self, key: &[f64], value: &[f64]) -> Result<()> {
        if key.len() != self.head_dim {
            return Err(Error::shape("key", self.head_dim, key.len()));
        }
        if value.len() != self.head_dim {
            return Err(Error::shape("value", self.head_dim, value.len()));
        }
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn len(&self) -> usize {
        self.keys.len().checked_div(self.head_dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.head_dim..(i + 1) * self.head_dim]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.head_dim..(i + 1) * self.head_dim]
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Uncompressed cache: every past token of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FullKvCache {
    dims: ModelDims,
    layers: Vec<Vec<KvSeq>>,
}

impl FullKvCache {
    pub fn new(dims: ModelDims) -> Self {
        let layers = (0..dims.n_layers)
            .map(|_| {
                (0..dims.kv_heads)
                    .map(|_| KvSeq::new(dims.head_dim))
                    .collect()
            })
            .collect();
        Self { dims, layers }
    }

    /// Appends one token's keys and values (each `kv_heads * head_dim`).
    pub fn append_kv(&mut self, layer: usize, keys: &[f64], values: &[f64]) -> Result<()> {
        let width = self.dims.kv_width();
        if keys.len() != width {
            return Err(Error::shape("appended keys", width, keys.len()));
        }
        if values.len() != width {
            return Err(Error::shape("appended values", width, values.len()));
        }
        let heads = self
            .layers
            .get_mut(layer)
            .ok_or(Error::Domain("layer index out of range"))?;
        let d = self.dims.head_dim;
        for (h, seq) in heads.iter_mut().enumerate() {
            seq.push(&keys[h * d..(h + 1) * d], &values[h * d..(h + 1) * d])?;
        }
        Ok(())
    }

    pub fn len(&self, layer: usize) -> usize {
        self.layers[layer].first().map_or(0, KvSeq::len)
    }

    pub fn is_empty(&self, layer: usize) -> bool {
        self.len(layer) == 0
    }

    pub fn heads(&self, layer: usize) -> &[KvSeq] {
        &self.layers[layer]
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }
}

/// Scaled dot-product attention of `queries` (`H * head_dim`, head-major)
/// over per-KV-head caches. Query head `h` reads KV head `h / (H / kv_heads)`.
/// Returns `H * head_dim` outputs.
pub fn attend(queries: &[f64], heads: &[KvSeq]) -> Result<Vec<f64>> {
    let first = heads
        .first()
        .ok_or(Error::Domain("no KV heads to attend over"))?;
    let d = first.head_dim();
    let n = first.len();
    if d == 0 {
        return Err(Error::Domain("head_dim must be non-zero"));
    }
    if n == 0 {
        return Err(Error::Domain("attend over an empty cache"));
    }
    if let Some(bad) = heads.iter().find(|s| s.len() != n || s.head_dim() != d) {
        return Err(Error::shape("KV head length", n, bad.len()));
    }
    if !queries.len().is_multiple_of(d) {
        return Err(Error::shape(
            "query width",
            (queries.len() / d + 1) * d,
            queries.len(),
        ));
    }
    let n_heads = queries.len() / d;
    if n_heads == 0 || !n_heads.is_multiple_of(heads.len()) {
        return Err(Error::shape("query heads", heads.len(), n_heads));
    }
    let group = n_heads / heads.len();
    let scale = 1.0 / libm::sqrt(d as f64);

    let mut out = vec![0.0; n_heads * d];
    let mut weights = vec![0.0; n];
    for h in 0..n_heads {
        let q = &queries[h * d..(h + 1) * d];
        let kv = &heads[h / group];
        for (w, k) in weights.iter_mut().zip(kv.keys().chunks_exact(d)) {
            *w = dot(q, k) * scale;
        }
        softmax_in_place(&mut weights)?;
        let o = &mut out[h * d..(h + 1) * d];
        for (w, v) in weights.iter().zip(kv.values().chunks_exact(d)) {
            for (oi, vi) in o.iter_mut().zip(v) {
                *oi += w * vi;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn seq(d: usize, pairs: &[(&[f64], &[f64])]) -> KvSeq {
        let mut s = KvSeq::new(d);
        for (k, v) in pairs {
            s.push(k, v).unwrap();
        }
        s
    }

    fn random_seq(rng: &mut rng::SimRng, d: usize, n: usize) -> KvSeq {
        let mut s = KvSeq::new(d);
        for _ in 0..n {
            s.push(
                &rng::uniform_vec(rng, d, 1.0),
                &rng::uniform_vec(rng, d, 1.0),
            )
            .unwrap();
        }
        s
    }

    #[test]
    fn dims_validation() {
        assert!(ModelDims::DESK.validate().is_ok());
        let mut d = ModelDims::DESK;
        d.d_model = 60;
        assert!(d.validate().is_err());
        let mut d = ModelDims::DESK;
        d.kv_heads = 3;
        assert!(d.validate().is_err());
    }

    #[test]
    fn append_order_and_lengths() {
        let dims = ModelDims {
            d_model: 2,
            n_heads: 2,
            head_dim: 1,
            kv_heads: 2,
            n_layers: 1,
        };
        let mut c = FullKvCache::new(dims);
        assert!(c.is_empty(0));
        c.append_kv(0, &[1.0, 10.0], &[2.0, 20.0]).unwrap();
        assert_eq!(c.len(0), 1);
        c.append_kv(0, &[3.0, 30.0], &[4.0, 40.0]).unwrap();
        assert_eq!(c.heads(0)[0].keys(), &[1.0, 3.0]);
        assert_eq!(c.heads(0)[1].values(), &[20.0, 40.0]);
        for _ in 0..8 {
            c.append_kv(0, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        }
        assert!(c.heads(0).iter().all(|s| s.len() == 10));
        assert!(matches!(
            c.append_kv(0, &[0.0], &[0.0, 0.0]),
            Err(Error::Shape { .. })
        ));
        assert!(c.append_kv(1, &[0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn single_entry_returns_value() {
        let s = seq(2, &[(&[0.3, -9.0], &[1.5, -2.5])]);
        assert_eq!(attend(&[7.0, 3.0], &[s]).unwrap(), vec![1.5, -2.5]);
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let s = seq(
            2,
            &[(&[0.0, 1.0], &[1.0, 2.0]), (&[0.0, -3.0], &[3.0, 6.0])],
        );
        assert_eq!(attend(&[5.0, 0.0], &[s]).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut r = rng::stream(99, 5);
        let s = random_seq(&mut r, 4, 5);
        let q = rng::uniform_vec(&mut r, 4, 1.0);
        let got = attend(&q, std::slice::from_ref(&s)).unwrap();
        let logits: Vec<f64> = (0..5)
            .map(|i| (0..4).map(|j| q[j] * s.key(i)[j]).sum::<f64>() / 2.0)
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..4 {
            let want: f64 = (0..5).map(|i| logits[i].exp() / z * s.value(i)[j]).sum();
            assert!((got[j] - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            attend(&[1.0], &[KvSeq::new(1)]),
            Err(Error::Domain(_))
        ));
        assert!(attend(&[1.0], &[]).is_err());
        let s = seq(2, &[(&[0.0, 1.0], &[1.0, 2.0])]);
        assert!(matches!(
            attend(&[1.0, 2.0, 3.0], std::slice::from_ref(&s)),
            Err(Error::Shape { .. })
        ));
        // 3 query heads cannot be grouped over 2 KV heads
        assert!(attend(&[0.0; 6], &[s.clone(), s]).is_err());
    }

    #[test]
    fn mqa_heads_share_identical_kv() {
        let mut r = rng::stream(4, 4);
        let s = random_seq(&mut r, 3, 6);
        let q = rng::uniform_vec(&mut r, 3, 1.0);
        let mut qq = q.clone();
        qq.extend_from_slice(&q);
        let out = attend(&qq, &[s]).unwrap();
        assert_eq!(out[..3], out[3..]);
    }

    #[test]
    fn gqa_with_full_kv_heads_is_mha() {
        let mut r = rng::stream(8, 8);
        let heads: Vec<KvSeq> = (0..3).map(|_| random_seq(&mut r, 2, 4)).collect();
        let q = rng::uniform_vec(&mut r, 6, 1.0);
        let out = attend(&q, &heads).unwrap();
        for h in 0..3 {
            let single = attend(&q[h * 2..h * 2 + 2], &heads[h..h + 1]).unwrap();
            assert_eq!(single, out[h * 2..h * 2 + 2]);
        }
    }

    #[test]
    fn causal_output_unchanged_by_later_appends() {
        let mut r = rng::stream(1, 1);
        let dims = ModelDims {
            d_model: 4,
            n_heads: 2,
            head_dim: 2,
            kv_heads: 1,
            n_layers: 1,
        };
        let mut c = FullKvCache::new(dims);
        let mut recorded = Vec::new();
        let queries: Vec<Vec<f64>> = (0..6).map(|_| rng::uniform_vec(&mut r, 4, 1.0)).collect();
        for q in &queries {
            c.append_kv(
                0,
                &rng::uniform_vec(&mut r, 2, 1.0),
                &rng::uniform_vec(&mut r, 2, 1.0),
            )
            .unwrap();
            recorded.push(attend(q, c.heads(0)).unwrap());
        }
        // replay with only the first t entries
        for t in 1..=6 {
            let mut prefix = KvSeq::new(2);
            for i in 0..t {
                prefix
                    .push(c.heads(0)[0].key(i), c.heads(0)[0].value(i))
                    .unwrap();
            }
            assert_eq!(attend(&queries[t - 1], &[prefix]).unwrap(), recorded[t - 1]);
        }
    }

    proptest! {
        #[test]
        fn output_in_convex_hull(seed in any::<u64>(), n in 1usize..12, d in 1usize..6) {
            let mut r = rng::stream(seed, 2);
            let s = random_seq(&mut r, d, n);
            let q = rng::uniform_vec(&mut r, d, 10.0);
            let out = attend(&q, std::slice::from_ref(&s)).unwrap();
            for j in 0..d {
                let col = (0..n).map(|i| s.value(i)[j]);
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out[j] >= lo - 1e-12 && out[j] <= hi + 1e-12);
            }
        }

        #[test]
        fn key_scaling_preserves_weight_order(seed in any::<u64>(), c in 0.1f64..10.0) {
            // Weight order follows logit order, which positive key scaling preserves.
            let mut r = rng::stream(seed, 3);
            let d = 3;
            let s = random_seq(&mut r, d, 6);
            let q = rng::uniform_vec(&mut r, d, 1.0);
            let logits = |scale: f64| -> Vec<f64> {
                let l: Vec<f64> = (0..6).map(|i| dot(&q, s.key(i)) * scale).collect();
                crate::linalg::softmax_row(&l).unwrap()
            };
            let w1 = logits(1.0);
            let w2 = logits(c);
            for i in 0..6 {
                for j in 0..6 {
                    if w1[i] < w1[j] {
                        prop_assert!(w2[i] <= w2[j]);
                    }
                }
            }
        }
    }
}
