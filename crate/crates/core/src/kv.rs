//! Single-layer attention with a per-token key/value cache.
//!
//! Each step, tokens in the reuse set keep the key and value rows from the
//! previous step; every other token is projected again from its current
//! embedding. Queries are always recomputed. Matrix products run in a fixed
//! loop order, so when a reused token's embedding did not change the cached
//! path and the full-recompute path agree bit for bit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, MAGIC_EMBEDDING, MAGIC_WEIGHTS};
use crate::error::{Error, Result};
use crate::ingest::{Frame, PatchGrid};
use crate::selection::IndexSet;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch("matrix has non-finite entries".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `row * self`, accumulating over the shared dimension in ascending order.
    fn project_row(&self, row: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (m, &x) in row.iter().enumerate() {
            let w = self.row(m);
            for (o, &wv) in out.iter_mut().zip(w) {
                *o += x * wv;
            }
        }
    }

    /// `x * self` for every row of `x`.
    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                x.rows, x.cols, self.rows, self.cols
            )));
        }
        let mut out = Matrix::zeros(x.rows, self.cols);
        for r in 0..x.rows {
            let (src, dst) = (x.row(r), &mut out.data[r * self.cols..(r + 1) * self.cols]);
            self.project_row(src, dst);
        }
        Ok(out)
    }

    fn random(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        Matrix { rows, cols, data }
    }
}

/// Per-token features `X_t`, one row per visual token.
pub type TokenEmbedding = Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub heads: usize,
}

impl ProjectionWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, heads: usize) -> Result<Self> {
        let w = ProjectionWeights { w_q, w_k, w_v, heads };
        w.validate()?;
        Ok(w)
    }

    /// Uniform `[-1, 1) / sqrt(d_model)` entries from a seeded generator.
    pub fn random(d_model: usize, d_k: usize, d_v: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d_model as f64).sqrt();
        Self::new(
            Matrix::random(d_model, d_k, scale, &mut rng),
            Matrix::random(d_model, d_k, scale, &mut rng),
            Matrix::random(d_model, d_v, scale, &mut rng),
            heads,
        )
    }

    fn validate(&self) -> Result<()> {
        let d_model = self.w_q.rows;
        if d_model == 0 || self.w_k.rows != d_model || self.w_v.rows != d_model {
            return Err(Error::DimensionMismatch("projection matrices disagree on d_model".into()));
        }
        if self.w_q.cols != self.w_k.cols {
            return Err(Error::DimensionMismatch(format!(
                "W_Q has {} columns but W_K has {}",
                self.w_q.cols, self.w_k.cols
            )));
        }
        if self.heads == 0 || !self.d_k().is_multiple_of(self.heads) || !self.d_v().is_multiple_of(self.heads) {
            return Err(Error::DimensionMismatch(format!(
                "{} heads do not divide d_k = {} and d_v = {}",
                self.heads,
                self.d_k(),
                self.d_v()
            )));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows
    }

    pub fn d_k(&self) -> usize {
        self.w_k.cols
    }

    pub fn d_v(&self) -> usize {
        self.w_v.cols
    }
}

/// Where a cached row came from at the last step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Recomputed,
    Reused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCacheState {
    keys: Matrix,
    values: Matrix,
    provenance: Vec<Provenance>,
    step: Option<usize>,
}

impl KvCacheState {
    pub fn empty() -> Self {
        KvCacheState {
            keys: Matrix::zeros(0, 0),
            values: Matrix::zeros(0, 0),
            provenance: Vec::new(),
            step: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.step.is_none()
    }

    /// Timestep of the last update, `None` before the first step.
    pub fn step(&self) -> Option<usize> {
        self.step
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn reused_count(&self) -> usize {
        self.provenance.iter().filter(|p| **p == Provenance::Reused).count()
    }
}

/// Advances the cache by one step.
pub fn kv_step(cache: &KvCacheState, x: &TokenEmbedding, reuse: &IndexSet, w: &ProjectionWeights) -> Result<KvCacheState> {
    if x.cols != w.d_model() {
        return Err(Error::DimensionMismatch(format!(
            "embedding width {} but d_model is {}",
            x.cols,
            w.d_model()
        )));
    }
    let n = x.rows;
    if cache.is_empty() {
        if !reuse.is_empty() {
            return Err(Error::ColdCacheReuse { count: reuse.len() });
        }
    } else if cache.keys.rows != n || cache.keys.cols != w.d_k() || cache.values.cols != w.d_v() {
        return Err(Error::DimensionMismatch(format!(
            "cache holds {}x{} keys, step needs {}x{}",
            cache.keys.rows,
            cache.keys.cols,
            n,
            w.d_k()
        )));
    }
    if let Some(&i) = reuse.last() {
        if i >= n {
            return Err(Error::TokenOutOfRange { token: i, num_tokens: n });
        }
    }

    let mut keys = Matrix::zeros(n, w.d_k());
    let mut values = Matrix::zeros(n, w.d_v());
    let mut provenance = Vec::with_capacity(n);
    for i in 0..n {
        if reuse.contains(&i) {
            keys.row_mut(i).copy_from_slice(cache.keys.row(i));
            values.row_mut(i).copy_from_slice(cache.values.row(i));
            provenance.push(Provenance::Reused);
        } else {
            w.w_k.project_row(x.row(i), keys.row_mut(i));
            w.w_v.project_row(x.row(i), values.row_mut(i));
            provenance.push(Provenance::Recomputed);
        }
    }
    Ok(KvCacheState {
        keys,
        values,
        provenance,
        step: Some(cache.step.map_or(0, |s| s + 1)),
    })
}

/// Scaled dot-product attention of the current queries over the cached keys and values.
pub fn attention_forward(x: &TokenEmbedding, cache: &KvCacheState, w: &ProjectionWeights) -> Result<Matrix> {
    if cache.is_empty() {
        return Err(Error::DimensionMismatch("attention over an empty cache".into()));
    }
    let q = w.w_q.project(x)?;
    let n_keys = cache.keys.rows;
    if cache.keys.cols != w.d_k() || cache.values.cols != w.d_v() {
        return Err(Error::DimensionMismatch("cache widths do not match the weights".into()));
    }
    let (dk_head, dv_head) = (w.d_k() / w.heads, w.d_v() / w.heads);
    let scale = 1.0 / (dk_head as f64).sqrt();
    let mut out = Matrix::zeros(q.rows, w.d_v());
    let mut scores = vec![0.0; n_keys];
    for r in 0..q.rows {
        let q_row = q.row(r);
        for h in 0..w.heads {
            let qk = &q_row[h * dk_head..(h + 1) * dk_head];
            for (s, score) in scores.iter_mut().enumerate() {
                let k = &cache.keys.row(s)[h * dk_head..(h + 1) * dk_head];
                let mut dot = 0.0;
                for (a, b) in qk.iter().zip(k) {
                    dot += a * b;
                }
                *score = dot * scale;
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for score in scores.iter_mut() {
                *score = (*score - max).exp();
                denom += *score;
            }
            let dst = &mut out.row_mut(r)[h * dv_head..(h + 1) * dv_head];
            for (s, &p) in scores.iter().enumerate() {
                let v = &cache.values.row(s)[h * dv_head..(h + 1) * dv_head];
                let weight = p / denom;
                for (o, &vv) in dst.iter_mut().zip(v) {
                    *o += weight * vv;
                }
            }
        }
    }
    Ok(out)
}

/// Largest absolute and root-mean-square elementwise difference.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Drift {
    pub max_abs: f64,
    pub rms: f64,
}

pub fn output_drift(full: &Matrix, cached: &Matrix) -> Result<Drift> {
    if full.rows != cached.rows || full.cols != cached.cols {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{} outputs",
            full.rows, full.cols, cached.rows, cached.cols
        )));
    }
    if full.data.is_empty() {
        return Ok(Drift::default());
    }
    let mut max_abs: f64 = 0.0;
    let mut sq = 0.0;
    for (a, b) in full.data.iter().zip(&cached.data) {
        let d = (a - b).abs();
        max_abs = max_abs.max(d);
        sq += d * d;
    }
    Ok(Drift {
        max_abs,
        rms: (sq / full.data.len() as f64).sqrt(),
    })
}

/// A stack of attention layers, each with its own cache. Layer `l + 1`
/// consumes layer `l`'s output, so stacking needs `d_v == d_model`.
#[derive(Debug, Clone)]
pub struct KvEngine {
    layers: Vec<ProjectionWeights>,
    caches: Vec<KvCacheState>,
}

impl KvEngine {
    pub fn new(layers: Vec<ProjectionWeights>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("engine needs at least one layer".into()));
        }
        if layers.len() > 1 && layers.iter().any(|w| w.d_v() != w.d_model()) {
            return Err(Error::DimensionMismatch("stacked layers need d_v == d_model".into()));
        }
        let caches = vec![KvCacheState::empty(); layers.len()];
        Ok(KvEngine { layers, caches })
    }

    pub fn layers(&self) -> &[ProjectionWeights] {
        &self.layers
    }

    pub fn caches(&self) -> &[KvCacheState] {
        &self.caches
    }

    /// Runs every layer for one timestep and returns the last layer's output.
    pub fn step(&mut self, x: &TokenEmbedding, reuse: &IndexSet) -> Result<Matrix> {
        let mut input = x.clone();
        for (w, cache) in self.layers.iter().zip(self.caches.iter_mut()) {
            *cache = kv_step(cache, &input, reuse, w)?;
            input = attention_forward(&input, cache, w)?;
        }
        Ok(input)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let first = &self.layers[0];
        let mut data = Vec::new();
        for w in &self.layers {
            data.extend_from_slice(&w.w_q.data);
            data.extend_from_slice(&w.w_k.data);
            data.extend_from_slice(&w.w_v.data);
        }
        Container::new(
            MAGIC_WEIGHTS,
            [
                self.layers.len() as u32,
                first.d_model() as u32,
                first.d_k() as u32,
                first.d_v() as u32,
            ],
            data,
        )?
        .write(path)
    }

    /// Reads a weight file: dims `(layers, d_model, d_k, d_v)`, per layer W_Q, W_K, W_V.
    pub fn load_weights(path: &Path, heads: usize) -> Result<Self> {
        let c = Container::read(path, MAGIC_WEIGHTS)?;
        let (n_layers, d_model, d_k, d_v) = (c.dim(0), c.dim(1), c.dim(2), c.dim(3));
        let sizes = [d_model * d_k, d_model * d_k, d_model * d_v];
        let mut chunks = c.data.into_iter();
        let mut take = |len: usize, cols: usize| Matrix::from_vec(d_model, cols, chunks.by_ref().take(len).collect());
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let w_q = take(sizes[0], d_k)?;
            let w_k = take(sizes[1], d_k)?;
            let w_v = take(sizes[2], d_v)?;
            layers.push(ProjectionWeights::new(w_q, w_k, w_v, heads).map_err(|e| Error::format(path, e.to_string()))?);
        }
        Self::new(layers)
    }
}

/// Embeddings for a whole rollout, `steps x tokens x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub steps: Vec<TokenEmbedding>,
}

impl EmbeddingSequence {
    pub fn save(&self, path: &Path) -> Result<()> {
        let first = self.steps.first().ok_or_else(|| Error::InvalidConfig("no embeddings to save".into()))?;
        let data = self.steps.iter().flat_map(|m| m.data.iter().copied()).collect();
        Container::new(
            MAGIC_EMBEDDING,
            [self.steps.len() as u32, first.rows as u32, first.cols as u32, 1],
            data,
        )?
        .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, MAGIC_EMBEDDING)?;
        let (steps, n, d) = (c.dim(0), c.dim(1), c.dim(2));
        let steps = c
            .data
            .chunks(n * d.max(1))
            .take(steps)
            .map(|chunk| Matrix::from_vec(n, d, chunk.to_vec()))
            .collect::<Result<_>>()?;
        Ok(EmbeddingSequence { steps })
    }
}

/// Stand-in vision encoder: a fixed random linear map of each patch's pixels
/// plus a per-token position vector. Identical patches embed identically.
#[derive(Debug, Clone)]
pub struct PatchEmbedder {
    projection: Matrix,
    positions: Matrix,
}

impl PatchEmbedder {
    pub fn new(grid: &PatchGrid, d_model: usize, seed: u64) -> Self {
        let patch_len = grid.patch_width() * grid.patch_height();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let projection = Matrix::random(patch_len, d_model, 1.0 / (patch_len as f64).sqrt(), &mut rng);
        let positions = Matrix::random(grid.num_tokens(), d_model, 0.1, &mut rng);
        PatchEmbedder { projection, positions }
    }

    pub fn d_model(&self) -> usize {
        self.projection.cols
    }

    pub fn embed(&self, frame: &Frame, grid: &PatchGrid) -> Result<TokenEmbedding> {
        grid.check_frame(frame)?;
        let n = grid.num_tokens();
        let d = self.d_model();
        let mut out = Matrix::zeros(n, d);
        let mut patch = Vec::with_capacity(self.projection.rows);
        for i in 0..n {
            patch.clear();
            patch.extend(grid.pixel_indices(i)?.map(|idx| frame.pixels()[idx] as f64 / 255.0));
            let row = out.row_mut(i);
            self.projection.project_row(&patch, row);
            for (o, p) in row.iter_mut().zip(self.positions.row(i)) {
                *o += p;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn weights(d_model: usize, d: usize, seed: u64) -> ProjectionWeights {
        ProjectionWeights::random(d_model, d, d, 1, seed).unwrap()
    }

    fn embedding(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::random(n, d, 1.0, &mut rng)
    }

    fn all(n: usize) -> IndexSet {
        (0..n).collect()
    }

    #[test]
    fn no_reuse_equals_projection() {
        let w = weights(5, 3, 1);
        let x = embedding(4, 5, 2);
        let c = kv_step(&KvCacheState::empty(), &x, &IndexSet::new(), &w).unwrap();
        assert_eq!(c.keys(), &w.w_k.project(&x).unwrap());
        assert_eq!(c.values(), &w.w_v.project(&x).unwrap());
        assert_eq!(c.step(), Some(0));
        assert!(c.provenance().iter().all(|p| *p == Provenance::Recomputed));
    }

    #[test]
    fn full_reuse_keeps_cache() {
        let w = weights(5, 3, 1);
        let c0 = kv_step(&KvCacheState::empty(), &embedding(4, 5, 2), &IndexSet::new(), &w).unwrap();
        let c1 = kv_step(&c0, &embedding(4, 5, 99), &all(4), &w).unwrap();
        assert_eq!(c1.keys(), c0.keys());
        assert_eq!(c1.values(), c0.values());
        assert_eq!(c1.step(), Some(1));
        assert_eq!(c1.reused_count(), 4);
        // idempotent under full reuse
        let c2 = kv_step(&c1, &embedding(4, 5, 99), &all(4), &w).unwrap();
        assert_eq!(c2.keys(), c1.keys());
        assert_eq!(c2.provenance(), c1.provenance());
    }

    #[test]
    fn reused_rows_match_recomputation_bitwise() {
        let w = weights(6, 4, 3);
        let x0 = embedding(5, 6, 4);
        let mut x1 = x0.clone();
        // tokens 1 and 3 change, the rest stay put
        let fresh = embedding(5, 6, 5);
        for r in [1, 3] {
            x1.row_mut(r).copy_from_slice(fresh.row(r));
        }
        let reuse: IndexSet = [0, 2, 4].into_iter().collect();
        let c0 = kv_step(&KvCacheState::empty(), &x0, &IndexSet::new(), &w).unwrap();
        let cached = kv_step(&c0, &x1, &reuse, &w).unwrap();
        let full = kv_step(&c0, &x1, &IndexSet::new(), &w).unwrap();
        for (a, b) in cached.keys().data().iter().zip(full.keys().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let out_c = attention_forward(&x1, &cached, &w).unwrap();
        let out_f = attention_forward(&x1, &full, &w).unwrap();
        assert_eq!(output_drift(&out_f, &out_c).unwrap(), Drift::default());
    }

    #[test]
    fn cold_cache_rejects_reuse() {
        let w = weights(2, 2, 0);
        let reuse: IndexSet = [0].into_iter().collect();
        let err = kv_step(&KvCacheState::empty(), &embedding(2, 2, 0), &reuse, &w).unwrap_err();
        assert!(matches!(err, Error::ColdCacheReuse { count: 1 }));
        assert!(matches!(
            kv_step(&KvCacheState::empty(), &embedding(2, 3, 0), &IndexSet::new(), &w),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn single_key_returns_its_value() {
        let w = weights(3, 2, 7);
        let x = embedding(1, 3, 8);
        let c = kv_step(&KvCacheState::empty(), &x, &IndexSet::new(), &w).unwrap();
        let out = attention_forward(&x, &c, &w).unwrap();
        assert_eq!(out.row(0), c.values().row(0));
    }

    #[test]
    fn zero_queries_average_values() {
        let mut w = weights(3, 2, 7);
        w.w_q = Matrix::zeros(3, 2);
        let x = embedding(4, 3, 9);
        let c = kv_step(&KvCacheState::empty(), &x, &IndexSet::new(), &w).unwrap();
        let out = attention_forward(&x, &c, &w).unwrap();
        for col in 0..2 {
            let mean = (0..4).map(|s| c.values().get(s, col)).sum::<f64>() / 4.0;
            for r in 0..4 {
                assert!((out.get(r, col) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_matches_naive_reference() {
        let (n, d) = (4, 3);
        let w = weights(d, d, 11);
        let x = embedding(n, d, 12);
        let c = kv_step(&KvCacheState::empty(), &x, &IndexSet::new(), &w).unwrap();
        let out = attention_forward(&x, &c, &w).unwrap();

        let mm = |a: &Matrix, b: &Matrix| -> Vec<Vec<f64>> {
            (0..a.rows())
                .map(|i| (0..b.cols()).map(|j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()).collect())
                .collect()
        };
        let (q, k, v) = (mm(&x, &w.w_q), mm(&x, &w.w_k), mm(&x, &w.w_v));
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|t| q[i][t] * k[j][t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for col in 0..d {
                let want: f64 = (0..n).map(|j| logits[j].exp() / z * v[j][col]).sum();
                assert!((out.get(i, col) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_split_the_feature_dimension() {
        // two heads over d_k = d_v = 4 equal two independent single-head passes
        let two = ProjectionWeights::random(3, 4, 4, 2, 5).unwrap();
        let x = embedding(3, 3, 6);
        let c = kv_step(&KvCacheState::empty(), &x, &IndexSet::new(), &two).unwrap();
        let out = attention_forward(&x, &c, &two).unwrap();
        for h in 0..2 {
            let cols = |m: &Matrix| {
                let data = (0..m.rows()).flat_map(|r| m.row(r)[h * 2..h * 2 + 2].to_vec()).collect();
                Matrix::from_vec(m.rows(), 2, data).unwrap()
            };
            let single = ProjectionWeights::new(cols(&two.w_q), cols(&two.w_k), cols(&two.w_v), 1).unwrap();
            let cs = kv_step(&KvCacheState::empty(), &x, &IndexSet::new(), &single).unwrap();
            let os = attention_forward(&x, &cs, &single).unwrap();
            for r in 0..3 {
                assert_eq!(&out.row(r)[h * 2..h * 2 + 2], os.row(r));
            }
        }
        assert!(ProjectionWeights::random(3, 4, 4, 3, 5).is_err());
    }

    #[test]
    fn drift_examples() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(output_drift(&a, &a).unwrap(), Drift::default());
        let b = Matrix::from_vec(2, 2, vec![1.0, 3.0, 3.0, 4.0]).unwrap();
        assert_eq!(output_drift(&a, &b).unwrap(), Drift { max_abs: 1.0, rms: 0.5 });
        assert!(output_drift(&a, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn engine_stack_and_weight_file() {
        let layers = vec![weights(4, 4, 1), weights(4, 4, 2)];
        let mut engine = KvEngine::new(layers).unwrap();
        let x = embedding(3, 4, 3);
        let out = engine.step(&x, &IndexSet::new()).unwrap();
        assert_eq!((out.rows(), out.cols()), (3, 4));
        assert!(engine.caches().iter().all(|c| c.step() == Some(0)));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        engine.save_weights(&path).unwrap();
        let loaded = KvEngine::load_weights(&path, 1).unwrap();
        assert_eq!(loaded.layers(), engine.layers());

        assert!(KvEngine::new(vec![weights(4, 3, 1), weights(4, 3, 2)]).is_err());
    }

    #[test]
    fn embedding_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let seq = EmbeddingSequence {
            steps: vec![embedding(3, 2, 1), embedding(3, 2, 2)],
        };
        seq.save(&path).unwrap();
        assert_eq!(EmbeddingSequence::load(&path).unwrap(), seq);
    }

    proptest! {
        #[test]
        fn non_reused_rows_match_projection(mask in prop::collection::vec(any::<bool>(), 6), seed in 0u64..1000) {
            let w = weights(4, 3, seed);
            let x0 = embedding(6, 4, seed + 1);
            let x1 = embedding(6, 4, seed + 2);
            let reuse: IndexSet = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
            let c0 = kv_step(&KvCacheState::empty(), &x0, &IndexSet::new(), &w).unwrap();
            let c1 = kv_step(&c0, &x1, &reuse, &w).unwrap();
            let k_full = w.w_k.project(&x1).unwrap();
            for i in 0..6 {
                if reuse.contains(&i) {
                    prop_assert_eq!(c1.keys().row(i), c0.keys().row(i));
                    prop_assert_eq!(c1.provenance()[i], Provenance::Reused);
                } else {
                    prop_assert_eq!(c1.keys().row(i), k_full.row(i));
                }
            }
        }
    }
}
