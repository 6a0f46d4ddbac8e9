//! Rotary embeddings, chunkwise-causal masking with a sliding chunk window,
//! and incremental attention over a bounded key/value cache.
//!
//! Keys are cached unrotated together with their logical positions; rotation
//! is applied when attention is computed. Re-indexing a cache after eviction
//! therefore only changes the stored first position.

use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::kernels;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize) -> Self {
        Self { head_dim, base: 10000.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rope head_dim must be even and positive, got {}", self.head_dim)));
        }
        if !(self.base > 0.0) {
            return Err(Error::Config("rope base must be positive".into()));
        }
        Ok(())
    }
}

/// Rotates every row of `x` (`T×width`, width a multiple of `head_dim`) by
/// its position.
pub fn rope_apply(x: &Tensor, positions: &[usize], cfg: &RopeConfig) -> Result<Tensor> {
    cfg.validate()?;
    let cols = x.cols();
    if !cols.is_multiple_of(cfg.head_dim) {
        return shape_err(format!("width {cols} is not a multiple of head_dim {}", cfg.head_dim));
    }
    if positions.len() != x.rows() {
        return shape_err("one position per row required");
    }
    let mut out = x.clone();
    for (row, &p) in out.data.chunks_mut(cols).zip(positions) {
        kernels::rope_rotate_row(row, p, cfg.head_dim, cfg.base, 1.0);
    }
    out.grad = None;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkMaskSpec {
    pub chunk_frames: usize,
    pub window_chunks: usize,
}

impl Default for ChunkMaskSpec {
    fn default() -> Self {
        Self { chunk_frames: 48, window_chunks: 10 }
    }
}

impl ChunkMaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_frames == 0 || self.window_chunks == 0 {
            return Err(Error::Config("chunk_frames and window_chunks must be >= 1".into()));
        }
        Ok(())
    }

    pub fn chunk_of(&self, pos: usize) -> usize {
        pos / self.chunk_frames
    }

    /// Key positions visible to a query at `pos`: chunks
    /// `[chunk - window + 1, chunk]`, current chunk included in full.
    pub fn key_range(&self, pos: usize) -> (usize, usize) {
        let c = self.chunk_of(pos);
        let first = (c + 1).saturating_sub(self.window_chunks);
        (first * self.chunk_frames, (c + 1) * self.chunk_frames)
    }
}

/// `mask[q][k]` is true iff key `k`'s chunk lies in the query's window.
pub fn build_chunkwise_mask(n_frames: usize, spec: &ChunkMaskSpec) -> Vec<Vec<bool>> {
    (0..n_frames)
        .map(|q| {
            let cq = spec.chunk_of(q) as isize;
            (0..n_frames)
                .map(|k| {
                    let ck = spec.chunk_of(k) as isize;
                    ck <= cq && ck > cq - spec.window_chunks as isize
                })
                .collect()
        })
        .collect()
}

/// Dense single-head scaled dot-product attention under a boolean mask.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[Vec<bool>]) -> Result<Tensor> {
    let (tq, d) = (q.rows(), q.cols());
    let (tk, dv) = (k.rows(), v.cols());
    if k.cols() != d || v.rows() != tk {
        return shape_err("attention q/k/v extents");
    }
    if mask.len() != tq || mask.iter().any(|r| r.len() != tk) {
        return shape_err("mask must be queries x keys");
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; tq * dv];
    for i in 0..tq {
        let visible: Vec<usize> = (0..tk).filter(|&j| mask[i][j]).collect();
        if visible.is_empty() {
            return contract_err(format!("query {i} has no visible keys"));
        }
        let mut w: Vec<f64> = visible.iter().map(|&j| kernels::dot(q.row(i), k.row(j)) * scale).collect();
        kernels::softmax_in_place(&mut w);
        for (&j, wj) in visible.iter().zip(&w) {
            for (o, x) in out[i * dv..(i + 1) * dv].iter_mut().zip(v.row(j)) {
                *o += wj * x;
            }
        }
    }
    Tensor::new(vec![tq, dv], out)
}

/// Multi-head variant of [`attention`]: heads are contiguous column blocks.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[Vec<bool>], n_heads: usize) -> Result<Tensor> {
    let d = q.cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) || k.cols() != d || v.cols() != d {
        return shape_err("heads must divide a common width");
    }
    let dh = d / n_heads;
    let cols = |t: &Tensor, h: usize| -> Tensor {
        let data = (0..t.rows()).flat_map(|r| t.row(r)[h * dh..(h + 1) * dh].to_vec()).collect();
        Tensor::new(vec![t.rows(), dh], data).expect("column block")
    };
    let mut out = vec![0.0; q.rows() * d];
    for h in 0..n_heads {
        let o = attention(&cols(q, h), &cols(k, h), &cols(v, h), mask)?;
        for r in 0..q.rows() {
            out[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(o.row(r));
        }
    }
    Tensor::new(vec![q.rows(), d], out)
}

/// Bounded per-layer store of unrotated keys and values with contiguous
/// logical positions.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKVCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    width: usize,
    capacity: usize,
    first_pos: usize,
}

impl LayerKVCache {
    pub fn new(width: usize, capacity: usize) -> Self {
        Self::starting_at(width, capacity, 0)
    }

    /// Empty cache whose first entry will carry logical position `first`.
    pub fn starting_at(width: usize, capacity: usize, first: usize) -> Self {
        Self { keys: Vec::new(), values: Vec::new(), width, capacity, first_pos: first }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Logical position of the oldest retained entry.
    pub fn first_logical_position(&self) -> usize {
        self.first_pos
    }

    /// Position the next appended entry must carry.
    pub fn next_position(&self) -> usize {
        self.first_pos + self.len()
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.first_pos..self.next_position()
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.width..(i + 1) * self.width]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Appends rows starting at logical position `first`.
    pub fn append(&mut self, first: usize, keys: &[f64], values: &[f64]) -> Result<()> {
        if keys.len() != values.len() || !keys.len().is_multiple_of(self.width) {
            return shape_err("key/value rows must match the cache width");
        }
        if first != self.next_position() {
            return contract_err(format!(
                "position discontinuity: cache continues at {}, got {first}",
                self.next_position()
            ));
        }
        let n = keys.len() / self.width;
        if self.len() + n > self.capacity {
            return contract_err(format!("cache capacity {} exceeded", self.capacity));
        }
        self.keys.extend_from_slice(keys);
        self.values.extend_from_slice(values);
        Ok(())
    }

    /// Drops the `n` oldest entries.
    pub fn evict_front(&mut self, n: usize) {
        let n = n.min(self.len());
        self.keys.drain(..n * self.width);
        self.values.drain(..n * self.width);
        self.first_pos += n;
    }

    /// Drops every entry whose position is below `pos`.
    pub fn evict_before(&mut self, pos: usize) {
        if pos > self.first_pos {
            self.evict_front(pos - self.first_pos);
        }
    }

    /// Assigns new contiguous positions starting at `first`.
    pub fn reindex(&mut self, first: usize) {
        self.first_pos = first;
    }

    pub fn clear_at(&mut self, first: usize) {
        self.keys.clear();
        self.values.clear();
        self.first_pos = first;
    }
}

/// Rotated copy of the cached keys whose positions fall in `lo..hi`, plus the
/// matching value rows.
pub(crate) fn rotated_window(cache: &LayerKVCache, lo: usize, hi: usize, rope: &RopeConfig) -> (Vec<f64>, Vec<f64>) {
    let w = cache.width();
    let lo = lo.max(cache.first_logical_position());
    let hi = hi.min(cache.next_position());
    if lo >= hi {
        return (Vec::new(), Vec::new());
    }
    let (a, b) = (lo - cache.first_logical_position(), hi - cache.first_logical_position());
    let mut keys = cache.keys()[a * w..b * w].to_vec();
    for (row, p) in keys.chunks_mut(w).zip(lo..hi) {
        kernels::rope_rotate_row(row, p, rope.head_dim, rope.base, 1.0);
    }
    (keys, cache.values()[a * w..b * w].to_vec())
}

/// Per-head attention of already-rotated query rows over rotated key rows.
/// `visible(i)` gives the number of leading key rows query `i` may see.
pub(crate) fn attend_rows(
    q_rot: &[f64],
    keys_rot: &[f64],
    values: &[f64],
    width: usize,
    head_dim: usize,
    visible: impl Fn(usize) -> (usize, usize),
) -> Vec<f64> {
    let n_q = q_rot.len() / width;
    let n_heads = width / head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0; q_rot.len()];
    let mut w = Vec::new();
    for i in 0..n_q {
        let (lo, hi) = visible(i);
        for h in 0..n_heads {
            let c0 = h * head_dim;
            let qrow = &q_rot[i * width + c0..i * width + c0 + head_dim];
            w.clear();
            w.extend((lo..hi).map(|j| kernels::dot(qrow, &keys_rot[j * width + c0..j * width + c0 + head_dim]) * scale));
            kernels::softmax_in_place(&mut w);
            let orow = &mut out[i * width + c0..i * width + c0 + head_dim];
            for (j, wj) in (lo..hi).zip(&w) {
                for (o, v) in orow.iter_mut().zip(&values[j * width + c0..j * width + c0 + head_dim]) {
                    *o += wj * v;
                }
            }
        }
    }
    out
}

/// Chunkwise-windowed attention of new rows against the cache, followed by
/// window eviction. `q_new`, `k_new`, `v_new` are unrotated `n×width` rows
/// at logical positions `first_pos..first_pos + n`, which must continue the
/// cache.
pub fn incremental_attend(
    cache: &mut LayerKVCache,
    first_pos: usize,
    q_new: &Tensor,
    k_new: &Tensor,
    v_new: &Tensor,
    spec: &ChunkMaskSpec,
    rope: &RopeConfig,
) -> Result<Tensor> {
    spec.validate()?;
    rope.validate()?;
    let width = cache.width();
    if q_new.cols() != width || k_new.cols() != width || v_new.cols() != width {
        return shape_err("new rows must match the cache width");
    }
    if !width.is_multiple_of(rope.head_dim) {
        return shape_err("cache width must be a multiple of head_dim");
    }
    let n = q_new.rows();
    if k_new.rows() != n || v_new.rows() != n || n == 0 {
        return shape_err("q/k/v must carry the same nonzero number of rows");
    }
    let start = first_pos;
    if start != cache.next_position() {
        return contract_err(format!(
            "position discontinuity: cache continues at {}, got {start}",
            cache.next_position()
        ));
    }
    let last_chunk = spec.chunk_of(start + n - 1);
    let (need_lo, _) = spec.key_range(start);
    cache.evict_before(need_lo);
    cache.append(start, &k_new.data, &v_new.data)?;

    let (lo, hi) = (need_lo, cache.next_position());
    let (keys, values) = rotated_window(cache, lo, hi, rope);
    let base = lo.max(cache.first_logical_position());
    let mut q = q_new.data.clone();
    for (row, p) in q.chunks_mut(width).zip(start..) {
        kernels::rope_rotate_row(row, p, rope.head_dim, rope.base, 1.0);
    }
    let out = attend_rows(&q, &keys, &values, width, rope.head_dim, |i| {
        let (a, b) = spec.key_range(start + i);
        (a.max(base) - base, b.min(hi) - base)
    });
    let keep_from = (last_chunk + 1).saturating_sub(spec.window_chunks) * spec.chunk_frames;
    cache.evict_before(keep_from);
    Tensor::new(vec![n, width], out)
}
