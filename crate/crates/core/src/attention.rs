//! Online softmax, local attention over KV blocks, and hierarchical reduction
//! of partial attention results.
//!
//! Every local block produces a [`PartialAttention`]: an unnormalized weighted
//! value sum together with the running softmax statistics `(max, sum)` of the
//! scores that produced it. Partials merge associatively, so attention over a
//! KV cache split across any number of devices and bank groups reproduces the
//! dense result regardless of how the tokens were partitioned or in what order
//! the partials are combined.
//!
//! All arithmetic is `f64`. The statistics keep the exponential sum in the
//! linear domain; the final output is `O / sum`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("empty vector")]
    EmptyVector,
    #[error("non-finite input")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("KV block must contain at least one token")]
    EmptyBlock,
    #[error("block rows do not match token ids: {rows} rows, {ids} ids")]
    RaggedBlock { rows: usize, ids: usize },
    #[error("cannot reduce an empty list of partials")]
    EmptyReduction,
    #[error("attention partition is empty")]
    EmptyPartition,
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// Knobs that change the attention function itself rather than its execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionOptions {
    /// Multiply scores by `1/sqrt(d)` before the softmax.
    pub scale_scores: bool,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self { scale_scores: true }
    }
}

impl AttentionOptions {
    pub fn unscaled() -> Self {
        Self {
            scale_scores: false,
        }
    }

    #[inline]
    pub fn score_scale(&self, dim: usize) -> f64 {
        if self.scale_scores {
            1.0 / (dim as f64).sqrt()
        } else {
            1.0
        }
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AttentionError::NonFinite)
    }
}

/// A single query row of length `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector(Vec<f64>);

impl QueryVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(AttentionError::EmptyVector);
        }
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Row-aligned keys and values for a set of tokens, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    token_ids: Vec<u64>,
}

impl KvBlock {
    pub fn new(dim: usize, keys: Vec<f64>, values: Vec<f64>, token_ids: Vec<u64>) -> Result<Self> {
        if dim == 0 {
            return Err(AttentionError::EmptyVector);
        }
        if token_ids.is_empty() {
            return Err(AttentionError::EmptyBlock);
        }
        for len in [keys.len(), values.len()] {
            if len != dim * token_ids.len() {
                return Err(AttentionError::RaggedBlock {
                    rows: len / dim,
                    ids: token_ids.len(),
                });
            }
        }
        check_finite(&keys)?;
        check_finite(&values)?;
        Ok(Self {
            dim,
            keys,
            values,
            token_ids,
        })
    }

    /// Builds a block from per-token rows.
    pub fn from_rows(keys: &[Vec<f64>], values: &[Vec<f64>], token_ids: Vec<u64>) -> Result<Self> {
        let dim = keys.first().map(Vec::len).ok_or(AttentionError::EmptyBlock)?;
        if keys.len() != token_ids.len() || values.len() != token_ids.len() {
            return Err(AttentionError::RaggedBlock {
                rows: keys.len().min(values.len()),
                ids: token_ids.len(),
            });
        }
        let mut k = Vec::with_capacity(dim * keys.len());
        let mut v = Vec::with_capacity(dim * values.len());
        for (kr, vr) in keys.iter().zip(values) {
            for row in [kr, vr] {
                if row.len() != dim {
                    return Err(AttentionError::DimensionMismatch {
                        expected: dim,
                        found: row.len(),
                    });
                }
            }
            k.extend_from_slice(kr);
            v.extend_from_slice(vr);
        }
        Self::new(dim, k, v, token_ids)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    #[inline]
    pub fn key(&self, row: usize) -> &[f64] {
        &self.keys[row * self.dim..(row + 1) * self.dim]
    }

    #[inline]
    pub fn value(&self, row: usize) -> &[f64] {
        &self.values[row * self.dim..(row + 1) * self.dim]
    }

    pub fn token_ids(&self) -> &[u64] {
        &self.token_ids
    }

    /// Rows `start..end` as a new block.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let d = self.dim;
        Self::new(
            d,
            self.keys[start * d..end * d].to_vec(),
            self.values[start * d..end * d].to_vec(),
            self.token_ids[start..end].to_vec(),
        )
    }

    /// Gathers the given rows (in the given order) into a new block.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let mut k = Vec::with_capacity(rows.len() * self.dim);
        let mut v = Vec::with_capacity(rows.len() * self.dim);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            k.extend_from_slice(self.key(r));
            v.extend_from_slice(self.value(r));
            ids.push(self.token_ids[r]);
        }
        Self::new(self.dim, k, v, ids)
    }

    /// Concatenates blocks in order.
    pub fn concat(blocks: &[KvBlock]) -> Result<Self> {
        let first = blocks.first().ok_or(AttentionError::EmptyPartition)?;
        let dim = first.dim;
        let mut k = Vec::new();
        let mut v = Vec::new();
        let mut ids = Vec::new();
        for b in blocks {
            if b.dim != dim {
                return Err(AttentionError::DimensionMismatch {
                    expected: dim,
                    found: b.dim,
                });
            }
            k.extend_from_slice(&b.keys);
            v.extend_from_slice(&b.values);
            ids.extend_from_slice(&b.token_ids);
        }
        Self::new(dim, k, v, ids)
    }
}

/// Running softmax statistics: the maximum score and the sum of
/// `exp(score - max)` over every score seen so far.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxStats {
    pub max: f64,
    pub sum: f64,
}

impl SoftmaxStats {
    /// Identity element of [`merge_stats`].
    pub const EMPTY: SoftmaxStats = SoftmaxStats {
        max: f64::NEG_INFINITY,
        sum: 0.0,
    };

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.max == f64::NEG_INFINITY
    }

    #[inline]
    pub fn merge(self, other: SoftmaxStats) -> SoftmaxStats {
        merge_stats(self, other)
    }
}

/// Computes `(max, sum)` for `x` together with `softmax(x)`.
pub fn softmax_stats(x: &[f64]) -> Result<(SoftmaxStats, Vec<f64>)> {
    if x.is_empty() {
        return Err(AttentionError::EmptyVector);
    }
    check_finite(x)?;
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut f: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = f.iter().sum();
    for v in &mut f {
        *v /= sum;
    }
    Ok((SoftmaxStats { max, sum }, f))
}

/// Combines statistics of two disjoint sub-vectors into the statistics of
/// their concatenation.
#[inline]
pub fn merge_stats(a: SoftmaxStats, b: SoftmaxStats) -> SoftmaxStats {
    let max = a.max.max(b.max);
    if max == f64::NEG_INFINITY {
        return SoftmaxStats::EMPTY;
    }
    SoftmaxStats {
        max,
        sum: rescale(a, max) + rescale(b, max),
    }
}

#[inline]
fn rescale(s: SoftmaxStats, max: f64) -> f64 {
    if s.is_empty() {
        0.0
    } else {
        s.sum * (s.max - max).exp()
    }
}

/// Unnormalized attention output of one KV block plus its score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAttention {
    pub output: Vec<f64>,
    pub stats: SoftmaxStats,
}

impl PartialAttention {
    pub fn empty(dim: usize) -> Self {
        Self {
            output: vec![0.0; dim],
            stats: SoftmaxStats::EMPTY,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.output.len()
    }

    /// `O / sum`; the zero vector for the empty partial.
    pub fn normalized(&self) -> Vec<f64> {
        if self.stats.is_empty() {
            return vec![0.0; self.dim()];
        }
        self.output.iter().map(|o| o / self.stats.sum).collect()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_query(q: &QueryVector, block: &KvBlock) -> Result<()> {
    if q.dim() != block.dim() {
        return Err(AttentionError::DimensionMismatch {
            expected: q.dim(),
            found: block.dim(),
        });
    }
    Ok(())
}

fn local_rows(q: &QueryVector, block: &KvBlock, rows: std::ops::Range<usize>, scale: f64) -> PartialAttention {
    let scores: Vec<f64> = rows.clone().map(|r| scale * dot(q.as_slice(), block.key(r))).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut output = vec![0.0; block.dim()];
    let mut sum = 0.0;
    for (s, r) in scores.iter().zip(rows) {
        let w = (s - max).exp();
        sum += w;
        for (o, v) in output.iter_mut().zip(block.value(r)) {
            *o += w * v;
        }
    }
    PartialAttention {
        output,
        stats: SoftmaxStats { max, sum },
    }
}

/// Scores every token of `block` against `q` and returns the unnormalized
/// weighted value sum with the score statistics.
pub fn local_attention(q: &QueryVector, block: &KvBlock, opts: AttentionOptions) -> Result<PartialAttention> {
    check_query(q, block)?;
    Ok(local_rows(q, block, 0..block.len(), opts.score_scale(q.dim())))
}

/// Local attention computed tile by tile (`tile_rows` tokens per tile) with
/// the per-tile partials reduced afterwards, the way a device with several
/// processing units splits one block.
pub fn local_attention_tiled(
    q: &QueryVector,
    block: &KvBlock,
    tile_rows: usize,
    opts: AttentionOptions,
) -> Result<PartialAttention> {
    check_query(q, block)?;
    let tile = tile_rows.max(1);
    let scale = opts.score_scale(q.dim());
    let tiles: Vec<PartialAttention> = (0..block.len())
        .step_by(tile)
        .map(|start| local_rows(q, block, start..(start + tile).min(block.len()), scale))
        .collect();
    reduce_partials(&tiles)
}

/// Merges partial attentions into one, rescaling every partial to the global
/// maximum score.
pub fn reduce_partials(parts: &[PartialAttention]) -> Result<PartialAttention> {
    let first = parts.first().ok_or(AttentionError::EmptyReduction)?;
    let dim = first.dim();
    if let Some(bad) = parts.iter().find(|p| p.dim() != dim) {
        return Err(AttentionError::DimensionMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }
    let max = parts.iter().map(|p| p.stats.max).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(PartialAttention::empty(dim));
    }
    let mut output = vec![0.0; dim];
    let mut sum = 0.0;
    for p in parts.iter().filter(|p| !p.stats.is_empty()) {
        let w = (p.stats.max - max).exp();
        sum += w * p.stats.sum;
        for (o, v) in output.iter_mut().zip(&p.output) {
            *o += w * v;
        }
    }
    Ok(PartialAttention {
        output,
        stats: SoftmaxStats { max, sum },
    })
}

/// Attention of `q` over the union of `partition`: local attention on every
/// block followed by a single reduction.
pub fn pam_attention(q: &QueryVector, partition: &[KvBlock], opts: AttentionOptions) -> Result<Vec<f64>> {
    if partition.is_empty() {
        return Err(AttentionError::EmptyPartition);
    }
    let parts = partition
        .iter()
        .map(|b| local_attention(q, b, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce_partials(&parts)?.normalized())
}

/// Two-level attention: blocks are reduced within each group first (one group
/// per memory tier, one block per bank group), then the group results are
/// reduced. Empty groups are allowed; at least one block overall is required.
pub fn hierarchical_attention(q: &QueryVector, groups: &[Vec<KvBlock>], opts: AttentionOptions) -> Result<Vec<f64>> {
    if groups.iter().all(Vec::is_empty) {
        return Err(AttentionError::EmptyPartition);
    }
    let mut group_partials = Vec::with_capacity(groups.len());
    for blocks in groups {
        if blocks.is_empty() {
            group_partials.push(PartialAttention::empty(q.dim()));
            continue;
        }
        let parts = blocks
            .iter()
            .map(|b| local_attention(q, b, opts))
            .collect::<Result<Vec<_>>>()?;
        group_partials.push(reduce_partials(&parts)?);
    }
    Ok(reduce_partials(&group_partials)?.normalized())
}

/// Dense single-pass `softmax(q K^T) V` over one block.
pub fn reference_attention(q: &QueryVector, kv: &KvBlock, opts: AttentionOptions) -> Result<Vec<f64>> {
    check_query(q, kv)?;
    let scale = opts.score_scale(q.dim());
    let scores: Vec<f64> = (0..kv.len()).map(|r| scale * dot(q.as_slice(), kv.key(r))).collect();
    check_finite(&scores)?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; kv.dim()];
    let mut sum = 0.0;
    for (r, s) in scores.iter().enumerate() {
        let w = (s - max).exp();
        sum += w;
        for (o, v) in out.iter_mut().zip(kv.value(r)) {
            *o += w * v;
        }
    }
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// Largest elementwise relative error `|a - b| / max(|b|, floor)`.
pub fn max_relative_error(actual: &[f64], expected: &[f64], floor: f64) -> f64 {
    actual
        .iter()
        .zip(expected)
        .map(|(a, e)| (a - e).abs() / e.abs().max(floor))
        .fold(0.0, f64::max)
}
