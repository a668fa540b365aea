//! Item-item pointwise mutual information from timeline co-occurrences.
//!
//! Two items co-occur when they appear in the same user timeline, anywhere
//! in it. Each timeline is deduplicated before pairing, so a pair counts at
//! most once per user. The context marginal can be smoothed with an exponent
//! `alpha < 1`:
//!
//! ```text
//! PMI(i, j) = ln( p(i, j) / (p(i) · p_α(j)) )
//! p(i, j) = c(i, j) / C        p(i) = c(i) / Σ c(k)        p_α(j) = c(j)^α / Σ c(k)^α
//! ```
//!
//! Only observed pairs are stored; negative values are kept as they are.

use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::codec::{self, ByteReader, ByteWriter};
use crate::data::{EventKind, TimelineSet};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindFilter {
    Views,
    Clicks,
    All,
}

impl KindFilter {
    fn admits(self, k: EventKind) -> bool {
        match self {
            KindFilter::Views => k == EventKind::View,
            KindFilter::Clicks => k == EventKind::Click,
            KindFilter::All => true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CooccurrenceConfig {
    pub kinds: KindFilter,
    /// Timelines with more distinct pairs than this are subsampled uniformly.
    pub max_pairs_per_timeline: usize,
    pub seed: u64,
}

impl Default for CooccurrenceConfig {
    fn default() -> Self {
        Self {
            kinds: KindFilter::Views,
            max_pairs_per_timeline: 10_000,
            seed: 0,
        }
    }
}

/// Sparse pair counts, stored once per unordered pair under the lower index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CooccurrenceStats {
    n_items: usize,
    rows: Vec<FxHashMap<u32, u64>>,
    item_counts: Vec<u64>,
    total_pairs: u64,
    total_items: u64,
}

impl CooccurrenceStats {
    pub fn new(n_items: usize) -> Self {
        Self {
            n_items,
            rows: vec![FxHashMap::default(); n_items],
            item_counts: vec![0; n_items],
            total_pairs: 0,
            total_items: 0,
        }
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// `c(i, j)`, symmetric.
    pub fn pair(&self, i: u32, j: u32) -> u64 {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        if a == b {
            return 0;
        }
        self.rows[a as usize].get(&b).copied().unwrap_or(0)
    }

    pub fn item(&self, i: u32) -> u64 {
        self.item_counts[i as usize]
    }

    pub fn item_counts(&self) -> &[u64] {
        &self.item_counts
    }

    /// `C`, the number of counted pairs.
    pub fn total_pairs(&self) -> u64 {
        self.total_pairs
    }

    /// `Σ c(i)`.
    pub fn total_items(&self) -> u64 {
        self.total_items
    }

    pub fn n_pairs(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// Associative merge of two partial counts.
    pub fn merge(mut self, other: CooccurrenceStats) -> CooccurrenceStats {
        for (row, o) in self.rows.iter_mut().zip(other.rows) {
            for (j, c) in o {
                *row.entry(j).or_insert(0) += c;
            }
        }
        for (a, b) in self.item_counts.iter_mut().zip(other.item_counts) {
            *a += b;
        }
        self.total_pairs += other.total_pairs;
        self.total_items += other.total_items;
        self
    }

    fn add_pair(&mut self, a: u32, b: u32) {
        *self.rows[a as usize].entry(b).or_insert(0) += 1;
        self.total_pairs += 1;
    }
}

/// Maps a linear index over the `n·(n-1)/2` unordered pairs to `(a, b)`, `a < b`.
fn decode_pair(k: usize, n: usize) -> (usize, usize) {
    // Pairs with first element < a occupy offset(a) = a·n − a·(a+1)/2 slots.
    let offset = |a: usize| a * n - a * (a + 1) / 2;
    let (mut lo, mut hi) = (0usize, n - 1);
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if offset(mid) <= k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = if offset(hi) <= k && hi < n - 1 { hi } else { lo };
    (a, a + 1 + (k - offset(a)))
}

pub fn count_cooccurrences(ts: &TimelineSet, cfg: &CooccurrenceConfig) -> CooccurrenceStats {
    let n = ts.n_items();
    ts.timelines()
        .par_iter()
        .enumerate()
        .fold(
            || CooccurrenceStats::new(n),
            |mut acc, (ti, t)| {
                let mut items: Vec<u32> = t
                    .events
                    .iter()
                    .filter(|e| cfg.kinds.admits(e.kind))
                    .map(|e| e.item)
                    .collect();
                items.sort_unstable();
                items.dedup();
                for &i in &items {
                    acc.item_counts[i as usize] += 1;
                }
                acc.total_items += items.len() as u64;
                let m = items.len();
                let total = m * m.saturating_sub(1) / 2;
                if total <= cfg.max_pairs_per_timeline {
                    for a in 0..m {
                        for b in a + 1..m {
                            acc.add_pair(items[a], items[b]);
                        }
                    }
                } else {
                    let mut rng = seed::rng(seed::derive_n(cfg.seed, ti as u64));
                    for k in index::sample(&mut rng, total, cfg.max_pairs_per_timeline) {
                        let (a, b) = decode_pair(k, m);
                        acc.add_pair(items[a], items[b]);
                    }
                }
                acc
            },
        )
        .reduce(|| CooccurrenceStats::new(n), CooccurrenceStats::merge)
}

/// Square sparse matrix in compressed-row form with sorted column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PmiMatrix {
    n: usize,
    offsets: Vec<u64>,
    cols: Vec<u32>,
    vals: Vec<f32>,
    alpha: f32,
}

impl PmiMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(u32, u32, f32)]) -> Result<Self> {
        let mut rows: Vec<Vec<(u32, f32)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            if i as usize >= n || j as usize >= n {
                return Err(Error::OutOfRange { index: i.max(j) as u64, len: n as u64 });
            }
            rows[i as usize].push((j, v));
        }
        Ok(Self::from_rows(n, rows, 1.0))
    }

    /// Keeps the non-zero entries of a row-major dense matrix.
    pub fn from_dense(n: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != n * n {
            return Err(Error::Shape(format!("dense matrix has {} entries, expected {}", dense.len(), n * n)));
        }
        let mut t = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v = dense[i * n + j];
                if v != 0.0 {
                    t.push((i as u32, j as u32, v as f32));
                }
            }
        }
        Self::from_triplets(n, &t)
    }

    fn from_rows(n: usize, rows: Vec<Vec<(u32, f32)>>, alpha: f32) -> Self {
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0u64);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut last: Option<u32> = None;
            for (j, v) in row {
                if last == Some(j) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(j);
                    vals.push(v);
                    last = Some(j);
                }
            }
            offsets.push(cols.len() as u64);
        }
        Self { n, offsets, cols, vals, alpha }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.offsets[i] as usize, self.offsets[i + 1] as usize);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn get(&self, i: u32, j: u32) -> Option<f32> {
        let (cols, vals) = self.row(i as usize);
        cols.binary_search(&j).ok().map(|p| vals[p])
    }

    pub fn values(&self) -> &[f32] {
        &self.vals
    }

    pub fn transpose(&self) -> PmiMatrix {
        let mut rows: Vec<Vec<(u32, f32)>> = vec![Vec::new(); self.n];
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                rows[j as usize].push((i as u32, v));
            }
        }
        Self::from_rows(self.n, rows, self.alpha)
    }

    /// Row-major dense copy (tests and small oracles).
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                d[i * self.n + j as usize] = v as f64;
            }
        }
        d
    }

    /// ```text
    /// magic "LEDP" | version u32 | n u64 | nnz u64 | alpha f32 |
    /// offsets u64 × (n+1) | cols u32 × nnz | values f32 × nnz
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_header(b"LEDP");
        w.u64(self.n as u64);
        w.u64(self.nnz() as u64);
        w.f32(self.alpha);
        w.u64s(&self.offsets);
        w.u32s(&self.cols);
        w.f32s(&self.vals);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::header(bytes, b"LEDP", "pmi")?;
        let n = r.count(8)?;
        let nnz = r.count(8)?;
        let alpha = r.f32()?;
        if !alpha.is_finite() {
            return Err(r.err("non-finite alpha"));
        }
        let offsets = r.u64s(n + 1)?;
        let cols = r.u32s(nnz)?;
        let vals = r.f32s(nnz)?;
        r.finish()?;
        let bad = |m: String| Error::format("pmi", m);
        if offsets[0] != 0 || offsets[n] != nnz as u64 || offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(bad("row offsets are not a monotone 0..nnz sequence".into()));
        }
        for i in 0..n {
            let row = &cols[offsets[i] as usize..offsets[i + 1] as usize];
            if row.iter().any(|&j| j as usize >= n) || row.windows(2).any(|w| w[1] <= w[0]) {
                return Err(bad(format!("row {i} has out-of-range or unsorted columns")));
            }
        }
        codec::ensure_finite(&vals, "pmi value")?;
        Ok(Self { n, offsets, cols, vals, alpha })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

/// Marginals needed to evaluate PMI values in f64.
pub struct PmiWeights<'a> {
    stats: &'a CooccurrenceStats,
    smoothed: Vec<f64>,
    smoothed_total: f64,
}

impl<'a> PmiWeights<'a> {
    pub fn new(stats: &'a CooccurrenceStats, alpha: f64) -> Result<Self> {
        if stats.total_pairs == 0 || stats.total_items == 0 {
            return Err(Error::EmptyDataset("no co-occurring item pairs to build PMI from".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        let smoothed: Vec<f64> = stats.item_counts.iter().map(|&c| (c as f64).powf(alpha)).collect();
        let smoothed_total = smoothed.iter().sum();
        Ok(Self { stats, smoothed, smoothed_total })
    }

    fn value_with_count(&self, i: usize, j: usize, c: u64) -> f64 {
        let pij = c as f64 / self.stats.total_pairs as f64;
        let pi = self.stats.item_counts[i] as f64 / self.stats.total_items as f64;
        let pj_alpha = self.smoothed[j] / self.smoothed_total;
        (pij / (pi * pj_alpha)).ln()
    }

    /// `PMI(i, j)` for an observed pair, `None` otherwise.
    pub fn value(&self, i: u32, j: u32) -> Option<f64> {
        match self.stats.pair(i, j) {
            0 => None,
            c => Some(self.value_with_count(i as usize, j as usize, c)),
        }
    }
}

/// Builds the PMI matrix from co-occurrence counts. Pairs seen fewer than
/// `min_count` times are left out of the support.
pub fn build_pmi(stats: &CooccurrenceStats, alpha: f64, min_count: u64) -> Result<PmiMatrix> {
    let w = PmiWeights::new(stats, alpha)?;
    let mut rows: Vec<Vec<(u32, f32)>> = vec![Vec::new(); stats.n_items];
    for (i, row) in stats.rows.iter().enumerate() {
        for (&j, &c) in row {
            if c < min_count.max(1) {
                continue;
            }
            let j = j as usize;
            rows[i].push((j as u32, w.value_with_count(i, j, c) as f32));
            rows[j].push((i as u32, w.value_with_count(j, i, c) as f32));
        }
    }
    Ok(PmiMatrix::from_rows(stats.n_items, rows, alpha as f32))
}
