//! Maximum-inner-product retrieval: an HNSW graph searched directly on the
//! inner product, and an exact brute-force scan.
//!
//! Candidates found by the graph are ranked by their exact inner product, so
//! the two paths report identical scores for the same item. Ties are broken
//! by lower item index everywhere.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::rsvd::EmbeddingMatrix;
use crate::seed;
use crate::vecmath::dot;

const MAX_LEVEL: usize = 16;

/// The inner product used for all retrieval scores.
pub fn inner_product(a: &[f32], b: &[f32]) -> f32 {
    dot(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HnswParams {
    /// Maximum links per node above layer 0; layer 0 allows `2·m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self { m: 16, ef_construction: 200, ef_search: 100, seed: 0 }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("hnsw m must be at least 2, got {}", self.m)));
        }
        if self.ef_construction == 0 || self.ef_search == 0 {
            return Err(Error::Config("hnsw ef values must be positive".into()));
        }
        Ok(())
    }
}

/// Top-k items sorted by descending score, ties by ascending index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub items: Vec<u32>,
    pub scores: Vec<f32>,
    /// Set when fewer than the requested `k` items exist.
    pub truncated: bool,
}

impl TopK {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn from_scored(mut scored: Vec<Scored>, k: usize, available: usize) -> Self {
        scored.sort_unstable_by(|a, b| b.cmp(a));
        scored.truncate(k);
        Self {
            items: scored.iter().map(|s| s.id).collect(),
            scores: scored.iter().map(|s| s.score).collect(),
            truncated: k > available,
        }
    }
}

/// A candidate ordered by score, then by *lower* index being better.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Scored {
    score: f32,
    id: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bitset over node ids.
struct Visited(Vec<u64>);

impl Visited {
    fn new(n: usize) -> Self {
        Self(vec![0; n.div_ceil(64)])
    }

    /// Returns whether `id` was newly inserted.
    fn insert(&mut self, id: u32) -> bool {
        let (w, bit) = (id as usize / 64, 1u64 << (id % 64));
        let fresh = self.0[w] & bit == 0;
        self.0[w] |= bit;
        fresh
    }
}

/// Keeps the `k` best of a stream.
struct Best {
    k: usize,
    heap: BinaryHeap<std::cmp::Reverse<Scored>>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self { k, heap: BinaryHeap::with_capacity(k + 1) }
    }

    fn push(&mut self, s: Scored) {
        if self.heap.len() < self.k {
            self.heap.push(std::cmp::Reverse(s));
        } else if let Some(worst) = self.heap.peek() {
            if s > worst.0 {
                self.heap.pop();
                self.heap.push(std::cmp::Reverse(s));
            }
        }
    }

    fn worst(&self) -> Option<Scored> {
        self.heap.peek().map(|r| r.0)
    }

    fn is_full(&self) -> bool {
        self.heap.len() >= self.k
    }

    fn into_vec(self) -> Vec<Scored> {
        self.heap.into_iter().map(|r| r.0).collect()
    }
}

/// Exact top-k by inner product.
pub fn brute_force(items: &EmbeddingMatrix, query: &[f32], k: usize) -> Result<TopK> {
    if query.len() != items.dim() {
        return Err(Error::Shape(format!("query has {} dims, items have {}", query.len(), items.dim())));
    }
    let mut best = Best::new(k.min(items.rows()));
    for i in 0..items.rows() {
        best.push(Scored { score: dot(query, items.row(i)), id: i as u32 });
    }
    Ok(TopK::from_scored(best.into_vec(), k, items.rows()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnIndex {
    params: HnswParams,
    items: EmbeddingMatrix,
    /// `links[node][level]` for levels `0..=level(node)`.
    links: Vec<Vec<Vec<u32>>>,
    entry: u32,
    max_level: usize,
}

/// Draws node levels with `P(level ≥ l) = m^(−l)`.
fn draw_level<R: Rng>(rng: &mut R, m: usize) -> usize {
    let u: f64 = 1.0 - rng.random::<f64>();
    ((-u.ln() / (m as f64).ln()).floor() as usize).min(MAX_LEVEL)
}

impl AnnIndex {
    /// Builds the graph by sequential insertion in item order.
    pub fn build(items: EmbeddingMatrix, params: HnswParams) -> Result<Self> {
        params.validate()?;
        let n = items.rows();
        if n == 0 {
            return Err(Error::EmptyDataset("cannot index zero items".into()));
        }
        if n > u32::MAX as usize {
            return Err(Error::Config("too many items for a u32 index".into()));
        }
        let mut rng = seed::rng(params.seed);
        let levels: Vec<usize> = (0..n).map(|_| draw_level(&mut rng, params.m)).collect();
        let mut idx = Self {
            params,
            links: levels.iter().map(|&l| vec![Vec::new(); l + 1]).collect(),
            items,
            entry: 0,
            max_level: levels[0],
        };
        for q in 1..n as u32 {
            idx.insert(q, levels[q as usize]);
        }
        idx.repair_connectivity();
        Ok(idx)
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.items.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.items.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.items.dim()
    }

    pub fn items(&self) -> &EmbeddingMatrix {
        &self.items
    }

    pub fn entry_point(&self) -> u32 {
        self.entry
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn neighbors(&self, node: u32, level: usize) -> &[u32] {
        self.links[node as usize].get(level).map(|v| v.as_slice()).unwrap_or(&[])
    }

    fn score(&self, q: &[f32], id: u32) -> Scored {
        Scored { score: dot(q, self.items.row(id as usize)), id }
    }

    fn max_links(&self, level: usize) -> usize {
        if level == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    fn greedy(&self, q: &[f32], mut cur: Scored, level: usize) -> Scored {
        loop {
            let mut improved = false;
            for &nb in self.neighbors(cur.id, level) {
                let s = self.score(q, nb);
                if s > cur {
                    cur = s;
                    improved = true;
                }
            }
            if !improved {
                return cur;
            }
        }
    }

    /// Best-first beam search on one layer. Stops once the beam holds `ef`
    /// results and the next candidate cannot improve it, so `ef ≥ n` explores
    /// the whole reachable graph.
    fn search_layer(&self, q: &[f32], entry: Scored, ef: usize, level: usize) -> Vec<Scored> {
        let mut visited = Visited::new(self.len());
        visited.insert(entry.id);
        let mut candidates = BinaryHeap::new();
        candidates.push(entry);
        let mut best = Best::new(ef);
        best.push(entry);
        while let Some(c) = candidates.pop() {
            if best.is_full() && best.worst().is_some_and(|w| c < w) {
                break;
            }
            for &nb in self.neighbors(c.id, level) {
                if !visited.insert(nb) {
                    continue;
                }
                let s = self.score(q, nb);
                if !best.is_full() || best.worst().is_some_and(|w| s > w) {
                    candidates.push(s);
                    best.push(s);
                }
            }
        }
        best.into_vec()
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the query
    /// than to every neighbor kept so far, then top up with the best rejects.
    fn select(&self, q_id: u32, mut cands: Vec<Scored>, m: usize) -> Vec<u32> {
        cands.sort_unstable_by(|a, b| b.cmp(a));
        cands.retain(|c| c.id != q_id);
        let mut kept: Vec<u32> = Vec::with_capacity(m);
        let mut rejected = Vec::new();
        for c in &cands {
            if kept.len() >= m {
                break;
            }
            let row = self.items.row(c.id as usize);
            let dominated = kept.iter().any(|&r| dot(row, self.items.row(r as usize)) > c.score);
            if dominated {
                rejected.push(c.id);
            } else {
                kept.push(c.id);
            }
        }
        for r in rejected {
            if kept.len() >= m {
                break;
            }
            kept.push(r);
        }
        kept
    }

    fn insert(&mut self, q: u32, level: usize) {
        let qv = self.items.row(q as usize).to_vec();
        let mut cur = self.score(&qv, self.entry);
        for l in (level + 1..=self.max_level).rev() {
            cur = self.greedy(&qv, cur, l);
        }
        for l in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(&qv, cur, self.params.ef_construction, l);
            cur = *found.iter().max().expect("search returns its entry");
            let chosen = self.select(q, found, self.params.m);
            for &nb in &chosen {
                self.links[nb as usize][l].push(q);
                if self.links[nb as usize][l].len() > self.max_links(l) {
                    self.shrink(nb, l);
                }
            }
            self.links[q as usize][l] = chosen;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = q;
        }
    }

    fn shrink(&mut self, node: u32, level: usize) {
        let v = self.items.row(node as usize);
        let cands = self.links[node as usize][level]
            .iter()
            .map(|&nb| Scored { score: dot(v, self.items.row(nb as usize)), id: nb })
            .collect();
        self.links[node as usize][level] = self.select(node, cands, self.max_links(level));
    }

    /// Makes every node reachable from the entry point on layer 0 by linking
    /// each stranded node from its best-scoring reachable node.
    fn repair_connectivity(&mut self) {
        let n = self.len();
        let mut reached = vec![false; n];
        let mut stack = vec![self.entry];
        reached[self.entry as usize] = true;
        let mut order = Vec::with_capacity(n);
        let flood = |links: &Vec<Vec<Vec<u32>>>, stack: &mut Vec<u32>, reached: &mut Vec<bool>, order: &mut Vec<u32>| {
            while let Some(x) = stack.pop() {
                order.push(x);
                for &nb in &links[x as usize][0] {
                    if !reached[nb as usize] {
                        reached[nb as usize] = true;
                        stack.push(nb);
                    }
                }
            }
        };
        flood(&self.links, &mut stack, &mut reached, &mut order);
        let mut repaired = 0usize;
        for u in 0..n as u32 {
            if reached[u as usize] {
                continue;
            }
            let uv = self.items.row(u as usize);
            let from = order
                .iter()
                .map(|&r| Scored { score: dot(uv, self.items.row(r as usize)), id: r })
                .max()
                .expect("entry is reached");
            self.links[from.id as usize][0].push(u);
            reached[u as usize] = true;
            stack.push(u);
            flood(&self.links, &mut stack, &mut reached, &mut order);
            repaired += 1;
        }
        if repaired > 0 {
            tracing::debug!(repaired, "linked stranded layer-0 nodes");
        }
    }

    /// Approximate top-k. Uses a beam of `max(ef, k)` candidates.
    pub fn search(&self, query: &[f32], k: usize, ef: usize) -> Result<TopK> {
        if query.len() != self.dim() {
            return Err(Error::Shape(format!("query has {} dims, index has {}", query.len(), self.dim())));
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let mut cur = self.score(query, self.entry);
        for l in (1..=self.max_level).rev() {
            cur = self.greedy(query, cur, l);
        }
        // No beam can hold more than the catalog; clamping keeps a huge `k` from
        // reserving memory up front.
        let found = self.search_layer(query, cur, ef.max(k).min(self.len()), 0);
        // Re-score from the stored vectors so both retrieval paths agree bitwise.
        let rescored = found.into_iter().map(|s| self.score(query, s.id)).collect();
        Ok(TopK::from_scored(rescored, k, self.len()))
    }

    /// ```text
    /// magic "LEDI" | version u32 | m u32 | ef_construction u32 | ef_search u32 |
    /// seed u64 | n u64 | dim u64 | entry u32 | max_level u8 | vectors f32 × n·dim |
    /// per node: top level u8, then per level 0..=top: count u32, ids u32 × count
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_header(b"LEDI");
        w.u32(self.params.m as u32);
        w.u32(self.params.ef_construction as u32);
        w.u32(self.params.ef_search as u32);
        w.u64(self.params.seed);
        w.u64(self.len() as u64);
        w.u64(self.dim() as u64);
        w.u32(self.entry);
        w.u8(self.max_level as u8);
        w.f32s(self.items.data());
        for node in &self.links {
            w.u8((node.len() - 1) as u8);
            for level in node {
                w.u32(level.len() as u32);
                w.u32s(level);
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::header(bytes, b"LEDI", "index")?;
        let params = HnswParams {
            m: r.u32()? as usize,
            ef_construction: r.u32()? as usize,
            ef_search: r.u32()? as usize,
            seed: r.u64()?,
        };
        params.validate().map_err(|e| Error::format("index", e.to_string()))?;
        let n = r.u64()?;
        let dim = r.u64()?;
        if n == 0 || dim == 0 || n > u32::MAX as u64 {
            return Err(r.err(format!("bad shape {n} × {dim}")));
        }
        let entry = r.u32()?;
        let max_level = r.u8()? as usize;
        if entry as u64 >= n || max_level > MAX_LEVEL {
            return Err(r.err("bad entry point or level"));
        }
        let nd = n.checked_mul(dim).ok_or_else(|| r.err("n × dim overflows"))?;
        let data = r.f32s(r.check_count(nd, 4)?)?;
        let items = EmbeddingMatrix::new(n as usize, dim as usize, data).map_err(|e| Error::format("index", e.to_string()))?;
        let mut links = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let top = r.u8()? as usize;
            if top > max_level {
                return Err(r.err(format!("node level {top} above max level {max_level}")));
            }
            let mut node = Vec::with_capacity(top + 1);
            for _ in 0..=top {
                let c = r.u32()? as u64;
                let ids = r.u32s(r.check_count(c, 4)?)?;
                if ids.iter().any(|&i| i as u64 >= n) {
                    return Err(r.err("neighbor id out of range"));
                }
                node.push(ids);
            }
            links.push(node);
        }
        r.finish()?;
        if links[entry as usize].len() != max_level + 1 {
            return Err(Error::format("index", "entry point is not on the top level"));
        }
        for node in &links {
            for (l, ids) in node.iter().enumerate() {
                if ids.iter().any(|&i| links[i as usize].len() <= l) {
                    return Err(Error::format("index", "link to a node missing from that level"));
                }
            }
        }
        Ok(Self { params, items, links, entry, max_level })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}
