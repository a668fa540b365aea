//! Offline metrics and evaluation harness.
//!
//! Each held-out user's timeline is split at random into an input part and
//! a target part. The ranker sees the input and is scored on the targets
//! with recall@20, recall@50 and NDCG@100, and on synthetic banners with
//! click-rank.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::ann::{brute_force, AnnIndex, TopK};
use crate::data::{split_timeline, TargetKinds, TimelineSet, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::{sample_negatives, LossKind};
use crate::model::{augment_query, LedModel};
use crate::rsvd::EmbeddingMatrix;
use crate::seed;
use crate::trainer::{train_with_output, TrainConfig, TrainData, TrainOutput};
use crate::vecmath::dot;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallDenominator {
    /// `min(k, |targets|)`, so a perfect ranking always scores 1.
    #[default]
    MinKTargets,
    /// `|targets|`
    Targets,
}

pub fn recall_at_k(ranked: &[u32], targets: &FxHashSet<u32>, k: usize, denom: RecallDenominator) -> f64 {
    if targets.is_empty() || k == 0 {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|i| targets.contains(i)).count();
    let d = match denom {
        RecallDenominator::MinKTargets => k.min(targets.len()),
        RecallDenominator::Targets => targets.len(),
    };
    hits as f64 / d as f64
}

/// Binary-gain NDCG with discount `1 / log2(rank + 1)`, ranks from 1.
pub fn ndcg_at_k(ranked: &[u32], targets: &FxHashSet<u32>, k: usize) -> f64 {
    if targets.is_empty() || k == 0 {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| targets.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(targets.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    dcg / idcg
}

/// Candidates shown together, exactly one of which was clicked.
#[derive(Clone, Debug, PartialEq)]
pub struct BannerSample {
    pub scores: Vec<f32>,
    pub positive: usize,
}

/// Normalized rank of the clicked item in its banner: 0 when it scores
/// highest, 1 when it scores lowest. Candidates tied with the positive are
/// placed in random order, so a constant scorer averages 0.5.
pub fn click_rank<R: Rng + ?Sized>(b: &BannerSample, rng: &mut R) -> Result<f64> {
    let n = b.scores.len();
    if n < 2 || b.positive >= n {
        return Err(Error::Config(format!("banner of {n} items with positive at {}", b.positive)));
    }
    let sp = b.scores[b.positive];
    let mut higher = 0;
    let mut ties = 0;
    for (i, &s) in b.scores.iter().enumerate() {
        if i == b.positive {
            continue;
        }
        match s.total_cmp(&sp) {
            std::cmp::Ordering::Greater => higher += 1,
            std::cmp::Ordering::Equal => ties += 1,
            std::cmp::Ordering::Less => {}
        }
    }
    let above_from_ties = if ties > 0 { rng.random_range(0..=ties) } else { 0 };
    Ok((higher + above_from_ties) as f64 / (n - 1) as f64)
}

/// Most viewed items first, ties by lower index.
pub fn gbo_baseline(vocab: &Vocabulary, k: usize) -> TopK {
    popularity_top_k(vocab.views(), k)
}

fn popularity_top_k(counts: &[u64], k: usize) -> TopK {
    let mut order: Vec<u32> = (0..counts.len() as u32).collect();
    order.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    order.truncate(k);
    TopK {
        scores: order.iter().map(|&i| counts[i as usize] as f32).collect(),
        items: order,
        truncated: k > counts.len(),
    }
}

/// Something that ranks the catalog for a user history.
pub trait Ranker: Sync {
    fn n_items(&self) -> usize;
    fn top_k(&self, input: &[u32], k: usize) -> Result<TopK>;
    fn scores(&self, input: &[u32], items: &[u32]) -> Result<Vec<f32>>;
}

/// Ranks by the model's score through the bias-augmented inner product,
/// either exhaustively or through an HNSW index.
pub struct ModelRanker<'a> {
    model: &'a LedModel,
    items: EmbeddingMatrix,
    index: Option<(&'a AnnIndex, usize)>,
}

impl<'a> ModelRanker<'a> {
    pub fn brute_force(model: &'a LedModel) -> Self {
        Self { model, items: model.augment_for_mips(), index: None }
    }

    pub fn ann(model: &'a LedModel, index: &'a AnnIndex, ef: usize) -> Result<Self> {
        if index.len() != model.n_items() || index.dim() != model.dim() + 1 {
            return Err(Error::Shape(format!(
                "index is {}×{}, model needs {}×{}",
                index.len(),
                index.dim(),
                model.n_items(),
                model.dim() + 1
            )));
        }
        Ok(Self { model, items: model.augment_for_mips(), index: Some((index, ef)) })
    }

    fn query(&self, input: &[u32]) -> Result<Vec<f32>> {
        Ok(augment_query(&self.model.encode_user(input)?))
    }
}

impl Ranker for ModelRanker<'_> {
    fn n_items(&self) -> usize {
        self.model.n_items()
    }

    fn top_k(&self, input: &[u32], k: usize) -> Result<TopK> {
        let q = self.query(input)?;
        match self.index {
            Some((idx, ef)) => idx.search(&q, k, ef),
            None => brute_force(&self.items, &q, k),
        }
    }

    fn scores(&self, input: &[u32], items: &[u32]) -> Result<Vec<f32>> {
        let q = self.query(input)?;
        items
            .iter()
            .map(|&i| {
                if i as usize >= self.items.rows() {
                    return Err(Error::OutOfRange { index: i as u64, len: self.items.rows() as u64 });
                }
                Ok(dot(&q, self.items.row(i as usize)))
            })
            .collect()
    }
}

/// Ignores the history and ranks by popularity.
pub struct PopularityRanker {
    counts: Vec<u64>,
}

impl PopularityRanker {
    pub fn new(vocab: &Vocabulary) -> Self {
        Self { counts: vocab.views().to_vec() }
    }
}

impl Ranker for PopularityRanker {
    fn n_items(&self) -> usize {
        self.counts.len()
    }

    fn top_k(&self, _input: &[u32], k: usize) -> Result<TopK> {
        Ok(popularity_top_k(&self.counts, k))
    }

    fn scores(&self, _input: &[u32], items: &[u32]) -> Result<Vec<f32>> {
        Ok(items.iter().map(|&i| self.counts[i as usize] as f32).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub input_fraction: f64,
    /// Remove the user's input items from the ranking before scoring it.
    pub exclude_input: bool,
    pub banner_size: usize,
    pub click_rank: bool,
    pub recall_denominator: RecallDenominator,
    /// Defaults to clicks only when the data has clicks.
    pub target_kinds: Option<TargetKinds>,
    /// Rank only the targets plus this many sampled items instead of the
    /// whole catalog.
    pub sampled_candidates: Option<usize>,
    /// Evaluate at most this many users (the first ones).
    pub max_users: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            input_fraction: 0.8,
            exclude_input: true,
            banner_size: 10,
            click_rank: true,
            recall_denominator: RecallDenominator::MinKTargets,
            target_kinds: None,
            sampled_candidates: None,
            max_users: None,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.input_fraction > 0.0 && self.input_fraction < 1.0) {
            return Err(Error::Config(format!("eval input_fraction {} not in (0, 1)", self.input_fraction)));
        }
        if self.click_rank && self.banner_size < 2 {
            return Err(Error::Config("banner_size must be at least 2".into()));
        }
        Ok(())
    }
}

/// Mean of a per-user metric with its standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub mean: f64,
    pub stderr: f64,
}

impl Metric {
    fn from_values(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return Self::default();
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at_20: Metric,
    pub recall_at_50: Metric,
    pub ndcg_at_100: Metric,
    pub click_rank: Option<Metric>,
    pub users: usize,
    pub skipped_users: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "mean", "stderr", "users"]).unwrap();
        let users = self.users.to_string();
        let mut rows = vec![("recall@20", self.recall_at_20), ("recall@50", self.recall_at_50), ("ndcg@100", self.ndcg_at_100)];
        if let Some(c) = self.click_rank {
            rows.push(("click_rank", c));
        }
        for (name, m) in rows {
            w.write_record([name, &m.mean.to_string(), &m.stderr.to_string(), &users]).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

struct UserMetrics {
    recall_20: f64,
    recall_50: f64,
    ndcg_100: f64,
    click_rank: Option<f64>,
}

const RANK_DEPTH: usize = 100;

fn evaluate_user<R: Ranker + ?Sized>(
    ranker: &R,
    ts: &TimelineSet,
    user: usize,
    cfg: &EvalConfig,
    kinds: TargetKinds,
) -> Result<Option<UserMetrics>> {
    let t = &ts.timelines()[user];
    let mut rng = seed::rng(seed::derive_n(cfg.seed, user as u64));
    let Ok(split) = split_timeline(t, cfg.input_fraction, &mut rng, true, kinds) else {
        return Ok(None);
    };
    let input_set: FxHashSet<u32> = split.input.iter().copied().collect();
    let mut targets: FxHashSet<u32> = split.target.iter().copied().collect();
    if cfg.exclude_input {
        targets.retain(|i| !input_set.contains(i));
    }
    if targets.is_empty() {
        return Ok(None);
    }
    let n_items = ranker.n_items();
    let extra = if cfg.exclude_input { input_set.len() } else { 0 };
    let ranked: Vec<u32> = match cfg.sampled_candidates {
        Some(n) if n_items > n + targets.len() + extra => {
            let mut excl = input_set.clone();
            excl.extend(targets.iter().copied());
            let mut cands = sample_negatives(n_items, n, &excl, &mut rng)?;
            let mut sorted_targets: Vec<u32> = targets.iter().copied().collect();
            sorted_targets.sort_unstable();
            cands.extend(sorted_targets);
            let scores = ranker.scores(&split.input, &cands)?;
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(cands[a].cmp(&cands[b])));
            order.into_iter().take(RANK_DEPTH).map(|o| cands[o]).collect()
        }
        _ => {
            let top = ranker.top_k(&split.input, RANK_DEPTH + extra)?;
            top.items
                .into_iter()
                .filter(|i| !cfg.exclude_input || !input_set.contains(i))
                .take(RANK_DEPTH)
                .collect()
        }
    };
    let click = if cfg.click_rank {
        banner_click_rank(ranker, &split.input, &input_set, &targets, n_items, cfg.banner_size, &mut rng)?
    } else {
        None
    };
    Ok(Some(UserMetrics {
        recall_20: recall_at_k(&ranked, &targets, 20, cfg.recall_denominator),
        recall_50: recall_at_k(&ranked, &targets, 50, cfg.recall_denominator),
        ndcg_100: ndcg_at_k(&ranked, &targets, RANK_DEPTH),
        click_rank: click,
    }))
}

/// Mean click-rank over one synthetic banner per target: the target plus
/// `banner_size − 1` uniform items the user never interacted with.
fn banner_click_rank<R: Ranker + ?Sized, G: Rng>(
    ranker: &R,
    input: &[u32],
    input_set: &FxHashSet<u32>,
    targets: &FxHashSet<u32>,
    n_items: usize,
    banner_size: usize,
    rng: &mut G,
) -> Result<Option<f64>> {
    let mut excl = input_set.clone();
    excl.extend(targets.iter().copied());
    if n_items.saturating_sub(excl.len()) < banner_size - 1 {
        return Ok(None);
    }
    let mut sorted: Vec<u32> = targets.iter().copied().collect();
    sorted.sort_unstable();
    let mut total = 0.0;
    for &pos in &sorted {
        let mut items = sample_negatives(n_items, banner_size - 1, &excl, rng)?;
        items.push(pos);
        items.shuffle(rng);
        let positive = items.iter().position(|&i| i == pos).unwrap();
        let scores = ranker.scores(input, &items)?;
        total += click_rank(&BannerSample { scores, positive }, rng)?;
    }
    Ok(Some(total / sorted.len() as f64))
}

/// Evaluates `ranker` on every user of `ts`. Users are processed in
/// parallel and aggregated in order; the report is deterministic.
pub fn evaluate<R: Ranker + ?Sized>(ranker: &R, ts: &TimelineSet, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if ranker.n_items() != ts.n_items() {
        return Err(Error::Shape(format!("ranker covers {} items, data has {}", ranker.n_items(), ts.n_items())));
    }
    let kinds = cfg.target_kinds.unwrap_or_else(|| TargetKinds::for_set(ts));
    let n_users = cfg.max_users.map_or(ts.n_users(), |m| m.min(ts.n_users()));
    let per_user: Vec<Option<UserMetrics>> = (0..n_users)
        .into_par_iter()
        .map(|u| evaluate_user(ranker, ts, u, cfg, kinds))
        .collect::<Result<_>>()?;
    let done: Vec<&UserMetrics> = per_user.iter().flatten().collect();
    let collect = |f: fn(&UserMetrics) -> f64| -> Vec<f64> { done.iter().map(|m| f(m)).collect() };
    let clicks: Vec<f64> = done.iter().filter_map(|m| m.click_rank).collect();
    Ok(EvalReport {
        recall_at_20: Metric::from_values(&collect(|m| m.recall_20)),
        recall_at_50: Metric::from_values(&collect(|m| m.recall_50)),
        ndcg_at_100: Metric::from_values(&collect(|m| m.ndcg_100)),
        click_rank: (!clicks.is_empty()).then(|| Metric::from_values(&clicks)),
        users: done.len(),
        skipped_users: n_users - done.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` for the exact-softmax reference.
    pub negatives: Option<usize>,
    pub recall_at_20: f64,
    pub recall_at_50: f64,
    /// `(reference − this) / reference`
    pub drop_at_20: f64,
    pub drop_at_50: f64,
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["negatives", "recall@20", "recall@50", "drop@20", "drop@50"]).unwrap();
    for r in rows {
        w.write_record([
            r.negatives.map_or("exact".to_string(), |n| n.to_string()),
            r.recall_at_20.to_string(),
            r.recall_at_50.to_string(),
            r.drop_at_20.to_string(),
            r.drop_at_50.to_string(),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Trains the exact-softmax reference and one model per negative count from
/// `template`, then reports each model's recall drop against the reference.
/// `dim` sizes randomly initialized models as in [`train_with_output`].
pub fn sweep_negatives(
    template: &TrainConfig,
    negatives: &[usize],
    data: &TrainData<'_>,
    base: Option<&EmbeddingMatrix>,
    dim: Option<usize>,
    test: &TimelineSet,
    eval: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    let run = |cfg: &TrainConfig| -> Result<EvalReport> {
        let outcome = train_with_output(data, base, cfg, &TrainOutput::default(), dim)?;
        evaluate(&ModelRanker::brute_force(&outcome.model), test, eval)
    };
    let reference = run(&TrainConfig { loss: LossKind::ExactMultinomial, ..template.clone() })?;
    let drop = |r: f64, x: f64| if r > 0.0 { (r - x) / r } else { 0.0 };
    let row = |n: Option<usize>, rep: &EvalReport| SweepRow {
        negatives: n,
        recall_at_20: rep.recall_at_20.mean,
        recall_at_50: rep.recall_at_50.mean,
        drop_at_20: drop(reference.recall_at_20.mean, rep.recall_at_20.mean),
        drop_at_50: drop(reference.recall_at_50.mean, rep.recall_at_50.mean),
    };
    let mut rows = vec![row(None, &reference)];
    for &n in negatives {
        let loss = if template.loss == LossKind::ExactMultinomial { LossKind::Css } else { template.loss };
        let rep = run(&TrainConfig { loss, negatives: n, ..template.clone() })?;
        tracing::info!(negatives = n, recall_at_50 = rep.recall_at_50.mean, "sweep point");
        rows.push(row(Some(n), &rep));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[u32]) -> FxHashSet<u32> {
        items.iter().copied().collect()
    }

    #[test]
    fn recall_examples() {
        let d = RecallDenominator::MinKTargets;
        assert_eq!(recall_at_k(&[1, 2, 3], &set(&[1, 2]), 2, d), 1.0);
        assert_eq!(recall_at_k(&[4, 5], &set(&[1, 2]), 2, d), 0.0);
        assert_eq!(recall_at_k(&[10, 99], &set(&[10, 11, 12]), 2, d), 0.5);
        assert_eq!(recall_at_k(&[10, 99], &set(&[10, 11, 12]), 2, RecallDenominator::Targets), 1.0 / 3.0);
    }

    #[test]
    fn ndcg_examples() {
        assert!((ndcg_at_k(&[3, 1, 2], &set(&[1, 2, 3]), 3) - 1.0).abs() < 1e-15);
        assert!((ndcg_at_k(&[7, 5], &set(&[5]), 2) - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((1.0 / 3f64.log2() - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&[7, 8], &set(&[5]), 2), 0.0);
    }

    #[test]
    fn click_rank_examples() {
        let mut rng = seed::rng(0);
        let b = BannerSample { scores: vec![0.1, 0.9, 0.3], positive: 1 };
        assert_eq!(click_rank(&b, &mut rng).unwrap(), 0.0);
        let b = BannerSample { scores: vec![0.1, 0.9, 0.3], positive: 2 };
        assert_eq!(click_rank(&b, &mut rng).unwrap(), 0.5);
        let b = BannerSample { scores: vec![0.1], positive: 0 };
        assert!(click_rank(&b, &mut rng).is_err());
    }

    #[test]
    fn click_rank_chance_levels() {
        let mut rng = seed::rng(1);
        let n = 100_000;
        let mut constant = 0.0;
        let mut random = 0.0;
        for _ in 0..n {
            let b = BannerSample { scores: vec![1.0; 10], positive: rng.random_range(0..10) };
            constant += click_rank(&b, &mut rng).unwrap();
            let scores: Vec<f32> = (0..10).map(|_| rng.random()).collect();
            random += click_rank(&BannerSample { scores, positive: 3 }, &mut rng).unwrap();
        }
        assert!((constant / n as f64 - 0.5).abs() < 0.01);
        assert!((random / n as f64 - 0.5).abs() < 0.01);
    }

    fn vocab_with_views(views: &[u64]) -> Vocabulary {
        let mut v = Vocabulary::from_ids((0..views.len()).map(|i| format!("i{i}")).collect()).unwrap();
        v.set_counts(views.to_vec(), vec![0; views.len()]);
        v
    }

    #[test]
    fn gbo_examples() {
        assert_eq!(gbo_baseline(&vocab_with_views(&[5, 1, 9]), 3).items, vec![2, 0, 1]);
        assert_eq!(gbo_baseline(&vocab_with_views(&[4; 6]), 4).items, vec![0, 1, 2, 3]);
        let mut rng = seed::rng(5);
        let counts: Vec<u64> = (0..300).map(|_| rng.random_range(0..20)).collect();
        let mut oracle: Vec<(u64, u32)> = counts.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
        oracle.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let got = gbo_baseline(&vocab_with_views(&counts), 50).items;
        assert_eq!(got, oracle.iter().take(50).map(|x| x.1).collect::<Vec<_>>());
    }

    #[test]
    fn report_csv() {
        let r = EvalReport { users: 3, ..Default::default() };
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,mean,stderr,users\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn metric_stderr() {
        let m = Metric::from_values(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }
}
