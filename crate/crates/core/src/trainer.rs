//! Mini-batch training with sampled losses and Adam.
//!
//! Each step takes a batch of users. A user's timeline is split into input
//! and target items, the input is randomly thinned (denoising), and the
//! encoded user is pushed to score its targets above uniformly sampled
//! negatives shared across those targets. Per-user gradients are computed in
//! parallel and summed in batch order, so a run is reproducible bit for bit
//! whatever the thread count.
//!
//! In project mode the user side of the score carries the projection,
//! `s_i = ⟨PᵀP·u_base, base_i⟩ + b_i`, so a step never materializes the
//! projected item table. With `c = Σ_i (∂L/∂s_i)·base_i` the projection
//! gradient of one user is `P·(u_base cᵀ + c u_baseᵀ)`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::data::{split_timeline, TargetKinds, TimelineSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, ModelRanker};
use crate::losses::{exact_multinomial, sample_negatives, sampled_loss, LossKind};
use crate::model::{LedModel, NormMode, TuningMode};
use crate::optim::{Adam, AdamConfig, LazyAdam};
use crate::rsvd::EmbeddingMatrix;
use crate::seed;
use crate::vecmath::dot;

/// Above this many items, validation ranks a sample instead of the catalog.
const DENSE_VALIDATION_LIMIT: usize = 50_000;
const VALIDATION_SAMPLE: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Random,
    Svd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub negatives: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub denoise: f64,
    pub init: Init,
    pub tuning: TuningMode,
    pub norm: NormMode,
    /// Fraction of each timeline (shuffled) used as input. When unset, BPR
    /// uses 0.8 and the other losses use the whole timeline as both input
    /// and target.
    pub input_fraction: Option<f64>,
    pub target_kinds: Option<TargetKinds>,
    /// Cap on validation users per checkpoint.
    pub validation_users: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Bpr,
            negatives: 1000,
            learning_rate: 0.001,
            batch_size: 512,
            max_steps: 50_000,
            checkpoint_every: 230,
            denoise: 0.5,
            init: Init::Svd,
            tuning: TuningMode::Project,
            norm: NormMode::OverT,
            input_fraction: None,
            target_kinds: None,
            validation_users: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.loss.needs_negatives() && self.negatives == 0 {
            return bad("negatives must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.checkpoint_every == 0 {
            return bad("batch_size, max_steps and checkpoint_every must be positive");
        }
        if !(0.0..1.0).contains(&self.denoise) {
            return bad("denoise probability must be in [0, 1)");
        }
        if let Some(f) = self.input_fraction {
            if !(f > 0.0 && f < 1.0) {
                return bad("input_fraction must be in (0, 1)");
            }
        }
        Ok(())
    }

    fn effective_input_fraction(&self) -> Option<f64> {
        self.input_fraction.or(match self.loss {
            LossKind::Bpr => Some(0.8),
            _ => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub ndcg_at_100: f64,
    pub wall_ms: u64,
}

pub struct TrainData<'a> {
    pub train: &'a TimelineSet,
    pub validation: Option<&'a TimelineSet>,
}

/// Where to write per-checkpoint models and the step log.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

pub struct TrainOutcome {
    /// The checkpoint with the best validation NDCG@100, or the final model
    /// without validation data.
    pub model: LedModel,
    pub checkpoints: Vec<Checkpoint>,
    pub best: Option<usize>,
    pub steps: u64,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Item scores computed by the loss (targets plus negatives, or the
    /// whole catalog for the exact softmax).
    pub score_evals: u64,
    pub users_seen: u64,
}

/// Keeps each item with probability `1 − p`; if nothing survives, keeps one
/// uniformly chosen item.
pub fn denoise<R: Rng + ?Sized>(input: &[u32], p: f64, rng: &mut R) -> Vec<u32> {
    if p <= 0.0 || input.is_empty() {
        return input.to_vec();
    }
    let kept: Vec<u32> = input.iter().copied().filter(|_| rng.random::<f64>() >= p).collect();
    if kept.is_empty() {
        vec![input[rng.random_range(0..input.len())]]
    } else {
        kept
    }
}

/// One user's contribution to a step.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Vec<u32>,
    pub targets: Vec<u32>,
    /// Shared by every target; ignored by the exact softmax.
    pub negatives: Vec<u32>,
}

/// Summed loss and gradients of a batch, divided by the number of examples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    /// Sorted by item.
    pub bias: Vec<(u32, f64)>,
    /// Row-major `d × d` (project mode).
    pub projection: Option<Vec<f64>>,
    /// Embedding rows, sorted by item (full mode).
    pub rows: Vec<(u32, Vec<f64>)>,
    pub score_evals: u64,
}

struct UserGradient {
    loss: f64,
    /// `∂L/∂s` for each scored item, in scoring order.
    item_grads: Vec<(u32, f64)>,
    /// Project mode: `(u_base, c)`.
    outer: Option<(Vec<f64>, Vec<f64>)>,
    /// Full mode: gradient of every input occurrence, `norm · Σ ∂L/∂s_i v_i`.
    input_grad: Option<Vec<f64>>,
    /// Full mode: the encoded user; scored rows receive `∂L/∂s_i · u`.
    user: Option<Vec<f32>>,
    score_evals: u64,
}

fn user_gradient(model: &LedModel, ex: &Example, loss: LossKind) -> Result<UserGradient> {
    let d = model.dim();
    let n_items = model.n_items();
    let project = model.mode() == TuningMode::Project;
    let (u_base, w) = if project {
        let ub = model.encode_user_base(&ex.input)?;
        let w = model.project_user(&ub)?;
        (Some(ub), w)
    } else {
        (None, model.encode_user(&ex.input)?)
    };
    let table = if project { model.base().expect("project mode has a base") } else { model.effective() };
    let row = |i: u32| &table[i as usize * d..(i as usize + 1) * d];
    let score = |i: u32| -> Result<f64> {
        if i as usize >= n_items {
            return Err(Error::OutOfRange { index: i as u64, len: n_items as u64 });
        }
        Ok((dot(&w.0, row(i)) + model.biases()[i as usize]) as f64)
    };
    let n_pos = ex.targets.len().max(1) as f64;
    let mut total = 0.0;
    let mut item_grads: Vec<(u32, f64)>;
    let score_evals;
    if loss == LossKind::ExactMultinomial {
        let all: Vec<f64> = (0..n_items as u32).map(score).collect::<Result<_>>()?;
        let mut g = vec![0.0; n_items];
        for &p in &ex.targets {
            let l = exact_multinomial(&all, p as usize)?;
            total += l.value;
            g.iter_mut().zip(&l.grad).for_each(|(a, b)| *a += b / n_pos);
        }
        item_grads = g.into_iter().enumerate().map(|(i, x)| (i as u32, x)).collect();
        score_evals = n_items as u64;
    } else {
        let s_negs: Vec<f64> = ex.negatives.iter().map(|&i| score(i)).collect::<Result<_>>()?;
        let mut g_negs = vec![0.0; s_negs.len()];
        item_grads = Vec::with_capacity(ex.targets.len() + ex.negatives.len());
        for &p in &ex.targets {
            let l = sampled_loss(loss, score(p)?, &s_negs, n_items)?;
            total += l.value;
            item_grads.push((p, l.d_pos / n_pos));
            g_negs.iter_mut().zip(&l.d_negs).for_each(|(a, b)| *a += b / n_pos);
        }
        item_grads.extend(ex.negatives.iter().copied().zip(g_negs));
        score_evals = (ex.targets.len() + ex.negatives.len()) as u64;
    }
    let mut c = vec![0.0f64; d];
    for &(i, g) in &item_grads {
        if g != 0.0 {
            c.iter_mut().zip(row(i)).for_each(|(a, v)| *a += g * *v as f64);
        }
    }
    let (outer, input_grad) = if let Some(ub) = u_base {
        (Some((ub.0.iter().map(|&x| x as f64).collect(), c)), None)
    } else {
        let f = model.norm().factor(ex.input.len());
        (None, Some(c.into_iter().map(|x| x * f).collect()))
    };
    let user = (!project).then_some(w.0);
    Ok(UserGradient { loss: total / n_pos, item_grads, outer, input_grad, user, score_evals })
}

/// Loss and gradients of a batch of examples, averaged over examples.
pub fn batch_gradient(model: &LedModel, batch: &[Example], loss: LossKind) -> Result<BatchGradient> {
    let per_user: Vec<UserGradient> = batch.par_iter().map(|ex| user_gradient(model, ex, loss)).collect::<Result<_>>()?;
    Ok(aggregate(model, batch, per_user))
}

fn aggregate(model: &LedModel, batch: &[Example], per_user: Vec<UserGradient>) -> BatchGradient {
    let d = model.dim();
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut out = BatchGradient::default();
    let mut bias: FxHashMap<u32, f64> = FxHashMap::default();
    let mut rows: FxHashMap<u32, Vec<f64>> = FxHashMap::default();
    let mut g_outer = if model.mode() == TuningMode::Project { Some(vec![0.0f64; d * d]) } else { None };
    for (ex, ug) in batch.iter().zip(per_user) {
        out.loss += ug.loss * scale;
        out.score_evals += ug.score_evals;
        if model.mode() == TuningMode::Full {
            let u = ug.user.as_ref().expect("full mode");
            for &(i, g) in &ug.item_grads {
                if g != 0.0 {
                    let r = rows.entry(i).or_insert_with(|| vec![0.0; d]);
                    r.iter_mut().zip(u).for_each(|(a, x)| *a += g * *x as f64 * scale);
                }
            }
            let ig = ug.input_grad.as_ref().expect("full mode");
            for &j in &ex.input {
                let r = rows.entry(j).or_insert_with(|| vec![0.0; d]);
                r.iter_mut().zip(ig).for_each(|(a, x)| *a += x * scale);
            }
        }
        for &(i, g) in &ug.item_grads {
            *bias.entry(i).or_insert(0.0) += g * scale;
        }
        if let (Some(g), Some((ub, c))) = (g_outer.as_mut(), ug.outer.as_ref()) {
            for a in 0..d {
                let (ua, ca) = (ub[a] * scale, c[a] * scale);
                let row = &mut g[a * d..(a + 1) * d];
                for b in 0..d {
                    row[b] += ua * c[b] + ca * ub[b];
                }
            }
        }
    }
    if let (Some(g), Some(p)) = (g_outer, model.projection()) {
        // ∂L/∂P = P · G
        let mut grad = vec![0.0f64; d * d];
        for a in 0..d {
            let prow = &p[a * d..(a + 1) * d];
            let out_row = &mut grad[a * d..(a + 1) * d];
            for (k, &pak) in prow.iter().enumerate() {
                if pak != 0.0 {
                    let grow = &g[k * d..(k + 1) * d];
                    out_row.iter_mut().zip(grow).for_each(|(o, x)| *o += pak as f64 * x);
                }
            }
        }
        out.projection = Some(grad);
    }
    let mut bias: Vec<(u32, f64)> = bias.into_iter().collect();
    bias.sort_unstable_by_key(|x| x.0);
    out.bias = bias;
    let mut rows: Vec<(u32, Vec<f64>)> = rows.into_iter().collect();
    rows.sort_unstable_by_key(|x| x.0);
    out.rows = rows;
    out
}

/// The model training starts from.
pub fn initial_model(n_items: usize, base: Option<&EmbeddingMatrix>, cfg: &TrainConfig, dim: usize) -> Result<LedModel> {
    let init_seed = seed::derive(cfg.seed, "init");
    match (cfg.init, cfg.tuning) {
        (Init::Svd, _) => {
            let base = base.ok_or_else(|| {
                Error::Config("svd initialization needs pre-trained embeddings; run the rsvd stage first".into())
            })?;
            if base.rows() != n_items {
                return Err(Error::Shape(format!("embeddings cover {} items, data has {n_items}", base.rows())));
            }
            match cfg.tuning {
                TuningMode::Project => LedModel::init_project(base.clone(), cfg.norm, init_seed),
                TuningMode::Full => LedModel::full(base.clone(), vec![0.0; n_items], cfg.norm),
            }
        }
        (Init::Random, TuningMode::Full) => LedModel::random_full(n_items, dim, cfg.norm, init_seed),
        (Init::Random, TuningMode::Project) => {
            let frozen = LedModel::random_full(n_items, dim, cfg.norm, seed::derive(init_seed, "base"))?;
            let e = EmbeddingMatrix::new(n_items, dim, frozen.effective().to_vec())?;
            LedModel::init_project(e, cfg.norm, init_seed)
        }
    }
}

struct Optimizers {
    projection: Option<Adam>,
    rows: Option<LazyAdam>,
    bias: LazyAdam,
}

impl Optimizers {
    fn new(model: &LedModel, lr: f64) -> Self {
        let cfg = AdamConfig { lr, ..Default::default() };
        let d = model.dim();
        Self {
            projection: (model.mode() == TuningMode::Project).then(|| Adam::new(d * d, cfg)),
            rows: (model.mode() == TuningMode::Full).then(|| LazyAdam::new(model.n_items(), d, cfg)),
            bias: LazyAdam::new(model.n_items(), 1, cfg),
        }
    }

    fn apply(&mut self, model: &mut LedModel, g: &BatchGradient) {
        let (idx, vals): (Vec<u32>, Vec<f64>) = g.bias.iter().copied().unzip();
        self.bias.step(model.biases_mut(), &idx, &vals);
        if let (Some(opt), Some(gp)) = (self.projection.as_mut(), g.projection.as_ref()) {
            opt.step(model.projection_mut().expect("project mode"), gp);
        }
        if let Some(opt) = self.rows.as_mut() {
            let idx: Vec<u32> = g.rows.iter().map(|r| r.0).collect();
            let flat: Vec<f64> = g.rows.iter().flat_map(|r| r.1.iter().copied()).collect();
            opt.step(model.effective_mut(), &idx, &flat);
        }
    }
}

/// Builds one user's example, or `None` when the timeline has no usable
/// target or no room for negatives.
fn make_example<R: Rng>(
    ts: &TimelineSet,
    user: usize,
    cfg: &TrainConfig,
    kinds: TargetKinds,
    rng: &mut R,
) -> Result<Option<Example>> {
    let t = &ts.timelines()[user];
    let (input, targets) = match cfg.effective_input_fraction() {
        Some(f) => match split_timeline(t, f, rng, true, kinds) {
            Ok(s) => (s.input, s.target),
            Err(_) => return Ok(None),
        },
        None => {
            let targets: Vec<u32> = t
                .events
                .iter()
                .filter(|e| kinds == TargetKinds::All || e.kind == crate::data::EventKind::Click)
                .map(|e| e.item)
                .collect();
            (t.items().collect(), targets)
        }
    };
    if targets.is_empty() || input.is_empty() {
        return Ok(None);
    }
    let input = denoise(&input, cfg.denoise, rng);
    let negatives = if cfg.loss.needs_negatives() {
        let exclude: FxHashSet<u32> = t.items().collect();
        let available = ts.n_items() - exclude.len();
        if available == 0 {
            return Ok(None);
        }
        sample_negatives(ts.n_items(), cfg.negatives.min(available), &exclude, rng)?
    } else {
        Vec::new()
    };
    Ok(Some(Example { input, targets, negatives }))
}

fn validation_config(cfg: &TrainConfig, n_items: usize) -> EvalConfig {
    EvalConfig {
        click_rank: false,
        max_users: cfg.validation_users,
        sampled_candidates: (n_items > DENSE_VALIDATION_LIMIT).then_some(VALIDATION_SAMPLE),
        seed: seed::derive(cfg.seed, "validation"),
        ..Default::default()
    }
}

#[derive(Serialize)]
struct LogLine {
    step: u64,
    loss: f64,
    lr: f64,
    wall_ms: u64,
}

fn write_checkpoint(dir: &Path, step: u64, model: &LedModel, cp: &Checkpoint) -> Result<()> {
    let sub = dir.join(format!("step-{step}"));
    model.save(&sub.join("model"))?;
    let json = serde_json::to_vec_pretty(cp).expect("checkpoint serializes");
    crate::codec::write_file(&sub.join("metrics.json"), &json)
}

/// Runs training and returns the best checkpoint by validation NDCG@100.
pub fn train(data: &TrainData<'_>, base: Option<&EmbeddingMatrix>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_output(data, base, cfg, &TrainOutput::default(), None)
}

/// Like [`train`], optionally writing checkpoints and a JSON-lines step log.
/// `dim` sets the embedding size for random initialization (defaults to the
/// base's dimension, else 64).
pub fn train_with_output(
    data: &TrainData<'_>,
    base: Option<&EmbeddingMatrix>,
    cfg: &TrainConfig,
    output: &TrainOutput,
    dim: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ts = data.train;
    let n_items = ts.n_items();
    if let Some(v) = data.validation {
        if v.n_items() != n_items {
            return Err(Error::Shape("validation data uses a different catalog".into()));
        }
    }
    let dim = dim.or(base.map(|b| b.dim())).unwrap_or(64);
    let mut model = initial_model(n_items, base, cfg, dim)?;
    let params = model.parameter_count();
    tracing::info!(trainable = params.trainable, frozen = params.frozen, items = n_items, "training");
    let kinds = cfg.target_kinds.unwrap_or_else(|| TargetKinds::for_set(ts));
    let mut opt = Optimizers::new(&model, cfg.learning_rate);
    let mut log = match &output.log_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            Some(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?))
        }
        None => None,
    };
    let start = Instant::now();
    let train_seed = seed::derive(cfg.seed, "train");
    let mut order: Vec<usize> = (0..ts.n_users()).collect();
    let mut epoch = 0u64;
    let mut cursor = order.len();
    let score_evals = AtomicU64::new(0);
    let mut users_seen = 0u64;
    let mut losses = Vec::with_capacity(cfg.max_steps as usize);
    let mut checkpoints = Vec::new();
    let mut best: Option<(usize, LedModel)> = None;
    let val_cfg = validation_config(cfg, n_items);
    let mut empty_batches = 0u32;

    for step in 1..=cfg.max_steps {
        let mut batch_users = Vec::with_capacity(cfg.batch_size);
        while batch_users.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut seed::rng(seed::derive_n(seed::derive(train_seed, "epoch"), epoch)));
                epoch += 1;
                cursor = 0;
            }
            let take = (cfg.batch_size - batch_users.len()).min(order.len() - cursor);
            batch_users.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let step_seed = seed::derive_n(train_seed, step);
        let examples: Vec<Example> = batch_users
            .par_iter()
            .enumerate()
            .map(|(k, &u)| make_example(ts, u, cfg, kinds, &mut seed::rng(seed::derive_n(step_seed, k as u64))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        if examples.is_empty() {
            empty_batches += 1;
            if empty_batches > 3 {
                return Err(Error::EmptyDataset("no training user has a usable target".into()));
            }
            continue;
        }
        users_seen += examples.len() as u64;
        let g = batch_gradient(&model, &examples, cfg.loss)?;
        score_evals.fetch_add(g.score_evals, Ordering::Relaxed);
        if !g.loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: g.loss,
                config: serde_json::to_string(cfg).expect("config serializes"),
            });
        }
        opt.apply(&mut model, &g);
        losses.push(g.loss);
        let wall_ms = start.elapsed().as_millis() as u64;
        if let Some(w) = log.as_mut() {
            let line = LogLine { step, loss: g.loss, lr: cfg.learning_rate, wall_ms };
            serde_json::to_writer(&mut *w, &line).expect("log line serializes");
            w.write_all(b"\n").map_err(|e| Error::io(output.log_path.as_ref().unwrap(), e))?;
        }
        if step % cfg.checkpoint_every == 0 || step == cfg.max_steps {
            model.refresh_effective();
            let ndcg = match data.validation {
                Some(v) => evaluate(&ModelRanker::brute_force(&model), v, &val_cfg)?.ndcg_at_100.mean,
                None => 0.0,
            };
            let cp = Checkpoint { step, ndcg_at_100: ndcg, wall_ms };
            tracing::info!(step, ndcg_at_100 = ndcg, loss = g.loss, "checkpoint");
            if let Some(dir) = &output.checkpoint_dir {
                write_checkpoint(dir, step, &model, &cp)?;
            }
            let better = match &best {
                None => true,
                Some((i, _)) => data.validation.is_some() && ndcg > checkpoints.get(*i).map_or(f64::MIN, |c: &Checkpoint| c.ndcg_at_100),
            };
            checkpoints.push(cp);
            if better || data.validation.is_none() {
                best = Some((checkpoints.len() - 1, model.clone()));
            }
        }
    }
    if let Some(mut w) = log {
        w.flush().map_err(|e| Error::io(output.log_path.as_ref().unwrap(), e))?;
    }
    let steps = losses.len() as u64;
    let (best_idx, model) = match best {
        Some((i, m)) => (Some(i), m),
        None => {
            model.refresh_effective();
            (None, model)
        }
    };
    Ok(TrainOutcome {
        model,
        checkpoints,
        best: best_idx,
        steps,
        losses,
        score_evals: score_evals.into_inner(),
        users_seen,
    })
}
