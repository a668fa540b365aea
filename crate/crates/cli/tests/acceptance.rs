//! Acceptance suite. Prints one PASS / FAIL / SKIP line per criterion and
//! exits non-zero when any criterion fails.
//!
//! `LED_ML20M_RATINGS=/path/to/ratings.csv` enables the two MovieLens-20M
//! criteria (hours of CPU time); without it they are skipped.
//! `LED_ACCEPTANCE_ONLY=3,4,8` runs a subset.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use led_cli::stages::files;
use led_cli::{PipelineConfig, Runner, Stage};
use led_core::ann::{brute_force, AnnIndex, HnswParams};
use led_core::data::Vocabulary;
use led_core::eval::{EvalReport, SweepRow};
use led_core::losses::{bpr, css_multinomial, negative_sampling, LossKind, LossValue};
use led_core::model::{augment_query, LedModel, NormMode};
use led_core::pmi::PmiMatrix;
use led_core::rsvd::{randomized_svd_factors, EmbeddingMatrix, RsvdConfig};
use led_core::seed;
use led_core::trainer::{batch_gradient, Example};
use led_serve::{recommend, write_artifacts, ItemId, RecommendRequest, ServeConfig, ServingState, Service};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use serde_json::json;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::*;

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

type Criterion = (u32, &'static str, fn() -> Verdict);

fn main() {
    let only: Option<HashSet<u32>> = std::env::var("LED_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [Criterion; 10] = [
        (1, "ML20M reproduction", ml20m_reproduction),
        (2, "loss approximation closeness", loss_approximation),
        (3, "CSS/BPR margin identity", css_bpr_identity),
        (4, "transposition trick fidelity", transposition_trick),
        (5, "gradient suite", gradient_suite),
        (6, "RSVD oracle", rsvd_oracle),
        (7, "ANN quality", ann_quality),
        (8, "serving properties", serving_properties),
        (9, "parameter accounting", parameter_accounting),
        (10, "cold start", cold_start),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let v = std::panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Fail(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("{tag} criterion {n:>2} ({name}): {detail} [{secs:.1}s]");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn ml20m_ratings() -> Option<PathBuf> {
    std::env::var_os("LED_ML20M_RATINGS").map(PathBuf::from).filter(|p| p.is_file())
}

const NO_ML20M: &str = "LED_ML20M_RATINGS does not point at MovieLens-20M ratings.csv (not available offline)";

fn ml20m_workdir(tag: &str) -> PathBuf {
    let root = std::env::var_os("LED_ACCEPTANCE_WORKDIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("led-acceptance"));
    root.join(tag)
}

fn ml20m_config(data: &Path, tag: &str, overrides: serde_json::Value) -> PipelineConfig {
    let mut doc = json!({
        "paths": {"data": data, "workdir": ml20m_workdir(tag)},
        "data": {"min_rating": 4.0, "min_events": 5},
        "train": {
            "loss": "bpr", "negatives": 1000, "learning_rate": 0.001, "batch_size": 512,
            "denoise": 0.5, "max_steps": 50000, "checkpoint_every": 230,
            "init": "svd", "tuning": "project", "validation_users": 2000
        }
    });
    merge(&mut doc, overrides);
    PipelineConfig::from_value(doc).expect("valid config")
}

fn merge(a: &mut serde_json::Value, b: serde_json::Value) {
    match (a, b) {
        (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn ml20m_reproduction() -> Verdict {
    let Some(data) = ml20m_ratings() else { return Skip(NO_ML20M.into()) };
    let cfg = ml20m_config(&data, "full", json!({"rsvd": {"rank": 600}}));
    let runner = Runner::new(cfg.clone(), false);
    if let Err(e) = runner.pipeline() {
        return Fail(format!("pipeline failed: {e}"));
    }
    let path = cfg.paths.workdir.join("eval").join(files::REPORT_JSON);
    let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let (r20, r50) = (r.recall_at_20.mean, r.recall_at_50.mean);
    verdict(
        r20 >= 0.36 && r50 >= 0.50,
        format!("recall@20 = {r20:.4} (need >= 0.36), recall@50 = {r50:.4} (need >= 0.50) over {} test users", r.users),
    )
}

fn loss_approximation() -> Verdict {
    let Some(data) = ml20m_ratings() else { return Skip(NO_ML20M.into()) };
    let cfg = ml20m_config(
        &data,
        "reduced",
        json!({"rsvd": {"rank": 200}, "train": {"max_steps": 10000}, "sweep": {"negatives": [1000, 10]}}),
    );
    let runner = Runner::new(cfg.clone(), false);
    for s in [Stage::Ingest, Stage::Split, Stage::Pmi, Stage::Rsvd, Stage::Sweep] {
        if let Err(e) = runner.run(s) {
            return Fail(format!("{} failed: {e}", s.name()));
        }
    }
    let path = cfg.paths.workdir.join("sweep").join(files::SWEEP_JSON);
    let rows: Vec<SweepRow> = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let gap = |n| rows.iter().find(|r| r.negatives == Some(n)).map(|r| r.drop_at_50).unwrap();
    let (g1000, g10) = (gap(1000), gap(10));
    verdict(
        g1000 <= 0.05 && g10 <= 0.08,
        format!("recall@50 gap vs exact softmax: N=1000 {:.2}% (need <= 5%), N=10 {:.2}% (need <= 8%)", 100.0 * g1000, 100.0 * g10),
    )
}

fn css_bpr_identity() -> Verdict {
    let mut rng = seed::rng(3);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let sp: f64 = rng.random_range(-20.0..20.0);
        let sn: f64 = rng.random_range(-20.0..20.0);
        let items: usize = rng.random_range(2..=10_000_000);
        let got = css_multinomial(sp, &[sn], items).unwrap().value;
        let x = sp - sn - ((items - 1) as f64).ln();
        // -ln σ(x), evaluated stably on both branches.
        let want = if x > 0.0 { (-x).exp().ln_1p() } else { -x + x.exp().ln_1p() };
        worst = worst.max((got - want).abs());
    }
    verdict(worst <= 1e-9, format!("max |css - bpr_margin| = {worst:.2e} over 10^4 triples (tolerance 1e-9)"))
}

fn gaussian(rng: &mut seed::Rng, n: usize, scale: f64) -> Vec<f32> {
    (0..n).map(|_| (scale * Distribution::<f64>::sample(&StandardNormal, rng)) as f32).collect()
}

fn transposition_trick() -> Verdict {
    let (n, d) = (10_000usize, 32usize);
    let mut worst = 0.0f64;
    for inst in 0..100u64 {
        let mut rng = seed::rng(seed::derive_n(4, inst));
        let base = EmbeddingMatrix::new(n, d, gaussian(&mut rng, n * d, 1.0 / (d as f64).sqrt())).unwrap();
        let mut p = gaussian(&mut rng, d * d, 0.3);
        for k in 0..d {
            p[k * d + k] += 1.0;
        }
        let b = gaussian(&mut rng, n, 0.5);
        let model = LedModel::project(base, p, b, NormMode::OverT).unwrap();
        let len = rng.random_range(1..=50);
        let history: Vec<u32> = (0..len).map(|_| rng.random_range(0..n as u32)).collect();
        let direct = model.score_all(&model.encode_user(&history).unwrap());
        let trick = model.score_all_trick(&model.encode_user_base(&history).unwrap()).unwrap();
        // Deviations are measured against the instance's score scale: single
        // scores near zero carry no relative precision in f32.
        let scale = direct.iter().fold(0.0f64, |m, s| m.max(s.abs() as f64));
        let dev = direct.iter().zip(&trick).map(|(a, b)| (*a as f64 - *b as f64).abs()).fold(0.0, f64::max) / scale;
        worst = worst.max(dev);
    }
    verdict(
        worst <= 1e-5,
        format!("max deviation relative to score scale = {worst:.2e} over 100 instances, d=32, I=10^4 (tolerance 1e-5)"),
    )
}

const H: f64 = 1e-3;

fn naive_bpr(sp: f64, sn: &[f64]) -> f64 {
    sn.iter().map(|s| (1.0 + (s - sp).exp()).ln()).sum::<f64>() / sn.len() as f64
}

fn naive_ns(sp: f64, sn: &[f64]) -> f64 {
    (1.0 + (-sp).exp()).ln() + sn.iter().map(|s| (1.0 + s.exp()).ln()).sum::<f64>()
}

fn naive_css(sp: f64, sn: &[f64], items: usize) -> f64 {
    let w = (items - 1) as f64 / sn.len() as f64;
    -sp + (sp.exp() + w * sn.iter().map(|s| s.exp()).sum::<f64>()).ln()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Worst relative error of the analytic score derivatives over 100 cases.
fn scalar_loss_error(tag: u64, f: impl Fn(f64, &[f64]) -> f64, g: impl Fn(f64, &[f64]) -> LossValue) -> f64 {
    let mut rng = seed::rng(seed::derive_n(5, tag));
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=10);
        let sp: f64 = rng.random_range(-3.0..3.0);
        let sn: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lv = g(sp, &sn);
        worst = worst.max(rel(lv.d_pos, (f(sp + H, &sn) - f(sp - H, &sn)) / (2.0 * H)));
        for k in 0..n {
            let (mut up, mut dn) = (sn.clone(), sn.clone());
            up[k] += H;
            dn[k] -= H;
            worst = worst.max(rel(lv.d_negs[k], (f(sp, &up) - f(sp, &dn)) / (2.0 * H)));
        }
    }
    worst
}

/// f64 re-implementation of the project-mode batch loss.
struct Shadow {
    n: usize,
    d: usize,
    base: Vec<f64>,
    p: Vec<f64>,
    b: Vec<f64>,
}

impl Shadow {
    fn of(m: &LedModel) -> Self {
        Shadow {
            n: m.n_items(),
            d: m.dim(),
            base: m.base().unwrap().iter().map(|&x| x as f64).collect(),
            p: m.projection().unwrap().iter().map(|&x| x as f64).collect(),
            b: m.biases().iter().map(|&x| x as f64).collect(),
        }
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d).map(|r| (0..self.d).map(|c| self.p[r * self.d + c] * x[c]).sum()).collect()
    }

    fn loss(&self, batch: &[Example], kind: LossKind) -> f64 {
        let d = self.d;
        let mut total = 0.0;
        for ex in batch {
            let mut u = vec![0.0; d];
            for &j in &ex.input {
                for k in 0..d {
                    u[k] += self.base[j as usize * d + k] / ex.input.len() as f64;
                }
            }
            let pu = self.project(&u);
            let score = |i: u32| {
                let pv = self.project(&self.base[i as usize * d..(i as usize + 1) * d]);
                pu.iter().zip(&pv).map(|(a, b)| a * b).sum::<f64>() + self.b[i as usize]
            };
            let sn: Vec<f64> = ex.negatives.iter().map(|&i| score(i)).collect();
            let l: f64 = ex
                .targets
                .iter()
                .map(|&t| match kind {
                    LossKind::Bpr => naive_bpr(score(t), &sn),
                    LossKind::NegativeSampling => naive_ns(score(t), &sn),
                    LossKind::Css => naive_css(score(t), &sn, self.n),
                    LossKind::ExactMultinomial => unreachable!("sampled losses only"),
                })
                .sum();
            total += l / ex.targets.len() as f64;
        }
        total / batch.len() as f64
    }
}

fn gradient_instance(s: u64) -> (LedModel, Vec<Example>) {
    let (n, d) = (50usize, 8usize);
    let mut rng = seed::rng(s);
    let base: Vec<f32> = (0..n * d).map(|_| rng.random_range(-0.6..0.6)).collect();
    let p: Vec<f32> = (0..d * d).map(|k| if k % (d + 1) == 0 { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3)).collect();
    let b: Vec<f32> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let model = LedModel::project(EmbeddingMatrix::new(n, d, base).unwrap(), p, b, NormMode::OverT).unwrap();
    let batch = (0..3)
        .map(|_| {
            let mut items: Vec<u32> = (0..n as u32).collect();
            for k in 0..n {
                items.swap(k, rng.random_range(k..n));
            }
            let (ni, nt, nn) = (rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..8));
            Example {
                input: items[..ni].to_vec(),
                targets: items[ni..ni + nt].to_vec(),
                negatives: items[ni + nt..ni + nt + nn].to_vec(),
            }
        })
        .collect();
    (model, batch)
}

/// Worst deviation of projection and bias gradients, relative to the largest
/// finite-difference entry of each gradient, over 100 instances.
fn project_mode_error(kind: LossKind) -> f64 {
    let max_rel = |a: &[f64], fd: &[f64]| {
        let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
        a.iter().zip(fd).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    };
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (model, batch) = gradient_instance(seed::derive_n(55, case));
        let g = batch_gradient(&model, &batch, kind).unwrap();
        let sh = Shadow::of(&model);
        let fd = |edit: &dyn Fn(&mut Shadow, f64)| {
            let mut up = Shadow::of(&model);
            edit(&mut up, H);
            let mut dn = Shadow::of(&model);
            edit(&mut dn, -H);
            (up.loss(&batch, kind) - dn.loss(&batch, kind)) / (2.0 * H)
        };
        let fd_p: Vec<f64> = (0..sh.p.len()).map(|k| fd(&|s: &mut Shadow, h| s.p[k] += h)).collect();
        worst = worst.max(max_rel(g.projection.as_ref().unwrap(), &fd_p));
        let mut analytic_b = vec![0.0; sh.n];
        for &(i, v) in &g.bias {
            analytic_b[i as usize] = v;
        }
        let fd_b: Vec<f64> = (0..sh.n).map(|i| fd(&|s: &mut Shadow, h| s.b[i] += h)).collect();
        worst = worst.max(max_rel(&analytic_b, &fd_b));
    }
    worst
}

fn gradient_suite() -> Verdict {
    let items = 1000;
    let errors = [
        ("bpr", scalar_loss_error(1, naive_bpr, bpr)),
        ("ns", scalar_loss_error(2, naive_ns, negative_sampling)),
        ("css", scalar_loss_error(3, |sp, sn| naive_css(sp, sn, items), |sp, sn| css_multinomial(sp, sn, items).unwrap())),
        ("project/bpr", project_mode_error(LossKind::Bpr)),
        ("project/ns", project_mode_error(LossKind::NegativeSampling)),
        ("project/css", project_mode_error(LossKind::Css)),
    ];
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(worst <= 1e-4, format!("max relative error {detail} over 100 instances each (tolerance 1e-4)"))
}

fn rsvd_oracle() -> Verdict {
    let mut rng = seed::rng(6);
    let mut worst = 0.0f64;
    for t in 0..50u64 {
        let n = rng.random_range(20..=200);
        let d = rng.random_range(1..=n / 4);
        // Strong low-rank structure plus symmetric noise.
        let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
        for k in 0..rng.random_range(0..8) {
            let v = nalgebra::DVector::<f64>::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let w = 10.0 / (k + 1) as f64 * if rng.random::<bool>() { 1.0 } else { -1.0 };
            a += &v * v.transpose() * (w / n as f64);
        }
        for i in 0..n {
            for j in i..n {
                let x: f64 = 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                a[(i, j)] += x;
                if i != j {
                    a[(j, i)] += x;
                }
            }
        }
        let dense: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]).collect();
        let m = PmiMatrix::from_dense(n, &dense).unwrap();
        // Compare against the f32-stored matrix that is actually factorized.
        let stored = nalgebra::DMatrix::from_row_slice(n, n, &m.to_dense());
        let cfg = RsvdConfig { rank: d, oversampling: 10.min(n - d), power_iters: 2, seed: t, gamma: 0.0 };
        let f = randomized_svd_factors(&m, &cfg).unwrap();
        let err = (&stored - f.reconstruct()).norm();
        let sv = stored.singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|x, y| y.total_cmp(x));
        let opt = sv[d..].iter().map(|s| s * s).sum::<f64>().sqrt();
        worst = worst.max(err / opt);
    }
    verdict(
        worst <= 1.05,
        format!("worst rank-d error / dense-SVD optimum = {worst:.4} over 50 matrices up to 200x200, q=2 (tolerance 1.05)"),
    )
}

fn ann_quality() -> Verdict {
    let (n, d, k) = (10_000usize, 33usize, 50usize);
    let mut rng = seed::rng(7);
    let items = EmbeddingMatrix::new(n, d, gaussian(&mut rng, n * d, 1.0)).unwrap();
    let index = AnnIndex::build(items.clone(), HnswParams::default()).unwrap();
    let query = |rng: &mut seed::Rng| {
        let mut q = gaussian(rng, d, 1.0);
        q[d - 1] = 1.0;
        q
    };
    let mut total = 0.0;
    for _ in 0..1000 {
        let q = query(&mut rng);
        let exact: HashSet<u32> = brute_force(&items, &q, k).unwrap().items.into_iter().collect();
        let got = index.search(&q, k, 100).unwrap();
        total += got.items.iter().filter(|i| exact.contains(i)).count() as f64 / k as f64;
    }
    let recall = total / 1000.0;
    let mut exact_ok = 0;
    let mut checked = 0;
    for _ in 0..50 {
        let q = query(&mut rng);
        // Distinct scores through rank k + 1 make the exact top k unique.
        let top = brute_force(&items, &q, k + 1).unwrap();
        if top.scores.windows(2).any(|w| w[0] == w[1]) {
            continue;
        }
        checked += 1;
        let got = index.search(&q, k, n).unwrap();
        if got.items == top.items[..k] {
            exact_ok += 1;
        }
    }
    verdict(
        recall >= 0.95 && checked > 0 && exact_ok == checked,
        format!(
            "recall@50 = {recall:.4} at ef=100 over 10^3 queries (need >= 0.95); exact at ef=I on {exact_ok}/{checked} distinct-score queries"
        ),
    )
}

fn parameter_accounting() -> Verdict {
    let mut bad = Vec::new();
    for &(n, d) in &[(20_000u64, 600u64), (1000, 64), (7, 3)] {
        let (n_, d_) = (n as usize, d as usize);
        let base = EmbeddingMatrix::new(n_, d_, vec![0.01; n_ * d_]).unwrap();
        let p = LedModel::init_project(base, NormMode::OverT, 1).unwrap().parameter_count();
        let f = LedModel::random_full(n_, d_, NormMode::OverT, 1).unwrap().parameter_count();
        if p.trainable != d * d + n || f.trainable != n * d + n {
            bad.push(format!("I={n} d={d}: project {} full {}", p.trainable, f.trainable));
        }
    }
    verdict(bad.is_empty(), if bad.is_empty() { "project = d^2 + I and full = I*d + I exactly".into() } else { bad.join("; ") })
}

const CLUSTERS: usize = 50;

/// Stand-in for a trained model: items scattered around `CLUSTERS` centroids
/// with a decaying spectrum, as SVD-initialized embeddings have, and biases on
/// the scale of the inner products. Item `i` belongs to cluster `i % CLUSTERS`.
fn synthetic_model(n: usize, d: usize, s: u64) -> (LedModel, Vocabulary) {
    let mut rng = seed::rng(s);
    let centroids = gaussian(&mut rng, CLUSTERS * d, 1.0);
    let noise = gaussian(&mut rng, n * d, 0.7);
    let scale = 3.0 / (d as f32).sqrt();
    let data = (0..n * d)
        .map(|x| {
            let (i, j) = (x / d, x % d);
            (centroids[(i % CLUSTERS) * d + j] + noise[x]) * scale / ((j + 1) as f32).sqrt()
        })
        .collect();
    let emb = EmbeddingMatrix::new(n, d, data).unwrap();
    let biases = gaussian(&mut rng, n, 0.3);
    let model = LedModel::full(emb, biases, NormMode::OverT).unwrap();
    let vocab = Vocabulary::from_ids((0..n).map(|i| format!("movie-{i}")).collect()).unwrap();
    (model, vocab)
}

fn cold_start() -> Verdict {
    let n = 5000;
    let (model, vocab) = synthetic_model(n, 32, 10);
    let dir = tempfile::tempdir().unwrap();
    let index = AnnIndex::build(model.augment_for_mips(), HnswParams::default()).unwrap();
    write_artifacts(dir.path(), &model, &index, &vocab).unwrap();
    let svc = Service::new(ServeConfig::default());
    svc.reload(dir.path()).unwrap();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| model.biases()[b].total_cmp(&model.biases()[a]).then(a.cmp(&b)));
    let mut bad = Vec::new();
    for k in [1usize, 5, 50, 500] {
        let want: Vec<&str> = order[..k].iter().map(|&i| vocab.id_of(i as u32).unwrap()).collect();
        for history in [vec![], vec![ItemId::Str("not-a-movie".into())]] {
            let r = svc.handle_recommend(&RecommendRequest { history, k: Some(k), ef_search: None }).unwrap();
            if r.items != want {
                bad.push(k);
            }
        }
    }
    verdict(bad.is_empty(), format!("empty and unknown-only histories return the k largest biases for k in {{1, 5, 50, 500}}; mismatches at k = {bad:?}"))
}

#[derive(Deserialize)]
struct Reply {
    items: Vec<String>,
    scores: Vec<f32>,
    served_by: String,
}

struct Server {
    base: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Server {
    fn start(svc: Arc<Service>) -> Server {
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel::<SocketAddr>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
            rt.block_on(led_serve::http::serve(svc, "127.0.0.1:0".parse().unwrap(), move |a| addr_tx.send(a).unwrap(), async move {
                let _ = stop_rx.await;
            }))
            .unwrap();
        });
        let addr = addr_rx.recv().unwrap();
        Server { base: format!("http://{addr}"), stop: Some(stop_tx), thread: Some(thread) }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.stop.take().unwrap().send(());
        let _ = self.thread.take().unwrap().join();
    }
}

/// Histories of 1 to 100 items, four in five drawn from one favourite cluster.
fn history_pool(n: usize, rng: &mut seed::Rng, size: usize) -> Vec<Vec<String>> {
    (0..size)
        .map(|_| {
            let fav = rng.random_range(0..CLUSTERS);
            (0..rng.random_range(1..=100))
                .map(|_| {
                    let item = if rng.random_bool(0.8) {
                        fav + CLUSTERS * rng.random_range(0..n / CLUSTERS)
                    } else {
                        rng.random_range(0..n)
                    };
                    format!("movie-{item}")
                })
                .collect()
        })
        .collect()
}

/// Closed-loop load: `clients` concurrent connections issue `total` requests
/// drawn round-robin from `pool`. Returns the replies with their pool index and
/// the per-request client-side latencies.
async fn load(
    base: &str,
    pool: &Arc<Vec<Vec<String>>>,
    total: usize,
    clients: usize,
    ef: Option<usize>,
) -> (Vec<(usize, Reply)>, Vec<Duration>, Duration) {
    let client = reqwest::Client::new();
    let start = Instant::now();
    let mut tasks = Vec::new();
    for c in 0..clients {
        let (client, pool, url) = (client.clone(), pool.clone(), format!("{base}/v1/recommend"));
        tasks.push(tokio::spawn(async move {
            let mut out = Vec::new();
            let mut lat = Vec::new();
            for r in (c..total).step_by(clients) {
                let h = r % pool.len();
                let t = Instant::now();
                let reply: Reply = client
                    .post(&url)
                    .json(&json!({"history": pool[h], "k": 50, "ef_search": ef}))
                    .send()
                    .await
                    .unwrap()
                    .error_for_status()
                    .unwrap()
                    .json()
                    .await
                    .unwrap();
                lat.push(t.elapsed());
                out.push((h, reply));
            }
            (out, lat)
        }));
    }
    let mut replies = Vec::with_capacity(total);
    let mut lats = Vec::with_capacity(total);
    for t in tasks {
        let (o, l) = t.await.unwrap();
        replies.extend(o);
        lats.extend(l);
    }
    (replies, lats, start.elapsed())
}

fn serving_properties() -> Verdict {
    // A synthetic catalog the size of the MovieLens-20M index.
    let (n, d) = (20_000usize, 600usize);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (model, vocab) = synthetic_model(n, d, 80);
    let t = Instant::now();
    let index = AnnIndex::build(model.augment_for_mips(), HnswParams::default()).unwrap();
    let build_a = t.elapsed().as_secs_f64();
    write_artifacts(dir_a.path(), &model, &index, &vocab).unwrap();
    drop(index);
    {
        let (mb, vb) = synthetic_model(n, d, 81);
        let ib = AnnIndex::build(mb.augment_for_mips(), HnswParams { ef_construction: 100, ..Default::default() }).unwrap();
        write_artifacts(dir_b.path(), &mb, &ib, &vb).unwrap();
    }

    let cfg = ServeConfig { max_ef: n, ef_search: Some(100) };
    let svc = Arc::new(Service::new(cfg));
    let v0 = svc.reload(dir_a.path()).unwrap();
    let server = Server::start(svc.clone());
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let mut rng = seed::rng(8);
    let mut notes = Vec::new();
    let mut ok = true;

    // Fidelity: at ef = I the served answer is the offline composition.
    let pool = Arc::new(history_pool(n, &mut rng, 100));
    let (replies, _, _) = rt.block_on(load(&server.base, &pool, 100, 2, Some(n)));
    let mut mismatched = 0;
    for (h, reply) in &replies {
        let idx: Vec<u32> = pool[*h].iter().filter_map(|id| vocab.index_of(id)).collect();
        let top = brute_force(&model.augment_for_mips(), &augment_query(&model.encode_user(&idx).unwrap()), 50).unwrap();
        let items: Vec<&str> = top.items.iter().map(|&i| vocab.id_of(i).unwrap()).collect();
        let same_scores = top.scores.iter().map(|s| s.to_bits()).eq(reply.scores.iter().map(|s| s.to_bits()));
        if reply.items != items || !same_scores {
            mismatched += 1;
        }
    }
    ok &= mismatched == 0;
    notes.push(format!("byte-equal to offline oracle on {}/100 requests at ef=I", 100 - mismatched));

    // Latency and throughput at k=50 and the default beam.
    let clients = std::thread::available_parallelism().map_or(1, |p| p.get()).max(2);
    let pool = Arc::new(history_pool(n, &mut rng, 1000));
    rt.block_on(load(&server.base, &pool, 500, clients, None));
    let (_, mut lats, wall) = rt.block_on(load(&server.base, &pool, 5000, clients, None));
    lats.sort();
    let p = |q: f64| lats[((q * lats.len() as f64).ceil() as usize).clamp(1, lats.len()) - 1].as_secs_f64() * 1e3;
    let qps = lats.len() as f64 / wall.as_secs_f64();
    let (p50, p99) = (p(0.5), p(0.99));
    ok &= p99 <= 10.0 && qps >= 500.0;
    notes.push(format!(
        "p50 {p50:.2} ms, p99 {p99:.2} ms (need <= 10), {qps:.0} qps (need >= 500) with {clients} clients on {} cores",
        std::thread::available_parallelism().map_or(1, |p| p.get())
    ));

    // Atomic reload under load.
    let cfg = svc.config();
    let state_a = ServingState::load(dir_a.path(), 0).unwrap();
    let state_b = ServingState::load(dir_b.path(), 0).unwrap();
    let stress_pool = Arc::new(history_pool(n, &mut rng, 64));
    let answers: Vec<[Vec<String>; 2]> = stress_pool
        .iter()
        .map(|h| {
            let req = RecommendRequest { history: h.iter().map(|s| ItemId::Str(s.clone())).collect(), k: Some(50), ef_search: None };
            [recommend(&state_a, &req, &cfg).unwrap().items, recommend(&state_b, &req, &cfg).unwrap().items]
        })
        .collect();
    drop((state_a, state_b));
    let versions = Arc::new(Mutex::new(HashMap::from([(v0, 0usize)])));
    let done = Arc::new(AtomicBool::new(false));
    let reloader = {
        let (svc, versions, done) = (svc.clone(), versions.clone(), done.clone());
        let dirs = [dir_a.path().to_path_buf(), dir_b.path().to_path_buf()];
        std::thread::spawn(move || {
            let mut k = 1;
            while !done.load(Ordering::Relaxed) {
                std::thread::sleep(Duration::from_millis(100));
                let v = svc.reload(&dirs[k % 2]).unwrap();
                versions.lock().unwrap().insert(v, k % 2);
                k += 1;
            }
            k - 1
        })
    };
    let (replies, _, stress_wall) = rt.block_on(load(&server.base, &stress_pool, 100_000, clients, None));
    done.store(true, Ordering::Relaxed);
    let reloads = reloader.join().unwrap();
    let versions = versions.lock().unwrap();
    let mut mixed = 0;
    let mut seen = HashSet::new();
    for (h, reply) in &replies {
        match versions.get(&reply.served_by) {
            Some(&which) if reply.items == answers[*h][which] => {
                seen.insert(reply.served_by.clone());
            }
            _ => mixed += 1,
        }
    }
    ok &= replies.len() == 100_000 && mixed == 0 && seen.len() > 1;
    notes.push(format!(
        "{} reload-stress responses across {reloads} reloads and {} versions, {mixed} inconsistent ({:.0} s)",
        replies.len(),
        seen.len(),
        stress_wall.as_secs_f64()
    ));
    notes.push(format!("I=20000 d=600 synthetic index built in {build_a:.0} s"));
    drop(server);
    verdict(ok, notes.join("; "))
}
