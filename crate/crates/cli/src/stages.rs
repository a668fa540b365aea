//! The offline stages. Each reads its upstream artifacts from
//! `<workdir>/<stage>/`, writes its own next to a manifest, and is skipped
//! when the manifest shows identical inputs and configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use led_core::ann::{AnnIndex, HnswParams};
use led_core::data::{ingest_jsonl, ingest_ml20m, split_users, Ml20mFilter, SplitSpec, TimelineSet};
use led_core::eval::{evaluate, sweep_negatives, sweep_to_csv, EvalConfig, ModelRanker, PopularityRanker};
use led_core::model::LedModel;
use led_core::pmi::{build_pmi, count_cooccurrences, CooccurrenceConfig, PmiMatrix};
use led_core::rsvd::{randomized_svd, EmbeddingMatrix, RsvdConfig};
use led_core::seed;
use led_core::trainer::{train_with_output, Init, TrainConfig, TrainData, TrainOutput};
use serde_json::{json, Value};

use crate::config::{InputFormat, PipelineConfig, SCHEMA_VERSION};
use crate::error::{CliError, Result};
use crate::manifest::{sha256_file, Manifest, MANIFEST_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Ingest,
    Split,
    Pmi,
    Rsvd,
    Train,
    Index,
    Eval,
    Sweep,
}

impl Stage {
    /// What `pipeline` runs, in order.
    pub const OFFLINE: [Stage; 7] =
        [Stage::Ingest, Stage::Split, Stage::Pmi, Stage::Rsvd, Stage::Train, Stage::Index, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Pmi => "pmi",
            Stage::Rsvd => "rsvd",
            Stage::Train => "train",
            Stage::Index => "index",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

/// Artifact file names inside each stage directory.
pub mod files {
    pub const TIMELINES: &str = "timelines.ledt";
    pub const TRAIN: &str = "train.ledt";
    pub const VALIDATION: &str = "validation.ledt";
    pub const TEST: &str = "test.ledt";
    pub const PMI: &str = "pmi.ledp";
    pub const EMBEDDINGS: &str = "embeddings.lede";
    pub const SPECTRUM: &str = "singular_values.json";
    pub const MODEL: &str = led_serve::MODEL_FILE;
    pub const INDEX: &str = led_serve::INDEX_FILE;
    pub const VOCAB: &str = led_serve::VOCAB_FILE;
    pub const SUMMARY: &str = "summary.json";
    pub const CHECKPOINTS: &str = "checkpoints";
    pub const TRAIN_LOG: &str = "train_log.jsonl";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_CSV: &str = "report.csv";
    pub const BASELINE_JSON: &str = "baseline.json";
    pub const BASELINE_CSV: &str = "baseline.csv";
    pub const SWEEP_CSV: &str = "sweep.csv";
    pub const SWEEP_JSON: &str = "sweep.json";
}

struct Input {
    label: String,
    path: PathBuf,
    /// Stage that produces this file; `None` for external data.
    producer: Option<Stage>,
}

pub struct Runner {
    cfg: PipelineConfig,
    force: bool,
}

impl Runner {
    pub fn new(cfg: PipelineConfig, force: bool) -> Self {
        Self { cfg, force }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn stage_dir(&self, s: Stage) -> PathBuf {
        self.cfg.paths.workdir.join(s.name())
    }

    fn artifact(&self, s: Stage, file: &str) -> PathBuf {
        self.stage_dir(s).join(file)
    }

    fn input(&self, s: Stage, file: &str) -> Input {
        Input { label: format!("{}/{file}", s.name()), path: self.artifact(s, file), producer: Some(s) }
    }

    /// The stage's seed: the root seed with the stage name hashed in, then
    /// mixed with the stage-level seed field (0 unless set).
    pub fn stage_seed(&self, s: Stage, local: u64) -> u64 {
        seed::derive_n(seed::derive(self.cfg.seed, s.name()), local)
    }

    pub fn pipeline(&self) -> Result<Vec<(Stage, Outcome)>> {
        Stage::OFFLINE.iter().map(|&s| Ok((s, self.run(s)?))).collect()
    }

    pub fn run(&self, s: Stage) -> Result<Outcome> {
        match s {
            Stage::Ingest => self.ingest(),
            Stage::Split => self.split(),
            Stage::Pmi => self.pmi(),
            Stage::Rsvd => self.rsvd(),
            Stage::Train => self.train(),
            Stage::Index => self.index(),
            Stage::Eval => self.eval(),
            Stage::Sweep => self.sweep(),
        }
    }

    fn execute(
        &self,
        stage: Stage,
        inputs: &[Input],
        config: Value,
        body: impl FnOnce(&Path) -> Result<Vec<String>>,
    ) -> Result<Outcome> {
        let mut hashes = BTreeMap::new();
        for inp in inputs {
            if !inp.path.is_file() {
                return Err(match inp.producer {
                    Some(p) => CliError::MissingArtifact { path: inp.path.clone(), stage: p.name() },
                    None => CliError::Config(format!("{} `{}` does not exist", inp.label, inp.path.display())),
                });
            }
            hashes.insert(inp.label.clone(), sha256_file(&inp.path)?);
        }
        let dir = self.stage_dir(stage);
        if !self.force {
            if let Some(m) = Manifest::load(&dir) {
                if m.is_current(&hashes, &config, &dir) {
                    tracing::info!(stage = stage.name(), "inputs and config unchanged, skipping");
                    return Ok(Outcome::Skipped);
                }
            }
        }
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.exists() {
            std::fs::remove_file(&manifest).map_err(|e| CliError::io(&manifest, e))?;
        }
        tracing::info!(stage = stage.name(), "running");
        let start = Instant::now();
        let produced = body(&dir)?;
        let mut outputs = BTreeMap::new();
        for f in produced {
            let h = sha256_file(&dir.join(&f))?;
            outputs.insert(f, h);
        }
        let wall_ms = start.elapsed().as_millis() as u64;
        Manifest { stage: stage.name().into(), schema_version: SCHEMA_VERSION, inputs: hashes, config, outputs, wall_ms }
            .save(&dir)?;
        tracing::info!(stage = stage.name(), wall_ms, "finished");
        Ok(Outcome::Ran)
    }

    fn ingest(&self) -> Result<Outcome> {
        let data = self
            .cfg
            .paths
            .data
            .clone()
            .ok_or_else(|| CliError::Config("paths.data is not set; point it at the event log".into()))?;
        let format = match self.cfg.paths.format {
            InputFormat::Auto if data.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => InputFormat::Ml20m,
            InputFormat::Auto => InputFormat::Jsonl,
            f => f,
        };
        let filter = Ml20mFilter { min_rating: self.cfg.data.min_rating, min_events: self.cfg.data.min_events };
        let config = match format {
            InputFormat::Ml20m => json!({"format": "ml20m", "min_rating": filter.min_rating, "min_events": filter.min_events}),
            _ => json!({"format": "jsonl"}),
        };
        let inputs = [Input { label: "paths.data".into(), path: data.clone(), producer: None }];
        self.execute(Stage::Ingest, &inputs, config, |dir| {
            let ts = match format {
                InputFormat::Ml20m => ingest_ml20m(&data, filter)?,
                _ => ingest_jsonl(&data)?,
            };
            let st = ts.stats();
            tracing::info!(users = st.users, items = st.items, events = st.events, "ingested");
            ts.save(&dir.join(files::TIMELINES))?;
            Ok(vec![files::TIMELINES.into()])
        })
    }

    fn split(&self) -> Result<Outcome> {
        let spec = SplitSpec { seed: self.stage_seed(Stage::Split, self.cfg.data.split.seed), ..self.cfg.data.split };
        spec.validate()?;
        let config = serde_json::to_value(spec).expect("split spec serializes");
        self.execute(Stage::Split, &[self.input(Stage::Ingest, files::TIMELINES)], config, |dir| {
            let ts = TimelineSet::load(&self.artifact(Stage::Ingest, files::TIMELINES))?;
            let s = split_users(&ts, &spec)?;
            tracing::info!(
                train = s.train.n_users(),
                validation = s.validation.n_users(),
                test = s.test.n_users(),
                "split users"
            );
            s.train.save(&dir.join(files::TRAIN))?;
            s.validation.save(&dir.join(files::VALIDATION))?;
            s.test.save(&dir.join(files::TEST))?;
            Ok(vec![files::TRAIN.into(), files::VALIDATION.into(), files::TEST.into()])
        })
    }

    fn pmi(&self) -> Result<Outcome> {
        let p = &self.cfg.pmi;
        let cc = CooccurrenceConfig {
            kinds: p.kinds,
            max_pairs_per_timeline: p.max_pairs_per_timeline,
            seed: self.stage_seed(Stage::Pmi, 0),
        };
        let config = json!({
            "alpha": p.alpha,
            "min_count": p.min_count,
            "kinds": p.kinds,
            "max_pairs_per_timeline": p.max_pairs_per_timeline,
            "seed": cc.seed,
        });
        self.execute(Stage::Pmi, &[self.input(Stage::Split, files::TRAIN)], config, |dir| {
            let ts = TimelineSet::load(&self.artifact(Stage::Split, files::TRAIN))?;
            let stats = count_cooccurrences(&ts, &cc);
            let m = build_pmi(&stats, p.alpha, p.min_count)?;
            tracing::info!(items = m.n(), nnz = m.nnz(), pairs = stats.n_pairs(), "built pmi matrix");
            m.save(&dir.join(files::PMI))?;
            Ok(vec![files::PMI.into()])
        })
    }

    fn rsvd_config(&self) -> RsvdConfig {
        RsvdConfig { seed: self.stage_seed(Stage::Rsvd, self.cfg.rsvd.seed), ..self.cfg.rsvd }
    }

    fn rsvd(&self) -> Result<Outcome> {
        let rc = self.rsvd_config();
        let config = serde_json::to_value(rc).expect("rsvd config serializes");
        self.execute(Stage::Rsvd, &[self.input(Stage::Pmi, files::PMI)], config, |dir| {
            let m = PmiMatrix::load(&self.artifact(Stage::Pmi, files::PMI))?;
            let (emb, s) = randomized_svd(&m, &rc)?;
            tracing::info!(items = emb.rows(), dim = emb.dim(), top = s.first().copied(), "factorized");
            emb.save(&dir.join(files::EMBEDDINGS))?;
            let spectrum = dir.join(files::SPECTRUM);
            std::fs::write(&spectrum, serde_json::to_string(&s).unwrap() + "\n").map_err(|e| CliError::io(&spectrum, e))?;
            Ok(vec![files::EMBEDDINGS.into(), files::SPECTRUM.into()])
        })
    }

    fn train_config(&self, s: Stage) -> TrainConfig {
        TrainConfig { seed: self.stage_seed(s, self.cfg.train.seed), ..self.cfg.train.clone() }
    }

    /// Pre-trained embeddings, checked against the configured dimension.
    fn load_base(&self, tc: &TrainConfig) -> Result<Option<EmbeddingMatrix>> {
        if tc.init != Init::Svd {
            return Ok(None);
        }
        let e = EmbeddingMatrix::load(&self.artifact(Stage::Rsvd, files::EMBEDDINGS))?;
        if e.dim() != self.cfg.rsvd.rank {
            return Err(CliError::Config(format!(
                "embeddings have dimension {} but rsvd.rank is {}; rerun the `rsvd` stage",
                e.dim(),
                self.cfg.rsvd.rank
            )));
        }
        Ok(Some(e))
    }

    fn training_inputs(&self, tc: &TrainConfig) -> Vec<Input> {
        let mut inputs = vec![self.input(Stage::Split, files::TRAIN), self.input(Stage::Split, files::VALIDATION)];
        if tc.init == Init::Svd {
            inputs.push(self.input(Stage::Rsvd, files::EMBEDDINGS));
        }
        inputs
    }

    fn train(&self) -> Result<Outcome> {
        let tc = self.train_config(Stage::Train);
        tc.validate()?;
        let config = json!({"train": tc, "dim": self.cfg.rsvd.rank});
        self.execute(Stage::Train, &self.training_inputs(&tc), config, |dir| {
            let train = TimelineSet::load(&self.artifact(Stage::Split, files::TRAIN))?;
            let validation = TimelineSet::load(&self.artifact(Stage::Split, files::VALIDATION))?;
            let base = self.load_base(&tc)?;
            let ckpt = dir.join(files::CHECKPOINTS);
            if ckpt.exists() {
                std::fs::remove_dir_all(&ckpt).map_err(|e| CliError::io(&ckpt, e))?;
            }
            let data = TrainData { train: &train, validation: (validation.n_users() > 0).then_some(&validation) };
            let output = TrainOutput { checkpoint_dir: Some(ckpt), log_path: Some(dir.join(files::TRAIN_LOG)) };
            let out = train_with_output(&data, base.as_ref(), &tc, &output, Some(self.cfg.rsvd.rank))?;
            out.model.save(&dir.join(files::MODEL))?;
            let best = out.best.map(|i| &out.checkpoints[i]);
            let pc = out.model.parameter_count();
            let summary = json!({
                "steps": out.steps,
                "best_step": best.map(|c| c.step),
                "best_ndcg_at_100": best.map(|c| c.ndcg_at_100),
                "final_loss": out.losses.last(),
                "parameters": {"trainable": pc.trainable, "frozen": pc.frozen},
            });
            let path = dir.join(files::SUMMARY);
            std::fs::write(&path, serde_json::to_string_pretty(&summary).unwrap() + "\n").map_err(|e| CliError::io(&path, e))?;
            Ok(vec![files::MODEL.into(), files::SUMMARY.into()])
        })
    }

    fn ann_params(&self) -> HnswParams {
        HnswParams { seed: self.stage_seed(Stage::Index, self.cfg.ann.seed), ..self.cfg.ann }
    }

    fn index(&self) -> Result<Outcome> {
        let params = self.ann_params();
        params.validate()?;
        let config = serde_json::to_value(params).expect("hnsw params serialize");
        let inputs = [self.input(Stage::Train, files::MODEL), self.input(Stage::Split, files::TRAIN)];
        self.execute(Stage::Index, &inputs, config, |dir| {
            let model = LedModel::load(&self.artifact(Stage::Train, files::MODEL))?;
            let vocab = TimelineSet::load(&self.artifact(Stage::Split, files::TRAIN))?.vocab().clone();
            let index = AnnIndex::build(model.augment_for_mips(), params)?;
            tracing::info!(items = index.len(), levels = index.max_level() + 1, "built index");
            led_serve::write_artifacts(dir, &model, &index, &vocab)?;
            Ok(vec![files::MODEL.into(), files::INDEX.into(), files::VOCAB.into()])
        })
    }

    fn eval_config(&self, s: Stage) -> EvalConfig {
        let m = &self.cfg.eval.metrics;
        EvalConfig { seed: self.stage_seed(s, m.seed), ..m.clone() }
    }

    fn eval(&self) -> Result<Outcome> {
        let ec = self.eval_config(Stage::Eval);
        ec.validate()?;
        let ef = self.cfg.eval.use_index.then(|| self.cfg.eval.ef_search.unwrap_or(self.cfg.ann.ef_search));
        let config = json!({"metrics": ec, "ef_search": ef});
        let mut inputs = vec![
            self.input(Stage::Index, files::MODEL),
            self.input(Stage::Split, files::TRAIN),
            self.input(Stage::Split, files::TEST),
        ];
        if ef.is_some() {
            inputs.push(self.input(Stage::Index, files::INDEX));
        }
        self.execute(Stage::Eval, &inputs, config, |dir| {
            let model = LedModel::load(&self.artifact(Stage::Index, files::MODEL))?;
            let train = TimelineSet::load(&self.artifact(Stage::Split, files::TRAIN))?;
            let test = TimelineSet::load(&self.artifact(Stage::Split, files::TEST))?;
            let report = match ef {
                Some(ef) => {
                    let index = AnnIndex::load(&self.artifact(Stage::Index, files::INDEX))?;
                    evaluate(&ModelRanker::ann(&model, &index, ef)?, &test, &ec)?
                }
                None => evaluate(&ModelRanker::brute_force(&model), &test, &ec)?,
            };
            let baseline = evaluate(&PopularityRanker::new(train.vocab()), &test, &ec)?;
            tracing::info!(
                users = report.users,
                recall_at_20 = report.recall_at_20.mean,
                recall_at_50 = report.recall_at_50.mean,
                ndcg_at_100 = report.ndcg_at_100.mean,
                baseline_recall_at_50 = baseline.recall_at_50.mean,
                "evaluated"
            );
            for (file, text) in [
                (files::REPORT_JSON, report.to_json()),
                (files::REPORT_CSV, report.to_csv()),
                (files::BASELINE_JSON, baseline.to_json()),
                (files::BASELINE_CSV, baseline.to_csv()),
            ] {
                let p = dir.join(file);
                std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
            }
            Ok([files::REPORT_JSON, files::REPORT_CSV, files::BASELINE_JSON, files::BASELINE_CSV].map(String::from).to_vec())
        })
    }

    fn sweep(&self) -> Result<Outcome> {
        let tc = self.train_config(Stage::Sweep);
        tc.validate()?;
        let ec = self.eval_config(Stage::Sweep);
        ec.validate()?;
        let negatives = self.cfg.sweep.negatives.clone();
        let config = json!({"train": tc, "dim": self.cfg.rsvd.rank, "metrics": ec, "negatives": negatives});
        let mut inputs = self.training_inputs(&tc);
        inputs.push(self.input(Stage::Split, files::TEST));
        self.execute(Stage::Sweep, &inputs, config, |dir| {
            let train = TimelineSet::load(&self.artifact(Stage::Split, files::TRAIN))?;
            let validation = TimelineSet::load(&self.artifact(Stage::Split, files::VALIDATION))?;
            let test = TimelineSet::load(&self.artifact(Stage::Split, files::TEST))?;
            let base = self.load_base(&tc)?;
            let data = TrainData { train: &train, validation: (validation.n_users() > 0).then_some(&validation) };
            let rows = sweep_negatives(&tc, &negatives, &data, base.as_ref(), Some(self.cfg.rsvd.rank), &test, &ec)?;
            for (file, text) in [
                (files::SWEEP_CSV, sweep_to_csv(&rows)),
                (files::SWEEP_JSON, serde_json::to_string_pretty(&rows).unwrap() + "\n"),
            ] {
                let p = dir.join(file);
                std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
            }
            Ok(vec![files::SWEEP_CSV.into(), files::SWEEP_JSON.into()])
        })
    }
}
