//! Staged training and evaluation over one run directory.
//!
//! Layout under the run directory:
//! `corpus/` ingested records, catalog and split; `embeddings/` entity
//! vectors; `labels/` teacher soft labels; `ckpt/` model checkpoints;
//! `reports/` metrics and training logs. `manifest.json` maps each stage to
//! a hash of its inputs and the hashes of its outputs, and a stage whose
//! entry still matches is skipped unless forced.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{EncoderKind, RunConfig, TeacherKind};
use crate::dataset::{self, Catalog, ContextRef, LearnerSequence, SplitSpec};
use crate::dkt::{self, DktHyper, DktParams};
use crate::encoder::{
    self, EmbeddingStore, EncoderBackend, EntityEmbeddings, Kind, RecordedBackend, RemoteBackend,
    StubBackend,
};
use crate::eval::{MetricReport, RankingOutcome};
use crate::gateway::Gateway;
use crate::joint::{self, JointData, JointHyper, JointLog};
use crate::reranker::{self, RerankContext, RerankHyper, RerankerParams};
use crate::student::{self, KdExample, PrefExample, Stage, StageData, StudentHyper, StudentParams};
use crate::synthetic::KeyedDag;
use crate::teacher::{
    self, LabelRecord, LlmTeacher, SoftLabelStore, SyntheticTeacher, Teacher, TeacherParams,
};
use crate::tensor::Checkpoint;
use crate::{Error, Result};

pub const RECORDS: &str = "corpus/records.jsonl";
pub const CATALOG: &str = "corpus/catalog.json";
pub const INGEST_REPORT: &str = "corpus/ingest.json";
pub const EMBEDDINGS: &str = "embeddings/entities.jsonl";
pub const LABELS: &str = "labels/soft_labels.jsonl";
pub const SELECTION: &str = "labels/selection.json";
pub const STUDENT_KD: &str = "ckpt/student_kd.json";
pub const STUDENT_PREF: &str = "ckpt/student_pref.json";
pub const DKT: &str = "ckpt/dkt.json";
pub const RERANKER: &str = "ckpt/reranker.json";
pub const RERANKER_NO_DKT: &str = "ckpt/reranker_no_dkt.json";
pub const JOINT_STUDENT: &str = "ckpt/joint_student.json";
pub const JOINT_RERANKER: &str = "ckpt/joint_reranker.json";
pub const METRICS: &str = "reports/metrics.csv";
pub const SUMMARY: &str = "reports/summary.txt";
pub const JOINT_LOG: &str = "reports/joint_log.csv";
pub const MANIFEST: &str = "manifest.json";

/// Evaluation modes written to the report.
pub const MODE_KD_TEACHER: &str = "kd-teacher-eval";
pub const MODE_KD_PREF: &str = "kd-pref-eval";
pub const MODE_TEACHER: &str = "teacher-eval";
pub const MODE_COARSE: &str = "pref-coarse";
pub const MODE_RERANKED: &str = "pref-reranked";
pub const MODE_NO_DKT: &str = "pref-reranked-no-dkt";

/// The command that produces each artifact, for "run X first" messages.
fn producer(rel: &str) -> &'static str {
    match rel {
        RECORDS | CATALOG | INGEST_REPORT => "ingest",
        EMBEDDINGS => "encode",
        LABELS | SELECTION => "distill",
        STUDENT_KD => "train-student --stage kd",
        STUDENT_PREF => "train-student --stage pref",
        DKT => "train-dkt",
        RERANKER | RERANKER_NO_DKT => "train-reranker",
        JOINT_STUDENT | JOINT_RERANKER => "joint-finetune",
        _ => "evaluate",
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub inputs: String,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, bytes).map_err(Error::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    write_bytes(path, body.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let body = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&body).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Selection {
    /// Labelled contexts used for teacher-eval.
    holdout: Vec<String>,
    /// Labelled contexts used for distillation.
    train: Vec<String>,
    /// Labelled contexts whose label carries no preference.
    flat: usize,
}

/// Everything loaded from `corpus/`.
pub struct CorpusView {
    pub catalog: Catalog,
    pub sequences: Vec<LearnerSequence>,
    pub split: SplitSpec,
    by_learner: HashMap<usize, usize>,
}

impl CorpusView {
    pub fn sequence(&self, learner: usize) -> &LearnerSequence {
        &self.sequences[self.by_learner[&learner]]
    }

    /// Concepts of the first `p` steps of `learner`.
    pub fn history(&self, learner: usize, p: usize) -> Vec<usize> {
        self.sequence(learner).steps[..p]
            .iter()
            .map(|s| s.0)
            .collect()
    }

    fn learner_id(&self, key: &str) -> Option<usize> {
        self.catalog
            .learners
            .iter()
            .find(|l| l.key == key)
            .map(|l| l.id)
    }
}

fn kd_prompt_text(catalog: &Catalog, history: &[usize], target: usize) -> String {
    student::render_kd_prompt(
        &catalog.concept_texts(student::prompt_window(history)),
        catalog.concept_text(target),
    )
}

fn pref_prompt_text(catalog: &Catalog, history: &[usize]) -> String {
    student::render_pref_prompt(&catalog.concept_texts(student::prompt_window(history)))
}

/// Relevant item for teacher-eval: the lowest-id maximum of the label
/// outside the target itself. `None` when the label is flat there.
pub fn teacher_argmax(y: &[f64], target: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (j, &v) in y.iter().enumerate() {
        if j == target {
            continue;
        }
        lo = lo.min(v);
        if v > hi {
            hi = v;
            best = Some(j);
        }
    }
    if hi - lo <= 1e-12 {
        None
    } else {
        best
    }
}

/// One recommendation list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub learner: String,
    /// Concept keys, best first.
    pub ranked: Vec<String>,
    pub scores: Vec<f64>,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub force: bool,
    gateway: Option<Arc<Gateway>>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            force: false,
            gateway: None,
        })
    }

    pub fn with_force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    /// Route LLM traffic through `gateway` instead of the environment-configured endpoint.
    pub fn with_gateway(mut self, gateway: Arc<Gateway>) -> Self {
        self.gateway = Some(gateway);
        self
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.cfg.run_dir.join(rel)
    }

    fn require(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Missing {
                path: p,
                command: producer(rel),
            })
        }
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let p = self.path(MANIFEST);
        if p.exists() {
            read_json(&p)
        } else {
            Ok(Manifest::default())
        }
    }

    /// Run `work` unless the manifest shows the same inputs and intact outputs.
    /// `work` is told whether earlier partial output must be discarded.
    fn stage(
        &mut self,
        name: &str,
        deps: &[&str],
        extra_inputs: &[PathBuf],
        params: serde_json::Value,
        outputs: &[&str],
        work: impl FnOnce(&mut Self, bool) -> Result<()>,
    ) -> Result<StageStatus> {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update([0]);
        h.update(params.to_string().as_bytes());
        for rel in deps {
            let p = self.require(rel)?;
            h.update(rel.as_bytes());
            h.update(file_hash(&p)?.as_bytes());
        }
        for p in extra_inputs {
            h.update(p.display().to_string().as_bytes());
            h.update(file_hash(p)?.as_bytes());
        }
        let inputs = hex::encode(h.finalize());
        let mut manifest = self.manifest()?;
        let previous = manifest.stages.get(name).cloned();
        if !self.force {
            if let Some(entry) = &previous {
                let intact = entry.inputs == inputs
                    && outputs.iter().all(|rel| {
                        let p = self.path(rel);
                        p.exists()
                            && entry
                                .outputs
                                .get(*rel)
                                .is_some_and(|h| file_hash(&p).ok().as_ref() == Some(h))
                    });
                if intact {
                    log::info!("{name}: up to date");
                    return Ok(StageStatus::UpToDate);
                }
            }
        }
        let fresh = self.force || previous.is_some_and(|e| e.inputs != inputs);
        work(self, fresh)?;
        let mut hashes = BTreeMap::new();
        for rel in outputs {
            hashes.insert(rel.to_string(), file_hash(&self.path(rel))?);
        }
        manifest.stages.insert(
            name.to_string(),
            StageEntry {
                inputs,
                outputs: hashes,
            },
        );
        write_json(&self.path(MANIFEST), &manifest)?;
        Ok(StageStatus::Ran)
    }

    // ---- ingest ----

    pub fn ingest(&mut self) -> Result<StageStatus> {
        let csv = self.cfg.data.csv.clone().ok_or_else(|| {
            Error::Usage("no interaction log: set data.csv in the config or pass --csv".into())
        })?;
        if !csv.exists() {
            return Err(Error::Usage(format!(
                "interaction log {} does not exist",
                csv.display()
            )));
        }
        let params = serde_json::to_value(&self.cfg.data.schema).expect("schema serialises");
        self.stage(
            "ingest",
            &[],
            std::slice::from_ref(&csv),
            params,
            &[RECORDS, CATALOG, INGEST_REPORT],
            |p, _| {
                let corpus = dataset::ingest_csv(&csv, &p.cfg.data.schema)?;
                dataset::write_corpus(&p.path(RECORDS), &corpus.records)?;
                corpus.catalog.save(&p.path(CATALOG))?;
                let stats = dataset::corpus_stats(&corpus.records, &corpus.catalog);
                log::info!(
                    "ingested {} learners, {} concepts, {} interactions",
                    stats.learners,
                    stats.concepts,
                    stats.interactions
                );
                write_json(
                    &p.path(INGEST_REPORT),
                    &serde_json::json!({ "report": corpus.report, "stats": stats }),
                )
            },
        )
    }

    pub fn corpus(&self) -> Result<CorpusView> {
        let catalog = Catalog::load(&self.require(CATALOG)?)?;
        let records = dataset::read_corpus(&self.require(RECORDS)?)?;
        let sequences = dataset::build_sequences(&records);
        let split = dataset::split_leave_one_out(&sequences);
        let by_learner = sequences
            .iter()
            .enumerate()
            .map(|(i, s)| (s.learner, i))
            .collect();
        Ok(CorpusView {
            catalog,
            sequences,
            split,
            by_learner,
        })
    }

    // ---- backends ----

    fn gateway(&self) -> Result<Arc<Gateway>> {
        if let Some(g) = &self.gateway {
            return Ok(g.clone());
        }
        #[cfg(feature = "http")]
        {
            let endpoint = crate::gateway::EndpointConfig::from_env()?;
            let mut g = Gateway::new(Arc::new(crate::gateway::HttpTransport::new(endpoint)?));
            if let Some(dir) = &self.cfg.backend.cache_dir {
                g = g.with_cache(crate::gateway::ResponseCache::new(dir.clone()));
            }
            Ok(Arc::new(g))
        }
        #[cfg(not(feature = "http"))]
        {
            Err(Error::Usage(
                "built without the `http` feature; no LLM endpoint available".into(),
            ))
        }
    }

    pub fn encoder_backend(&self) -> Result<Box<dyn EncoderBackend>> {
        let b = &self.cfg.backend;
        Ok(match b.encoder {
            EncoderKind::Stub => Box::new(StubBackend::new(0, b.dim)),
            EncoderKind::Recorded => {
                let path = b.recorded.as_ref().ok_or_else(|| {
                    Error::Usage("backend.recorded must name a vector file".into())
                })?;
                Box::new(RecordedBackend::load(path)?)
            }
            EncoderKind::Remote => Box::new(RemoteBackend::new(
                self.gateway()?,
                b.embed_model.clone(),
                b.dim,
            )),
        })
    }

    fn teacher_backend(&self, catalog: &Catalog) -> Result<Box<dyn Teacher>> {
        let b = &self.cfg.backend;
        Ok(match b.teacher {
            TeacherKind::Synthetic => {
                let path = b.dag.as_ref().ok_or_else(|| {
                    Error::Usage("backend.dag must name a prerequisite file".into())
                })?;
                let keyed: KeyedDag = read_json(path)?;
                Box::new(SyntheticTeacher {
                    dag: keyed.resolve(catalog),
                })
            }
            TeacherKind::Llm => Box::new(
                LlmTeacher::new(self.gateway()?, b.chat_model.clone())
                    .with_parse_retries(self.cfg.distill.parse_retries),
            ),
        })
    }

    fn backend_inputs(&self) -> Vec<PathBuf> {
        let b = &self.cfg.backend;
        let mut v = Vec::new();
        if b.encoder == EncoderKind::Recorded {
            v.extend(b.recorded.clone());
        }
        v
    }

    /// Embed free-text ranking prompts.
    pub fn embed_texts(&self, texts: Vec<String>) -> Result<Vec<Vec<f64>>> {
        let backend = self.encoder_backend()?;
        let prompts: Vec<_> = texts.into_iter().map(encoder::query_prompt).collect();
        encoder::encode_many(&prompts, backend.as_ref(), self.cfg.backend.max_in_flight)
            .into_iter()
            .map(|r| r.map_err(Error::from))
            .collect()
    }

    // ---- encode ----

    pub fn encode(&mut self) -> Result<StageStatus> {
        let params = serde_json::json!({
            "encoder": self.cfg.backend.encoder,
            "dim": self.cfg.backend.dim,
            "model": self.cfg.backend.embed_model,
        });
        let extra = self.backend_inputs();
        self.stage(
            "encode",
            &[CATALOG],
            &extra,
            params,
            &[EMBEDDINGS],
            |p, fresh| {
                let path = p.path(EMBEDDINGS);
                if fresh && path.exists() {
                    fs::remove_file(&path).map_err(Error::io(&path))?;
                }
                let catalog = Catalog::load(&p.path(CATALOG))?;
                let backend = p.encoder_backend()?;
                let mut store = EmbeddingStore::open(&path)?;
                encoder::encode_catalog(
                    &catalog,
                    backend.as_ref(),
                    &mut store,
                    p.cfg.backend.max_in_flight,
                )?;
                if !path.exists() {
                    write_bytes(&path, b"")?;
                }
                Ok(())
            },
        )
    }

    pub fn embeddings(&self, catalog: &Catalog) -> Result<EntityEmbeddings> {
        let path = self.require(EMBEDDINGS)?;
        let store = EmbeddingStore::open(&path)?;
        let d = self.cfg.backend.dim;
        let stale = || Error::Missing {
            path: path.clone(),
            command: "encode",
        };
        Ok(EntityEmbeddings {
            learners: store
                .matrix(Kind::Student, catalog.num_learners(), d)
                .ok_or_else(stale)?,
            concepts: store
                .matrix(Kind::Concept, catalog.num_concepts(), d)
                .ok_or_else(stale)?,
        })
    }

    // ---- distill ----

    pub fn distill(&mut self) -> Result<StageStatus> {
        let params = serde_json::json!({
            "teacher": self.cfg.backend.teacher,
            "model": self.cfg.backend.chat_model,
            "distill": self.cfg.distill,
            "seed": self.cfg.seed,
        });
        let extra: Vec<PathBuf> = match self.cfg.backend.teacher {
            TeacherKind::Synthetic => self.cfg.backend.dag.iter().cloned().collect(),
            TeacherKind::Llm => Vec::new(),
        };
        self.stage(
            "distill",
            &[RECORDS, CATALOG],
            &extra,
            params,
            &[LABELS, SELECTION],
            |p, fresh| {
                let path = p.path(LABELS);
                if fresh && path.exists() {
                    fs::remove_file(&path).map_err(Error::io(&path))?;
                }
                let corpus = p.corpus()?;
                let mut contexts = corpus.split.training_contexts();
                let mut rng = ChaCha8Rng::seed_from_u64(p.cfg.seed ^ 0x6469_7374);
                contexts.shuffle(&mut rng);
                contexts.truncate(p.cfg.distill.budget);
                let teacher = p.teacher_backend(&corpus.catalog)?;
                let tp = TeacherParams {
                    chunk_size: p.cfg.distill.chunk_size,
                    epsilon: p.cfg.distill.epsilon,
                    max_in_flight: p.cfg.backend.max_in_flight,
                    ..TeacherParams::default()
                };
                let mut store = SoftLabelStore::open(&path)?;
                let summary = teacher::distill_corpus(
                    &contexts,
                    &corpus.sequences,
                    &corpus.catalog,
                    teacher.as_ref(),
                    &tp,
                    &mut store,
                )?;
                if !summary.failed.is_empty() {
                    let (ctx, why) = &summary.failed[0];
                    return Err(Error::Backend(format!(
                    "{} of {} contexts unlabelled (first: {ctx}: {why}); rerun distill to resume",
                    summary.failed.len(),
                    summary.requested
                )));
                }
                if !path.exists() {
                    write_bytes(&path, b"")?;
                }
                let mut sel = Selection {
                    holdout: Vec::new(),
                    train: Vec::new(),
                    flat: 0,
                };
                for c in &contexts {
                    let rec = store.get(&c.key()).expect("every context labelled");
                    if teacher_argmax(&rec.y, rec.target).is_none() {
                        sel.flat += 1;
                    } else if sel.holdout.len() < p.cfg.distill.holdout {
                        sel.holdout.push(c.key());
                    } else if sel.train.len() < p.cfg.distill.train {
                        sel.train.push(c.key());
                    }
                }
                log::info!(
                    "labelled {} contexts: {} held out, {} for training, {} flat",
                    contexts.len(),
                    sel.holdout.len(),
                    sel.train.len(),
                    sel.flat
                );
                write_json(&p.path(SELECTION), &sel)
            },
        )
    }

    fn labelled(
        &self,
        which: fn(&Selection) -> &Vec<String>,
    ) -> Result<Vec<(ContextRef, LabelRecord)>> {
        let store = SoftLabelStore::open(&self.require(LABELS)?)?;
        let sel: Selection = read_json(&self.require(SELECTION)?)?;
        which(&sel)
            .iter()
            .map(|key| {
                let rec = store.get(key).cloned().ok_or_else(|| Error::Missing {
                    path: self.path(LABELS),
                    command: "distill",
                })?;
                let (l, p) = key.split_once(':').expect("context key has a colon");
                let c = ContextRef {
                    learner: l.parse().expect("learner id"),
                    prefix_len: p.parse().expect("prefix length"),
                };
                Ok((c, rec))
            })
            .collect()
    }

    fn kd_examples(
        &self,
        corpus: &CorpusView,
        which: fn(&Selection) -> &Vec<String>,
    ) -> Result<Vec<KdExample>> {
        let labelled = self.labelled(which)?;
        let texts = labelled
            .iter()
            .map(|(c, r)| {
                kd_prompt_text(
                    &corpus.catalog,
                    &corpus.history(c.learner, c.prefix_len),
                    r.target,
                )
            })
            .collect();
        let prompts = self.embed_texts(texts)?;
        Ok(labelled
            .into_iter()
            .zip(prompts)
            .map(|((c, r), prompt)| KdExample {
                learner: c.learner,
                prompt,
                labels: r.y,
            })
            .collect())
    }

    fn pref_examples(
        &self,
        corpus: &CorpusView,
        contexts: &[ContextRef],
    ) -> Result<Vec<PrefExample>> {
        let texts = contexts
            .iter()
            .map(|c| pref_prompt_text(&corpus.catalog, &corpus.history(c.learner, c.prefix_len)))
            .collect();
        let prompts = self.embed_texts(texts)?;
        Ok(contexts
            .iter()
            .zip(prompts)
            .map(|(c, prompt)| PrefExample {
                learner: c.learner,
                prompt,
                positive: corpus.sequence(c.learner).steps[c.prefix_len].0,
                history: corpus.history(c.learner, c.prefix_len),
            })
            .collect())
    }

    // ---- student ----

    fn student_hyper(&self, stage: Stage) -> StudentHyper {
        let s = &self.cfg.student;
        let (sc, offset) = match stage {
            Stage::Kd => (&s.kd, 1),
            Stage::Pref => (&s.pref, 2),
        };
        StudentHyper {
            lr: sc.lr,
            epochs: sc.epochs,
            batch_size: sc.batch_size,
            tau: s.tau,
            negatives: s.negatives,
            patience: s.patience,
            seed: self.cfg.seed.wrapping_add(offset),
        }
    }

    pub fn train_student(&mut self, stage: Stage) -> Result<StageStatus> {
        let hyper = self.student_hyper(stage);
        let params = serde_json::json!({ "hyper": hyper, "seed": self.cfg.seed });
        let (name, deps, out, log_rel): (&str, Vec<&str>, &str, &str) = match stage {
            Stage::Kd => (
                "train-student-kd",
                vec![RECORDS, CATALOG, EMBEDDINGS, LABELS, SELECTION],
                STUDENT_KD,
                "reports/student_kd_log.csv",
            ),
            Stage::Pref => (
                "train-student-pref",
                vec![RECORDS, CATALOG, EMBEDDINGS, STUDENT_KD],
                STUDENT_PREF,
                "reports/student_pref_log.csv",
            ),
        };
        self.stage(name, &deps, &[], params, &[out, log_rel], |p, _| {
            let corpus = p.corpus()?;
            let emb = p.embeddings(&corpus.catalog)?;
            let (trained, log) = match stage {
                Stage::Kd => {
                    let examples = p.kd_examples(&corpus, |s| &s.train)?;
                    let init = StudentParams::init(emb.dim(), p.cfg.seed);
                    student::train_student(
                        &init,
                        StageData::Kd(&examples),
                        &emb.learners,
                        &emb.concepts,
                        &hyper,
                    )?
                }
                Stage::Pref => {
                    let init = p.load_student(STUDENT_KD)?;
                    let examples = p.pref_examples(&corpus, &corpus.split.training_contexts())?;
                    student::train_student(
                        &init,
                        StageData::Pref(&examples),
                        &emb.learners,
                        &emb.concepts,
                        &hyper,
                    )?
                }
            };
            save_ckpt(
                &p.path(out),
                Checkpoint::from_params("student", &trained.to_param_set()),
            )?;
            write_bytes(&p.path(log_rel), student::log_csv(&log).as_bytes())
        })
    }

    pub fn load_student(&self, rel: &str) -> Result<StudentParams> {
        let path = self.require(rel)?;
        let ck = Checkpoint::load(&path, "student").map_err(Error::io(&path))?;
        Ok(StudentParams::from_param_set(&ck.to_params()?)?)
    }

    // ---- dkt ----

    fn dkt_hyper(&self) -> DktHyper {
        let d = &self.cfg.dkt;
        DktHyper {
            hidden: d.hidden,
            lr: d.lr,
            epochs: d.epochs,
            batch_size: d.batch_size,
            seed: self.cfg.seed.wrapping_add(3),
        }
    }

    pub fn train_dkt(&mut self) -> Result<StageStatus> {
        let hyper = self.dkt_hyper();
        let params = serde_json::json!({ "hyper": hyper });
        self.stage(
            "train-dkt",
            &[RECORDS, CATALOG],
            &[],
            params,
            &[DKT, "reports/dkt_log.csv"],
            |p, _| {
                let corpus = p.corpus()?;
                let prefixes: Vec<LearnerSequence> = corpus
                    .split
                    .train
                    .iter()
                    .map(|t| LearnerSequence {
                        learner: t.learner,
                        steps: corpus.sequence(t.learner).steps[..t.train_len].to_vec(),
                    })
                    .collect();
                let (params, losses) =
                    dkt::train_dkt(&prefixes, corpus.catalog.num_concepts(), &hyper)?;
                save_ckpt(
                    &p.path(DKT),
                    Checkpoint::from_params("dkt", &params.to_param_set()),
                )?;
                let mut csv = String::from("epoch,bce\n");
                for (i, l) in losses.iter().enumerate() {
                    csv.push_str(&format!("{i},{l}\n"));
                }
                write_bytes(&p.path("reports/dkt_log.csv"), csv.as_bytes())
            },
        )
    }

    pub fn load_dkt(&self) -> Result<DktParams> {
        let path = self.require(DKT)?;
        let ck = Checkpoint::load(&path, "dkt").map_err(Error::io(&path))?;
        Ok(DktParams::from_param_set(&ck.to_params()?)?)
    }

    // ---- reranker ----

    /// Coarse candidates and the fine-ranker context for a history.
    #[allow(clippy::too_many_arguments)]
    fn rerank_context(
        &self,
        emb: &EntityEmbeddings,
        student: &StudentParams,
        dkt: &DktParams,
        learner: usize,
        steps: &[(usize, bool)],
        prompt: Vec<f64>,
        positive: Option<usize>,
    ) -> Result<(RerankContext, Vec<usize>)> {
        let history: Vec<usize> = steps.iter().map(|s| s.0).collect();
        let s = student::coarse_scores(
            &student.query(&prompt),
            emb.learners.row(learner),
            &emb.concepts,
            student.alpha,
        )?;
        let seen: HashSet<usize> = history.iter().copied().collect();
        let ranked = student::rank_all(&s, &seen);
        let candidates: Vec<usize> = ranked
            .iter()
            .copied()
            .take(self.cfg.reranker.candidates)
            .collect();
        let coarse = candidates.iter().map(|&c| s[c]).collect();
        let ctx = RerankContext {
            learner,
            history,
            prompt,
            dkt_state: dkt::cognitive_state(steps, dkt)?,
            candidates,
            coarse,
            positive,
        };
        Ok((ctx, ranked))
    }

    fn rerank_contexts(
        &self,
        corpus: &CorpusView,
        emb: &EntityEmbeddings,
        student: &StudentParams,
        dkt: &DktParams,
        contexts: &[ContextRef],
    ) -> Result<Vec<RerankContext>> {
        let texts = contexts
            .iter()
            .map(|c| pref_prompt_text(&corpus.catalog, &corpus.history(c.learner, c.prefix_len)))
            .collect();
        let prompts = self.embed_texts(texts)?;
        contexts
            .iter()
            .zip(prompts)
            .map(|(c, prompt)| {
                let seq = corpus.sequence(c.learner);
                let positive = seq.steps.get(c.prefix_len).map(|s| s.0);
                Ok(self
                    .rerank_context(
                        emb,
                        student,
                        dkt,
                        c.learner,
                        &seq.steps[..c.prefix_len],
                        prompt,
                        positive,
                    )?
                    .0)
            })
            .collect()
    }

    fn rerank_training_contexts(
        &self,
        corpus: &CorpusView,
        n: usize,
        salt: u64,
    ) -> Vec<ContextRef> {
        let mut contexts = corpus.split.training_contexts();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(salt));
        contexts.shuffle(&mut rng);
        if n > 0 {
            contexts.truncate(n);
        }
        contexts
    }

    fn rerank_hyper(&self) -> RerankHyper {
        let r = &self.cfg.reranker;
        RerankHyper {
            lr: r.lr,
            epochs: r.epochs,
            batch_size: r.batch_size,
            max_negatives: r.max_negatives,
            seed: self.cfg.seed.wrapping_add(5),
        }
    }

    pub fn train_reranker(&mut self) -> Result<StageStatus> {
        let hyper = self.rerank_hyper();
        let params = serde_json::json!({ "hyper": hyper, "reranker": self.cfg.reranker, "seed": self.cfg.seed });
        let mut outputs = vec![RERANKER, "reports/reranker_log.csv"];
        if self.cfg.reranker.ablation {
            outputs.push(RERANKER_NO_DKT);
        }
        self.stage(
            "train-reranker",
            &[RECORDS, CATALOG, EMBEDDINGS, STUDENT_PREF, DKT],
            &[],
            params,
            &outputs,
            |p, _| {
                let corpus = p.corpus()?;
                let emb = p.embeddings(&corpus.catalog)?;
                let student = p.load_student(STUDENT_PREF)?;
                let dkt = p.load_dkt()?;
                let refs = p.rerank_training_contexts(&corpus, p.cfg.reranker.train_contexts, 6);
                let contexts = p.rerank_contexts(&corpus, &emb, &student, &dkt, &refs)?;
                let covered = contexts
                    .iter()
                    .filter(|c| c.positive_index().is_some())
                    .count();
                log::info!(
                    "reranker: {covered} of {} training contexts covered by the coarse pool",
                    contexts.len()
                );
                let r = &p.cfg.reranker;
                let init = RerankerParams::init(
                    emb.dim(),
                    r.d_proj,
                    dkt.hidden(),
                    r.width,
                    p.cfg.seed.wrapping_add(4),
                )?;
                let mut csv = String::from("model,epoch,loss\n");
                let (full, losses) = reranker::train_reranker(
                    &init,
                    &contexts,
                    &emb.learners,
                    &emb.concepts,
                    &hyper,
                )?;
                for (i, l) in losses.iter().enumerate() {
                    csv.push_str(&format!("full,{i},{l}\n"));
                }
                save_ckpt(
                    &p.path(RERANKER),
                    Checkpoint::from_params("reranker", &full.to_param_set())
                        .with_meta("use_dkt", true.into()),
                )?;
                if r.ablation {
                    let init = RerankerParams {
                        use_dkt: false,
                        ..init
                    };
                    let (ablated, losses) = reranker::train_reranker(
                        &init,
                        &contexts,
                        &emb.learners,
                        &emb.concepts,
                        &hyper,
                    )?;
                    for (i, l) in losses.iter().enumerate() {
                        csv.push_str(&format!("no-dkt,{i},{l}\n"));
                    }
                    save_ckpt(
                        &p.path(RERANKER_NO_DKT),
                        Checkpoint::from_params("reranker", &ablated.to_param_set())
                            .with_meta("use_dkt", false.into()),
                    )?;
                }
                write_bytes(&p.path("reports/reranker_log.csv"), csv.as_bytes())
            },
        )
    }

    pub fn load_reranker(&self, rel: &str) -> Result<RerankerParams> {
        let path = self.require(rel)?;
        let ck = Checkpoint::load(&path, "reranker").map_err(Error::io(&path))?;
        let use_dkt = ck
            .meta
            .get("use_dkt")
            .and_then(|v| v.as_bool())
            .unwrap_or(true);
        Ok(RerankerParams::from_param_set(&ck.to_params()?, use_dkt)?)
    }

    // ---- evaluate ----

    fn teacher_eval(
        &self,
        emb: &EntityEmbeddings,
        student: &StudentParams,
        holdout: &[KdExample],
        targets: &[usize],
    ) -> Result<Vec<RankingOutcome>> {
        let mut out = Vec::new();
        for (e, &target) in holdout.iter().zip(targets) {
            let Some(relevant) = teacher_argmax(&e.labels, target) else {
                continue;
            };
            let s = student::coarse_scores(
                &student.query(&e.prompt),
                emb.learners.row(e.learner),
                &emb.concepts,
                student.alpha,
            )?;
            out.push(RankingOutcome {
                target: relevant,
                ranked: student::rank_all(&s, &HashSet::from([target])),
            });
        }
        Ok(out)
    }

    /// Ranking outcomes per evaluation mode, in report order.
    pub fn outcomes(&self) -> Result<Vec<(&'static str, Vec<RankingOutcome>)>> {
        let corpus = self.corpus()?;
        let emb = self.embeddings(&corpus.catalog)?;
        let kd = self.load_student(STUDENT_KD)?;
        let pref = self.load_student(STUDENT_PREF)?;
        let dkt = self.load_dkt()?;
        let full = self.load_reranker(RERANKER)?;
        let ablated = if self.cfg.reranker.ablation {
            Some(self.load_reranker(RERANKER_NO_DKT)?)
        } else {
            None
        };

        let holdout = self.kd_examples(&corpus, |s| &s.holdout)?;
        let targets: Vec<usize> = self
            .labelled(|s| &s.holdout)?
            .iter()
            .map(|(_, r)| r.target)
            .collect();

        let tests: Vec<ContextRef> = corpus
            .split
            .test
            .iter()
            .map(|t| ContextRef {
                learner: t.learner,
                prefix_len: t.prefix_len,
            })
            .collect();
        let target_of: Vec<usize> = corpus.split.test.iter().map(|t| t.concept).collect();

        let coarse_only = |student: &StudentParams| -> Result<Vec<RankingOutcome>> {
            let ctxs = self.rerank_contexts(&corpus, &emb, student, &dkt, &tests)?;
            Ok(ctxs
                .into_iter()
                .zip(&target_of)
                .map(|(c, &t)| {
                    let s = student::coarse_scores(
                        &student.query(&c.prompt),
                        emb.learners.row(c.learner),
                        &emb.concepts,
                        student.alpha,
                    )
                    .expect("shapes checked when building the context");
                    let seen: HashSet<usize> = c.history.iter().copied().collect();
                    RankingOutcome {
                        target: t,
                        ranked: student::rank_all(&s, &seen),
                    }
                })
                .collect())
        };

        let mut modes = vec![
            (
                MODE_KD_TEACHER,
                self.teacher_eval(&emb, &kd, &holdout, &targets)?,
            ),
            (MODE_KD_PREF, coarse_only(&kd)?),
            (
                MODE_TEACHER,
                self.teacher_eval(&emb, &pref, &holdout, &targets)?,
            ),
            (MODE_COARSE, coarse_only(&pref)?),
        ];
        let ctxs = self.rerank_contexts(&corpus, &emb, &pref, &dkt, &tests)?;
        let reranked = |params: &RerankerParams| -> Result<Vec<RankingOutcome>> {
            ctxs.iter()
                .zip(&target_of)
                .map(|(c, &t)| {
                    Ok(RankingOutcome {
                        target: t,
                        ranked: reranker::rerank(c, params, &emb.learners, &emb.concepts)?.ids,
                    })
                })
                .collect()
        };
        modes.push((MODE_RERANKED, reranked(&full)?));
        if let Some(a) = &ablated {
            modes.push((MODE_NO_DKT, reranked(a)?));
        }
        Ok(modes)
    }

    pub fn evaluate(&mut self) -> Result<MetricReport> {
        let mut deps = vec![
            RECORDS,
            CATALOG,
            EMBEDDINGS,
            LABELS,
            SELECTION,
            STUDENT_KD,
            STUDENT_PREF,
            DKT,
            RERANKER,
        ];
        if self.cfg.reranker.ablation {
            deps.push(RERANKER_NO_DKT);
        }
        let params = serde_json::json!({ "seed": self.cfg.seed, "candidates": self.cfg.reranker.candidates });
        self.stage(
            "evaluate",
            &deps,
            &[],
            params,
            &[METRICS, SUMMARY],
            |p, _| {
                let mut report = MetricReport::default();
                for (mode, outcomes) in p.outcomes()? {
                    report.add_seed(p.cfg.seed, mode, &outcomes);
                }
                report.finish();
                write_bytes(&p.path(METRICS), report.to_csv().as_bytes())?;
                write_bytes(&p.path(SUMMARY), report.summary().as_bytes())
            },
        )?;
        read_report(&self.path(METRICS))
    }

    // ---- recommend ----

    /// Top `n` unseen concepts for the learner with key `learner_key`.
    pub fn recommend(&self, learner_key: &str, n: usize) -> Result<Recommendation> {
        let corpus = self.corpus()?;
        let learner = corpus
            .learner_id(learner_key)
            .ok_or_else(|| Error::Usage(format!("unknown learner `{learner_key}`")))?;
        let emb = self.embeddings(&corpus.catalog)?;
        let (student, rr) =
            if self.path(JOINT_STUDENT).exists() && self.path(JOINT_RERANKER).exists() {
                (
                    self.load_student(JOINT_STUDENT)?,
                    self.load_reranker(JOINT_RERANKER)?,
                )
            } else {
                (
                    self.load_student(STUDENT_PREF)?,
                    self.load_reranker(RERANKER)?,
                )
            };
        let dkt = self.load_dkt()?;
        let steps = &corpus.sequence(learner).steps;
        let history: Vec<usize> = steps.iter().map(|s| s.0).collect();
        let prompt = self
            .embed_texts(vec![pref_prompt_text(&corpus.catalog, &history)])?
            .remove(0);
        let (ctx, coarse_ranked) =
            self.rerank_context(&emb, &student, &dkt, learner, steps, prompt, None)?;
        let mut ids = Vec::new();
        let mut scores = Vec::new();
        if !ctx.candidates.is_empty() {
            let fine = reranker::rerank(&ctx, &rr, &emb.learners, &emb.concepts)?;
            ids = fine.ids;
            scores = fine.scores;
        }
        if ids.len() < n {
            let s = student::coarse_scores(
                &student.query(&ctx.prompt),
                emb.learners.row(learner),
                &emb.concepts,
                student.alpha,
            )?;
            for &c in coarse_ranked.iter().skip(ctx.candidates.len()) {
                ids.push(c);
                scores.push(s[c]);
            }
        }
        ids.truncate(n);
        scores.truncate(n);
        Ok(Recommendation {
            learner: learner_key.to_string(),
            ranked: ids
                .iter()
                .map(|&c| corpus.catalog.concepts[c].key.clone())
                .collect(),
            scores,
        })
    }

    // ---- joint ----

    pub fn joint_finetune(&mut self) -> Result<Vec<JointLog>> {
        let j = self.cfg.joint.clone();
        let params = serde_json::json!({ "joint": j, "student": self.cfg.student, "reranker": self.cfg.reranker, "seed": self.cfg.seed });
        let deps = [
            RECORDS,
            CATALOG,
            EMBEDDINGS,
            LABELS,
            SELECTION,
            STUDENT_PREF,
            DKT,
            RERANKER,
        ];
        self.stage(
            "joint-finetune",
            &deps,
            &[],
            params,
            &[JOINT_STUDENT, JOINT_RERANKER, JOINT_LOG],
            |p, _| {
                let corpus = p.corpus()?;
                let emb = p.embeddings(&corpus.catalog)?;
                let student = p.load_student(STUDENT_PREF)?;
                let rr = p.load_reranker(RERANKER)?;
                let dkt = p.load_dkt()?;
                let kd = p.kd_examples(&corpus, |s| &s.train)?;
                let refs = p.rerank_training_contexts(&corpus, j.contexts, 7);
                let pref = p.pref_examples(&corpus, &refs)?;
                let rerank = p.rerank_contexts(&corpus, &emb, &student, &dkt, &refs)?;
                let hyper = JointHyper {
                    lambda: [j.lambda1, j.lambda2, j.lambda3],
                    lr: j.lr,
                    epochs: j.epochs,
                    kd_batch: p.cfg.student.kd.batch_size,
                    batch_size: j.batch_size,
                    tau: p.cfg.student.tau,
                    negatives: p.cfg.student.negatives,
                    max_negatives: p.cfg.reranker.max_negatives,
                    seed: p.cfg.seed.wrapping_add(8),
                };
                let data = JointData {
                    kd: &kd,
                    pref: &pref,
                    rerank: &rerank,
                };
                let result = joint::joint_finetune(
                    &student,
                    &rr,
                    &data,
                    &emb.learners,
                    &emb.concepts,
                    &hyper,
                )?;
                save_ckpt(
                    &p.path(JOINT_STUDENT),
                    Checkpoint::from_params("student", &result.student.to_param_set()),
                )?;
                save_ckpt(
                    &p.path(JOINT_RERANKER),
                    Checkpoint::from_params("reranker", &result.reranker.to_param_set())
                        .with_meta("use_dkt", result.reranker.use_dkt.into()),
                )?;
                let mut csv = String::from("epoch,distill,pref,rerank,total\n");
                for r in &result.log {
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        r.epoch, r.distill, r.pref, r.rerank, r.total
                    ));
                }
                write_bytes(&p.path(JOINT_LOG), csv.as_bytes())
            },
        )?;
        read_joint_log(&self.path(JOINT_LOG))
    }

    /// Every staged step from ingestion through evaluation.
    pub fn run_all(&mut self) -> Result<MetricReport> {
        self.ingest()?;
        self.encode()?;
        self.distill()?;
        self.train_student(Stage::Kd)?;
        self.train_student(Stage::Pref)?;
        self.train_dkt()?;
        self.train_reranker()?;
        self.evaluate()
    }
}

fn save_ckpt(path: &Path, ck: Checkpoint) -> Result<()> {
    ck.save(path).map_err(Error::io(path))
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut report = MetricReport::default();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            continue;
        }
        let metric = match f[2] {
            "HR" => crate::eval::Metric::Hr,
            "NDCG" => crate::eval::Metric::Ndcg,
            _ => crate::eval::Metric::Mrr,
        };
        report.rows.push(crate::eval::ReportRow {
            seed: f[0].to_string(),
            mode: f[1].to_string(),
            metric,
            k: f[3].parse().unwrap_or(0),
            value: f[4].parse().unwrap_or(f64::NAN),
        });
    }
    Ok(report)
}

fn read_joint_log(path: &Path) -> Result<Vec<JointLog>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<f64> = line.split(',').filter_map(|x| x.parse().ok()).collect();
            (f.len() == 5).then(|| JointLog {
                epoch: f[0] as usize,
                distill: f[1],
                pref: f[2],
                rerank: f[3],
                total: f[4],
            })
        })
        .collect())
}

/// Run the staged pipeline once per seed, each in `run_dir/seed-<s>`, and
/// combine the per-seed results with their mean. Seeds run in parallel.
type SeedOutcomes = Vec<(&'static str, Vec<RankingOutcome>)>;

pub fn run_experiment(cfg: &RunConfig, seeds: &[u64]) -> Result<MetricReport> {
    if seeds.is_empty() {
        return Err(Error::Usage("no seeds given".into()));
    }
    let results: Vec<Result<SeedOutcomes>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let mut c = cfg.clone();
                c.seed = seed;
                c.run_dir = cfg.run_dir.join(format!("seed-{seed}"));
                scope.spawn(move || -> Result<_> {
                    let mut p = Pipeline::new(c)?;
                    p.run_all()?;
                    p.outcomes()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed run panicked"))
            .collect()
    });
    let mut report = MetricReport::default();
    for (&seed, r) in seeds.iter().zip(results) {
        for (mode, outcomes) in r? {
            report.add_seed(seed, mode, &outcomes);
        }
    }
    report.finish();
    write_bytes(&cfg.run_dir.join(METRICS), report.to_csv().as_bytes())?;
    write_bytes(&cfg.run_dir.join(SUMMARY), report.summary().as_bytes())?;
    Ok(report)
}

/// Write the synthetic curriculum as a CSV plus its prerequisite file under
/// `dir`, and return a config pointing at them with the run in `dir/run`.
pub fn write_fixture(dir: &Path, world: &crate::synthetic::CurriculumConfig) -> Result<RunConfig> {
    let w = crate::synthetic::CurriculumWorld::generate(world);
    let csv = dir.join("interactions.csv");
    let dag = dir.join("prerequisites.json");
    write_bytes(&csv, w.to_csv().as_bytes())?;
    write_json(&dag, &KeyedDag::from_dag(&w.dag, &w.catalog))?;
    let mut cfg = RunConfig {
        run_dir: dir.join("run"),
        ..RunConfig::default()
    };
    cfg.data.csv = Some(csv);
    cfg.backend.dag = Some(dag);
    Ok(cfg)
}
