//! Teacher scoring of candidate prerequisites and the smoothed soft labels
//! distilled into the student.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Catalog, ContextRef, LearnerSequence};
use crate::gateway::{chat_content, Gateway, GatewayError, LlmRequest};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("malformed teacher response: {0}")]
    Malformed(String),
    #[error(
        "teacher response covers the wrong ids (missing {missing:?}, unexpected {unexpected:?})"
    )]
    Coverage {
        missing: Vec<usize>,
        unexpected: Vec<usize>,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("context {context}: {detail}")]
    Failed { context: String, detail: String },
    #[error("invalid teacher setting: {0}")]
    Config(String),
    #[error("{path}: {detail}")]
    Store { path: String, detail: String },
}

impl TeacherError {
    /// Parse and coverage errors are worth asking again.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            TeacherError::Malformed(_) | TeacherError::Coverage { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, TeacherError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreScale {
    pub min: i64,
    pub max: i64,
}

impl Default for ScoreScale {
    fn default() -> Self {
        Self { min: 0, max: 3 }
    }
}

/// One chunk of candidates to score toward a target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoringContext {
    pub target_id: usize,
    pub target: String,
    /// Most recent last.
    pub history: Vec<String>,
    pub candidates: Vec<(usize, String)>,
    pub scale: ScoreScale,
}

/// Integer score per candidate id.
pub type RawScoreVector = BTreeMap<usize, i64>;

pub const PROMPT_HISTORY_LIMIT: usize = 20;

/// System prompt and task-data JSON for one chunk.
pub fn render_teacher_prompt(ctx: &ScoringContext) -> (String, String) {
    let system = format!(
        "You are an expert learning planner.\n\
         Return ONLY a valid JSON object exactly in the following schema:\n\
         {{ \"scores\": [ {{ \"id\": <int>, \"score\": <int> }} , ... ] }}\n\
         \n\
         Hard rules:\n\
         - Score ONLY the concepts listed in the provided chunk.\n\
         - The target concept is the final goal; DO NOT recommend the target itself.\n\
         - Use integer scores in the closed interval [{}, {}].\n\
         - JSON only. No extra text, no markdown, no explanations.",
        ctx.scale.min, ctx.scale.max
    );
    let start = ctx.history.len().saturating_sub(PROMPT_HISTORY_LIMIT);
    let chunk: Vec<serde_json::Value> = ctx
        .candidates
        .iter()
        .map(|(id, text)| serde_json::json!({ "id": id, "concept": text }))
        .collect();
    let data = serde_json::json!({
        "target": ctx.target,
        "history": &ctx.history[start..],
        "concept_chunk": chunk,
        "score_scale": { "min": ctx.scale.min, "max": ctx.scale.max },
    });
    (
        system,
        serde_json::to_string_pretty(&data).expect("task data serialises"),
    )
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

#[derive(Deserialize)]
struct ScoresBody {
    scores: Vec<ScoreItem>,
}

#[derive(Deserialize)]
struct ScoreItem {
    id: usize,
    score: i64,
}

/// Strict parse of `{"scores":[{"id":..,"score":..},...]}`. Markdown fences
/// are tolerated; out-of-range scores are clamped with a warning.
pub fn parse_scores(
    response: &str,
    expected: &[usize],
    scale: ScoreScale,
) -> Result<RawScoreVector> {
    let body: ScoresBody = serde_json::from_str(strip_fences(response))
        .map_err(|e| TeacherError::Malformed(e.to_string()))?;
    let want: BTreeSet<usize> = expected.iter().copied().collect();
    let mut out = RawScoreVector::new();
    let mut unexpected = Vec::new();
    for item in body.scores {
        if !want.contains(&item.id) || out.contains_key(&item.id) {
            unexpected.push(item.id);
            continue;
        }
        let clamped = item.score.clamp(scale.min, scale.max);
        if clamped != item.score {
            log::warn!(
                "teacher score {} for id {} clamped to {clamped}",
                item.score,
                item.id
            );
        }
        out.insert(item.id, clamped);
    }
    let missing: Vec<usize> = want
        .iter()
        .filter(|id| !out.contains_key(id))
        .copied()
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(TeacherError::Coverage {
            missing,
            unexpected,
        });
    }
    Ok(out)
}

/// Contiguous chunks of at most `size`; the last may be short.
pub fn chunk_candidates<T: Clone>(candidates: &[T], size: usize) -> Result<Vec<Vec<T>>> {
    if size == 0 {
        return Err(TeacherError::Config("chunk size must be at least 1".into()));
    }
    Ok(candidates.chunks(size).map(|c| c.to_vec()).collect())
}

/// Max-normalise, renormalise and smooth raw scores into a distribution over M.
///
/// `p_j = max(0, a_j / max(1, max_k a_k)) / sum_k(...)`, `y_j = (1-eps) p_j + eps/M`.
/// When every score is zero the normaliser vanishes and `p` falls back to uniform.
pub fn soft_labels(scores: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(TeacherError::Config(format!(
            "epsilon must lie in [0, 1), got {epsilon}"
        )));
    }
    let m = scores.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let top = scores
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1.0);
    let clipped: Vec<f64> = scores.iter().map(|&a| (a / top).max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    let uniform = 1.0 / m as f64;
    Ok(clipped
        .iter()
        .map(|&c| {
            let p = if total > 0.0 { c / total } else { uniform };
            (1.0 - epsilon) * p + epsilon * uniform
        })
        .collect())
}

/// Scores one chunk of candidates.
pub trait Teacher: Send + Sync {
    fn score_chunk(&self, ctx: &ScoringContext) -> Result<RawScoreVector>;
}

/// Planted prerequisite graph: `parents[k]` are the direct prerequisites of `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrerequisiteDag {
    pub parents: Vec<Vec<usize>>,
}

impl PrerequisiteDag {
    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    /// Indirect prerequisites of `k` (ancestors that are not direct parents).
    pub fn indirect(&self, k: usize) -> BTreeSet<usize> {
        let direct: BTreeSet<usize> = self.parents[k].iter().copied().collect();
        let mut seen = BTreeSet::new();
        let mut stack: Vec<usize> = self.parents[k].clone();
        while let Some(p) = stack.pop() {
            for &q in &self.parents[p] {
                if seen.insert(q) {
                    stack.push(q);
                }
            }
        }
        seen.retain(|q| !direct.contains(q) && *q != k);
        seen
    }

    pub fn children(&self, k: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| self.parents[j].contains(&k))
            .collect()
    }
}

/// Model-free teacher: 3 for a direct prerequisite of the target, 1 for an
/// indirect one, 0 otherwise (clamped into the requested scale).
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    pub dag: PrerequisiteDag,
}

impl Teacher for SyntheticTeacher {
    fn score_chunk(&self, ctx: &ScoringContext) -> Result<RawScoreVector> {
        let direct = &self.dag.parents[ctx.target_id];
        let indirect = self.dag.indirect(ctx.target_id);
        Ok(ctx
            .candidates
            .iter()
            .map(|&(id, _)| {
                let a = if direct.contains(&id) {
                    3
                } else if indirect.contains(&id) {
                    1
                } else {
                    0
                };
                (id, i64::clamp(a, ctx.scale.min, ctx.scale.max))
            })
            .collect())
    }
}

/// Chat-model teacher with parse retries.
pub struct LlmTeacher {
    gateway: Arc<Gateway>,
    model: String,
    temperature: f64,
    parse_retries: u32,
}

impl LlmTeacher {
    pub fn new(gateway: Arc<Gateway>, model: impl Into<String>) -> Self {
        Self {
            gateway,
            model: model.into(),
            temperature: 0.0,
            parse_retries: 2,
        }
    }

    pub fn with_parse_retries(mut self, retries: u32) -> Self {
        self.parse_retries = retries;
        self
    }

    /// Request for attempt `n`; retries carry a distinct `seed` so they are
    /// neither served from nor collide with the cached first answer.
    pub fn request(&self, ctx: &ScoringContext, attempt: u32) -> LlmRequest {
        let (system, data) = render_teacher_prompt(ctx);
        let mut req = LlmRequest::chat(&self.model, &system, &data, self.temperature);
        if attempt > 0 {
            let mut body: serde_json::Value =
                serde_json::from_str(&req.payload).expect("own payload is json");
            body["seed"] = serde_json::json!(attempt);
            req.payload = body.to_string();
        }
        req
    }
}

impl Teacher for LlmTeacher {
    fn score_chunk(&self, ctx: &ScoringContext) -> Result<RawScoreVector> {
        let expected: Vec<usize> = ctx.candidates.iter().map(|c| c.0).collect();
        let mut attempt = 0;
        loop {
            let resp = self.gateway.call(&self.request(ctx, attempt))?;
            let parsed = chat_content(&resp.body)
                .map_err(TeacherError::from)
                .and_then(|text| parse_scores(&text, &expected, ctx.scale));
            match parsed {
                Ok(scores) => return Ok(scores),
                Err(e) if e.is_retryable() && attempt < self.parse_retries => {
                    log::warn!(
                        "teacher retry {} for target {}: {e}",
                        attempt + 1,
                        ctx.target_id
                    );
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherParams {
    pub chunk_size: usize,
    pub epsilon: f64,
    pub scale: ScoreScale,
    pub max_in_flight: usize,
}

impl Default for TeacherParams {
    fn default() -> Self {
        Self {
            chunk_size: 50,
            epsilon: 0.1,
            scale: ScoreScale::default(),
            max_in_flight: 4,
        }
    }
}

/// Score every non-target concept toward `target` and smooth into a label over M.
pub fn label_context(
    teacher: &dyn Teacher,
    catalog: &Catalog,
    history: &[usize],
    target: usize,
    params: &TeacherParams,
) -> Result<Vec<f64>> {
    let m = catalog.num_concepts();
    let candidates: Vec<(usize, String)> = (0..m)
        .filter(|&j| j != target)
        .map(|j| (j, catalog.concept_text(j).to_string()))
        .collect();
    let mut raw = vec![0.0; m];
    for chunk in chunk_candidates(&candidates, params.chunk_size)? {
        let ctx = ScoringContext {
            target_id: target,
            target: catalog.concept_text(target).to_string(),
            history: catalog.concept_texts(history),
            candidates: chunk,
            scale: params.scale,
        };
        for (id, a) in teacher.score_chunk(&ctx)? {
            raw[id] = a as f64;
        }
    }
    soft_labels(&raw, params.epsilon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub ctx: String,
    pub target: usize,
    pub y: Vec<f64>,
}

/// JSON Lines store of soft labels, write-once per context key.
#[derive(Debug)]
pub struct SoftLabelStore {
    path: Option<PathBuf>,
    labels: BTreeMap<String, LabelRecord>,
}

impl SoftLabelStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            labels: BTreeMap::new(),
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let store_err = |detail: String| TeacherError::Store {
            path: path.display().to_string(),
            detail,
        };
        let mut labels = BTreeMap::new();
        if path.exists() {
            let file = fs::File::open(path).map_err(|e| store_err(e.to_string()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| store_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: LabelRecord = serde_json::from_str(&line)
                    .map_err(|e| store_err(format!("line {}: {e}", i + 1)))?;
                labels.entry(r.ctx.clone()).or_insert(r);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            labels,
        })
    }

    pub fn get(&self, key: &str) -> Option<&LabelRecord> {
        self.labels.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.labels.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &LabelRecord> {
        self.labels.values()
    }

    /// Append records whose keys are new, in the given order.
    pub fn append(&mut self, records: Vec<LabelRecord>) -> Result<()> {
        let fresh: Vec<LabelRecord> = records
            .into_iter()
            .filter(|r| !self.labels.contains_key(&r.ctx))
            .collect();
        if let Some(path) = &self.path {
            let store_err = |detail: String| TeacherError::Store {
                path: path.display().to_string(),
                detail,
            };
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| store_err(e.to_string()))?;
            }
            let mut buf = String::new();
            for r in &fresh {
                buf.push_str(&serde_json::to_string(r).expect("label serialises"));
                buf.push('\n');
            }
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| store_err(e.to_string()))?;
            f.write_all(buf.as_bytes())
                .map_err(|e| store_err(e.to_string()))?;
        }
        for r in fresh {
            self.labels.insert(r.ctx.clone(), r);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub requested: usize,
    pub already_stored: usize,
    pub labelled: usize,
    pub failed: Vec<(String, String)>,
}

impl DistillSummary {
    /// Fraction of requested contexts that now have labels.
    pub fn coverage(&self) -> f64 {
        if self.requested == 0 {
            1.0
        } else {
            (self.already_stored + self.labelled) as f64 / self.requested as f64
        }
    }
}

/// Label each context missing from `store`. Contexts run concurrently in
/// batches; each batch is appended in input order, so a crash loses at most
/// one batch. Failed contexts are logged, skipped and reported.
pub fn distill_corpus(
    contexts: &[ContextRef],
    sequences: &[LearnerSequence],
    catalog: &Catalog,
    teacher: &dyn Teacher,
    params: &TeacherParams,
    store: &mut SoftLabelStore,
) -> Result<DistillSummary> {
    if params.chunk_size == 0 {
        return Err(TeacherError::Config("chunk size must be at least 1".into()));
    }
    let by_learner: BTreeMap<usize, &LearnerSequence> =
        sequences.iter().map(|s| (s.learner, s)).collect();
    let todo: Vec<ContextRef> = contexts
        .iter()
        .filter(|c| !store.contains(&c.key()))
        .copied()
        .collect();
    let mut summary = DistillSummary {
        requested: contexts.len(),
        already_stored: contexts.len() - todo.len(),
        labelled: 0,
        failed: Vec::new(),
    };
    const BATCH: usize = 64;
    for batch in todo.chunks(BATCH) {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<LabelRecord>>>> =
            batch.iter().map(|_| Mutex::new(None)).collect();
        let workers = params.max_in_flight.max(1).min(batch.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= batch.len() {
                        return;
                    }
                    let c = batch[i];
                    let result = match by_learner.get(&c.learner) {
                        Some(seq) if c.prefix_len < seq.len() => {
                            let history: Vec<usize> =
                                seq.steps[..c.prefix_len].iter().map(|s| s.0).collect();
                            let target = seq.steps[c.prefix_len].0;
                            label_context(teacher, catalog, &history, target, params).map(|y| {
                                LabelRecord {
                                    ctx: c.key(),
                                    target,
                                    y,
                                }
                            })
                        }
                        _ => Err(TeacherError::Failed {
                            context: c.key(),
                            detail: "no such training step".into(),
                        }),
                    };
                    *slots[i].lock().unwrap() = Some(result);
                });
            }
        });
        let mut done = Vec::new();
        for (c, slot) in batch.iter().zip(slots) {
            match slot.into_inner().unwrap().expect("slot filled") {
                Ok(r) => done.push(r),
                Err(e) => {
                    log::warn!("context {} failed: {e}", c.key());
                    summary.failed.push((c.key(), e.to_string()));
                }
            }
        }
        summary.labelled += done.len();
        store.append(done)?;
    }
    Ok(summary)
}
