//! Anchor-token prompts and the backends that turn them into unit-norm embeddings.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::Catalog;
use crate::gateway::{embedding_vector, Gateway, GatewayError, LlmRequest};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("degenerate embedding")]
    Degenerate,
    #[error("embedding has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no recorded vector for {anchor} prompt {excerpt:?}")]
    NotRecorded {
        anchor: &'static str,
        excerpt: String,
    },
    #[error("{path}: {detail}")]
    Store { path: String, detail: String },
    #[error("{} embeddings missing after failure ({first})", remaining.len())]
    Incomplete {
        remaining: Vec<(Kind, usize)>,
        first: Box<EncoderError>,
    },
}

pub type Result<T> = std::result::Result<T, EncoderError>;

pub type Embedding = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Anchor {
    #[serde(rename = "[C]")]
    Concept,
    #[serde(rename = "[S]")]
    Student,
}

impl Anchor {
    pub fn token(self) -> &'static str {
        match self {
            Anchor::Concept => "[C]",
            Anchor::Student => "[S]",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AnchorPrompt {
    pub text: String,
    pub anchor: Anchor,
}

pub fn render_concept_prompt(description: &str) -> AnchorPrompt {
    AnchorPrompt {
        text: format!(
            "Extract the concept's description information and compress it into one word for recommendation.\n\
             The description is: {description}.\n\
             The compression word is: '[C]'."
        ),
        anchor: Anchor::Concept,
    }
}

pub fn render_student_prompt(profile: &str) -> AnchorPrompt {
    AnchorPrompt {
        text: format!(
            "Extract the student's profile information and compress it into one word for identification.\n\
             The description is: {profile}.\n\
             The compression word is: '[S]'."
        ),
        anchor: Anchor::Student,
    }
}

/// Ranking prompts are embedded with concept-anchor semantics.
pub fn query_prompt(text: String) -> AnchorPrompt {
    AnchorPrompt {
        text,
        anchor: Anchor::Concept,
    }
}

/// Produces raw (unnormalised) vectors for anchor prompts.
pub trait EncoderBackend: Send + Sync {
    fn dim(&self) -> usize;
    fn raw(&self, prompt: &AnchorPrompt) -> Result<Vec<f64>>;
}

/// Scale `v` to unit length; zero or non-finite vectors are rejected.
pub fn normalize(mut v: Vec<f64>) -> Result<Embedding> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EncoderError::Degenerate);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

pub fn encode(prompt: &AnchorPrompt, backend: &dyn EncoderBackend) -> Result<Embedding> {
    let v = backend.raw(prompt)?;
    if v.len() != backend.dim() {
        return Err(EncoderError::Dimension {
            expected: backend.dim(),
            got: v.len(),
        });
    }
    normalize(v)
}

/// Deterministic offline backend.
///
/// Each line of the prompt is split into segments: the label before the
/// first `": "`, then the body items separated by `" | "` (trimmed, trailing
/// period dropped). Every segment maps to a seeded Gaussian vector and the
/// prompt vector is their sum weighted `gamma^(n-1-i)`, so later segments
/// dominate and prompts sharing segments share direction.
#[derive(Debug, Clone)]
pub struct StubBackend {
    pub seed: u64,
    pub dim: usize,
    pub gamma: f64,
}

impl StubBackend {
    pub const DEFAULT_GAMMA: f64 = 0.6;

    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            dim,
            gamma: Self::DEFAULT_GAMMA,
        }
    }

    pub fn segments(text: &str) -> Vec<&str> {
        let mut out = Vec::new();
        for line in text.split('\n') {
            match line.split_once(": ") {
                Some((label, body)) => {
                    out.push(label);
                    out.extend(body.split(" | ").map(|item| {
                        let item = item.trim();
                        item.strip_suffix('.').unwrap_or(item)
                    }));
                }
                None => out.push(line),
            }
        }
        out
    }

    fn segment_vector(&self, anchor: Anchor, segment: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(anchor.token().as_bytes());
        h.update([0]);
        h.update(segment.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

impl EncoderBackend for StubBackend {
    fn dim(&self) -> usize {
        self.dim
    }

    fn raw(&self, prompt: &AnchorPrompt) -> Result<Vec<f64>> {
        let segs = Self::segments(&prompt.text);
        let n = segs.len();
        let mut total = vec![0.0; self.dim];
        for (i, s) in segs.iter().enumerate() {
            let w = self.gamma.powi((n - 1 - i) as i32);
            let g = normalize(self.segment_vector(prompt.anchor, s))?;
            total.iter_mut().zip(g).for_each(|(t, x)| *t += w * x);
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordedVector {
    anchor: Anchor,
    text: String,
    v: Vec<f64>,
}

/// Replays vectors exported from an offline model run.
/// File format: JSON Lines `{"anchor": "[C]"|"[S]", "text": ..., "v": [...]}`.
#[derive(Debug, Clone)]
pub struct RecordedBackend {
    dim: usize,
    vectors: HashMap<(Anchor, String), Vec<f64>>,
}

impl RecordedBackend {
    pub fn load(path: &Path) -> Result<Self> {
        let store_err = |detail: String| EncoderError::Store {
            path: path.display().to_string(),
            detail,
        };
        let file = fs::File::open(path).map_err(|e| store_err(e.to_string()))?;
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| store_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: RecordedVector = serde_json::from_str(&line)
                .map_err(|e| store_err(format!("line {}: {e}", i + 1)))?;
            match dim {
                None => dim = Some(r.v.len()),
                Some(d) if d != r.v.len() => {
                    return Err(EncoderError::Dimension {
                        expected: d,
                        got: r.v.len(),
                    })
                }
                _ => {}
            }
            vectors.insert((r.anchor, r.text), r.v);
        }
        Ok(Self {
            dim: dim.unwrap_or(0),
            vectors,
        })
    }
}

impl EncoderBackend for RecordedBackend {
    fn dim(&self) -> usize {
        self.dim
    }

    fn raw(&self, prompt: &AnchorPrompt) -> Result<Vec<f64>> {
        self.vectors
            .get(&(prompt.anchor, prompt.text.clone()))
            .cloned()
            .ok_or_else(|| EncoderError::NotRecorded {
                anchor: prompt.anchor.token(),
                excerpt: prompt.text.chars().take(80).collect(),
            })
    }
}

/// Embeds the whole rendered prompt through an embeddings endpoint. This
/// approximates anchor-state extraction, which serving APIs do not expose.
pub struct RemoteBackend {
    gateway: Arc<Gateway>,
    model: String,
    dim: usize,
}

impl RemoteBackend {
    pub fn new(gateway: Arc<Gateway>, model: impl Into<String>, dim: usize) -> Self {
        Self {
            gateway,
            model: model.into(),
            dim,
        }
    }
}

impl EncoderBackend for RemoteBackend {
    fn dim(&self) -> usize {
        self.dim
    }

    fn raw(&self, prompt: &AnchorPrompt) -> Result<Vec<f64>> {
        let resp = self
            .gateway
            .call(&LlmRequest::embed(&self.model, &prompt.text))?;
        Ok(embedding_vector(&resp.body)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Concept,
    Student,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreRecord {
    kind: Kind,
    id: usize,
    v: Vec<f64>,
}

/// Append-only JSON Lines store of entity embeddings, write-once per `(kind, id)`.
#[derive(Debug)]
pub struct EmbeddingStore {
    path: Option<PathBuf>,
    rows: BTreeMap<(Kind, usize), Embedding>,
}

impl EmbeddingStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            rows: BTreeMap::new(),
        }
    }

    /// Open `path`, loading any rows a previous run completed.
    pub fn open(path: &Path) -> Result<Self> {
        let mut rows = BTreeMap::new();
        if path.exists() {
            let store_err = |detail: String| EncoderError::Store {
                path: path.display().to_string(),
                detail,
            };
            let file = fs::File::open(path).map_err(|e| store_err(e.to_string()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| store_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: StoreRecord = serde_json::from_str(&line)
                    .map_err(|e| store_err(format!("line {}: {e}", i + 1)))?;
                rows.entry((r.kind, r.id)).or_insert(r.v);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            rows,
        })
    }

    pub fn get(&self, kind: Kind, id: usize) -> Option<&Embedding> {
        self.rows.get(&(kind, id))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Insert rows not yet present; new rows are appended in `(kind, id)` order.
    pub fn insert_all(&mut self, mut rows: Vec<(Kind, usize, Embedding)>) -> Result<()> {
        rows.sort_by_key(|r| (r.0, r.1));
        rows.retain(|r| !self.rows.contains_key(&(r.0, r.1)));
        if let Some(path) = &self.path {
            let store_err = |detail: String| EncoderError::Store {
                path: path.display().to_string(),
                detail,
            };
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| store_err(e.to_string()))?;
            }
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| store_err(e.to_string()))?;
            let mut buf = String::new();
            for (kind, id, v) in &rows {
                let rec = StoreRecord {
                    kind: *kind,
                    id: *id,
                    v: v.clone(),
                };
                buf.push_str(&serde_json::to_string(&rec).expect("record serialises"));
                buf.push('\n');
            }
            f.write_all(buf.as_bytes())
                .map_err(|e| store_err(e.to_string()))?;
        }
        for (kind, id, v) in rows {
            self.rows.insert((kind, id), v);
        }
        Ok(())
    }

    /// Stack rows `0..n` of `kind` into an `[n, d]` matrix.
    pub fn matrix(&self, kind: Kind, n: usize, dim: usize) -> Option<Tensor> {
        let mut data = Vec::with_capacity(n * dim);
        for id in 0..n {
            let v = self.get(kind, id)?;
            if v.len() != dim {
                return None;
            }
            data.extend_from_slice(v);
        }
        Tensor::new(vec![n, dim], data).ok()
    }
}

/// Encode prompts with at most `max_in_flight` concurrent backend calls.
/// Results keep input order; failed entries are `Err`.
pub fn encode_many(
    prompts: &[AnchorPrompt],
    backend: &dyn EncoderBackend,
    max_in_flight: usize,
) -> Vec<Result<Embedding>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Embedding>>>> =
        prompts.iter().map(|_| Mutex::new(None)).collect();
    let workers = max_in_flight.max(1).min(prompts.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= prompts.len() {
                    return;
                }
                *slots[i].lock().unwrap() = Some(encode(&prompts[i], backend));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("slot filled"))
        .collect()
}

/// Learner matrix `E` `[N, d]` and concept matrix `C` `[M, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityEmbeddings {
    pub learners: Tensor,
    pub concepts: Tensor,
}

impl EntityEmbeddings {
    pub fn dim(&self) -> usize {
        self.concepts.cols()
    }
}

/// Encode every catalog entry missing from `store`, then assemble `E` and `C`.
pub fn encode_catalog(
    catalog: &Catalog,
    backend: &dyn EncoderBackend,
    store: &mut EmbeddingStore,
    max_in_flight: usize,
) -> Result<EntityEmbeddings> {
    let mut todo: Vec<(Kind, usize, AnchorPrompt)> = Vec::new();
    for c in &catalog.concepts {
        if store.get(Kind::Concept, c.id).is_none() {
            todo.push((Kind::Concept, c.id, render_concept_prompt(&c.text)));
        }
    }
    for l in &catalog.learners {
        if store.get(Kind::Student, l.id).is_none() {
            todo.push((Kind::Student, l.id, render_student_prompt(&l.profile)));
        }
    }
    let prompts: Vec<AnchorPrompt> = todo.iter().map(|t| t.2.clone()).collect();
    let results = encode_many(&prompts, backend, max_in_flight);

    let mut done = Vec::new();
    let mut remaining = Vec::new();
    let mut first = None;
    for ((kind, id, _), r) in todo.into_iter().zip(results) {
        match r {
            Ok(v) => done.push((kind, id, v)),
            Err(e) => {
                remaining.push((kind, id));
                first.get_or_insert(e);
            }
        }
    }
    store.insert_all(done)?;
    if let Some(first) = first {
        return Err(EncoderError::Incomplete {
            remaining,
            first: Box::new(first),
        });
    }
    let dim = backend.dim();
    let concepts = store.matrix(Kind::Concept, catalog.num_concepts(), dim);
    let learners = store.matrix(Kind::Student, catalog.num_learners(), dim);
    match (learners, concepts) {
        (Some(learners), Some(concepts)) => Ok(EntityEmbeddings { learners, concepts }),
        _ => Err(EncoderError::Store {
            path: store
                .path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            detail: format!("stored vectors do not match dimension {dim}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concept_prompt_template() {
        let p = render_concept_prompt("fractions");
        assert!(p.text.contains("The description is: fractions."));
        assert!(p.text.contains("'[C]'"));
        assert_eq!(p.text.matches("[C]").count(), 1);
        assert_eq!(
            render_concept_prompt("a\nb").text.matches("a\nb").count(),
            1
        );
        assert_ne!(
            render_concept_prompt("x").text,
            render_concept_prompt("y").text
        );
    }

    #[test]
    fn student_prompt_template() {
        let p = render_student_prompt("student 7");
        assert!(p.text.ends_with("The compression word is: '[S]'."));
        assert!(p.text.starts_with("Extract the student's profile information and compress it into one word for identification."));
        assert_eq!(p.anchor, Anchor::Student);
    }

    #[test]
    fn segments_split_labels_and_items() {
        let segs = StubBackend::segments("History: a | b.\nTarget: t\nRecommend the next concept:");
        assert_eq!(
            segs,
            vec![
                "History",
                "a",
                "b",
                "Target",
                "t",
                "Recommend the next concept:"
            ]
        );
    }

    #[test]
    fn stub_is_unit_norm_and_deterministic() {
        let b = StubBackend::new(3, 32);
        let p = render_concept_prompt("fractions");
        let v = encode(&p, &b).unwrap();
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(v, encode(&p, &StubBackend::new(3, 32)).unwrap());
        assert_ne!(v, encode(&p, &StubBackend::new(4, 32)).unwrap());
    }

    struct Zero;
    impl EncoderBackend for Zero {
        fn dim(&self) -> usize {
            4
        }
        fn raw(&self, _: &AnchorPrompt) -> Result<Vec<f64>> {
            Ok(vec![0.0; 4])
        }
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let err = encode(&render_concept_prompt("x"), &Zero).unwrap_err();
        assert_eq!(err.to_string(), "degenerate embedding");
    }

    #[test]
    fn empty_catalog_gives_empty_matrices() {
        let mut store = EmbeddingStore::in_memory();
        let e =
            encode_catalog(&Catalog::default(), &StubBackend::new(0, 8), &mut store, 4).unwrap();
        assert_eq!(e.concepts.shape(), &[0, 8]);
        assert_eq!(e.learners.shape(), &[0, 8]);
    }
}
