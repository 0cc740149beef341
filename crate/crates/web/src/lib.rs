//! Browser bindings for three small explorers: teacher soft labels,
//! temperature-scaled distillation, and teacher labels over a generated
//! curriculum. Everything runs client side; nothing here touches the network.

use conceptrec::student;
use conceptrec::synthetic::{CurriculumConfig, CurriculumWorld};
use conceptrec::teacher::{self, ScoreScale, ScoringContext, SyntheticTeacher, Teacher};
use conceptrec::tensor;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Smoothed teacher distribution for integer-ish scores.
#[wasm_bindgen]
pub fn soft_labels(scores: Vec<f64>, epsilon: f64) -> Result<Vec<f64>, JsError> {
    teacher::soft_labels(&scores, epsilon).map_err(js_err)
}

#[derive(Serialize)]
struct DistillView {
    student: Vec<f64>,
    labels: Vec<f64>,
    loss: f64,
    /// Loss minus label entropy: the part the student can still remove.
    kl: f64,
}

/// Student softmax at temperature `tau` next to the teacher labels, with the
/// distillation cross-entropy. Returns JSON.
#[wasm_bindgen]
pub fn distill_view(
    logits: Vec<f64>,
    scores: Vec<f64>,
    epsilon: f64,
    tau: f64,
) -> Result<String, JsError> {
    let labels = teacher::soft_labels(&scores, epsilon).map_err(js_err)?;
    let loss = student::distill_loss(&logits, &labels, tau).map_err(js_err)?;
    let entropy: f64 = -labels
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>();
    let view = DistillView {
        student: tensor::softmax(&logits, tau),
        labels,
        loss,
        kl: loss - entropy,
    };
    serde_json::to_string(&view).map_err(js_err)
}

#[derive(Serialize)]
struct CurriculumView {
    levels: Vec<usize>,
    parents: Vec<Vec<usize>>,
    alternative: Vec<usize>,
    /// First learner's path as `[concept, correct]` pairs.
    path: Vec<(usize, bool)>,
    target: usize,
    labels: Vec<f64>,
}

/// Generate a curriculum and score every concept as a prerequisite of
/// `target` with the graph-reading teacher. Returns JSON.
#[wasm_bindgen]
pub fn curriculum(seed: u64, target: usize, epsilon: f64) -> Result<String, JsError> {
    let cfg = CurriculumConfig {
        learners: 1,
        seed,
        ..Default::default()
    };
    let world = CurriculumWorld::generate(&cfg);
    let m = world.dag.len();
    if target >= m {
        return Err(JsError::new(&format!("target must be below {m}")));
    }
    let ctx = ScoringContext {
        target_id: target,
        target: world.catalog.concepts[target].text.clone(),
        history: Vec::new(),
        candidates: world
            .catalog
            .concepts
            .iter()
            .map(|c| (c.id, c.text.clone()))
            .collect(),
        scale: ScoreScale::default(),
    };
    let raw = SyntheticTeacher {
        dag: world.dag.clone(),
    }
    .score_chunk(&ctx)
    .map_err(js_err)?;
    let scores: Vec<f64> = (0..m)
        .map(|j| raw.get(&j).copied().unwrap_or(0) as f64)
        .collect();
    let labels = teacher::soft_labels(&scores, epsilon).map_err(js_err)?;
    let view = CurriculumView {
        levels: cfg.levels,
        parents: world.dag.parents,
        alternative: world.alternative,
        path: world
            .records
            .iter()
            .map(|r| (r.concept, r.correct))
            .collect(),
        target,
        labels,
    };
    serde_json::to_string(&view).map_err(js_err)
}
