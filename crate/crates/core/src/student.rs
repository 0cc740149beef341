//! Coarse ranker: a projected prompt query plus a learner-affinity term,
//! trained first to match teacher labels and then on observed next steps.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    self, init_uniform, Adam, AdamConfig, ParamSet, Tape, Tensor, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum StudentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid student setting: {0}")]
    Config(String),
    #[error("no soft labels available; run distill first")]
    MissingLabels,
    #[error("k = {k} exceeds the {m} available concepts")]
    TopK { k: usize, m: usize },
}

pub type Result<T> = std::result::Result<T, StudentError>;

/// History items kept in ranking prompts, most recent last.
pub const PROMPT_HISTORY_LIMIT: usize = 20;

pub fn render_kd_prompt(history: &[String], target: &str) -> String {
    format!(
        "History: {}\nTarget: {target}\nRecommend the next concept:",
        history.join(" | ")
    )
}

pub fn render_pref_prompt(history: &[String]) -> String {
    format!(
        "History: {}\nRecommend the next concept:",
        history.join(" | ")
    )
}

/// The trailing window of `history` that goes into a prompt.
pub fn prompt_window<T>(history: &[T]) -> &[T] {
    &history[history.len().saturating_sub(PROMPT_HISTORY_LIMIT)..]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentParams {
    /// `[d, d]` projection applied to the prompt embedding.
    pub w_proj: Tensor,
    pub alpha: f64,
}

impl StudentParams {
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w_proj: init_uniform(&[dim, dim], dim, &mut rng),
            alpha: 0.5,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_proj.rows()
    }

    pub fn to_param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        set.push("w_proj", self.w_proj.clone());
        set.push("alpha", Tensor::scalar(self.alpha));
        set
    }

    pub fn from_param_set(set: &ParamSet) -> Result<Self> {
        let get = |name: &str| {
            set.position(name)
                .map(|i| set.get(i).clone())
                .ok_or_else(|| StudentError::Config(format!("checkpoint lacks `{name}`")))
        };
        let w_proj = get("w_proj")?;
        if w_proj.shape().len() != 2 || w_proj.rows() != w_proj.cols() {
            return Err(StudentError::Config(format!(
                "w_proj must be square, got {:?}",
                w_proj.shape()
            )));
        }
        Ok(Self {
            w_proj,
            alpha: get("alpha")?.item(),
        })
    }

    pub fn query(&self, prompt_embedding: &[f64]) -> Vec<f64> {
        tensor::matvec(&self.w_proj, prompt_embedding)
    }
}

/// `s_j = q_w . c_j + alpha * e_u . c_j` for every concept row of `concepts`.
pub fn coarse_scores(q_w: &[f64], e_u: &[f64], concepts: &Tensor, alpha: f64) -> Result<Vec<f64>> {
    let d = concepts.cols();
    if q_w.len() != d || e_u.len() != d {
        return Err(StudentError::Tensor(TensorError::Shape {
            op: "coarse_scores",
            detail: format!(
                "q_w {} and e_u {} against concept width {d}",
                q_w.len(),
                e_u.len()
            ),
        }));
    }
    Ok((0..concepts.rows())
        .map(|j| {
            let c = concepts.row(j);
            tensor::dot(q_w, c) + alpha * tensor::dot(e_u, c)
        })
        .collect())
}

/// Cross-entropy of the temperature softmax of `s` against teacher labels `y`.
pub fn distill_loss(s: &[f64], y: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if s.len() != y.len() {
        return Err(StudentError::Tensor(TensorError::Shape {
            op: "distill_loss",
            detail: format!("{} scores vs {} labels", s.len(), y.len()),
        }));
    }
    let ls = tensor::log_softmax(s, tau);
    Ok(-y.iter().zip(&ls).map(|(a, b)| a * b).sum::<f64>())
}

/// Contrastive loss of the positive against `negatives` under the coarse score.
pub fn pref_loss(
    q_w: &[f64],
    e_u: &[f64],
    c_plus: &[f64],
    negatives: &[&[f64]],
    alpha: f64,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(StudentError::Config(
            "preference loss needs at least one negative".into(),
        ));
    }
    let phi = |c: &[f64]| tensor::dot(q_w, c) + alpha * tensor::dot(e_u, c);
    let mut logits = vec![phi(c_plus)];
    logits.extend(negatives.iter().map(|c| phi(c)));
    Ok(-tensor::log_softmax(&logits, 1.0)[0])
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(StudentError::Config(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// Concept ids in rank order with their scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RankedList {
    /// Order `ids` by descending score, ties to the lower id.
    pub fn from_scores(ids: &[usize], scores: &[f64]) -> Self {
        let mut pairs: Vec<(usize, f64)> =
            ids.iter().copied().zip(scores.iter().copied()).collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Self {
            ids: pairs.iter().map(|p| p.0).collect(),
            scores: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn truncate(&mut self, k: usize) {
        self.ids.truncate(k);
        self.scores.truncate(k);
    }

    /// 1-based position of `id`, if present.
    pub fn rank_of(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&x| x == id).map(|p| p + 1)
    }
}

/// Indices of the `k` largest scores; ties go to the lower id.
pub fn top_k(s: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > s.len() {
        return Err(StudentError::TopK { k, m: s.len() });
    }
    let mut ids = rank_all(s, &HashSet::new());
    ids.truncate(k);
    Ok(ids)
}

/// Every id not in `exclude`, by descending score then ascending id.
pub fn rank_all(s: &[f64], exclude: &HashSet<usize>) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..s.len()).filter(|j| !exclude.contains(j)).collect();
    ids.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    ids
}

/// Tape handles for the student's trainables.
#[derive(Debug, Clone, Copy)]
pub struct StudentVars {
    pub w_proj: Var,
    pub alpha: Var,
}

impl StudentVars {
    pub fn bind(tape: &mut Tape, params: &StudentParams) -> Self {
        Self {
            w_proj: tape.param(params.w_proj.clone()),
            alpha: tape.param(Tensor::scalar(params.alpha)),
        }
    }
}

/// Coarse scores on the tape for the rows of `concepts` (`[n, d]`).
pub fn score_on_tape(
    tape: &mut Tape,
    vars: StudentVars,
    prompt: &[f64],
    e_u: &[f64],
    concepts: &Tensor,
) -> tensor::Result<Var> {
    let e = tape.constant(Tensor::vector(prompt.to_vec()));
    let q = tape.matmul(vars.w_proj, e)?;
    let c = tape.constant(concepts.clone());
    let from_query = tape.matmul(c, q)?;
    let affinity = tape.constant(Tensor::vector(tensor::matvec(concepts, e_u)));
    let personal = tape.mul_scalar(affinity, vars.alpha)?;
    tape.add(from_query, personal)
}

/// `-sum_j y_j log softmax(s / tau)_j` on the tape.
pub fn distill_loss_on_tape(tape: &mut Tape, s: Var, y: &[f64], tau: f64) -> tensor::Result<Var> {
    let ls = tape.log_softmax(s, tau)?;
    let y = tape.constant(Tensor::vector(y.to_vec()));
    let weighted = tape.mul(ls, y)?;
    let total = tape.sum(weighted)?;
    tape.neg(total)
}

/// `-log softmax(logits)_0` on the tape, where entry 0 is the positive.
pub fn contrastive_on_tape(tape: &mut Tape, logits: Var) -> tensor::Result<Var> {
    let ls = tape.log_softmax(logits, 1.0)?;
    let first = tape.index(ls, 0)?;
    tape.neg(first)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdExample {
    pub learner: usize,
    /// Embedding of the distillation prompt (history and target).
    pub prompt: Vec<f64>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefExample {
    pub learner: usize,
    /// Embedding of the preference prompt (history only).
    pub prompt: Vec<f64>,
    pub positive: usize,
    /// Concepts already in the learner's history; never sampled as negatives.
    pub history: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Kd,
    Pref,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Kd => "kd",
            Stage::Pref => "pref",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub negatives: usize,
    /// Epochs without a loss improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for StudentHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 20,
            batch_size: 16,
            tau: 2.0,
            negatives: 8,
            patience: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: f64,
}

/// Training log as CSV text with header `epoch,stage,loss`.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,stage,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.stage.as_str(), r.loss));
    }
    out
}

pub enum StageData<'a> {
    Kd(&'a [KdExample]),
    Pref(&'a [PrefExample]),
}

/// Sample up to `k` negatives uniformly from concepts outside `history` and `positive`.
pub fn sample_negatives<R: rand::Rng + ?Sized>(
    m: usize,
    positive: usize,
    history: &[usize],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let seen: HashSet<usize> = history.iter().copied().collect();
    let pool: Vec<usize> = (0..m)
        .filter(|j| *j != positive && !seen.contains(j))
        .collect();
    pool.choose_multiple(rng, k.min(pool.len()))
        .copied()
        .collect()
}

/// Minibatch Adam on the stage loss. Returns the trained parameters and one log row per epoch.
pub fn train_student(
    init: &StudentParams,
    data: StageData<'_>,
    learners: &Tensor,
    concepts: &Tensor,
    hyper: &StudentHyper,
) -> Result<(StudentParams, Vec<LogRow>)> {
    check_tau(hyper.tau)?;
    if hyper.batch_size == 0 {
        return Err(StudentError::Config("batch size must be at least 1".into()));
    }
    let (stage, n) = match &data {
        StageData::Kd([]) => return Err(StudentError::MissingLabels),
        StageData::Kd(ex) => (Stage::Kd, ex.len()),
        StageData::Pref(_) if hyper.negatives == 0 => {
            return Err(StudentError::Config(
                "preference stage needs K >= 1 negatives".into(),
            ))
        }
        StageData::Pref(ex) => (Stage::Pref, ex.len()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut params = init.clone();
    let mut tensors = vec![params.w_proj.clone(), Tensor::scalar(params.alpha)];
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr), &tensors);
    let mut log = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut counted = 0usize;
        for batch in order.chunks(hyper.batch_size) {
            let mut tape = Tape::new();
            let vars = StudentVars {
                w_proj: tape.param(tensors[0].clone()),
                alpha: tape.param(tensors[1].clone()),
            };
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let term = match &data {
                    StageData::Kd(ex) => {
                        let e = &ex[i];
                        let s = score_on_tape(
                            &mut tape,
                            vars,
                            &e.prompt,
                            learners.row(e.learner),
                            concepts,
                        )?;
                        distill_loss_on_tape(&mut tape, s, &e.labels, hyper.tau)?
                    }
                    StageData::Pref(ex) => {
                        let e = &ex[i];
                        let negs = sample_negatives(
                            concepts.rows(),
                            e.positive,
                            &e.history,
                            hyper.negatives,
                            &mut rng,
                        );
                        if negs.is_empty() {
                            continue;
                        }
                        let mut rows = vec![concepts.row(e.positive)];
                        rows.extend(negs.iter().map(|&j| concepts.row(j)));
                        let sub = Tensor::from_rows(&rows)?;
                        let phi = score_on_tape(
                            &mut tape,
                            vars,
                            &e.prompt,
                            learners.row(e.learner),
                            &sub,
                        )?;
                        contrastive_on_tape(&mut tape, phi)?
                    }
                };
                terms.push(term);
            }
            if terms.is_empty() {
                continue;
            }
            let sum = tape.add_all(&terms)?;
            let loss = tape.scale(sum, 1.0 / terms.len() as f64)?;
            total += tape.value(sum).item();
            counted += terms.len();
            let grads = tape.backward(loss)?.collect(&[vars.w_proj, vars.alpha]);
            adam.step(&mut tensors, &grads)?;
        }
        let mean = if counted == 0 {
            0.0
        } else {
            total / counted as f64
        };
        log::info!("{} epoch {epoch}: loss {mean:.6}", stage.as_str());
        log.push(LogRow {
            epoch,
            stage,
            loss: mean,
        });
        if mean < best - 1e-9 {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if hyper.patience > 0 && stale >= hyper.patience {
                break;
            }
        }
    }
    params.w_proj = tensors[0].clone();
    params.alpha = tensors[1].item();
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_examples() {
        let h = vec!["a".to_string(), "b".to_string()];
        assert_eq!(
            render_kd_prompt(&h, "t"),
            "History: a | b\nTarget: t\nRecommend the next concept:"
        );
        assert_eq!(
            render_kd_prompt(&[], "t"),
            "History: \nTarget: t\nRecommend the next concept:"
        );
        assert_eq!(
            render_pref_prompt(&h),
            "History: a | b\nRecommend the next concept:"
        );
        assert_eq!(
            render_pref_prompt(&[]),
            "History: \nRecommend the next concept:"
        );
        let long: Vec<usize> = (0..30).collect();
        assert_eq!(prompt_window(&long), &long[10..]);
    }

    #[test]
    fn coarse_score_example() {
        let c = Tensor::from_rows(&[&[0.6, 0.8]]).unwrap();
        let s = coarse_scores(&[1.0, 0.0], &[0.0, 1.0], &c, 0.5).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert!(coarse_scores(&[1.0], &[0.0, 1.0], &c, 0.5).is_err());
    }

    #[test]
    fn loss_examples() {
        assert!(
            (distill_loss(&[0.0, 0.0], &[1.0, 0.0], 1.0).unwrap() - std::f64::consts::LN_2).abs()
                < 1e-12
        );
        assert!(distill_loss(&[0.0], &[1.0], 0.0).is_err());
        let e = [0.0, 0.0];
        let l = pref_loss(&[1.0, 0.0], &e, &[1.0, 0.0], &[&[0.0, 0.0]], 0.5).unwrap();
        assert!((l - (1.0f64.exp() / (1.0f64.exp() + 1.0)).ln().abs()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
        assert!(pref_loss(&[1.0], &[0.0], &[1.0], &[], 0.5).is_err());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k(&[0.3, 0.3, 0.3], 2).unwrap(), vec![0, 1]);
        let mut all = top_k(&[0.2, 0.1, 0.7, 0.4], 4).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(matches!(
            top_k(&[0.0], 2),
            Err(StudentError::TopK { k: 2, m: 1 })
        ));
    }

    #[test]
    fn negatives_avoid_history_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = sample_negatives(12, 3, &[0, 1, 2], 8, &mut rng);
            assert_eq!(n.len(), 8);
            assert!(n.iter().all(|&j| j > 3));
        }
        assert_eq!(sample_negatives(3, 0, &[1], 8, &mut rng), vec![2]);
    }

    #[test]
    fn pref_stage_rejects_zero_negatives() {
        let c = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let ex = vec![PrefExample {
            learner: 0,
            prompt: vec![1.0, 0.0],
            positive: 0,
            history: vec![],
        }];
        let hyper = StudentHyper {
            negatives: 0,
            ..Default::default()
        };
        let err = train_student(
            &StudentParams::init(2, 0),
            StageData::Pref(&ex),
            &c,
            &c,
            &hyper,
        )
        .unwrap_err();
        assert!(matches!(err, StudentError::Config(_)));
    }
}
