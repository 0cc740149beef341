//! Deep knowledge tracing: an LSTM over one-hot (concept, correctness) steps
//! predicting next-step correctness for every concept.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LearnerSequence;
use crate::tensor::{
    self, init_uniform, lstm_cell, lstm_step, Adam, AdamConfig, LstmInput, LstmVars, LstmWeights,
    ParamSet, StepInput, Tape, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum DktError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("concept {concept} is outside [0, {m})")]
    OutOfRange { concept: usize, m: usize },
    #[error("invalid dkt setting: {0}")]
    Config(String),
    #[error("no sequence has two or more steps to learn from")]
    NoTrainingSignal,
}

pub type Result<T> = std::result::Result<T, DktError>;

/// Most recent steps kept when tracing a sequence.
pub const MAX_STEPS: usize = 200;

/// One-hot of width `2M`, hot at `concept + M * correct`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepEncoding {
    pub index: usize,
    pub width: usize,
}

impl StepEncoding {
    pub fn dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.width];
        v[self.index] = 1.0;
        v
    }
}

pub fn encode_step(concept: usize, correct: bool, m: usize) -> Result<StepEncoding> {
    if concept >= m {
        return Err(DktError::OutOfRange { concept, m });
    }
    Ok(StepEncoding {
        index: concept + m * usize::from(correct),
        width: 2 * m,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DktParams {
    pub lstm: LstmWeights,
    /// `[M, h]`
    pub w_out: Tensor,
    /// `[M]`
    pub b_out: Tensor,
}

impl DktParams {
    pub fn init(m: usize, hidden: usize, seed: u64) -> Result<Self> {
        if hidden < 4 {
            return Err(DktError::Config(format!(
                "hidden size must be at least 4, got {hidden}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            lstm: LstmWeights::init(2 * m, hidden, &mut rng),
            w_out: init_uniform(&[m, hidden], hidden, &mut rng),
            b_out: init_uniform(&[m], hidden, &mut rng),
        })
    }

    pub fn zeros(m: usize, hidden: usize) -> Self {
        Self {
            lstm: LstmWeights::zeros(2 * m, hidden),
            w_out: Tensor::zeros(&[m, hidden]),
            b_out: Tensor::zeros(&[m]),
        }
    }

    pub fn num_concepts(&self) -> usize {
        self.b_out.len()
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }

    pub fn to_param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        set.push("lstm.w_x", self.lstm.w_x.clone());
        set.push("lstm.w_h", self.lstm.w_h.clone());
        set.push("lstm.b", self.lstm.b.clone());
        set.push("out.w", self.w_out.clone());
        set.push("out.b", self.b_out.clone());
        set
    }

    pub fn from_param_set(set: &ParamSet) -> Result<Self> {
        let get = |name: &str| {
            set.position(name)
                .map(|i| set.get(i).clone())
                .ok_or_else(|| DktError::Config(format!("checkpoint lacks `{name}`")))
        };
        let p = Self {
            lstm: LstmWeights {
                w_x: get("lstm.w_x")?,
                w_h: get("lstm.w_h")?,
                b: get("lstm.b")?,
            },
            w_out: get("out.w")?,
            b_out: get("out.b")?,
        };
        let (m, h) = (p.b_out.len(), p.lstm.w_h.cols());
        if p.lstm.w_x.shape() != [4 * h, 2 * m]
            || p.w_out.shape() != [m, h]
            || p.lstm.b.shape() != [4 * h]
        {
            return Err(DktError::Config(
                "dkt checkpoint shapes are inconsistent".into(),
            ));
        }
        Ok(p)
    }

    fn tensors(&self) -> Vec<Tensor> {
        vec![
            self.lstm.w_x.clone(),
            self.lstm.w_h.clone(),
            self.lstm.b.clone(),
            self.w_out.clone(),
            self.b_out.clone(),
        ]
    }

    fn from_tensors(t: &[Tensor]) -> Self {
        Self {
            lstm: LstmWeights {
                w_x: t[0].clone(),
                w_h: t[1].clone(),
                b: t[2].clone(),
            },
            w_out: t[3].clone(),
            b_out: t[4].clone(),
        }
    }

    /// Per-concept mastery `sigmoid(W_out h + b_out)`.
    pub fn mastery(&self, h: &[f64]) -> Vec<f64> {
        tensor::matvec(&self.w_out, h)
            .iter()
            .zip(self.b_out.data())
            .map(|(z, b)| tensor::sigmoid(z + b))
            .collect()
    }
}

fn window(steps: &[(usize, bool)]) -> &[(usize, bool)] {
    &steps[steps.len().saturating_sub(MAX_STEPS)..]
}

#[derive(Debug, Clone, PartialEq)]
pub struct DktTrace {
    /// `mastery[t]` predicts the step after `t`.
    pub mastery: Vec<Vec<f64>>,
    pub hidden: Vec<f64>,
}

/// Run the tracer over the (truncated) steps. An empty history yields no
/// mastery vectors and a zero hidden state; see [`zero_history_mastery`].
pub fn dkt_forward(steps: &[(usize, bool)], params: &DktParams) -> Result<DktTrace> {
    let m = params.num_concepts();
    let hn = params.hidden();
    let (mut h, mut c) = (vec![0.0; hn], vec![0.0; hn]);
    let mut mastery = Vec::new();
    for &(k, y) in window(steps) {
        let x = encode_step(k, y, m)?;
        (h, c) = lstm_step(&params.lstm, StepInput::OneHot(x.index), &h, &c);
        mastery.push(params.mastery(&h));
    }
    Ok(DktTrace { mastery, hidden: h })
}

/// Mastery before any interaction: `sigmoid(b_out)`.
pub fn zero_history_mastery(params: &DktParams) -> Vec<f64> {
    params.mastery(&vec![0.0; params.hidden()])
}

/// Final hidden state after the full history (zero for an empty one).
pub fn cognitive_state(steps: &[(usize, bool)], params: &DktParams) -> Result<Vec<f64>> {
    Ok(dkt_forward(steps, params)?.hidden)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DktHyper {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DktHyper {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 1e-3,
            epochs: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Summed next-step binary cross-entropy of one sequence on the tape;
/// `None` for sequences shorter than two steps.
fn sequence_loss(
    tape: &mut Tape,
    vars: &[tensor::Var],
    steps: &[(usize, bool)],
    m: usize,
) -> Result<Option<tensor::Var>> {
    let steps = window(steps);
    if steps.len() < 2 {
        return Ok(None);
    }
    let lstm = LstmVars {
        w_x: vars[0],
        w_h: vars[1],
        b: vars[2],
        hidden: tape.value(vars[1]).cols(),
    };
    let hn = lstm.hidden;
    let mut h = tape.constant(Tensor::zeros(&[hn]));
    let mut c = tape.constant(Tensor::zeros(&[hn]));
    let mut terms = Vec::with_capacity(steps.len() - 1);
    for t in 0..steps.len() - 1 {
        let x = encode_step(steps[t].0, steps[t].1, m)?;
        (h, c) = lstm_cell(tape, LstmInput::OneHot(x.index), h, c, &lstm)?;
        let (next, correct) = steps[t + 1];
        if next >= m {
            return Err(DktError::OutOfRange { concept: next, m });
        }
        let z = tape.matmul(vars[3], h)?;
        let z = tape.add(z, vars[4])?;
        let z = tape.index(z, next)?;
        let signed = if correct { z } else { tape.neg(z)? };
        terms.push(tape.log_sigmoid(signed)?);
    }
    let total = tape.add_all(&terms)?;
    Ok(Some(tape.neg(total)?))
}

/// Mean next-step BCE over a batch of sequences, with gradients.
pub fn batch_loss(
    params: &DktParams,
    batch: &[&[(usize, bool)]],
) -> Result<(f64, usize, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars: Vec<tensor::Var> = params
        .tensors()
        .into_iter()
        .map(|t| tape.param(t))
        .collect();
    let m = params.num_concepts();
    let mut terms = Vec::new();
    let mut count = 0;
    for steps in batch {
        if let Some(l) = sequence_loss(&mut tape, &vars, steps, m)? {
            terms.push(l);
            count += window(steps).len() - 1;
        }
    }
    if terms.is_empty() {
        return Ok((
            0.0,
            0,
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        ));
    }
    let total = tape.add_all(&terms)?;
    let loss = tape.scale(total, 1.0 / count as f64)?;
    let grads = tape.backward(loss)?.collect(&vars);
    Ok((tape.value(total).item(), count, grads))
}

/// Train from `init` with minibatch Adam; returns params and per-epoch mean BCE.
pub fn train_dkt_from(
    init: &DktParams,
    sequences: &[LearnerSequence],
    hyper: &DktHyper,
) -> Result<(DktParams, Vec<f64>)> {
    if hyper.batch_size == 0 {
        return Err(DktError::Config("batch size must be at least 1".into()));
    }
    let usable: Vec<&[(usize, bool)]> = sequences
        .iter()
        .map(|s| s.steps.as_slice())
        .filter(|s| s.len() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(DktError::NoTrainingSignal);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut tensors = init.tensors();
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr), &tensors);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&[(usize, bool)]> = chunk.iter().map(|&i| usable[i]).collect();
            let current = DktParams::from_tensors(&tensors);
            let (sum, n, grads) = batch_loss(&current, &batch)?;
            total += sum;
            count += n;
            adam.step(&mut tensors, &grads)?;
        }
        let mean = total / count.max(1) as f64;
        log::info!("dkt epoch {epoch}: bce {mean:.6}");
        history.push(mean);
    }
    Ok((DktParams::from_tensors(&tensors), history))
}

pub fn train_dkt(
    sequences: &[LearnerSequence],
    m: usize,
    hyper: &DktHyper,
) -> Result<(DktParams, Vec<f64>)> {
    let init = DktParams::init(m, hyper.hidden, hyper.seed)?;
    train_dkt_from(&init, sequences, hyper)
}

/// Area under the ROC curve with tied scores counted as half.
/// `None` when one class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DktReport {
    pub auc: f64,
    pub bce: f64,
    pub predictions: usize,
}

/// Next-step predictions over every step after the first.
pub fn evaluate_dkt(sequences: &[LearnerSequence], params: &DktParams) -> Result<DktReport> {
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for s in sequences {
        let steps = window(&s.steps);
        let trace = dkt_forward(steps, params)?;
        for t in 0..steps.len().saturating_sub(1) {
            let (next, y) = steps[t + 1];
            scores.push(trace.mastery[t][next]);
            labels.push(y);
        }
    }
    let bce = scores
        .iter()
        .zip(&labels)
        .map(|(&p, &y)| -(if y { p } else { 1.0 - p }).max(1e-12).ln())
        .sum::<f64>()
        / scores.len().max(1) as f64;
    Ok(DktReport {
        auc: auc(&scores, &labels).unwrap_or(0.5),
        bce,
        predictions: scores.len(),
    })
}
