//! Fine ranker over coarse candidates: four scalar matching features fused by
//! a small MLP and trained with a sampled softmax against covered negatives.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::student::{self, RankedList, StudentVars};
use crate::tensor::{
    self, init_uniform, lstm_cell, Adam, AdamConfig, LstmInput, LstmVars, LstmWeights, ParamSet,
    Tape, Tensor, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum RerankError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid reranker setting: {0}")]
    Config(String),
    #[error("concept {0} has no embedding")]
    MissingEmbedding(usize),
    #[error("nothing to rank: {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, RerankError>;

/// History items fed to the sequence encoder, most recent last.
pub const HISTORY_WINDOW: usize = 50;

/// Everything the fine ranker needs about one ranking query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankContext {
    pub learner: usize,
    pub history: Vec<usize>,
    /// Embedding of the preference prompt; used when coarse scores are recomputed live.
    pub prompt: Vec<f64>,
    /// Knowledge-tracing hidden state after the history.
    pub dkt_state: Vec<f64>,
    /// Coarse top-C candidates.
    pub candidates: Vec<usize>,
    /// Student scores aligned with `candidates`.
    pub coarse: Vec<f64>,
    /// Observed next concept, when known.
    pub positive: Option<usize>,
}

impl RerankContext {
    pub fn positive_index(&self) -> Option<usize> {
        self.positive
            .and_then(|p| self.candidates.iter().position(|&c| c == p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankFeatures {
    pub user: f64,
    pub hist: f64,
    pub coarse: f64,
    pub dkt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankerParams {
    /// `[d', d]`, applied to both learner and concept embeddings.
    pub user_proj: Tensor,
    /// Sequence encoder over concept embeddings (input d, hidden d').
    pub hist: LstmWeights,
    /// `[d, d']` map from the encoder state back to concept space.
    pub hist_out: Tensor,
    /// `[d, h]` map from the knowledge-tracing state to concept space.
    pub dkt_proj: Tensor,
    /// `[4, w]`
    pub mlp_w1: Tensor,
    /// `[w]`
    pub mlp_b1: Tensor,
    /// `[w]`
    pub mlp_w2: Tensor,
    pub mlp_b2: f64,
    /// When false the knowledge-tracing feature is held at zero.
    pub use_dkt: bool,
}

pub const PARAM_NAMES: [&str; 10] = [
    "user_proj",
    "hist.w_x",
    "hist.w_h",
    "hist.b",
    "hist_out",
    "dkt_proj",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
];

impl RerankerParams {
    pub fn init(
        d: usize,
        d_proj: usize,
        dkt_hidden: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self> {
        if width < 4 {
            return Err(RerankError::Config(format!(
                "MLP width must be at least 4, got {width}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            user_proj: init_uniform(&[d_proj, d], d, &mut rng),
            hist: LstmWeights::init(d, d_proj, &mut rng),
            hist_out: init_uniform(&[d, d_proj], d_proj, &mut rng),
            dkt_proj: init_uniform(&[d, dkt_hidden], dkt_hidden, &mut rng),
            mlp_w1: init_uniform(&[4, width], 4, &mut rng),
            mlp_b1: init_uniform(&[width], 4, &mut rng),
            mlp_w2: init_uniform(&[width], width, &mut rng),
            mlp_b2: 0.0,
            use_dkt: true,
        })
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        vec![
            self.user_proj.clone(),
            self.hist.w_x.clone(),
            self.hist.w_h.clone(),
            self.hist.b.clone(),
            self.hist_out.clone(),
            self.dkt_proj.clone(),
            self.mlp_w1.clone(),
            self.mlp_b1.clone(),
            self.mlp_w2.clone(),
            Tensor::scalar(self.mlp_b2),
        ]
    }

    pub fn with_tensors(&self, t: &[Tensor]) -> Self {
        Self {
            user_proj: t[0].clone(),
            hist: LstmWeights {
                w_x: t[1].clone(),
                w_h: t[2].clone(),
                b: t[3].clone(),
            },
            hist_out: t[4].clone(),
            dkt_proj: t[5].clone(),
            mlp_w1: t[6].clone(),
            mlp_b1: t[7].clone(),
            mlp_w2: t[8].clone(),
            mlp_b2: t[9].item(),
            use_dkt: self.use_dkt,
        }
    }

    pub fn to_param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (name, t) in PARAM_NAMES.iter().zip(self.tensors()) {
            set.push(*name, t);
        }
        set
    }

    pub fn from_param_set(set: &ParamSet, use_dkt: bool) -> Result<Self> {
        let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
        for name in PARAM_NAMES {
            let i = set
                .position(name)
                .ok_or_else(|| RerankError::Config(format!("checkpoint lacks `{name}`")))?;
            tensors.push(set.get(i).clone());
        }
        let template = Self {
            user_proj: Tensor::zeros(&[0]),
            hist: LstmWeights::zeros(0, 0),
            hist_out: Tensor::zeros(&[0]),
            dkt_proj: Tensor::zeros(&[0]),
            mlp_w1: Tensor::zeros(&[0]),
            mlp_b1: Tensor::zeros(&[0]),
            mlp_w2: Tensor::zeros(&[0]),
            mlp_b2: 0.0,
            use_dkt,
        };
        Ok(template.with_tensors(&tensors))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> RerankerVars {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        RerankerVars {
            vars,
            hidden: self.hist.hidden(),
            use_dkt: self.use_dkt,
        }
    }
}

/// Tape handles in [`PARAM_NAMES`] order.
#[derive(Debug, Clone)]
pub struct RerankerVars {
    pub vars: Vec<Var>,
    hidden: usize,
    use_dkt: bool,
}

/// Where the coarse feature comes from.
#[derive(Debug, Clone, Copy)]
pub enum CoarseSource {
    /// The scores stored in the context (upstream frozen).
    Stored,
    /// Recomputed on the tape from student parameters.
    Live(StudentVars),
}

fn rows_of(concepts: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ids.len() * concepts.cols());
    for &id in ids {
        if id >= concepts.rows() {
            return Err(RerankError::MissingEmbedding(id));
        }
        data.extend_from_slice(concepts.row(id));
    }
    Ok(Tensor::new(vec![ids.len(), concepts.cols()], data)?)
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.rows(), m.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = m.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data).expect("transpose keeps values")
}

/// The `[n, 4]` feature matrix for candidates `ids` (a subset of `ctx.candidates`).
pub fn features_on_tape(
    tape: &mut Tape,
    rv: &RerankerVars,
    ctx: &RerankContext,
    ids: &[usize],
    learners: &Tensor,
    concepts: &Tensor,
    coarse: CoarseSource,
) -> Result<Var> {
    let v = &rv.vars;
    let cand = rows_of(concepts, ids)?;
    let cand_t = tape.constant(transpose(&cand));
    let cand_m = tape.constant(cand.clone());

    let e_u = tape.constant(Tensor::vector(learners.row(ctx.learner).to_vec()));
    let u = tape.matmul(v[0], e_u)?;
    let uc = tape.matmul(v[0], cand_t)?;
    let f_user = tape.matmul(u, uc)?;

    let lstm = LstmVars {
        w_x: v[1],
        w_h: v[2],
        b: v[3],
        hidden: rv.hidden,
    };
    let mut h = tape.constant(Tensor::zeros(&[rv.hidden]));
    let mut c = tape.constant(Tensor::zeros(&[rv.hidden]));
    let start = ctx.history.len().saturating_sub(HISTORY_WINDOW);
    for &k in &ctx.history[start..] {
        if k >= concepts.rows() {
            return Err(RerankError::MissingEmbedding(k));
        }
        let x = tape.constant(Tensor::vector(concepts.row(k).to_vec()));
        (h, c) = lstm_cell(tape, LstmInput::Dense(x), h, c, &lstm)?;
    }
    let hv = tape.matmul(v[4], h)?;
    let f_hist = tape.matmul(cand_m, hv)?;

    let f_coarse = match coarse {
        CoarseSource::Stored => {
            let vals = ids
                .iter()
                .map(|id| {
                    let i = ctx
                        .candidates
                        .iter()
                        .position(|c| c == id)
                        .expect("id drawn from candidates");
                    ctx.coarse[i]
                })
                .collect();
            tape.constant(Tensor::vector(vals))
        }
        CoarseSource::Live(sv) => {
            student::score_on_tape(tape, sv, &ctx.prompt, learners.row(ctx.learner), &cand)?
        }
    };

    let f_dkt = if rv.use_dkt {
        let state = tape.constant(Tensor::vector(ctx.dkt_state.clone()));
        let dv = tape.matmul(v[5], state)?;
        tape.matmul(cand_m, dv)?
    } else {
        tape.constant(Tensor::zeros(&[ids.len()]))
    };
    Ok(tape.stack_cols(&[f_user, f_hist, f_coarse, f_dkt])?)
}

/// MLP over an `[n, 4]` feature matrix: `w2 . tanh(F W1 + b1) + b2` per row.
pub fn mlp_on_tape(tape: &mut Tape, rv: &RerankerVars, features: Var) -> tensor::Result<Var> {
    let v = &rv.vars;
    let pre = tape.matmul(features, v[6])?;
    let pre = tape.add_row(pre, v[7])?;
    let hidden = tape.tanh(pre)?;
    let out = tape.matmul(hidden, v[8])?;
    tape.add_scalar(out, v[9])
}

/// Feature values for every candidate of `ctx`.
pub fn compute_features(
    ctx: &RerankContext,
    params: &RerankerParams,
    learners: &Tensor,
    concepts: &Tensor,
) -> Result<Vec<RerankFeatures>> {
    let mut tape = Tape::new();
    let rv = params.bind(&mut tape, false);
    let f = features_on_tape(
        &mut tape,
        &rv,
        ctx,
        &ctx.candidates,
        learners,
        concepts,
        CoarseSource::Stored,
    )?;
    Ok(tape
        .value(f)
        .data()
        .chunks_exact(4)
        .map(|r| RerankFeatures {
            user: r[0],
            hist: r[1],
            coarse: r[2],
            dkt: r[3],
        })
        .collect())
}

/// Plain evaluation of the fused score for one feature vector.
pub fn rerank_score(f: &RerankFeatures, params: &RerankerParams) -> f64 {
    let x = [f.user, f.hist, f.coarse, f.dkt];
    let width = params.mlp_b1.len();
    let w1 = params.mlp_w1.data();
    (0..width)
        .map(|j| {
            let pre =
                params.mlp_b1.data()[j] + (0..4).map(|i| x[i] * w1[i * width + j]).sum::<f64>();
            params.mlp_w2.data()[j] * pre.tanh()
        })
        .sum::<f64>()
        + params.mlp_b2
}

/// Candidates sorted by fused score, ties to the lower id.
pub fn rerank(
    ctx: &RerankContext,
    params: &RerankerParams,
    learners: &Tensor,
    concepts: &Tensor,
) -> Result<RankedList> {
    if ctx.candidates.is_empty() {
        return Err(RerankError::Empty("candidate list"));
    }
    let mut tape = Tape::new();
    let rv = params.bind(&mut tape, false);
    let f = features_on_tape(
        &mut tape,
        &rv,
        ctx,
        &ctx.candidates,
        learners,
        concepts,
        CoarseSource::Stored,
    )?;
    let s = mlp_on_tape(&mut tape, &rv, f)?;
    Ok(RankedList::from_scores(
        &ctx.candidates,
        tape.value(s).data(),
    ))
}

/// A context paired with its sampled negatives `N_u`.
#[derive(Debug, Clone)]
pub struct LossItem<'a> {
    pub ctx: &'a RerankContext,
    pub negatives: Vec<usize>,
}

/// Sample up to `cap` negatives from the covered candidates other than the positive.
pub fn sample_candidate_negatives<R: rand::Rng + ?Sized>(
    ctx: &RerankContext,
    cap: usize,
    rng: &mut R,
) -> Vec<usize> {
    let pool: Vec<usize> = ctx
        .candidates
        .iter()
        .copied()
        .filter(|&c| Some(c) != ctx.positive)
        .collect();
    let mut picked: Vec<usize> = pool
        .choose_multiple(rng, cap.min(pool.len()))
        .copied()
        .collect();
    picked.sort_unstable();
    picked
}

/// Batch loss on the tape. Contexts whose positive is not among the
/// candidates contribute exactly zero but still count toward `|B|`.
/// Returns `None` when no context in the batch is covered.
pub fn reranker_loss_on_tape(
    tape: &mut Tape,
    rv: &RerankerVars,
    batch: &[LossItem<'_>],
    learners: &Tensor,
    concepts: &Tensor,
    coarse: CoarseSource,
) -> Result<Option<Var>> {
    if batch.is_empty() {
        return Err(RerankError::Empty("batch"));
    }
    let mut terms = Vec::new();
    for item in batch {
        if item.ctx.positive_index().is_none() || item.negatives.is_empty() {
            continue;
        }
        let mut ids = vec![item.ctx.positive.expect("covered context has a positive")];
        ids.extend(&item.negatives);
        let f = features_on_tape(tape, rv, item.ctx, &ids, learners, concepts, coarse)?;
        let s = mlp_on_tape(tape, rv, f)?;
        terms.push(student::contrastive_on_tape(tape, s)?);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let sum = tape.add_all(&terms)?;
    Ok(Some(tape.scale(sum, 1.0 / batch.len() as f64)?))
}

/// Plain value of the batch loss.
pub fn reranker_loss(
    batch: &[LossItem<'_>],
    params: &RerankerParams,
    learners: &Tensor,
    concepts: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let rv = params.bind(&mut tape, false);
    Ok(
        match reranker_loss_on_tape(
            &mut tape,
            &rv,
            batch,
            learners,
            concepts,
            CoarseSource::Stored,
        )? {
            Some(v) => tape.value(v).item(),
            None => 0.0,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_negatives: usize,
    pub seed: u64,
}

impl Default for RerankHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 10,
            batch_size: 32,
            max_negatives: 10,
            seed: 0,
        }
    }
}

/// Minibatch Adam with upstream components frozen. Batches without a covered
/// positive carry no gradient and are skipped. Returns per-epoch mean loss.
pub fn train_reranker(
    init: &RerankerParams,
    contexts: &[RerankContext],
    learners: &Tensor,
    concepts: &Tensor,
    hyper: &RerankHyper,
) -> Result<(RerankerParams, Vec<f64>)> {
    if hyper.batch_size == 0 || hyper.max_negatives == 0 {
        return Err(RerankError::Config(
            "batch size and negative cap must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut tensors = init.tensors();
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr), &tensors);
    let mut order: Vec<usize> = (0..contexts.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<LossItem<'_>> = chunk
                .iter()
                .map(|&i| LossItem {
                    ctx: &contexts[i],
                    negatives: sample_candidate_negatives(
                        &contexts[i],
                        hyper.max_negatives,
                        &mut rng,
                    ),
                })
                .collect();
            let params = init.with_tensors(&tensors);
            let mut tape = Tape::new();
            let rv = params.bind(&mut tape, true);
            let Some(loss) = reranker_loss_on_tape(
                &mut tape,
                &rv,
                &batch,
                learners,
                concepts,
                CoarseSource::Stored,
            )?
            else {
                continue;
            };
            total += tape.value(loss).item();
            batches += 1;
            let grads = tape.backward(loss)?.collect(&rv.vars);
            adam.step(&mut tensors, &grads)?;
        }
        let mean = total / batches.max(1) as f64;
        log::info!("reranker epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok((init.with_tensors(&tensors), history))
}
