//! Weighted joint fine-tuning of the student and the fine ranker.
//!
//! The objective is `l1 * L_distill + l2 * L_pref + l3 * L_rerank` over the
//! student projection, `alpha` and every reranker weight, with the fine
//! ranker's coarse feature recomputed from the live student. The knowledge
//! tracer stays frozen. Steps follow the distillation batches (shuffled the
//! same way as the kd stage), so with only `l1` set the run retraces kd
//! training from the same start. Preference and reranker batches cycle over
//! their own shuffled orders; their negatives are drawn once up front so the
//! logged objective is a fixed function of the parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::reranker::{self, CoarseSource, LossItem, RerankContext, RerankerParams};
use crate::student::{self, KdExample, PrefExample, StudentParams, StudentVars};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointHyper {
    /// `[l1, l2, l3]`
    pub lambda: [f64; 3],
    pub lr: f64,
    pub epochs: usize,
    /// Distillation batch size; drives the number of steps.
    pub kd_batch: usize,
    /// Preference and reranker batch size.
    pub batch_size: usize,
    pub tau: f64,
    pub negatives: usize,
    pub max_negatives: usize,
    pub seed: u64,
}

pub struct JointData<'a> {
    pub kd: &'a [KdExample],
    pub pref: &'a [PrefExample],
    pub rerank: &'a [RerankContext],
}

/// Objective after an epoch; epoch 0 is the starting point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLog {
    pub epoch: usize,
    pub distill: f64,
    pub pref: f64,
    pub rerank: f64,
    pub total: f64,
}

pub struct JointResult {
    pub student: StudentParams,
    pub reranker: RerankerParams,
    pub log: Vec<JointLog>,
}

struct Fixed<'a> {
    data: &'a JointData<'a>,
    pref_negs: Vec<Vec<usize>>,
    rr_negs: Vec<Vec<usize>>,
}

fn pref_term(
    tape: &mut Tape,
    sv: StudentVars,
    e: &PrefExample,
    negs: &[usize],
    learners: &Tensor,
    concepts: &Tensor,
) -> Result<Option<Var>> {
    if negs.is_empty() {
        return Ok(None);
    }
    let mut rows = vec![concepts.row(e.positive)];
    rows.extend(negs.iter().map(|&j| concepts.row(j)));
    let sub = Tensor::from_rows(&rows)?;
    let phi = student::score_on_tape(tape, sv, &e.prompt, learners.row(e.learner), &sub)?;
    Ok(Some(student::contrastive_on_tape(tape, phi)?))
}

fn mean_of(tape: &mut Tape, terms: &[Var], n: usize) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let sum = if terms.len() == 1 {
        terms[0]
    } else {
        tape.add_all(terms)?
    };
    Ok(Some(tape.scale(sum, 1.0 / n as f64)?))
}

/// The three stage losses (each a batch mean) for the given index sets.
#[allow(clippy::too_many_arguments)]
fn losses_on_tape(
    tape: &mut Tape,
    sv: StudentVars,
    rv: &reranker::RerankerVars,
    fixed: &Fixed<'_>,
    kd_idx: &[usize],
    pref_idx: &[usize],
    rr_idx: &[usize],
    learners: &Tensor,
    concepts: &Tensor,
    tau: f64,
) -> Result<[Option<Var>; 3]> {
    let mut kd_terms = Vec::with_capacity(kd_idx.len());
    for &i in kd_idx {
        let e = &fixed.data.kd[i];
        let s = student::score_on_tape(tape, sv, &e.prompt, learners.row(e.learner), concepts)?;
        kd_terms.push(student::distill_loss_on_tape(tape, s, &e.labels, tau)?);
    }
    let mut pref_terms = Vec::with_capacity(pref_idx.len());
    for &i in pref_idx {
        if let Some(t) = pref_term(
            tape,
            sv,
            &fixed.data.pref[i],
            &fixed.pref_negs[i],
            learners,
            concepts,
        )? {
            pref_terms.push(t);
        }
    }
    let rr = if rr_idx.is_empty() {
        None
    } else {
        let batch: Vec<LossItem<'_>> = rr_idx
            .iter()
            .map(|&i| LossItem {
                ctx: &fixed.data.rerank[i],
                negatives: fixed.rr_negs[i].clone(),
            })
            .collect();
        reranker::reranker_loss_on_tape(
            tape,
            rv,
            &batch,
            learners,
            concepts,
            CoarseSource::Live(sv),
        )?
    };
    Ok([
        mean_of(tape, &kd_terms, kd_terms.len())?,
        mean_of(tape, &pref_terms, pref_terms.len())?,
        rr,
    ])
}

fn weighted_total(
    tape: &mut Tape,
    parts: [Option<Var>; 3],
    lambda: [f64; 3],
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for (part, l) in parts.into_iter().zip(lambda) {
        if let Some(v) = part {
            terms.push(tape.scale(v, l)?);
        }
    }
    match terms.len() {
        0 => Ok(None),
        1 => Ok(Some(terms[0])),
        _ => Ok(Some(tape.add_all(&terms)?)),
    }
}

fn objective(
    student: &StudentParams,
    rr: &RerankerParams,
    fixed: &Fixed<'_>,
    epoch: usize,
    learners: &Tensor,
    concepts: &Tensor,
    hyper: &JointHyper,
) -> Result<JointLog> {
    let mut tape = Tape::new();
    let sv = StudentVars::bind(&mut tape, student);
    let rv = rr.bind(&mut tape, false);
    let all = |n: usize, on: bool| {
        if on {
            (0..n).collect::<Vec<_>>()
        } else {
            Vec::new()
        }
    };
    let [l1, l2, l3] = hyper.lambda;
    let parts = losses_on_tape(
        &mut tape,
        sv,
        &rv,
        fixed,
        &all(fixed.data.kd.len(), l1 > 0.0),
        &all(fixed.data.pref.len(), l2 > 0.0),
        &all(fixed.data.rerank.len(), l3 > 0.0),
        learners,
        concepts,
        hyper.tau,
    )?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let (distill, pref, rerank) = (val(parts[0]), val(parts[1]), val(parts[2]));
    Ok(JointLog {
        epoch,
        distill,
        pref,
        rerank,
        total: l1 * distill + l2 * pref + l3 * rerank,
    })
}

/// Take `n` indices from a cyclic shuffled order, reshuffling at each wrap.
fn cycle_take(
    order: &mut [usize],
    cursor: &mut usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    if order.is_empty() {
        return out;
    }
    for _ in 0..n.min(order.len()) {
        if *cursor == order.len() {
            order.shuffle(rng);
            *cursor = 0;
        }
        out.push(order[*cursor]);
        *cursor += 1;
    }
    out
}

pub fn joint_finetune(
    student_init: &StudentParams,
    rerank_init: &RerankerParams,
    data: &JointData<'_>,
    learners: &Tensor,
    concepts: &Tensor,
    hyper: &JointHyper,
) -> Result<JointResult> {
    if hyper.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Usage(format!(
            "joint weights must be non-negative, got {:?}",
            hyper.lambda
        )));
    }
    if hyper.kd_batch == 0 || hyper.batch_size == 0 {
        return Err(Error::Usage("joint batch sizes must be at least 1".into()));
    }
    // Also rejects NaN.
    if hyper.tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Usage(format!(
            "tau must be positive, got {}",
            hyper.tau
        )));
    }
    let [l1, l2, l3] = hyper.lambda;
    let mut neg_rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x6e65_6773);
    let pref_negs = data
        .pref
        .iter()
        .map(|e| {
            student::sample_negatives(
                concepts.rows(),
                e.positive,
                &e.history,
                hyper.negatives,
                &mut neg_rng,
            )
        })
        .collect();
    let rr_negs = data
        .rerank
        .iter()
        .map(|c| reranker::sample_candidate_negatives(c, hyper.max_negatives, &mut neg_rng))
        .collect();
    let fixed = Fixed {
        data,
        pref_negs,
        rr_negs,
    };

    let mut student = student_init.clone();
    let mut rr = rerank_init.clone();
    let mut log = vec![objective(
        &student, &rr, &fixed, 0, learners, concepts, hyper,
    )?];
    if hyper.lambda.iter().all(|&l| l == 0.0) {
        for epoch in 1..=hyper.epochs {
            log.push(JointLog { epoch, ..log[0] });
        }
        return Ok(JointResult {
            student,
            reranker: rr,
            log,
        });
    }

    let mut tensors = vec![student.w_proj.clone(), Tensor::scalar(student.alpha)];
    tensors.extend(rr.tensors());
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr), &tensors);
    let mut kd_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut pref_rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut rr_rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(2));
    let mut kd_order: Vec<usize> = (0..data.kd.len()).collect();
    let mut pref_order: Vec<usize> = (0..data.pref.len()).collect();
    let mut rr_order: Vec<usize> = (0..data.rerank.len()).collect();
    let (mut pref_cursor, mut rr_cursor) = (pref_order.len(), rr_order.len());
    let driver_len = if data.kd.is_empty() {
        data.pref.len().max(data.rerank.len())
    } else {
        data.kd.len()
    };
    let driver_batch = if data.kd.is_empty() {
        hyper.batch_size
    } else {
        hyper.kd_batch
    };

    for epoch in 1..=hyper.epochs {
        kd_order.shuffle(&mut kd_rng);
        let steps = driver_len.div_ceil(driver_batch);
        for step in 0..steps {
            let kd_idx: Vec<usize> = if l1 > 0.0 && !data.kd.is_empty() {
                kd_order[step * driver_batch..((step + 1) * driver_batch).min(kd_order.len())]
                    .to_vec()
            } else {
                Vec::new()
            };
            let pref_idx = if l2 > 0.0 {
                cycle_take(
                    &mut pref_order,
                    &mut pref_cursor,
                    hyper.batch_size,
                    &mut pref_rng,
                )
            } else {
                Vec::new()
            };
            let rr_idx = if l3 > 0.0 {
                cycle_take(&mut rr_order, &mut rr_cursor, hyper.batch_size, &mut rr_rng)
            } else {
                Vec::new()
            };

            let mut tape = Tape::new();
            let sv = StudentVars {
                w_proj: tape.param(tensors[0].clone()),
                alpha: tape.param(tensors[1].clone()),
            };
            let rv = rr.with_tensors(&tensors[2..]).bind(&mut tape, true);
            let parts = losses_on_tape(
                &mut tape, sv, &rv, &fixed, &kd_idx, &pref_idx, &rr_idx, learners, concepts,
                hyper.tau,
            )?;
            let Some(total) = weighted_total(&mut tape, parts, hyper.lambda)? else {
                continue;
            };
            let mut wrt = vec![sv.w_proj, sv.alpha];
            wrt.extend(&rv.vars);
            let grads = tape.backward(total)?.collect(&wrt);
            adam.step(&mut tensors, &grads)?;
        }
        student.w_proj = tensors[0].clone();
        student.alpha = tensors[1].item();
        rr = rr.with_tensors(&tensors[2..]);
        let row = objective(&student, &rr, &fixed, epoch, learners, concepts, hyper)?;
        log::info!("joint epoch {epoch}: total {:.6}", row.total);
        log.push(row);
    }
    Ok(JointResult {
        student,
        reranker: rr,
        log,
    })
}
