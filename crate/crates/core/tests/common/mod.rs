//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance harness.

#![allow(dead_code)]

use conceptrec::dkt::{self, DktParams};
use conceptrec::reranker::{self, CoarseSource, LossItem, RerankContext, RerankerParams};
use conceptrec::student::{self, StudentVars};
use conceptrec::tensor::{lstm_cell, LstmInput, LstmVars, LstmWeights};
use conceptrec::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so gradients near zero are judged on absolute error.
pub const FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(0.2..2.0)).collect(),
    )
    .unwrap()
}

/// Builds a scalar loss from parameter values; returns the loss and the
/// handles of the parameters in input order.
pub type Build<'a> = dyn Fn(&mut Tape, &[Tensor]) -> (Var, Vec<Var>) + 'a;

/// Max relative error between tape gradients and central differences.
pub fn check(params: &[Tensor], build: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let (loss, vars) = build(&mut tape, params);
    let grads = tape.backward(loss).unwrap().collect(&vars);
    let value = |p: &[Tensor]| {
        let mut t = Tape::new();
        let (l, _) = build(&mut t, p);
        t.value(l).item()
    };
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[e] += STEP;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[e] -= STEP;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[pi].data()[e], numeric));
        }
    }
    worst
}

/// Reduce any output to a scalar with fixed random weights so every output
/// entry's gradient path is exercised.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

fn bind(tape: &mut Tape, p: &[Tensor]) -> Vec<Var> {
    p.iter().map(|t| tape.param(t.clone())).collect()
}

type OpCase = (&'static str, fn(&mut ChaCha8Rng) -> f64);

fn unary(rng: &mut ChaCha8Rng, shape: &[usize], f: fn(&mut Tape, Var) -> Var) -> f64 {
    let input = random(shape, rng);
    unary_on(rng, input, f)
}

fn unary_on(rng: &mut ChaCha8Rng, input: Tensor, f: fn(&mut Tape, Var) -> Var) -> f64 {
    let probe = {
        let mut t = Tape::new();
        let v = t.constant(input.clone());
        let out = f(&mut t, v);
        t.value(out).shape().to_vec()
    };
    let w = random(&probe, rng);
    check(&[input], &|t, p| {
        let v = bind(t, p);
        let out = f(t, v[0]);
        (project(t, out, &w), v)
    })
}

fn binary(
    rng: &mut ChaCha8Rng,
    sa: &[usize],
    sb: &[usize],
    f: fn(&mut Tape, Var, Var) -> Var,
) -> f64 {
    let (a, b) = (random(sa, rng), random(sb, rng));
    let probe = {
        let mut t = Tape::new();
        let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
        let out = f(&mut t, x, y);
        t.value(out).shape().to_vec()
    };
    let w = random(&probe, rng);
    check(&[a, b], &|t, p| {
        let v = bind(t, p);
        let out = f(t, v[0], v[1]);
        (project(t, out, &w), v)
    })
}

const OPS: &[OpCase] = &[
    ("add", |r| {
        binary(r, &[4, 4], &[4, 4], |t, a, b| t.add(a, b).unwrap())
    }),
    ("sub", |r| {
        binary(r, &[4, 4], &[4, 4], |t, a, b| t.sub(a, b).unwrap())
    }),
    ("mul", |r| {
        binary(r, &[4, 4], &[4, 4], |t, a, b| t.mul(a, b).unwrap())
    }),
    ("scale", |r| {
        unary(r, &[4, 4], |t, a| t.scale(a, -1.7).unwrap())
    }),
    ("neg", |r| unary(r, &[4, 4], |t, a| t.neg(a).unwrap())),
    ("mul_scalar", |r| {
        binary(r, &[4, 4], &[], |t, a, s| t.mul_scalar(a, s).unwrap())
    }),
    ("add_scalar", |r| {
        binary(r, &[4, 4], &[], |t, a, s| t.add_scalar(a, s).unwrap())
    }),
    ("add_row", |r| {
        binary(r, &[4, 4], &[4], |t, m, v| t.add_row(m, v).unwrap())
    }),
    ("matmul", |r| {
        binary(r, &[4, 4], &[4, 4], |t, a, b| t.matmul(a, b).unwrap())
    }),
    ("matmul_vec", |r| {
        binary(r, &[4, 4], &[4], |t, a, b| t.matmul(a, b).unwrap())
    }),
    ("matmul_row", |r| {
        binary(r, &[4], &[4, 4], |t, a, b| t.matmul(a, b).unwrap())
    }),
    ("dot", |r| {
        binary(r, &[4], &[4], |t, a, b| t.dot(a, b).unwrap())
    }),
    ("concat", |r| {
        binary(r, &[4], &[3], |t, a, b| t.concat(&[a, b]).unwrap())
    }),
    ("stack_cols", |r| {
        binary(r, &[4], &[4], |t, a, b| t.stack_cols(&[a, b, a]).unwrap())
    }),
    ("slice", |r| {
        unary(r, &[8], |t, a| t.slice(a, 2, 4).unwrap())
    }),
    ("gather_rows", |r| {
        unary(r, &[4, 4], |t, a| t.gather_rows(a, &[3, 0, 3]).unwrap())
    }),
    ("column", |r| {
        unary(r, &[4, 4], |t, a| t.column(a, 2).unwrap())
    }),
    ("index", |r| unary(r, &[4], |t, a| t.index(a, 1).unwrap())),
    ("sigmoid", |r| {
        unary(r, &[4, 4], |t, a| t.sigmoid(a).unwrap())
    }),
    ("tanh", |r| unary(r, &[4, 4], |t, a| t.tanh(a).unwrap())),
    ("exp", |r| unary(r, &[4, 4], |t, a| t.exp(a).unwrap())),
    ("log", |r| {
        let x = positive(&[4, 4], r);
        unary_on(r, x, |t, a| t.log(a).unwrap())
    }),
    ("log_sigmoid", |r| {
        unary(r, &[4, 4], |t, a| t.log_sigmoid(a).unwrap())
    }),
    ("softmax", |r| {
        unary(r, &[6], |t, a| t.softmax(a, 2.0).unwrap())
    }),
    ("log_softmax", |r| {
        unary(r, &[6], |t, a| t.log_softmax(a, 0.7).unwrap())
    }),
    ("sum", |r| unary(r, &[4, 4], |t, a| t.sum(a).unwrap())),
    ("mean", |r| unary(r, &[4, 4], |t, a| t.mean(a).unwrap())),
    ("add_all", |r| {
        binary(r, &[4], &[4], |t, a, b| t.add_all(&[a, b, a]).unwrap())
    }),
    ("lstm_cell", lstm_case),
    ("lstm_cell_one_hot", lstm_one_hot_case),
    ("distill_loss", distill_case),
    ("pref_loss", pref_case),
    ("reranker_loss", reranker_case),
    ("reranker_loss_live_coarse", reranker_live_case),
    ("dkt_three_steps", dkt_case),
];

fn lstm_case(rng: &mut ChaCha8Rng) -> f64 {
    let (i, h) = (3, 4);
    let params = vec![
        random(&[4 * h, i], rng),
        random(&[4 * h, h], rng),
        random(&[4 * h], rng),
        random(&[i], rng),
        random(&[h], rng),
        random(&[h], rng),
    ];
    let (wh, wc) = (random(&[h], rng), random(&[h], rng));
    check(&params, &|t, p| {
        let v = bind(t, p);
        let w = LstmVars {
            w_x: v[0],
            w_h: v[1],
            b: v[2],
            hidden: h,
        };
        let (h1, c1) = lstm_cell(t, LstmInput::Dense(v[3]), v[4], v[5], &w).unwrap();
        let (h2, c2) = lstm_cell(t, LstmInput::Dense(v[3]), h1, c1, &w).unwrap();
        let a = project(t, h2, &wh);
        let b = project(t, c2, &wc);
        (t.add(a, b).unwrap(), v)
    })
}

fn lstm_one_hot_case(rng: &mut ChaCha8Rng) -> f64 {
    let (i, h) = (6, 4);
    let params = vec![
        random(&[4 * h, i], rng),
        random(&[4 * h, h], rng),
        random(&[4 * h], rng),
    ];
    let w_out = random(&[h], rng);
    let hot: Vec<usize> = (0..3).map(|_| rng.random_range(0..i)).collect();
    check(&params, &|t, p| {
        let v = bind(t, p);
        let w = LstmVars {
            w_x: v[0],
            w_h: v[1],
            b: v[2],
            hidden: h,
        };
        let mut hs = t.constant(Tensor::zeros(&[h]));
        let mut cs = t.constant(Tensor::zeros(&[h]));
        for &j in &hot {
            (hs, cs) = lstm_cell(t, LstmInput::OneHot(j), hs, cs, &w).unwrap();
        }
        (project(t, hs, &w_out), v)
    })
}

fn simplex(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn distill_case(rng: &mut ChaCha8Rng) -> f64 {
    let (d, m) = (4, 6);
    let concepts = random(&[m, d], rng);
    let prompt = random(&[d], rng).into_data();
    let e_u = random(&[d], rng).into_data();
    let y = simplex(m, rng);
    let params = vec![random(&[d, d], rng), random(&[], rng)];
    check(&params, &|t, p| {
        let v = bind(t, p);
        let sv = StudentVars {
            w_proj: v[0],
            alpha: v[1],
        };
        let s = student::score_on_tape(t, sv, &prompt, &e_u, &concepts).unwrap();
        (student::distill_loss_on_tape(t, s, &y, 2.0).unwrap(), v)
    })
}

fn pref_case(rng: &mut ChaCha8Rng) -> f64 {
    let (d, k) = (4, 5);
    let rows = random(&[k + 1, d], rng);
    let prompt = random(&[d], rng).into_data();
    let e_u = random(&[d], rng).into_data();
    let params = vec![random(&[d, d], rng), random(&[], rng)];
    check(&params, &|t, p| {
        let v = bind(t, p);
        let sv = StudentVars {
            w_proj: v[0],
            alpha: v[1],
        };
        let phi = student::score_on_tape(t, sv, &prompt, &e_u, &rows).unwrap();
        (student::contrastive_on_tape(t, phi).unwrap(), v)
    })
}

struct RerankFixture {
    learners: Tensor,
    concepts: Tensor,
    contexts: Vec<RerankContext>,
    negatives: Vec<Vec<usize>>,
    params: RerankerParams,
}

fn rerank_fixture(rng: &mut ChaCha8Rng) -> RerankFixture {
    let (d, dp, h, m) = (4, 3, 4, 8);
    let learners = random(&[3, d], rng);
    let concepts = random(&[m, d], rng);
    let mut contexts = Vec::new();
    let mut negatives = Vec::new();
    for u in 0..3 {
        let candidates: Vec<usize> = vec![(u + 1) % m, (u + 3) % m, (u + 4) % m, (u + 6) % m];
        let positive = if u == 2 { Some(7) } else { Some(candidates[u]) };
        let ctx = RerankContext {
            learner: u,
            history: (0..u + 1).map(|i| (i * 5) % m).collect(),
            prompt: random(&[d], rng).into_data(),
            dkt_state: random(&[h], rng).into_data(),
            coarse: random(&[4], rng).into_data(),
            candidates,
            positive,
        };
        negatives.push(
            ctx.candidates
                .iter()
                .copied()
                .filter(|&c| Some(c) != ctx.positive)
                .collect(),
        );
        contexts.push(ctx);
    }
    let params = RerankerParams::init(d, dp, h, 4, rng.random()).unwrap();
    RerankFixture {
        learners,
        concepts,
        contexts,
        negatives,
        params,
    }
}

fn reranker_case(rng: &mut ChaCha8Rng) -> f64 {
    let fx = rerank_fixture(rng);
    check(&fx.params.tensors(), &|t, p| {
        let rv = fx.params.with_tensors(p).bind(t, true);
        let batch: Vec<LossItem<'_>> = fx
            .contexts
            .iter()
            .zip(&fx.negatives)
            .map(|(ctx, n)| LossItem {
                ctx,
                negatives: n.clone(),
            })
            .collect();
        let loss = reranker::reranker_loss_on_tape(
            t,
            &rv,
            &batch,
            &fx.learners,
            &fx.concepts,
            CoarseSource::Stored,
        )
        .unwrap()
        .expect("two contexts are covered");
        (loss, rv.vars.clone())
    })
}

fn reranker_live_case(rng: &mut ChaCha8Rng) -> f64 {
    let fx = rerank_fixture(rng);
    let d = fx.concepts.cols();
    let mut params = fx.params.tensors();
    params.push(random(&[d, d], rng));
    params.push(random(&[], rng));
    let n = params.len();
    check(&params, &|t, p| {
        let rv = fx.params.with_tensors(&p[..n - 2]).bind(t, true);
        let sv = StudentVars {
            w_proj: t.param(p[n - 2].clone()),
            alpha: t.param(p[n - 1].clone()),
        };
        let batch: Vec<LossItem<'_>> = fx
            .contexts
            .iter()
            .zip(&fx.negatives)
            .map(|(ctx, n)| LossItem {
                ctx,
                negatives: n.clone(),
            })
            .collect();
        let loss = reranker::reranker_loss_on_tape(
            t,
            &rv,
            &batch,
            &fx.learners,
            &fx.concepts,
            CoarseSource::Live(sv),
        )
        .unwrap()
        .expect("two contexts are covered");
        let mut vars = rv.vars.clone();
        vars.extend([sv.w_proj, sv.alpha]);
        (loss, vars)
    })
}

/// Next-step BCE through at least three recurrent steps. The loss comes from
/// the library's own batch routine, so this checks its hand-collected
/// gradients rather than a fresh tape.
fn dkt_case(rng: &mut ChaCha8Rng) -> f64 {
    let (m, h) = (5, 4);
    let base = DktParams::init(m, h, rng.random()).unwrap();
    let seqs: Vec<Vec<(usize, bool)>> = (0..2)
        .map(|_| {
            (0..rng.random_range(4..7))
                .map(|_| (rng.random_range(0..m), rng.random::<bool>()))
                .collect()
        })
        .collect();
    let batch: Vec<&[(usize, bool)]> = seqs.iter().map(|s| s.as_slice()).collect();
    let with = |t: &[Tensor]| DktParams {
        lstm: LstmWeights {
            w_x: t[0].clone(),
            w_h: t[1].clone(),
            b: t[2].clone(),
        },
        w_out: t[3].clone(),
        b_out: t[4].clone(),
    };
    let params = vec![
        base.lstm.w_x.clone(),
        base.lstm.w_h.clone(),
        base.lstm.b.clone(),
        base.w_out.clone(),
        base.b_out.clone(),
    ];
    let mean_loss = |t: &[Tensor]| {
        let (sum, count, _) = dkt::batch_loss(&with(t), &batch).unwrap();
        sum / count as f64
    };
    let (_, _, grads) = dkt::batch_loss(&with(&params), &batch).unwrap();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.len() {
            let mut plus = params.clone();
            plus[pi].data_mut()[e] += STEP;
            let mut minus = params.clone();
            minus[pi].data_mut()[e] -= STEP;
            let numeric = (mean_loss(&plus) - mean_loss(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[pi].data()[e], numeric));
        }
    }
    worst
}

/// Worst relative error per op over `instances` random draws.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OPS.iter()
        .map(|(name, case)| {
            let worst = (0..instances)
                .map(|_| case(&mut rng))
                .fold(0.0f64, f64::max);
            (*name, worst)
        })
        .collect()
}
