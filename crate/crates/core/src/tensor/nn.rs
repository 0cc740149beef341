use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, Tape, Tensor, TensorError, Var};

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialisation.
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite by construction")
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor and return its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Record every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Record every tensor as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }

    /// Same names and shapes, in the same order.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(TensorError::Invalid(format!(
                "parameter names differ: {:?} vs {:?}",
                self.names, other.names
            )));
        }
        for (n, (a, b)) in self
            .names
            .iter()
            .zip(self.tensors.iter().zip(&other.tensors))
        {
            if a.shape() != b.shape() {
                return Err(TensorError::Shape {
                    op: "check_layout",
                    detail: format!("{n}: {:?} vs {:?}", a.shape(), b.shape()),
                });
            }
        }
        Ok(())
    }
}

/// Weights of an LSTM cell with gate blocks ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    /// `[4H, I]`
    pub w_x: Tensor,
    /// `[4H, H]`
    pub w_h: Tensor,
    /// `[4H]`
    pub b: Tensor,
}

impl LstmWeights {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let fan_in = input + hidden;
        Self {
            w_x: init_uniform(&[4 * hidden, input], fan_in, rng),
            w_h: init_uniform(&[4 * hidden, hidden], fan_in, rng),
            b: init_uniform(&[4 * hidden], fan_in, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Tensor::zeros(&[4 * hidden, input]),
            w_h: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input(&self) -> usize {
        self.w_x.cols()
    }
}

/// Tape handles for an [`LstmWeights`].
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum LstmInput {
    Dense(Var),
    /// Index of the hot entry of a one-hot input; selects a column of `w_x`.
    OneHot(usize),
}

/// One LSTM step. Returns `(h', c')`.
pub fn lstm_cell(
    tape: &mut Tape,
    x: LstmInput,
    h: Var,
    c: Var,
    w: &LstmVars,
) -> Result<(Var, Var)> {
    let hn = w.hidden;
    let from_x = match x {
        LstmInput::Dense(v) => tape.matmul(w.w_x, v)?,
        LstmInput::OneHot(j) => tape.column(w.w_x, j)?,
    };
    let from_h = tape.matmul(w.w_h, h)?;
    let pre = tape.add(from_x, from_h)?;
    let pre = tape.add(pre, w.b)?;

    let i = tape.slice(pre, 0, hn)?;
    let f = tape.slice(pre, hn, hn)?;
    let g = tape.slice(pre, 2 * hn, hn)?;
    let o = tape.slice(pre, 3 * hn, hn)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;

    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Input to [`lstm_step`], the tape-free counterpart of [`LstmInput`].
#[derive(Debug, Clone, Copy)]
pub enum StepInput<'a> {
    Dense(&'a [f64]),
    OneHot(usize),
}

/// One LSTM step on plain values, for inference. Matches [`lstm_cell`].
pub fn lstm_step(w: &LstmWeights, x: StepInput<'_>, h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hn = w.hidden();
    let mut pre = w.b.data().to_vec();
    match x {
        StepInput::Dense(v) => {
            for (r, p) in pre.iter_mut().enumerate() {
                *p += super::dot(w.w_x.row(r), v);
            }
        }
        StepInput::OneHot(j) => {
            let cols = w.w_x.cols();
            for (r, p) in pre.iter_mut().enumerate() {
                *p += w.w_x.data()[r * cols + j];
            }
        }
    }
    for (r, p) in pre.iter_mut().enumerate() {
        *p += super::dot(w.w_h.row(r), h);
    }
    let mut h_next = vec![0.0; hn];
    let mut c_next = vec![0.0; hn];
    for k in 0..hn {
        let i = super::sigmoid(pre[k]);
        let f = super::sigmoid(pre[hn + k]);
        let g = pre[2 * hn + k].tanh();
        let o = super::sigmoid(pre[3 * hn + k]);
        c_next[k] = f * c[k] + i * g;
        h_next[k] = o * c_next[k].tanh();
    }
    (h_next, c_next)
}
