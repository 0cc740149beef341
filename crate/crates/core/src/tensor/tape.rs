use super::{log_sigmoid, sigmoid, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    StackCols(Vec<Var>),
    Slice(Var, usize),
    GatherRows(Var, Vec<usize>),
    Column(Var, usize),
    Index(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations eagerly; [`Tape::backward`] replays them in reverse.
///
/// Nodes are appended in evaluation order, so the node index is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf: receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Constant leaf: excluded from the backward sweep.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        parents: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(name));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_raw(Tensor { shape, data }, op, needs_grad))
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn expect_scalar(&self, op: &'static str, s: Var) -> Result<f64> {
        if self.data(s).len() != 1 || !self.shape(s).is_empty() {
            return Err(shape_err(
                op,
                format!("expected scalar, got {:?}", self.shape(s)),
            ));
        }
        Ok(self.data(s)[0])
    }

    fn expect_vector(&self, op: &'static str, v: Var) -> Result<usize> {
        match self.shape(v) {
            [n] => Ok(*n),
            s => Err(shape_err(op, format!("expected vector, got {s:?}"))),
        }
    }

    fn expect_matrix(&self, op: &'static str, m: Var) -> Result<(usize, usize)> {
        match self.shape(m) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected matrix, got {s:?}"))),
        }
    }

    fn zip_map(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.map("scale", a, Op::Scale(a, k), |x| x * k)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Every element of `a` times the scalar node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.expect_scalar("mul_scalar", s)?;
        let data = self.data(a).iter().map(|x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul_scalar", shape, data, Op::MulScalar(a, s), &[a, s])
    }

    /// Every element of `a` plus the scalar node `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.expect_scalar("add_scalar", s)?;
        let data = self.data(a).iter().map(|x| x + k).collect();
        let shape = self.shape(a).to_vec();
        self.push("add_scalar", shape, data, Op::AddScalar(a, s), &[a, s])
    }

    /// `m[i, :] + v` for every row `i`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (_, c) = self.expect_matrix("add_row", m)?;
        let n = self.expect_vector("add_row", v)?;
        if n != c {
            return Err(shape_err("add_row", format!("row of {n} onto {c} columns")));
        }
        let vd = self.data(v);
        let data = self
            .data(m)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(vd).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(m).to_vec();
        self.push("add_row", shape, data, Op::AddRow(m, v), &[m, v])
    }

    /// `[r,k]x[k,c] -> [r,c]`, `[r,k]x[k] -> [r]`, `[k]x[k,c] -> [c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (r, k, c, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([r, k], [k2, c]) if k == k2 => (*r, *k, *c, vec![*r, *c]),
            ([r, k], [k2]) if k == k2 => (*r, *k, 1, vec![*r]),
            ([k], [k2, c]) if k == k2 => (1, *k, *c, vec![*c]),
            _ => return Err(shape_err("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; r * c];
        if c == 1 {
            for (i, o) in out.iter_mut().enumerate() {
                *o = super::dot(&ad[i * k..(i + 1) * k], bd);
            }
            return self.push("matmul", out_shape, out, Op::MatMul(a, b), &[a, b]);
        }
        for i in 0..r {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * c..(i + 1) * c];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * c..(p + 1) * c];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push("matmul", out_shape, out, Op::MatMul(a, b), &[a, b])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_vector("dot", a)?;
        self.same_shape("dot", a, b)?;
        let v = super::dot(self.data(a), self.data(b));
        self.push("dot", Vec::new(), vec![v], Op::Dot(a, b), &[a, b])
    }

    /// Concatenate vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            self.expect_vector("concat", p)?;
            data.extend_from_slice(self.data(p));
        }
        let shape = vec![data.len()];
        self.push("concat", shape, data, Op::Concat(parts.to_vec()), parts)
    }

    /// Equal-length vectors become the columns of an `[n, parts.len()]` matrix.
    pub fn stack_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => self.expect_vector("stack_cols", p)?,
            None => return Err(TensorError::Invalid("stack_cols of nothing".into())),
        };
        for &p in parts {
            if self.expect_vector("stack_cols", p)? != n {
                return Err(shape_err("stack_cols", "columns differ in length".into()));
            }
        }
        let k = parts.len();
        let mut data = vec![0.0; n * k];
        for (j, &p) in parts.iter().enumerate() {
            for (i, &v) in self.data(p).iter().enumerate() {
                data[i * k + j] = v;
            }
        }
        self.push(
            "stack_cols",
            vec![n, k],
            data,
            Op::StackCols(parts.to_vec()),
            parts,
        )
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.expect_vector("slice", a)?;
        if start + len > n {
            return Err(shape_err(
                "slice",
                format!("{start}..{} of {n}", start + len),
            ));
        }
        let data = self.data(a)[start..start + len].to_vec();
        self.push("slice", vec![len], data, Op::Slice(a, start), &[a])
    }

    /// Select rows of a matrix, in the order given (repeats allowed).
    pub fn gather_rows(&mut self, m: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.expect_matrix("gather_rows", m)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        let md = self.data(m);
        let data = idx
            .iter()
            .flat_map(|&i| md[i * c..(i + 1) * c].iter().copied())
            .collect();
        self.push(
            "gather_rows",
            vec![idx.len(), c],
            data,
            Op::GatherRows(m, idx.to_vec()),
            &[m],
        )
    }

    /// Column `j` of a matrix; equal to `m` times the one-hot vector `e_j`.
    pub fn column(&mut self, m: Var, j: usize) -> Result<Var> {
        let (r, c) = self.expect_matrix("column", m)?;
        if j >= c {
            return Err(shape_err("column", format!("column {j} of {c}")));
        }
        let md = self.data(m);
        let data = (0..r).map(|i| md[i * c + j]).collect();
        self.push("column", vec![r], data, Op::Column(m, j), &[m])
    }

    /// Element `i` of a vector as a scalar.
    pub fn index(&mut self, v: Var, i: usize) -> Result<Var> {
        let n = self.expect_vector("index", v)?;
        if i >= n {
            return Err(shape_err("index", format!("index {i} of {n}")));
        }
        let x = self.data(v)[i];
        self.push("index", Vec::new(), vec![x], Op::Index(v, i), &[v])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, Op::Log(a), f64::ln)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("log_sigmoid", a, Op::LogSigmoid(a), log_sigmoid)
    }

    /// `softmax(v / tau)` over a vector.
    pub fn softmax(&mut self, v: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        self.expect_vector("softmax", v)?;
        let data = super::softmax(self.data(v), tau);
        let shape = self.shape(v).to_vec();
        self.push("softmax", shape, data, Op::Softmax(v, tau), &[v])
    }

    /// `log softmax(v / tau)` over a vector.
    pub fn log_softmax(&mut self, v: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        self.expect_vector("log_softmax", v)?;
        let data = super::log_softmax(self.data(v), tau);
        let shape = self.shape(v).to_vec();
        self.push("log_softmax", shape, data, Op::LogSoftmax(v, tau), &[v])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(TensorError::Invalid("mean of empty tensor".into()));
        }
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        self.push("mean", Vec::new(), vec![s], Op::Mean(a), &[a])
    }

    /// Sum a list of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = match terms.first() {
            Some(&t) => t,
            None => return Err(TensorError::Invalid("add_all of nothing".into())),
        };
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if self.data(loss).len() != 1 || !loss_shape.is_empty() {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(bd))
                        .for_each(|(x, (gi, bi))| *x += gi * bi)
                });
                self.acc(grads, *b, |gb| {
                    gb.iter_mut()
                        .zip(g.iter().zip(ad))
                        .for_each(|(x, (gi, ai))| *x += gi * ai)
                });
            }
            Op::Scale(a, k) => {
                self.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * k)
                });
            }
            Op::MulScalar(a, s) => {
                let k = self.data(*s)[0];
                let ad = self.data(*a);
                self.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * k)
                });
                let gs: f64 = g.iter().zip(ad).map(|(gi, ai)| gi * ai).sum();
                self.acc(grads, *s, |gsv| gsv[0] += gs);
            }
            Op::AddScalar(a, s) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                let gs: f64 = g.iter().sum();
                self.acc(grads, *s, |gsv| gsv[0] += gs);
            }
            Op::AddRow(m, v) => {
                self.acc(grads, *m, |gm| add_into(gm, g));
                let c = self.data(*v).len();
                self.acc(grads, *v, |gv| {
                    for row in g.chunks_exact(c) {
                        add_into(gv, row);
                    }
                });
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Dot(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let gi = g[0];
                self.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(bd).for_each(|(x, y)| *x += gi * y)
                });
                self.acc(grads, *b, |gb| {
                    gb.iter_mut().zip(ad).for_each(|(x, y)| *x += gi * y)
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.data(p).len();
                    self.acc(grads, p, |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::StackCols(parts) => {
                let k = parts.len();
                for (j, &p) in parts.iter().enumerate() {
                    self.acc(grads, p, |gp| {
                        for (i, x) in gp.iter_mut().enumerate() {
                            *x += g[i * k + j];
                        }
                    });
                }
            }
            Op::Slice(a, start) => {
                let start = *start;
                self.acc(grads, *a, |ga| add_into(&mut ga[start..start + g.len()], g));
            }
            Op::GatherRows(m, idx) => {
                let c = self.shape(*m)[1];
                self.acc(grads, *m, |gm| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gm[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Column(m, j) => {
                let c = self.shape(*m)[1];
                let j = *j;
                self.acc(grads, *m, |gm| {
                    for (i, gi) in g.iter().enumerate() {
                        gm[i * c + j] += gi;
                    }
                });
            }
            Op::Index(v, i) => {
                let i = *i;
                self.acc(grads, *v, |gv| gv[i] += g[0]);
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(out))
                        .for_each(|(x, (gi, y))| *x += gi * y * (1.0 - y))
                });
            }
            Op::Tanh(a) => {
                self.acc(grads, *a, |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(out))
                        .for_each(|(x, (gi, y))| *x += gi * (1.0 - y * y))
                });
            }
            Op::Exp(a) => {
                self.acc(grads, *a, |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(out))
                        .for_each(|(x, (gi, y))| *x += gi * y)
                });
            }
            Op::Log(a) => {
                let ad = self.data(*a);
                self.acc(grads, *a, |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(ad))
                        .for_each(|(x, (gi, ai))| *x += gi / ai)
                });
            }
            Op::LogSigmoid(a) => {
                let ad = self.data(*a);
                self.acc(grads, *a, |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(ad))
                        .for_each(|(x, (gi, ai))| *x += gi * sigmoid(-ai))
                });
            }
            Op::Softmax(v, tau) => {
                // dL/dv_i = y_i (g_i - <g, y>) / tau
                let gy: f64 = g.iter().zip(out).map(|(gi, yi)| gi * yi).sum();
                self.acc(grads, *v, |gv| {
                    gv.iter_mut()
                        .zip(g.iter().zip(out))
                        .for_each(|(x, (gi, yi))| *x += yi * (gi - gy) / tau)
                });
            }
            Op::LogSoftmax(v, tau) => {
                // dL/dv_i = (g_i - softmax_i * sum(g)) / tau
                let gs: f64 = g.iter().sum();
                self.acc(grads, *v, |gv| {
                    gv.iter_mut()
                        .zip(g.iter().zip(out))
                        .for_each(|(x, (gi, li))| *x += (gi - li.exp() * gs) / tau)
                });
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = self.data(*a).len() as f64;
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (r, k, c) = match (sa, sb) {
            ([r, k], [_, c]) => (*r, *k, *c),
            ([r, k], [_]) => (*r, *k, 1),
            ([k], [_, c]) => (1, *k, *c),
            _ => unreachable!("shapes validated in forward"),
        };
        let (ad, bd) = (self.data(a), self.data(b));
        if c == 1 {
            // Matrix-vector: dA = g b^T, db = A^T g.
            self.acc(grads, a, |ga| {
                for (i, &gi) in g.iter().enumerate() {
                    if gi != 0.0 {
                        add_scaled(&mut ga[i * k..(i + 1) * k], bd, gi);
                    }
                }
            });
            self.acc(grads, b, |gb| {
                for (i, &gi) in g.iter().enumerate() {
                    if gi != 0.0 {
                        add_scaled(gb, &ad[i * k..(i + 1) * k], gi);
                    }
                }
            });
            return;
        }
        // dA = G B^T ; dB = A^T G
        self.acc(grads, a, |ga| {
            for i in 0..r {
                let grow = &g[i * c..(i + 1) * c];
                for p in 0..k {
                    ga[i * k + p] += super::dot(grow, &bd[p * c..(p + 1) * c]);
                }
            }
        });
        self.acc(grads, b, |gb| {
            for i in 0..r {
                let grow = &g[i * c..(i + 1) * c];
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    add_scaled(&mut gb[p * c..(p + 1) * c], grow, av);
                }
            }
        });
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.data.len()]);
        f(slot);
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Invalid(format!(
            "temperature must be > 0, got {tau}"
        )))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn add_scaled(dst: &mut [f64], src: &[f64], k: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
}
