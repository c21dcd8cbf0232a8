//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] borrows the parameter store for the duration of one forward
//! pass. Parameter leaves are not copied; every other node owns its value.
//! Calling [`Graph::backward`] on a `1 × 1` node returns gradients for every
//! parameter that was touched, aligned with the store.

use rand::Rng;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{dot, log_sum_exp, softmax, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Param(ParamId),
    Owned(Matrix),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    MaxRows(Var, Vec<usize>),
    MaskMul(Var, Matrix),
    GroupSum(Var, usize),
    CrossEntropy(Var, usize, Vec<f64>),
    SumAll(Var),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Param(id) => self.store.get(*id),
            Value::Owned(m) => m,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "add_row expects a row vector");
        assert_eq!(am.cols(), rm.cols(), "add_row width");
        let mut out = am.clone();
        let r = rm.row(0);
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Softmax applied independently to every row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut out = Matrix::zeros(am.rows(), am.cols());
        for i in 0..am.rows() {
            out.row_mut(i).copy_from_slice(&softmax(am.row(i)));
        }
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise layer normalization with learned `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xm.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                let h = (r[j] - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * g[j] + b[j]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_cols(start, end);
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.rows(), rows, "concat_cols rows");
            for i in 0..rows {
                out.row_mut(i)[offset..offset + pm.cols()].copy_from_slice(pm.row(i));
            }
            offset += pm.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_rows(start, end);
        self.push(out, Op::SliceRows(a, start))
    }

    /// Element-wise maximum over the row (length) dimension, giving `1 × cols`.
    /// Ties route the gradient to the lowest row index.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        assert!(am.rows() > 0, "max over an empty sequence");
        let mut arg = vec![0usize; am.cols()];
        let mut out = am.row(0).to_vec();
        for i in 1..am.rows() {
            for (j, &v) in am.row(i).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        self.push(Matrix::row_vector(out), Op::MaxRows(a, arg))
    }

    /// Inverted dropout: zero each entry with probability `rate`, scale survivors.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let (rows, cols) = self.shape(a);
        let keep = 1.0 / (1.0 - rate);
        let mask = Matrix::from_fn(rows, cols, |_, _| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        let out = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(out, Op::MaskMul(a, mask))
    }

    /// Sums consecutive groups of `group` columns: `rows × (n·group)` to `rows × n`.
    pub fn group_sum(&mut self, a: Var, group: usize) -> Var {
        let am = self.value(a);
        assert_eq!(am.cols() % group, 0, "group_sum width");
        let n = am.cols() / group;
        let out = Matrix::from_fn(am.rows(), n, |i, j| {
            am.row(i)[j * group..(j + 1) * group].iter().sum()
        });
        self.push(out, Op::GroupSum(a, group))
    }

    /// Softmax cross-entropy of a `1 × C` logit row against class `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows(), 1, "cross_entropy expects a single logit row");
        assert!(target < lm.cols(), "target out of range");
        let row = lm.row(0);
        let loss = log_sum_exp(row) - row[target];
        let probs = softmax(row);
        self.push(Matrix::scalar(loss), Op::CrossEntropy(logits, target, probs))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::scalar(s), Op::SumAll(a))
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.value, Value::Param(_)) {
                // kept for collection below
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(&node.op, Var(idx), &g, &mut grads);
        }

        let mut out = Grads::zeros_like(self.store);
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(Some(g)) = grads.get(v.0) {
                    out.grads[pid] = g.clone();
                }
            }
        }
        out
    }

    fn propagate(&self, op: &Op, this: Var, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_t(self.value(*b));
                let db = self.value(*a).t_matmul(g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulT(a, b) => {
                let da = g.matmul(self.value(*b));
                let db = g.t_matmul(self.value(*a));
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                let mut dr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (d, &v) in dr.row_mut(0).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, dr);
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), |x, y| x * y);
                let db = g.zip_map(self.value(*a), |x, y| x * y);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Relu(a) => {
                let da = g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 });
                accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let da = g.zip_map(self.value(this), |d, y| d * (1.0 - y * y));
                accumulate(grads, *a, da);
            }
            Op::Softmax(a) => {
                let y = self.value(this);
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let inner = dot(g.row(i), y.row(i));
                    for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                        *d = y.get(i, j) * (g.get(i, j) - inner);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).row(0);
                let (rows, cols) = xhat.shape();
                let n = cols as f64;
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    let gr = g.row(i);
                    let hr = xhat.row(i);
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..cols {
                        dgamma.row_mut(0)[j] += gr[j] * hr[j];
                        dbeta.row_mut(0)[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    for j in 0..cols {
                        let dh = gr[j] * gam[j];
                        dx.set(i, j, inv_std[i] / n * (n * dh - sum_dh - hr[j] * sum_dh_h));
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut da = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    da.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    accumulate(grads, p, g.slice_cols(offset, offset + w));
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut da = Matrix::zeros(rows, cols);
                for i in 0..g.rows() {
                    da.row_mut(start + i).copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, da);
            }
            Op::MaxRows(a, arg) => {
                let (rows, cols) = self.shape(*a);
                let mut da = Matrix::zeros(rows, cols);
                for (j, &i) in arg.iter().enumerate() {
                    da.set(i, j, g.get(0, j));
                }
                accumulate(grads, *a, da);
            }
            Op::MaskMul(a, mask) => accumulate(grads, *a, g.zip_map(mask, |x, m| x * m)),
            Op::GroupSum(a, group) => {
                let (rows, cols) = self.shape(*a);
                let da = Matrix::from_fn(rows, cols, |i, j| g.get(i, j / group));
                accumulate(grads, *a, da);
            }
            Op::CrossEntropy(logits, target, probs) => {
                let s = g.item();
                let mut d = probs.clone();
                d[*target] -= 1.0;
                let da = Matrix::row_vector(d.into_iter().map(|v| v * s).collect());
                accumulate(grads, *logits, da);
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.shape(*a);
                accumulate(grads, *a, Matrix::filled(rows, cols, g.item()));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` over every scalar in `store`.
    fn finite_diff(store: &ParamStore, f: &dyn Fn(&ParamStore) -> f64) -> Vec<Vec<f64>> {
        let h = 1e-5;
        let mut work = store.clone();
        let mut out = Vec::new();
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let n = work.get(id).len();
            let mut g = Vec::with_capacity(n);
            for k in 0..n {
                let orig = work.get(id).as_slice()[k];
                work.get_mut(id).as_mut_slice()[k] = orig + h;
                let up = f(&work);
                work.get_mut(id).as_mut_slice()[k] = orig - h;
                let down = f(&work);
                work.get_mut(id).as_mut_slice()[k] = orig;
                g.push((up - down) / (2.0 * h));
            }
            out.push(g);
        }
        out
    }

    fn check(store: &ParamStore, build: &dyn Fn(&mut Graph) -> Var) {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        let analytic = g.backward(loss);
        let f = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let l = build(&mut g);
            g.value(l).item()
        };
        let numeric = finite_diff(store, &f);
        for (pid, num) in numeric.iter().enumerate() {
            let ana = analytic.get(ParamId(pid)).as_slice();
            for (a, n) in ana.iter().zip(num) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-7);
                assert!(rel < 1e-5, "param {pid}: analytic {a} vs numeric {n}");
            }
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let x = store.add("x", ParamGroup::Encoder, random(3, 4, &mut rng));
        let w = store.add("w", ParamGroup::Encoder, random(4, 4, &mut rng));
        let b = store.add("b", ParamGroup::Locator, random(1, 4, &mut rng));
        let gam = store.add("g", ParamGroup::Answerer, random(1, 4, &mut rng));
        let bet = store.add("be", ParamGroup::Answerer, random(1, 4, &mut rng));
        let y = store.add("y", ParamGroup::Locator, random(2, 4, &mut rng));
        check(&store, &|g: &mut Graph| {
            let (x, w, b, gam, bet, y) =
                (g.param(x), g.param(w), g.param(b), g.param(gam), g.param(bet), g.param(y));
            let h = g.matmul(x, w);
            let h = g.add_row(h, b);
            let h = g.layer_norm(h, gam, bet);
            let t = g.tanh(h);
            let r = g.relu(h);
            let h = g.mul(t, r);
            let h = g.add(h, x);
            let s = g.matmul_t(h, y);
            let s = g.scale(s, 0.7);
            let a = g.softmax_rows(s);
            let c = g.matmul(a, y);
            let left = g.slice_cols(c, 0, 2);
            let right = g.slice_cols(c, 2, 4);
            let c = g.concat_cols(&[right, left]);
            let c = g.slice_rows(c, 1, 3);
            let m = g.max_rows(c);
            let gs = g.group_sum(m, 2);
            let ce = g.cross_entropy(gs, 1);
            let total = g.sum_all(h);
            let total = g.scale(total, 0.01);
            g.add(ce, total)
        });
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Encoder, Matrix::row_vector(vec![0.3, -0.2]));
        check(&store, &|g: &mut Graph| {
            let p = g.param(a);
            let q = g.param(a);
            let m = g.mul(p, q);
            g.sum_all(m)
        });
    }
}
