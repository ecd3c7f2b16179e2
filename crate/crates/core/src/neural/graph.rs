//! Reverse-mode tape over small dense matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameter leaves read
//! their values straight from the [`ParamStore`]; [`Graph::backward`] returns
//! gradients for every parameter that the loss depends on.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Gelu(Var),
    Log(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    RowNormalize(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Option<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(val), _) => val,
            (None, Op::Param(id)) => self.store.value(*id),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != rb {
            return Err(Error::Shape(format!("matmul {ra}x{ca} by {rb}x{cb}")));
        }
        let value = self.value(a).dot(self.value(b));
        let ng = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.grad_of(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a) + self.value(b);
        let ng = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a) - self.value(b);
        let ng = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::Shape(format!(
                "add_row: row {:?} for width {c}",
                self.shape(row)
            )));
        }
        let value = self.value(a) + self.value(row);
        let ng = self.grad_of(a) || self.grad_of(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a) * self.value(b);
        let ng = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let ng = self.grad_of(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) + s;
        let ng = self.grad_of(a);
        self.push(value, Op::AddScalar(a, s), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let ng = self.grad_of(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let ng = self.grad_of(a);
        self.push(value, Op::Log(a), ng)
    }

    /// Row-wise layer normalization with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(gamma) != (1, cols) || self.shape(beta) != (1, cols) {
            return Err(Error::Shape(format!("layer_norm width {cols}")));
        }
        let xv = self.value(x);
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.grad_of(x) || self.grad_of(gamma) || self.grad_of(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let ng = self.grad_of(a);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Divides every row by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let ng = self.grad_of(a);
        self.push(value, Op::RowNormalize(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value =
            concatenate(Axis(1), &views).map_err(|e| Error::Shape(format!("concat_cols: {e}")))?;
        let ng = parts.iter().any(|&p| self.grad_of(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, c) = self.shape(a);
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} of width {c}",
                start + len
            )));
        }
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.grad_of(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.grad_of(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Numbers whose sum is the sum of all entries of `v`, found by
    /// expanding additive nodes down to their elementwise leaves. Differencing
    /// two evaluations term by term avoids the cancellation a single large
    /// total would incur.
    pub fn additive_terms(&self, v: Var) -> Vec<f64> {
        let mut out = Vec::new();
        self.collect_terms(v, 1.0, &mut out);
        out
    }

    fn collect_terms(&self, v: Var, sign: f64, out: &mut Vec<f64>) {
        match &self.nodes[v.0].op {
            Op::Add(a, b) => {
                self.collect_terms(*a, sign, out);
                self.collect_terms(*b, sign, out);
            }
            Op::Sub(a, b) => {
                self.collect_terms(*a, sign, out);
                self.collect_terms(*b, -sign, out);
            }
            Op::Scale(a, s) => self.collect_terms(*a, sign * s, out),
            Op::AddScalar(a, s) => {
                self.collect_terms(*a, sign, out);
                out.push(sign * s * self.value(v).len() as f64);
            }
            Op::Sum(a) => self.collect_terms(*a, sign, out),
            _ => out.extend(self.value(v).iter().map(|x| sign * x)),
        }
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.scalar(loss).is_finite() {
            return Err(Error::NonFinite(format!("loss {}", self.scalar(loss))));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::zeros_like(self.store);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut send = |v: Var, delta: Array2<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    out.grads[id.0] = Some(g.as_standard_layout().into_owned());
                }
                Op::MatMul(a, b) => {
                    if self.grad_of(*a) {
                        send(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.grad_of(*b) {
                        send(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Transpose(a) => send(*a, g.t().as_standard_layout().into_owned()),
                Op::Add(a, b) => {
                    if self.grad_of(*a) {
                        send(*a, g.clone());
                    }
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    if self.grad_of(*b) {
                        send(*b, -&g);
                    }
                    send(*a, g);
                }
                Op::AddRow(a, row) => {
                    if self.grad_of(*row) {
                        send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    if self.grad_of(*a) {
                        send(*a, &g * self.value(*b));
                    }
                    if self.grad_of(*b) {
                        send(*b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, s) => send(*a, g * *s),
                Op::AddScalar(a, _) => send(*a, g),
                Op::Gelu(a) => {
                    let mut d = self.value(*a).mapv(|x| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let th = u.tanh();
                        0.5 * (1.0 + th)
                            + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
                    });
                    d *= &g;
                    send(*a, d);
                }
                Op::Log(a) => send(*a, g / self.value(*a)),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.grad_of(*gamma) {
                        send(*gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.grad_of(*beta) {
                        send(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.grad_of(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let cols = dxhat.ncols() as f64;
                        let mut dx = Array2::zeros(dxhat.raw_dim());
                        for r in 0..dxhat.nrows() {
                            let drow = dxhat.row(r);
                            let hrow = xhat.row(r);
                            let sum_d = drow.sum();
                            let sum_dh = drow.dot(&hrow);
                            for c in 0..dxhat.ncols() {
                                dx[[r, c]] =
                                    inv_std[r] / cols * (cols * drow[c] - sum_d - hrow[c] * sum_dh);
                            }
                        }
                        send(*x, dx);
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.dot(&yrow);
                        drow.zip_mut_with(&yrow, |gv, &yv| *gv = yv * (*gv - dot));
                    }
                    send(*a, d);
                }
                Op::RowNormalize(a) => {
                    let y = node.value.as_ref().unwrap();
                    let av = self.value(*a);
                    let mut d = g;
                    for ((mut drow, yrow), arow) in
                        d.rows_mut().into_iter().zip(y.rows()).zip(av.rows())
                    {
                        let dot = drow.dot(&yrow);
                        let sum = arow.sum();
                        drow.mapv_inplace(|gv| (gv - dot) / sum);
                    }
                    send(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.grad_of(p) {
                            send(p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    send(*a, d);
                }
                Op::Sum(a) => {
                    let gv = g[[0, 0]];
                    send(*a, Array2::from_elem(self.value(*a).raw_dim(), gv));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Graph) -> Var, store: &mut ParamStore) -> f64 {
        let grads = {
            let mut g = Graph::new(store);
            let loss = build(&mut g);
            g.backward(loss).unwrap()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for pi in 0..store.len() {
            let id = ParamId(pi);
            let n = store.value(id).len();
            for k in 0..n {
                let orig = store.get(id).value.as_slice().unwrap()[k];
                store.get_mut(id).value.as_slice_mut().unwrap()[k] = orig + h;
                let lp = {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id).value.as_slice_mut().unwrap()[k] = orig - h;
                let lm = {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id).value.as_slice_mut().unwrap()[k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let bp = grads.get(id).map_or(0.0, |g| g.as_slice().unwrap()[k]);
                worst = worst.max((bp - fd).abs() / (bp.abs() + fd.abs()).max(1e-8));
            }
        }
        worst
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[0.3, -0.2, 0.5], [0.1, 0.7, -0.4]]);
        let b = store.add("b", array![[0.2, -0.1], [0.4, 0.3], [-0.5, 0.6]]);
        let row = store.add("row", array![[0.05, -0.3, 0.2]]);
        let gamma = store.add("gamma", array![[1.1, 0.9, 1.3]]);
        let beta = store.add("beta", array![[0.0, 0.1, -0.2]]);
        let err = fd_check(
            |g| {
                let a = g.param(a);
                let b = g.param(b);
                let row = g.param(row);
                let gamma = g.param(gamma);
                let beta = g.param(beta);
                let ab = g.matmul(a, b).unwrap();
                let bt = g.transpose(b);
                let x = g.add_row(a, row).unwrap();
                let x = g.layer_norm(x, gamma, beta).unwrap();
                let x = g.gelu(x);
                let y = g.mul(x, bt).unwrap();
                let y = g.sub(y, bt).unwrap();
                let p = g.softmax(y);
                let ab2 = g.concat_cols(&[ab, p]).unwrap();
                let s = g.slice_cols(ab2, 1, 3).unwrap();
                let e = g.mul(s, s).unwrap();
                let e = g.add_scalar(e, 0.5);
                let n = g.row_normalize(e);
                let l = g.log(n);
                let l = g.scale(l, -0.7);
                let l2 = g.add(l, s).unwrap();
                g.sum(l2)
            },
            &mut store,
        );
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.5, -1.5, 2.0, 0.25]]);
        let err = fd_check(
            |g| {
                let w = g.param(w);
                let sq = g.mul(w, w).unwrap();
                g.sum(sq)
            },
            &mut store,
        );
        assert!(err < 1e-9, "max relative error {err}");
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(array![
            [1000.0, -1000.0, 3.0],
            [0.0, 0.0, 0.0],
            [-5.0, 2.0, 9.0]
        ]);
        let p = g.softmax(x);
        for row in g.value(p).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        for row in g.value(p).rows().into_iter().skip(1) {
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Array2::zeros((2, 3)));
        let b = g.input(Array2::zeros((2, 3)));
        assert!(g.matmul(a, b).is_err());
        assert!(g.slice_cols(a, 2, 2).is_err());
        let r = g.input(Array2::zeros((1, 2)));
        assert!(g.add_row(a, r).is_err());
        assert!(g.backward(a).is_err());
    }
}
