//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value is an `Array2` whose rows are sequence positions. A [`Tape`]
//! records operations in execution order and [`Tape::backward`] replays them
//! in reverse, accumulating parameter gradients into a [`Grads`].

use ndarray::{s, Array2, ArrayView1, Axis, Zip};

use super::params::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Param(ParamId),
    Const,
    Gather(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Array2<T>),
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    RepeatRow(Var),
    Nll {
        logits: Var,
        picks: Vec<(usize, usize, T)>,
        probs: Array2<T>,
    },
    Sum(Vec<Var>),
}

struct Entry<T> {
    op: Op<T>,
    value: Option<Array2<T>>,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Entry<T>>,
}

const GELU_C: f64 = 0.044_715;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let half = T::of(0.5);
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(GELU_C);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x);
    (y, dy)
}

fn softmax_row<T: Scalar>(row: ArrayView1<T>, limit: usize) -> Vec<T> {
    let live: Vec<T> = row.iter().take(limit).copied().collect();
    let max = live.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = live.iter().map(|&v| (v - max).exp()).collect();
    let z: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// Row-wise softmax. With `causal`, row `i` only covers columns `0..=i`.
pub fn softmax_rows<T: Scalar>(x: &Array2<T>, causal: bool) -> Array2<T> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let limit = if causal { (i + 1).min(row.len()) } else { row.len() };
        let p = softmax_row(row, limit);
        for (j, v) in p.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        let e = &self.nodes[v.0];
        match (&e.op, &e.value) {
            (Op::Param(p), _) => self.params.get(*p),
            (_, Some(val)) => val,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, op: Op<T>, value: Array2<T>) -> Var {
        debug_assert!(value.iter().all(|x| !x.is_nan()), "NaN produced");
        self.nodes.push(Entry { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, p: ParamId) -> Var {
        self.nodes.push(Entry {
            op: Op::Param(p),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(Op::Const, value)
    }

    /// Rows `rows` of a parameter matrix (embedding lookup).
    pub fn gather(&mut self, p: ParamId, rows: &[usize]) -> Var {
        let table = self.params.get(p);
        let mut out = Array2::zeros((rows.len(), table.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&table.row(r));
        }
        self.push(Op::Gather(p, rows.to_vec()), out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulT(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(Op::AddRow(a, row), v)
    }

    /// Elementwise product with a constant mask.
    pub fn mul_const(&mut self, a: Var, mask: Array2<T>) -> Var {
        let v = self.value(a) * &mask;
        self.push(Op::Mul(a, mask), v)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a) * s;
        self.push(Op::Scale(a, s), v)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| gelu_parts(x).0);
        self.push(Op::Gelu(a), v)
    }

    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let v = softmax_rows(self.value(a), causal);
        self.push(Op::Softmax(a), v)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols();
        let n = T::of(d as f64);
        let mut xhat = Array2::zeros(xv.raw_dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::of(eps)).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mean) * inv;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(Op::SliceCols(a, start, end), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        self.push(Op::SelectRows(a, rows.to_vec()), v)
    }

    /// Stacks `n` copies of a single-row value.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Var {
        let row = self.value(a);
        assert_eq!(row.nrows(), 1, "repeat_row expects one row");
        let v = row.broadcast((n, row.ncols())).expect("broadcast").to_owned();
        self.push(Op::RepeatRow(a), v)
    }

    /// `sum_k w_k * -log softmax(logits[r_k])[c_k]` as a `1 x 1` value.
    pub fn nll(&mut self, logits: Var, picks: Vec<(usize, usize, T)>) -> Var {
        let lv = self.value(logits);
        let logp = log_softmax_rows(lv);
        let probs = logp.mapv(|v| v.exp());
        let mut total = T::zero();
        for &(r, c, w) in &picks {
            total -= w * logp[[r, c]];
        }
        self.push(Op::Nll { logits, picks, probs }, Array2::from_elem((1, 1), total))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut v = Array2::zeros((1, 1));
        for &p in parts {
            v += self.value(p);
        }
        self.push(Op::Sum(parts.to_vec()), v)
    }

    /// Accumulates `d root / d param` into `grads`, scaled by `seed`.
    pub fn backward(&self, root: Var, seed: T, grads: &mut Grads<T>) {
        let mut g: Vec<Option<Array2<T>>> = Vec::new();
        g.resize_with(root.0 + 1, || None);
        g[root.0] = Some(Array2::from_elem(self.value(root).raw_dim(), seed));

        fn acc<T: Scalar>(g: &mut [Option<Array2<T>>], v: Var, delta: Array2<T>) {
            match &mut g[v.0] {
                Some(cur) => *cur += &delta,
                slot => *slot = Some(delta),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(p) => grads.accumulate(*p, &gi),
                Op::Const => {}
                Op::Gather(p, rows) => {
                    let dst = grads.slot(*p, self.params.get(*p).raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut row = dst.row_mut(r);
                        row += &gi.row(k);
                    }
                }
                Op::MatMul(a, b) => {
                    let da = gi.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&gi);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = gi.dot(self.value(*b));
                    let db = gi.t().dot(self.value(*a));
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, gi.clone());
                    acc(&mut g, *a, gi);
                }
                Op::AddRow(a, r) => {
                    let dr = gi.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut g, *r, dr);
                    acc(&mut g, *a, gi);
                }
                Op::Mul(a, mask) => acc(&mut g, *a, gi * mask),
                Op::Scale(a, s) => acc(&mut g, *a, gi * *s),
                Op::Gelu(a) => {
                    let mut d = self.value(*a).mapv(|x| gelu_parts(x).1);
                    d *= &gi;
                    acc(&mut g, *a, d);
                }
                Op::Softmax(a) => {
                    let y = self.nodes[i].value.as_ref().expect("value");
                    let mut d = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: T = y.row(r).iter().zip(gi.row(r)).map(|(&p, &q)| p * q).sum();
                        for c in 0..y.ncols() {
                            d[[r, c]] = y[[r, c]] * (gi[[r, c]] - dot);
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    let dgamma = (&gi * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = gi.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &gi * gam;
                    let d = xhat.ncols();
                    let n = T::of(d as f64);
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let s1: T = dxhat.row(r).sum();
                        let s2: T = dxhat.row(r).iter().zip(xhat.row(r)).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            dx[[r, c]] = inv_std[r] / n * (n * dxhat[[r, c]] - s1 - xhat[[r, c]] * s2);
                        }
                    }
                    acc(&mut g, *gamma, dgamma);
                    acc(&mut g, *beta, dbeta);
                    acc(&mut g, *x, dx);
                }
                Op::SliceCols(a, start, end) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*end]).assign(&gi);
                    acc(&mut g, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut g, p, gi.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::SelectRows(a, rows) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut row = d.row_mut(r);
                        row += &gi.row(k);
                    }
                    acc(&mut g, *a, d);
                }
                Op::RepeatRow(a) => {
                    acc(&mut g, *a, gi.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Nll { logits, picks, probs } => {
                    let up = gi[[0, 0]];
                    let mut d = Array2::zeros(probs.raw_dim());
                    for &(r, c, w) in picks {
                        let f = up * w;
                        Zip::from(d.row_mut(r))
                            .and(probs.row(r))
                            .for_each(|dv, &p| *dv += f * p);
                        d[[r, c]] -= f;
                    }
                    acc(&mut g, *logits, d);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut g, p, gi.clone());
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn causal_softmax_rows_sum_to_one() {
        let x = array![[1.0f64, 2.0, 3.0], [0.5, -1.0, 2.0], [0.0, 0.0, 0.0]];
        let p = softmax_rows(&x, true);
        assert_eq!(p[[0, 1]], 0.0);
        assert_eq!(p[[1, 2]], 0.0);
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu_parts(0.0f64).0, 0.0);
        assert!((gelu_parts(1.0f64).0 - 0.841_192).abs() < 1e-5);
        assert!((gelu_parts(-1.0f64).0 + 0.158_808).abs() < 1e-5);
    }

    #[test]
    fn nll_of_certain_prediction_is_zero() {
        let store = ParamStore::<f64>::default();
        let mut tape = Tape::new(&store);
        let logits = tape.constant(array![[0.0, 1e4, 0.0], [-1e4, -1e4, 0.0]]);
        let l = tape.nll(logits, vec![(0, 1, 1.0), (1, 2, 1.0)]);
        assert_eq!(tape.scalar(l), 0.0);
    }
}
