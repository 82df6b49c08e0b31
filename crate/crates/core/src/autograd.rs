//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] evaluates operations eagerly and records them on a tape.
//! Weights are interned by address so that a parameter used at several sites
//! maps to a single node, and [`Gradients::wrt`] can be queried with the same
//! reference after the graph is dropped. Only weights registered through
//! [`Graph::train`] (and everything downstream of them) receive gradients.

use std::borrow::Cow;
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::attention::{attention_backward, attention_forward, AttnLayout};
use crate::tensor::Mat;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ScaleBy {
        a: Var,
        s: Var,
        index: usize,
    },
    AddRow(Var, Var),
    Silu(Var),
    LayerNorm {
        a: Var,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<Mat>,
    },
    PermuteRows {
        a: Var,
        perm: Arc<Vec<usize>>,
    },
    WeightedMse {
        a: Var,
        target: Mat,
        row_weight: Arc<Vec<f64>>,
        denom: f64,
    },
}

pub struct Graph<'a> {
    values: Vec<Cow<'a, Mat>>,
    ops: Vec<Op>,
    needs: Vec<bool>,
    interned: HashMap<usize, Var>,
    trainable: HashSet<usize>,
}

fn addr(m: &Mat) -> usize {
    m as *const Mat as usize
}

impl<'a> Default for Graph<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            interned: HashMap::new(),
            trainable: HashSet::new(),
        }
    }

    /// Mark a weight as trainable. Must happen before its first use.
    pub fn train(&mut self, m: &'a Mat) {
        debug_assert!(!self.interned.contains_key(&addr(m)));
        self.trainable.insert(addr(m));
    }

    pub fn train_all<I: IntoIterator<Item = &'a Mat>>(&mut self, ms: I) {
        for m in ms {
            self.train(m);
        }
    }

    /// Borrowed weight, interned by address.
    pub fn weight(&mut self, m: &'a Mat) -> Var {
        let key = addr(m);
        if let Some(v) = self.interned.get(&key) {
            return *v;
        }
        let needs = self.trainable.contains(&key);
        let v = self.push(Cow::Borrowed(m), Op::Leaf, needs);
        self.interned.insert(key, v);
        v
    }

    /// Owned constant input; never receives a gradient.
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Mat>, op: Op, needs: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        Var(self.values.len() - 1)
    }

    fn owned(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.needs[p.0]);
        self.push(Cow::Owned(value), op, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.owned(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.owned(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.owned(out, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.owned(out, Op::Scale(a, k), &[a])
    }

    /// `a * s[0, index]` where `s` is a row vector on the tape.
    pub fn scale_by(&mut self, a: Var, s: Var, index: usize) -> Var {
        let k = self.value(s)[[0, index]];
        let out = self.value(a) * k;
        self.owned(out, Op::ScaleBy { a, s, index }, &[a, s])
    }

    /// Broadcast-add a `1 x d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.owned(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(crate::tensor::silu);
        self.owned(out, Op::Silu(a), &[a])
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        self.owned(out, Op::LayerNorm { a, inv_std }, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        crate::tensor::softmax_rows_inplace(&mut out);
        self.owned(out, Op::SoftmaxRows(a), &[a])
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Var {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), &layout);
        self.owned(out, Op::Attention { q, k, v, layout, probs }, &[q, k, v])
    }

    /// `out[i] = a[perm[i]]`.
    pub fn permute_rows(&mut self, a: Var, perm: Arc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.dim());
        for (i, &src) in perm.iter().enumerate() {
            out.row_mut(i).assign(&x.row(src));
        }
        self.owned(out, Op::PermuteRows { a, perm }, &[a])
    }

    /// `sum_r w_r * |a_r - target_r|^2 / denom` as a `1 x 1` node.
    pub fn weighted_mse(&mut self, a: Var, target: Mat, row_weight: Arc<Vec<f64>>, denom: f64) -> Var {
        let x = self.value(a);
        let mut total = 0.0;
        for ((r, xr), tr) in x.rows().into_iter().enumerate().zip(target.rows()) {
            let w = row_weight[r];
            if w != 0.0 {
                total += w * xr.iter().zip(tr.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            }
        }
        let out = Mat::from_elem((1, 1), total / denom);
        self.owned(
            out,
            Op::WeightedMse {
                a,
                target,
                row_weight,
                denom,
            },
            &[a],
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.values.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones(self.values[loss.0].dim()));

        for idx in (0..=loss.0).rev() {
            if !self.needs[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.ops[idx] {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs[a.0] {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs[b.0] {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs[a.0] {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs[b.0] {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs[a.0] {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs[b.0] {
                        accumulate(&mut grads, *b, -g);
                    }
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads, *a, g * *k);
                }
                Op::ScaleBy { a, s, index } => {
                    if self.needs[s.0] {
                        let dot: f64 = g.iter().zip(self.value(*a).iter()).map(|(x, y)| x * y).sum();
                        let mut gs = Mat::zeros(self.value(*s).dim());
                        gs[[0, *index]] = dot;
                        accumulate(&mut grads, *s, gs);
                    }
                    if self.needs[a.0] {
                        let k = self.value(*s)[[0, *index]];
                        accumulate(&mut grads, *a, g * k);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs[row.0] {
                        let gr = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.needs[a.0] {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    ga.zip_mut_with(x, |gv, &xv| {
                        let sig = 1.0 / (1.0 + (-xv).exp());
                        *gv *= sig * (1.0 + xv * (1.0 - sig));
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { a, inv_std } => {
                    let y = &self.values[idx];
                    let d = y.ncols() as f64;
                    let mut ga = g;
                    for ((mut gr, yr), is) in ga.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                        let mean_g = gr.sum() / d;
                        let mean_gy = gr.iter().zip(yr.iter()).map(|(p, q)| p * q).sum::<f64>() / d;
                        gr.zip_mut_with(&yr, |gv, &yv| *gv = is * (*gv - mean_g - yv * mean_gy));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let p = &self.values[idx];
                    let mut ga = g;
                    for (mut gr, pr) in ga.rows_mut().into_iter().zip(p.rows()) {
                        let dot: f64 = gr.iter().zip(pr.iter()).map(|(x, y)| x * y).sum();
                        gr.zip_mut_with(&pr, |gv, &pv| *gv = pv * (*gv - dot));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Attention { q, k, v, layout, probs } => {
                    let (gq, gk, gv) = attention_backward(
                        &g,
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        layout,
                        probs,
                        [self.needs[q.0], self.needs[k.0], self.needs[v.0]],
                    );
                    if let Some(gq) = gq {
                        accumulate(&mut grads, *q, gq);
                    }
                    if let Some(gk) = gk {
                        accumulate(&mut grads, *k, gk);
                    }
                    if let Some(gv) = gv {
                        accumulate(&mut grads, *v, gv);
                    }
                }
                Op::PermuteRows { a, perm } => {
                    let mut ga = Mat::zeros(g.dim());
                    for (i, &src) in perm.iter().enumerate() {
                        ga.row_mut(src).assign(&g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::WeightedMse {
                    a,
                    target,
                    row_weight,
                    denom,
                } => {
                    let scale = 2.0 * g[[0, 0]] / denom;
                    let mut ga = self.value(*a) - target;
                    for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let w = row_weight[r] * scale;
                        row.mapv_inplace(|v| v * w);
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }

        Gradients {
            grads,
            interned: self.interned.clone(),
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

/// Gradients of one backward sweep; leaves keep theirs, interior nodes are
/// released as the sweep passes them.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    interned: HashMap<usize, Var>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a weight that was used through [`Graph::weight`].
    pub fn wrt(&self, m: &Mat) -> Option<&Mat> {
        self.interned.get(&addr(m)).and_then(|v| self.of(*v))
    }
}
