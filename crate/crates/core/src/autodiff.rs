//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records one forward evaluation. Parameter leaves borrow their
//! values from a [`ParamStore`]; only leaves whose group is in the tape's
//! trainable set request gradients, and backward skips every subgraph that
//! cannot reach such a leaf.

use std::borrow::Cow;
use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::params::{GroupSet, ParamId, ParamStore};

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a square-kernel 2-D convolution lowered to a matrix product.
/// Feature maps are stored as `(height * width) x channels`, row-major in space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Source row in the input map for output position `(oy, ox)` and kernel
    /// offset `(ky, kx)`, or `None` when it falls in the zero padding.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some(y * self.width + x)
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    MeanRows(Var),
    Im2Col(Var, ConvGeometry),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Array2<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    trainable: GroupSet,
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore, trainable: GroupSet) -> Self {
        Self {
            store,
            trainable,
            nodes: Vec::new(),
        }
    }

    /// A tape on which nothing requests gradients.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, GroupSet::EMPTY)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.store.get(id);
        let needs_grad = self.trainable.contains(p.group);
        self.nodes.push(Node {
            value: Cow::Borrowed(&p.value),
            op: Op::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with affine `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = parts.first().map(|v| self.shape(*v).1).unwrap_or(0);
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = if views.is_empty() {
            Array2::zeros((0, cols))
        } else {
            concatenate(Axis(0), &views).expect("concat_rows: column counts must agree")
        };
        let ng = parts.iter().any(|v| self.ng(*v));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row counts must agree");
        let ng = parts.iter().any(|v| self.ng(*v));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Output row `i` is input row `index[i]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &index);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, index), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("reshape: element count must agree");
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Column means, as a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = v
            .mean_axis(Axis(0))
            .expect("mean_rows: at least one row")
            .insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn im2col(&mut self, a: Var, geom: ConvGeometry) -> Var {
        let x = self.value(a);
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let c = geom.channels;
        let mut out = Array2::zeros((oh * ow, geom.patch_len()));
        for oy in 0..oh {
            for ox in 0..ow {
                let r = oy * ow + ox;
                for ky in 0..geom.kernel {
                    for kx in 0..geom.kernel {
                        if let Some(src) = geom.source(oy, ox, ky, kx) {
                            let base = (ky * geom.kernel + kx) * c;
                            for ch in 0..c {
                                out[[r, base + ch]] = x[[src, ch]];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Im2Col(a, geom), ng)
    }

    /// Softmax cross-entropy of a `1 x k` logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let z = self.value(logits);
        let max = z.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let sum: f64 = z.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        let loss = lse - z[[0, label]];
        let probs = z.mapv(|x| (x - lse).exp());
        let ng = self.ng(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy { logits, label, probs },
            ng,
        )
    }

    /// Back-propagates `scale * d(output)` and returns gradients for every
    /// trainable parameter leaf reached.
    pub fn backward(&self, output: Var, scale: f64) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result = Gradients::default();
        if !self.ng(output) {
            return result;
        }
        grads[output.0] = Some(Array2::from_elem(self.shape(output), scale));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => result.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        acc(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        let ga = g.dot(self.value(*b));
                        acc(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = g.t().dot(self.value(*a));
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *row, gr);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Gelu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv = yv * (*gv - dot));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.ng(*beta) {
                        acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *gamma, gg);
                    }
                    if self.ng(*x) {
                        let mut dxhat = &g * self.value(*gamma);
                        let n = dxhat.ncols() as f64;
                        for ((mut drow, xrow), is) in dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
                            let mean_d = drow.sum() / n;
                            let mean_dx: f64 = drow.iter().zip(xrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                            drow.zip_mut_with(&xrow, |d, &xh| *d = is * (*d - mean_d - xh * mean_dx));
                        }
                        acc(&mut grads, *x, dxhat);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.shape(*p).0;
                        if self.ng(*p) {
                            acc(&mut grads, *p, g.slice(s![start..start + rows, ..]).to_owned());
                        }
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let cols = self.shape(*p).1;
                        if self.ng(*p) {
                            acc(&mut grads, *p, g.slice(s![.., start..start + cols]).to_owned());
                        }
                        start += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, index) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (r, &src) in index.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a);
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads, *a, Array2::from_shape_vec(shape, flat).expect("same element count"));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let row = g.row(0).mapv(|v| v / rows as f64);
                    let ga = row.broadcast((rows, cols)).expect("broadcast row").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::Im2Col(a, geom) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let (oh, ow) = (geom.out_height(), geom.out_width());
                    let c = geom.channels;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let r = oy * ow + ox;
                            for ky in 0..geom.kernel {
                                for kx in 0..geom.kernel {
                                    if let Some(src) = geom.source(oy, ox, ky, kx) {
                                        let base = (ky * geom.kernel + kx) * c;
                                        for ch in 0..c {
                                            ga[[src, ch]] += g[[r, base + ch]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::CrossEntropy { logits, label, probs } => {
                    let up = g[[0, 0]];
                    let mut gl = probs * up;
                    gl[[0, *label]] -= up;
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        result
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Parameter gradients keyed by [`ParamId`], iterated in id order.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Array2<f64>>,
}

impl Gradients {
    pub fn accumulate(&mut self, id: ParamId, g: Array2<f64>) {
        match self.map.get_mut(&id) {
            Some(existing) => *existing += &g,
            None => {
                self.map.insert(id, g);
            }
        }
    }

    /// Adds every entry of `other` into `self`.
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.map {
            self.accumulate(id, g);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.map.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: Array2<f64>) {
        self.map.insert(id, g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.map.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Tape<'_>, Var) -> Var, init: Array2<f64>) {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamGroup::Head, init);
        let tape_loss = |store: &ParamStore| {
            let mut tape = Tape::new(store, GroupSet::all());
            let x = tape.param(id);
            let out = build(&mut tape, x);
            tape.value(out).sum()
        };
        let mut tape = Tape::new(&store, GroupSet::all());
        let x = tape.param(id);
        let out = build(&mut tape, x);
        // Seeding backward with ones differentiates the sum of all outputs.
        let grads = tape.backward(out, 1.0);
        let analytic = grads.get(id).unwrap().clone();
        drop(tape);

        let h = 1e-6;
        let shape = store.value(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = store.value(id)[[r, c]];
                store.value_mut(id)[[r, c]] = orig + h;
                let up = tape_loss(&store);
                store.value_mut(id)[[r, c]] = orig - h;
                let down = tape_loss(&store);
                store.value_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[[r, c]];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                    "({r},{c}): analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.5, 0.1, -0.4]]
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        fd_check(|t, x| t.gelu(x), sample());
        fd_check(|t, x| t.tanh(x), sample());
        fd_check(|t, x| t.sigmoid(x), sample());
        fd_check(|t, x| t.mul(x, x), sample());
        fd_check(|t, x| t.scale(x, -2.5), sample());
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let weights = array![[0.2, 1.0, -0.5], [0.4, -0.3, 0.9], [1.1, 0.0, 0.3]];
        fd_check(
            move |t, x| {
                let w = t.input(weights.clone());
                let y = t.softmax_rows(x);
                let z = t.matmul(y, w);
                t.mul(z, z)
            },
            sample(),
        );
        fd_check(
            |t, x| {
                let a = t.slice_rows(x, 1, 1);
                let b = t.gather_rows(x, vec![0, 0, 1]);
                let c = t.concat_rows(&[a, b]);
                let d = t.matmul_t(c, x);
                let e = t.transpose(d);
                let f = t.mean_rows(e);
                t.mul(f, f)
            },
            sample(),
        );
        fd_check(
            |t, x| {
                let a = t.slice_cols(x, 1, 2);
                let b = t.concat_cols(&[a, x]);
                let r = t.reshape(b, 5, 2);
                t.gelu(r)
            },
            sample(),
        );
    }

    #[test]
    fn layer_norm_and_cross_entropy_match_finite_differences() {
        fd_check(
            |t, x| {
                let g = t.input(array![[1.3, -0.7, 0.4]]);
                let b = t.input(array![[0.1, 0.2, -0.3]]);
                let y = t.layer_norm(x, g, b);
                t.mul(y, y)
            },
            sample(),
        );
        fd_check(
            |t, x| {
                let row = t.slice_rows(x, 0, 1);
                t.cross_entropy(row, 2)
            },
            sample(),
        );
    }

    #[test]
    fn im2col_matches_finite_differences_and_direct_convolution() {
        let geom = ConvGeometry {
            height: 3,
            width: 3,
            channels: 2,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        assert_eq!((geom.out_height(), geom.out_width()), (2, 2));
        let img = Array2::from_shape_fn((9, 2), |(i, c)| (i as f64 * 0.37 + c as f64).sin());
        fd_check(
            move |t, x| {
                let cols = t.im2col(x, geom);
                t.mul(cols, cols)
            },
            img.clone(),
        );

        // Output (0,0) with padding 1 reads input rows (0,0),(0,1),(1,0),(1,1)
        // at kernel offsets (1,1),(1,2),(2,1),(2,2).
        let store = ParamStore::new();
        let mut tape = Tape::inference(&store);
        let x = tape.input(img.clone());
        let cols = tape.im2col(x, geom);
        let v = tape.value(cols);
        assert_eq!(v[[0, 0]], 0.0);
        assert_eq!(v[[0, (4) * 2]], img[[0, 0]]);
        assert_eq!(v[[0, (5) * 2 + 1]], img[[1, 1]]);
        assert_eq!(v[[0, (8) * 2]], img[[4, 0]]);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut store = ParamStore::new();
        let frozen = store.add("w", ParamGroup::Backbone, array![[1.0, 2.0]]);
        let live = store.add("b", ParamGroup::Head, array![[0.5, 0.5]]);
        let tape_groups: GroupSet = [ParamGroup::Head].into_iter().collect();
        let mut tape = Tape::new(&store, tape_groups);
        let w = tape.param(frozen);
        let b = tape.param(live);
        let y = tape.add(w, b);
        let loss = tape.cross_entropy(y, 0);
        let grads = tape.backward(loss, 1.0);
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(live).is_some());
    }
}
