//! A reverse-mode tape over dense `f64` matrices.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to push gradients back to its inputs. A tape is built per
//! example (or per mini-batch) and thrown away after `backward`.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    GatherRows { src: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    PickSum { x: Var, entries: Vec<(usize, usize)> },
    InBatchHinge { scores: Var, margin: f64, negatives: Array2<bool> },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Mat> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a 1 x 1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn unary<F: FnOnce(&Mat) -> Mat>(&self, a: Var, f: F) -> Mat {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    fn binary<F: FnOnce(&Mat, &Mat) -> Mat>(&self, a: Var, b: Var, f: F) -> Mat {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x.dot(y));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x.dot(&y.t()));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| {
            assert_eq!(y.nrows(), 1, "add_row expects a single row");
            x + y
        });
        self.push(out, Op::AddRow(a, b))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = self.unary(a, |x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&self, a: Var, c: Mat) -> Var {
        let out = self.unary(a, |x| x * &c);
        self.push(out, Op::MulConst(a, c))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let out = self.unary(a, |x| x.mapv(gelu));
        self.push(out, Op::Gelu(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.unary(a, |x| x.mapv(|v| v.max(0.0)));
        self.push(out, Op::Relu(a))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let g = &nodes[gamma.0].value;
            let b = &nodes[beta.0].value;
            let (xhat, inv_std) = normalize_rows(xv);
            let out = &xhat * g + b;
            (out, xhat, inv_std)
        };
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Row softmax where `mask[i][j] == false` forces probability exactly 0.
    pub fn masked_softmax(&self, x: Var, mask: &Rc<Array2<bool>>) -> Var {
        let out = self.unary(x, |xv| masked_softmax_rows(xv, mask));
        self.push(out, Op::MaskedSoftmax(x))
    }

    pub fn log_softmax(&self, x: Var) -> Var {
        let out = self.unary(x, log_softmax_rows);
        self.push(out, Op::LogSoftmax(x))
    }

    pub fn gather_rows(&self, src: Var, rows: &[usize]) -> Var {
        let out = self.unary(src, |x| x.select(Axis(0), rows));
        self.push(out, Op::GatherRows { src, rows: rows.to_vec() })
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows: column count mismatch")
        };
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols: row count mismatch")
        };
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&self, x: Var, start: usize, width: usize) -> Var {
        let out = self.unary(x, |xv| xv.slice(s![.., start..start + width]).to_owned());
        self.push(out, Op::SliceCols { x, start })
    }

    /// Mean over rows, producing a `1 x n` row.
    pub fn mean_rows(&self, x: Var) -> Var {
        let out = self.unary(x, |xv| {
            xv.mean_axis(Axis(0)).expect("mean_rows of empty matrix").insert_axis(Axis(0))
        });
        self.push(out, Op::MeanRows(x))
    }

    pub fn l2_normalize_rows(&self, x: Var) -> Var {
        let (out, norms) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let norms: Vec<f64> = xv.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-300)).collect();
            let mut out = xv.clone();
            for (mut row, n) in out.rows_mut().into_iter().zip(&norms) {
                row /= *n;
            }
            (out, norms)
        };
        self.push(out, Op::L2NormalizeRows { x, norms })
    }

    /// Sum of the selected `(row, col)` entries as a `1 x 1` node.
    pub fn pick_sum(&self, x: Var, entries: &[(usize, usize)]) -> Var {
        let total = self.unary(x, |xv| {
            Mat::from_elem((1, 1), entries.iter().map(|&(r, c)| xv[[r, c]]).sum())
        });
        self.push(total, Op::PickSum { x, entries: entries.to_vec() })
    }

    /// Mean over rows `i` of `Σ_j max(0, margin − S[i][i] + S[i][j])` for
    /// the `(i, j)` pairs marked in `negatives`.
    pub fn in_batch_hinge(&self, scores: Var, margin: f64, negatives: Array2<bool>) -> Var {
        let out = self.unary(scores, |sv| {
            let n = sv.nrows();
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if negatives[[i, j]] {
                        total += (margin - sv[[i, i]] + sv[[i, j]]).max(0.0);
                    }
                }
            }
            Mat::from_elem((1, 1), total / n as f64)
        });
        self.push(out, Op::InBatchHinge { scores, margin, negatives })
    }

    /// Sum of `1 x 1` nodes.
    pub fn sum_scalars(&self, parts: &[Var]) -> Var {
        let mut iter = parts.iter();
        let first = *iter.next().expect("sum_scalars of nothing");
        iter.fold(first, |acc, &p| self.add(acc, p))
    }

    /// Backpropagates from the `1 x 1` node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.dim(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        grads[root.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&val(*b).t()));
                    accumulate(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    accumulate(&mut grads, *a, g.dot(val(*b)));
                    accumulate(&mut grads, *b, g.t().dot(val(*a)));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, g * c),
                Op::Gelu(a) => {
                    let d = val(*a).mapv(gelu_grad);
                    accumulate(&mut grads, *a, g * d);
                }
                Op::Relu(a) => {
                    let d = val(*a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, g * d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gamma_v = val(*gamma);
                    accumulate(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * gamma_v;
                    let n = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_h = dh.dot(&h);
                        let k = inv_std[r] / n;
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = k * (n * dh[c] - sum_dh - h[c] * sum_dh_h);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaskedSoftmax(x) => {
                    let y = &node.value;
                    let mut dx = &g * y;
                    for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yr, |d, &p| *d -= p * dot);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for ((mut row, gr), yr) in dx.rows_mut().into_iter().zip(g.rows()).zip(y.rows()) {
                        let total = gr.sum();
                        row.zip_mut_with(&yr, |d, &lp| *d -= lp.exp() * total);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherRows { src, rows } => {
                    let mut dx = Mat::zeros(val(*src).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = dx.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads, *src, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = val(*p).nrows();
                        accumulate(&mut grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = val(*p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., start..start + n]).to_owned());
                        start += n;
                    }
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Mat::zeros(val(*x).dim());
                    let w = g.ncols();
                    dx.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanRows(x) => {
                    let (n, c) = val(*x).dim();
                    let row = g.row(0).to_owned() / n as f64;
                    let dx = row.broadcast((n, c)).expect("broadcast").to_owned();
                    accumulate(&mut grads, *x, dx);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let dot = g.row(r).dot(&yr);
                        row.zip_mut_with(&yr, |d, &yv| *d = (*d - yv * dot) / norms[r]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::PickSum { x, entries } => {
                    let mut dx = Mat::zeros(val(*x).dim());
                    let gv = g[[0, 0]];
                    for &(r, c) in entries {
                        dx[[r, c]] += gv;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::InBatchHinge { scores, margin, negatives } => {
                    let sv = val(*scores);
                    let n = sv.nrows();
                    let gv = g[[0, 0]] / n as f64;
                    let mut dx = Mat::zeros(sv.dim());
                    for i in 0..n {
                        for j in 0..n {
                            if negatives[[i, j]] && margin - sv[[i, i]] + sv[[i, j]] > 0.0 {
                                dx[[i, j]] += gv;
                                dx[[i, i]] -= gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *scores, dx);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-normalizes to zero mean / unit variance; returns the normalized
/// matrix and each row's inverse standard deviation.
pub fn normalize_rows(x: &Mat) -> (Mat, Vec<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.dot(&row) / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row *= inv;
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

pub fn masked_softmax_rows(x: &Mat, mask: &Array2<bool>) -> Mat {
    assert_eq!(x.dim(), mask.dim(), "attention mask shape mismatch");
    let mut out = Mat::zeros(x.dim());
    for ((mut o, xr), mr) in out.rows_mut().into_iter().zip(x.rows()).zip(mask.rows()) {
        let max = xr
            .iter()
            .zip(mr.iter())
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for ((ov, &xv), &m) in o.iter_mut().zip(xr.iter()).zip(mr.iter()) {
            if m {
                *ov = (xv - max).exp();
                total += *ov;
            }
        }
        o /= total;
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row -= lse;
    }
    out
}
