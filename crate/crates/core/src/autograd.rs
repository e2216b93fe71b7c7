//! A small reverse-mode automatic differentiation tape over [`Mat`] values.
//!
//! One tape is built per example. Parameters are borrowed, never copied; their
//! gradients are accumulated into a [`Grads`] buffer on [`Tape::backward`].

use crate::tensor::{gemm, log_sigmoid, matmul, sigmoid, Mat};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Gradient buffers shaped like a parameter list.
#[derive(Clone, Debug)]
pub struct Grads {
    pub tensors: Vec<Mat>,
}

impl Grads {
    pub fn zeros_like(params: &[Mat]) -> Self {
        Grads { tensors: params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect() }
    }

    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale_assign(s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(Mat::sum_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }
}

enum Op {
    Const,
    Param(usize),
    GatherRows { src: Var, ids: Vec<usize> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow { a: Var, bias: Var },
    Scale(Var, f64),
    MulConst(Var, Mat),
    Gelu(Var),
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Mat, inv_std: Vec<f64> },
    Softmax(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Mat },
    BceAt { logits: Var, targets: Vec<usize>, labels: Vec<f64>, weights: Vec<f64> },
}

struct Node {
    // `None` for parameter nodes, whose value lives in the borrowed store.
    value: Option<Mat>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [Mat],
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat]) -> Self {
        Tape { params, nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const)
    }

    pub fn param(&mut self, idx: usize) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(idx) });
        Var(self.nodes.len() - 1)
    }

    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Var {
        let s = self.value(src);
        let mut out = Mat::zeros(ids.len(), s.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(id));
        }
        self.push(out, Op::GatherRows { src, ids: ids.to_vec() })
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let out = matmul(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        debug_assert_eq!(b.len(), out.cols);
        for r in 0..out.rows {
            for (x, y) in out.row_mut(r).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow { a, bias })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, m: Mat) -> Var {
        let mut out = self.value(a).clone();
        for (x, y) in out.data.iter_mut().zip(&m.data) {
            *x *= y;
        }
        self.push(out, Op::MulConst(a, m))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in &mut out.data {
            let v = *x;
            *x = 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh());
        }
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let x = self.value(a);
        let (n, d) = x.shape();
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = Mat::zeros(n, d);
        let mut out = Mat::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..d {
                xh[c] = (row[c] - mu) * is;
            }
            let o = out.row_mut(r);
            for c in 0..d {
                o[c] = xh[c] * g.data[c] + b.data[c];
            }
        }
        self.push(out, Op::LayerNorm { a, gain, bias, xhat, inv_std })
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked for `j > i`.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let limit = if causal { (r + 1).min(row.len()) } else { row.len() };
            let max = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row[..limit].iter_mut() {
                *x = (*x - max).exp();
                s += *x;
            }
            for x in row[..limit].iter_mut() {
                *x /= s;
            }
            for x in row[limit..].iter_mut() {
                *x = 0.0;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, len);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let x = self.value(*p);
            for r in 0..rows {
                out.row_mut(r)[off..off + x.cols].copy_from_slice(x.row(r));
            }
            off += x.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, v) in out.data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / x.rows as f64);
        self.push(out, Op::MeanRows(a))
    }

    /// `sum_i w_i * -log softmax(logits_i)[t_i]`, a 1x1 result.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows, targets.len());
        assert_eq!(x.rows, weights.len());
        let mut probs = x.clone();
        let mut loss = 0.0;
        for r in 0..probs.rows {
            let row = probs.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
            if weights[r] != 0.0 {
                let lp = x.get(r, targets[r]) - max - s.ln();
                loss -= weights[r] * lp;
            }
        }
        self.push(
            Mat::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
        )
    }

    /// Binary cross-entropy on the logit at column `targets[i]` of row `i`.
    pub fn bce_at(&mut self, logits: Var, targets: &[usize], labels: &[f64], weights: &[f64]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows, targets.len());
        let mut loss = 0.0;
        for r in 0..x.rows {
            let z = x.get(r, targets[r]);
            let y = labels[r];
            loss -= weights[r] * (y * log_sigmoid(z) + (1.0 - y) * log_sigmoid(-z));
        }
        self.push(
            Mat::scalar(loss),
            Op::BceAt { logits, targets: targets.to_vec(), labels: labels.to_vec(), weights: weights.to_vec() },
        )
    }

    /// Reverse pass from the scalar `root`, accumulating parameter gradients into `grads`.
    pub fn backward(&self, root: Var, grads: &mut Grads) {
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = self.value(root);
        let mut seed = Mat::zeros(rv.rows, rv.cols);
        seed.fill(1.0);
        g[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(p) => grads.tensors[*p].add_assign(&gi),
                Op::GatherRows { src, ids } => {
                    let s = self.value(*src);
                    let acc = slot(&mut g, *src, s.rows, s.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in acc.row_mut(id).iter_mut().zip(gi.row(r)) {
                            *d += v;
                        }
                    }
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    {
                        let ga = slot(&mut g, *a, av.rows, av.cols);
                        match (ta, tb) {
                            (false, false) => gemm(1.0, &gi, false, bv, true, 1.0, ga),
                            (false, true) => gemm(1.0, &gi, false, bv, false, 1.0, ga),
                            (true, false) => gemm(1.0, bv, false, &gi, true, 1.0, ga),
                            (true, true) => gemm(1.0, bv, true, &gi, true, 1.0, ga),
                        }
                    }
                    let gb = slot(&mut g, *b, bv.rows, bv.cols);
                    match (ta, tb) {
                        (false, false) => gemm(1.0, av, true, &gi, false, 1.0, gb),
                        (false, true) => gemm(1.0, &gi, true, av, false, 1.0, gb),
                        (true, false) => gemm(1.0, av, false, &gi, false, 1.0, gb),
                        (true, true) => gemm(1.0, &gi, true, av, true, 1.0, gb),
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut g, *a, &gi);
                    add_into(&mut g, *b, &gi);
                }
                Op::AddRow { a, bias } => {
                    add_into(&mut g, *a, &gi);
                    let bv = self.value(*bias);
                    let gb = slot(&mut g, *bias, bv.rows, bv.cols);
                    for r in 0..gi.rows {
                        for (d, v) in gb.data.iter_mut().zip(gi.row(r)) {
                            *d += v;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let mut t = gi;
                    t.scale_assign(*s);
                    add_into(&mut g, *a, &t);
                }
                Op::MulConst(a, m) => {
                    let mut t = gi;
                    for (d, y) in t.data.iter_mut().zip(&m.data) {
                        *d *= y;
                    }
                    add_into(&mut g, *a, &t);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut t = gi;
                    for (d, &v) in t.data.iter_mut().zip(&x.data) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *d *= 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                    }
                    add_into(&mut g, *a, &t);
                }
                Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain).clone();
                    let (n, d) = xhat.shape();
                    {
                        let gg = slot(&mut g, *gain, 1, d);
                        for r in 0..n {
                            for c in 0..d {
                                gg.data[c] += gi.get(r, c) * xhat.get(r, c);
                            }
                        }
                    }
                    {
                        let gb = slot(&mut g, *bias, 1, d);
                        for r in 0..n {
                            for c in 0..d {
                                gb.data[c] += gi.get(r, c);
                            }
                        }
                    }
                    let mut dx = Mat::zeros(n, d);
                    for r in 0..n {
                        let xh = xhat.row(r);
                        let dy = gi.row(r);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            let dxh = dy[c] * gv.data[c];
                            m1 += dxh;
                            m2 += dxh * xh[c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let o = dx.row_mut(r);
                        for c in 0..d {
                            o[c] = inv_std[r] * (dy[c] * gv.data[c] - m1 - xh[c] * m2);
                        }
                    }
                    add_into(&mut g, *a, &dx);
                }
                Op::Softmax(a) => {
                    let y = self.nodes[i].value.as_ref().expect("softmax value");
                    let mut dx = gi;
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let dr = dx.row_mut(r);
                        let dot: f64 = yr.iter().zip(dr.iter()).map(|(p, q)| p * q).sum();
                        for (d, p) in dr.iter_mut().zip(yr) {
                            *d = p * (*d - dot);
                        }
                    }
                    add_into(&mut g, *a, &dx);
                }
                Op::SliceCols { a, start } => {
                    let av = self.value(*a);
                    let ga = slot(&mut g, *a, av.rows, av.cols);
                    for r in 0..gi.rows {
                        for (d, v) in ga.row_mut(r)[*start..*start + gi.cols].iter_mut().zip(gi.row(r)) {
                            *d += v;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let cols = pv.cols;
                        let gp = slot(&mut g, *p, pv.rows, cols);
                        for r in 0..gi.rows {
                            for (d, v) in gp.row_mut(r).iter_mut().zip(&gi.row(r)[off..off + cols]) {
                                *d += v;
                            }
                        }
                        off += cols;
                    }
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let inv = 1.0 / av.rows as f64;
                    let ga = slot(&mut g, *a, av.rows, av.cols);
                    for r in 0..av.rows {
                        for (d, v) in ga.row_mut(r).iter_mut().zip(&gi.data) {
                            *d += v * inv;
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, weights, probs } => {
                    let up = gi.data[0];
                    let gl = slot(&mut g, *logits, probs.rows, probs.cols);
                    for r in 0..probs.rows {
                        let w = weights[r] * up;
                        if w == 0.0 {
                            continue;
                        }
                        let row = gl.row_mut(r);
                        for (d, p) in row.iter_mut().zip(probs.row(r)) {
                            *d += w * p;
                        }
                        row[targets[r]] -= w;
                    }
                }
                Op::BceAt { logits, targets, labels, weights } => {
                    let up = gi.data[0];
                    let lv = self.value(*logits);
                    let zs: Vec<f64> = (0..lv.rows).map(|r| lv.get(r, targets[r])).collect();
                    let gl = slot(&mut g, *logits, lv.rows, lv.cols);
                    for r in 0..zs.len() {
                        let w = weights[r] * up;
                        if w == 0.0 {
                            continue;
                        }
                        gl.row_mut(r)[targets[r]] += w * (sigmoid(zs[r]) - labels[r]);
                    }
                }
            }
        }
    }
}

fn slot(g: &mut [Option<Mat>], v: Var, rows: usize, cols: usize) -> &mut Mat {
    g[v.0].get_or_insert_with(|| Mat::zeros(rows, cols))
}

fn add_into(g: &mut [Option<Mat>], v: Var, t: &Mat) {
    match &mut g[v.0] {
        Some(m) => m.add_assign(t),
        none => *none = Some(t.clone()),
    }
}
