//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The models in this crate are small enough that a plain tape works well:
//! every forward op appends a node, `backward` walks the tape in reverse and
//! accumulates gradients. All arithmetic is `f64` and sequential, so results
//! are bit-identical across runs and across worker counts.

use std::fmt;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Key mask for row-wise softmax: `allowed[q * keys + k]` says whether query
/// row `q` may attend to key column `k`.
#[derive(Clone, Debug)]
pub struct AttnMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn all_allowed(queries: usize, keys: usize) -> Self {
        AttnMask { queries, keys, allowed: vec![true; queries * keys] }
    }

    /// Causal mask: query `q` sees keys `0..=q`.
    pub fn causal(len: usize) -> Self {
        let mut m = AttnMask { queries: len, keys: len, allowed: vec![false; len * len] };
        for q in 0..len {
            for k in 0..=q {
                m.allowed[q * len + k] = true;
            }
        }
        m
    }

    /// Every query row sees exactly the keys flagged true in `key_ok`.
    pub fn from_key_flags(queries: usize, key_ok: &[bool]) -> Self {
        let keys = key_ok.len();
        let mut allowed = Vec::with_capacity(queries * keys);
        for _ in 0..queries {
            allowed.extend_from_slice(key_ok);
        }
        AttnMask { queries, keys, allowed }
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }

    pub fn set(&mut self, q: usize, k: usize, ok: bool) {
        self.allowed[q * self.keys + k] = ok;
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }
}

/// Row-wise masked softmax. Disallowed entries get weight 0; a row with no
/// allowed entries becomes all zeros instead of NaN.
pub fn softmax_rows_masked(x: &Mat, mask: Option<&AttnMask>) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let mut max = f64::NEG_INFINITY;
        for c in 0..x.cols {
            if mask.map_or(true, |m| m.is_allowed(r, c)) {
                max = max.max(x.at(r, c));
            }
        }
        if max == f64::NEG_INFINITY {
            continue; // fully masked row stays zero
        }
        let mut sum = 0.0;
        for c in 0..x.cols {
            if mask.map_or(true, |m| m.is_allowed(r, c)) {
                let e = (x.at(r, c) - max).exp();
                out.set(r, c, e);
                sum += e;
            }
        }
        for c in 0..x.cols {
            out.set(r, c, out.at(r, c) / sum);
        }
    }
    out
}

/// Row-wise layer normalization core (no gain/offset).
pub fn layer_norm_rows(x: &Mat, eps: f64) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    let n = x.cols as f64;
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for c in 0..x.cols {
            out.set(r, c, (row[c] - mean) * inv);
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy with logits.
fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (1.0 + (-logit.abs()).exp()).ln()
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// Broadcast-add a 1xC row vector to every row.
    AddRow(Var, Var),
    /// Broadcast-multiply by a 1xC row vector.
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm(Var, f64),
    Transpose(Var),
    SliceRows(Var, usize, usize),
    ConcatRows(Var, Var),
    AddConst(Var),
    MulConst(Var, Mat),
    /// Sum over rows/columns of weighted squared error against a constant
    /// target: sum_r w_r * sum_{c in cols} (x - t)^2.
    SqErrSum { x: Var, target: Mat, cols: Vec<usize>, row_w: Vec<f64> },
    /// Same reduction with binary cross-entropy on logits.
    BceSum { x: Var, target: Mat, cols: Vec<usize>, row_w: Vec<f64> },
    /// Categorical cross-entropy over one contiguous logit group.
    CeSum { x: Var, target: Mat, start: usize, len: usize, row_w: Vec<f64> },
}

struct Node {
    value: Mat,
    grad: Option<Mat>,
    op: Op,
}

/// Computation tape. Build the forward pass with the methods below, then call
/// [`Tape::backward`] on a scalar node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v` (zeros if unused).
    pub fn grad(&self, v: Var) -> Mat {
        let n = &self.nodes[v.0];
        n.grad.clone().unwrap_or_else(|| Mat::zeros(n.value.rows, n.value.cols))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols), "add shape mismatch");
        let mut v = ma.clone();
        v.add_assign(mb);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ma, mr) = (self.value(a), self.value(row));
        assert_eq!(mr.rows, 1);
        assert_eq!(ma.cols, mr.cols);
        let mut v = ma.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                let x = v.at(r, c) + mr.at(0, c);
                v.set(r, c, x);
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ma, mr) = (self.value(a), self.value(row));
        assert_eq!(mr.rows, 1);
        assert_eq!(ma.cols, mr.cols);
        let mut v = ma.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                let x = v.at(r, c) * mr.at(0, c);
                v.set(r, c, x);
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data.iter_mut() {
            *x *= k;
        }
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_masked(&mut self, a: Var, mask: Option<AttnMask>) -> Var {
        let v = softmax_rows_masked(self.value(a), mask.as_ref());
        self.push(v, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = layer_norm_rows(self.value(a), eps);
        self.push(v, Op::LayerNorm(a, eps))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ma = self.value(a);
        assert!(start + len <= ma.rows);
        let v = Mat::from_vec(len, ma.cols, ma.data[start * ma.cols..(start + len) * ma.cols].to_vec());
        self.push(v, Op::SliceRows(a, start, len))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.cols, mb.cols);
        let mut data = ma.data.clone();
        data.extend_from_slice(&mb.data);
        let v = Mat::from_vec(ma.rows + mb.rows, ma.cols, data);
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn add_const(&mut self, a: Var, c: Mat) -> Var {
        let ma = self.value(a);
        assert_eq!((ma.rows, ma.cols), (c.rows, c.cols));
        let mut v = ma.clone();
        v.add_assign(&c);
        self.push(v, Op::AddConst(a))
    }

    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let ma = self.value(a);
        assert_eq!((ma.rows, ma.cols), (c.rows, c.cols));
        let mut v = ma.clone();
        for (x, y) in v.data.iter_mut().zip(&c.data) {
            *x *= y;
        }
        self.push(v, Op::MulConst(a, c))
    }

    pub fn sq_err_sum(&mut self, x: Var, target: Mat, cols: Vec<usize>, row_w: Vec<f64>) -> Var {
        let mx = self.value(x);
        let mut total = 0.0;
        for r in 0..mx.rows {
            let mut s = 0.0;
            for &c in &cols {
                let d = mx.at(r, c) - target.at(r, c);
                s += d * d;
            }
            total += row_w[r] * s;
        }
        self.push(Mat::scalar(total), Op::SqErrSum { x, target, cols, row_w })
    }

    pub fn bce_sum(&mut self, x: Var, target: Mat, cols: Vec<usize>, row_w: Vec<f64>) -> Var {
        let mx = self.value(x);
        let mut total = 0.0;
        for r in 0..mx.rows {
            let mut s = 0.0;
            for &c in &cols {
                s += bce_with_logits(mx.at(r, c), target.at(r, c));
            }
            total += row_w[r] * s;
        }
        self.push(Mat::scalar(total), Op::BceSum { x, target, cols, row_w })
    }

    pub fn ce_sum(&mut self, x: Var, target: Mat, start: usize, len: usize, row_w: Vec<f64>) -> Var {
        let mx = self.value(x);
        let mut total = 0.0;
        for r in 0..mx.rows {
            if row_w[r] == 0.0 {
                continue;
            }
            let logits = &mx.row(r)[start..start + len];
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            let mut s = 0.0;
            for (i, l) in logits.iter().enumerate() {
                let t = target.at(r, start + i);
                if t != 0.0 {
                    s += t * (lse - l);
                }
            }
            total += row_w[r] * s;
        }
        self.push(Mat::scalar(total), Op::CeSum { x, target, start, len, row_w })
    }

    fn accumulate(&mut self, v: Var, g: Mat) {
        let node = &mut self.nodes[v.0];
        match node.grad.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    /// Backpropagate from a scalar node, filling gradients for every node
    /// that contributed to it.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Mat::scalar(1.0));

        for i in (0..=root.0).rev() {
            let g = match self.nodes[i].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            // extract op inputs without holding a borrow on self.nodes
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.matmul(&self.value(b).transpose());
                    let gb = self.value(a).transpose().matmul(&g);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let mut gr = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gr.data[c] += g.at(r, c);
                        }
                    }
                    self.accumulate(a, g);
                    self.accumulate(row, gr);
                }
                Op::MulRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let mr = self.value(row).clone();
                    let ma = self.value(a).clone();
                    let mut ga = g.clone();
                    let mut gr = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga.set(r, c, g.at(r, c) * mr.at(0, c));
                            gr.data[c] += g.at(r, c) * ma.at(r, c);
                        }
                    }
                    self.accumulate(a, ga);
                    self.accumulate(row, gr);
                }
                Op::Scale(a, k) => {
                    let (a, k) = (*a, *k);
                    let mut ga = g;
                    for x in ga.data.iter_mut() {
                        *x *= k;
                    }
                    self.accumulate(a, ga);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let ma = self.value(a).clone();
                    let mut ga = g;
                    for (x, inp) in ga.data.iter_mut().zip(&ma.data) {
                        if *inp <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    self.accumulate(a, ga);
                }
                Op::Softmax(a) => {
                    let a = *a;
                    let y = self.nodes[i].value.clone();
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let mut dot = 0.0;
                        for c in 0..y.cols {
                            dot += g.at(r, c) * y.at(r, c);
                        }
                        for c in 0..y.cols {
                            ga.set(r, c, (g.at(r, c) - dot) * y.at(r, c));
                        }
                    }
                    self.accumulate(a, ga);
                }
                Op::LayerNorm(a, eps) => {
                    let (a, eps) = (*a, *eps);
                    let x = self.value(a).clone();
                    let y = self.nodes[i].value.clone();
                    let n = x.cols as f64;
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let row = x.row(r);
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = g.row(r).iter().sum::<f64>() / n;
                        let gydot = g.row(r).iter().zip(y.row(r)).map(|(gi, yi)| gi * yi).sum::<f64>() / n;
                        for c in 0..x.cols {
                            ga.set(r, c, inv * (g.at(r, c) - gmean - y.at(r, c) * gydot));
                        }
                    }
                    self.accumulate(a, ga);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    self.accumulate(a, g.transpose());
                }
                Op::SliceRows(a, start, len) => {
                    let (a, start, len) = (*a, *start, *len);
                    let ma = self.value(a);
                    let mut ga = Mat::zeros(ma.rows, ma.cols);
                    for r in 0..len {
                        for c in 0..g.cols {
                            ga.set(start + r, c, g.at(r, c));
                        }
                    }
                    self.accumulate(a, ga);
                }
                Op::ConcatRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let ra = self.value(a).rows;
                    let cols = g.cols;
                    let ga = Mat::from_vec(ra, cols, g.data[..ra * cols].to_vec());
                    let gb = Mat::from_vec(g.rows - ra, cols, g.data[ra * cols..].to_vec());
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::AddConst(a) => {
                    let a = *a;
                    self.accumulate(a, g);
                }
                Op::MulConst(a, c) => {
                    let a = *a;
                    let mut ga = g;
                    for (x, y) in ga.data.iter_mut().zip(&c.data.clone()) {
                        *x *= y;
                    }
                    self.accumulate(a, ga);
                }
                Op::SqErrSum { x, target, cols, row_w } => {
                    let x = *x;
                    let (target, cols, row_w) = (target.clone(), cols.clone(), row_w.clone());
                    let mx = self.value(x).clone();
                    let s = g.item();
                    let mut gx = Mat::zeros(mx.rows, mx.cols);
                    for r in 0..mx.rows {
                        for &c in &cols {
                            gx.set(r, c, s * row_w[r] * 2.0 * (mx.at(r, c) - target.at(r, c)));
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::BceSum { x, target, cols, row_w } => {
                    let x = *x;
                    let (target, cols, row_w) = (target.clone(), cols.clone(), row_w.clone());
                    let mx = self.value(x).clone();
                    let s = g.item();
                    let mut gx = Mat::zeros(mx.rows, mx.cols);
                    for r in 0..mx.rows {
                        for &c in &cols {
                            gx.set(r, c, s * row_w[r] * (sigmoid(mx.at(r, c)) - target.at(r, c)));
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::CeSum { x, target, start, len, row_w } => {
                    let x = *x;
                    let (target, start, len, row_w) = (target.clone(), *start, *len, row_w.clone());
                    let mx = self.value(x).clone();
                    let s = g.item();
                    let mut gx = Mat::zeros(mx.rows, mx.cols);
                    for r in 0..mx.rows {
                        if row_w[r] == 0.0 {
                            continue;
                        }
                        let logits = &mx.row(r)[start..start + len];
                        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                        // d/dl_j of sum_i t_i (lse - l_i) = (sum_i t_i) p_j - t_j;
                        // the target mass is 1 for one-hot rows but not in general
                        let tsum: f64 =
                            (0..len).map(|i| target.at(r, start + i)).sum();
                        for c in 0..len {
                            let p = (logits[c] - max).exp() / sum;
                            gx.set(
                                r,
                                start + c,
                                s * row_w[r] * (tsum * p - target.at(r, start + c)),
                            );
                        }
                    }
                    self.accumulate(x, gx);
                }
            }
        }
    }
}

/// ADAM optimizer state over a flat list of parameter tensors.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, sizes: &[usize]) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// Apply one update. `params[i]` and `grads[i]` must align with the sizes
    /// given at construction.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let pd = p.data_mut();
            for j in 0..pd.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                pd[j] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Mat::from_vec(rows, cols, data)
    }

    /// Finite-difference check of a scalar function built on the tape.
    fn check_grad<F>(build: F, leaves: &[Mat], tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|m| tape.leaf(m.clone())).collect();
        let root = build(&mut tape, &vars);
        tape.backward(root);
        let analytic: Vec<Mat> = vars.iter().map(|&v| tape.grad(v)).collect();

        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for j in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(i, m)| {
                            let mut m = m.clone();
                            if i == li {
                                m.data_mut()[j] += delta;
                            }
                            tape.leaf(m)
                        })
                        .collect();
                    let root = build(&mut tape, &vars);
                    tape.value(root).item()
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = analytic[li].data()[j];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1.0);
                assert!(err < tol, "grad mismatch leaf {li} idx {j}: analytic {ana} numeric {num}");
            }
        }
    }

    #[test]
    fn matmul_add_relu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let bias = rand_mat(&mut rng, 1, 2);
        let target = rand_mat(&mut rng, 3, 2);
        check_grad(
            |t, vars| {
                let mm = t.matmul(vars[0], vars[1]);
                let biased = t.add_row(mm, vars[2]);
                let act = t.relu(biased);
                t.sq_err_sum(act, target.clone(), vec![0, 1], vec![1.0, 1.0, 1.0])
            },
            &[a, b, bias],
            1e-6,
        );
    }

    #[test]
    fn softmax_and_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 3, 5);
        let target = rand_mat(&mut rng, 3, 5);
        let mut mask = AttnMask::all_allowed(3, 5);
        mask.set(0, 4, false);
        mask.set(2, 0, false);
        mask.set(2, 1, false);
        check_grad(
            |t, vars| {
                let sm = t.softmax_masked(vars[0], Some(mask.clone()));
                let ln = t.layer_norm(sm, 1e-5);
                t.sq_err_sum(ln, target.clone(), (0..5).collect(), vec![1.0, 0.5, 2.0])
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn loss_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 4, 6);
        let mut target = Mat::zeros(4, 6);
        for r in 0..4 {
            target.set(r, 0, if r % 2 == 0 { 1.0 } else { 0.0 }); // binary col
            let hot = 1 + (r % 3);
            target.set(r, hot, 1.0); // one-hot cols 1..4
            target.set(r, 4, 0.3 * r as f64);
            target.set(r, 5, -0.7);
        }
        // a group whose target mass is not 1 must still differentiate
        target.set(1, 3, 0.4);
        let row_w = vec![1.0, 1.0, 0.0, 1.0];
        check_grad(
            |t, vars| {
                let bce = t.bce_sum(vars[0], target.clone(), vec![0], row_w.clone());
                let ce = t.ce_sum(vars[0], target.clone(), 1, 3, row_w.clone());
                let sq = t.sq_err_sum(vars[0], target.clone(), vec![4, 5], row_w.clone());
                let s = t.add(bce, ce);
                let s = t.add(s, sq);
                t.scale(s, 1.0 / 3.0)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn concat_slice_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_mat(&mut rng, 2, 3);
        let b = rand_mat(&mut rng, 3, 3);
        let target = rand_mat(&mut rng, 2, 3);
        check_grad(
            |t, vars| {
                let cat = t.concat_rows(vars[0], vars[1]);
                let sl = t.slice_rows(cat, 1, 3);
                let tr = t.transpose(sl);
                let back = t.transpose(tr);
                let sl2 = t.slice_rows(back, 0, 2);
                t.sq_err_sum(sl2, target.clone(), vec![0, 1, 2], vec![1.0, 1.0])
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn fully_masked_softmax_row_is_zero() {
        let x = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut mask = AttnMask::all_allowed(2, 3);
        for k in 0..3 {
            mask.set(1, k, false);
        }
        let y = softmax_rows_masked(&x, Some(&mask));
        assert!(y.row(1).iter().all(|&v| v == 0.0));
        let s: f64 = y.row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut p = Mat::from_vec(1, 3, vec![5.0, -3.0, 2.0]);
        let sizes = [3];
        let mut opt = Adam::new(0.1, &sizes);
        for _ in 0..500 {
            let g = Mat::from_vec(1, 3, p.data().iter().map(|v| 2.0 * v).collect());
            opt.step(&mut [&mut p], &[g]);
        }
        assert!(p.data().iter().all(|v| v.abs() < 1e-3));
    }
}
