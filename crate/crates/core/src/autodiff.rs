//! Reverse-mode automatic differentiation over small dense `f64` matrices.
//!
//! Every value on the [`Tape`] is a row-major matrix. Operations append nodes
//! and [`Tape::backward`] walks them in reverse, accumulating gradients. The
//! tape is rebuilt for every forward pass; nothing is cached between passes.

use serde::{Deserialize, Serialize};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: &[f64]) -> Self {
        Self::from_vec(1, data.len(), data.to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension mismatch");
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                out.data[i * other.rows + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension mismatch");
        let mut out = Tensor::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    L2NormalizeRows(Var),
    Clamp(Var, f64, f64),
    WindowMean(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    BceWithLogits(Var, Vec<f64>),
    Dropout(Var, Vec<f64>),
    SegmentAttention(Box<SegmentAttention>),
}

/// Saved state of a causal multi-head self-attention over row segments.
#[derive(Debug, Clone)]
struct SegmentAttention {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<(usize, usize)>,
    /// Attention weights, per segment then head, each `len × len`.
    probs: Vec<f64>,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::L2NormalizeRows(a)
            | Op::Clamp(a, _, _)
            | Op::WindowMean(a, _)
            | Op::PickPerRow(a, _)
            | Op::BceWithLogits(a, _)
            | Op::Dropout(a, _) => vec![*a],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
            Op::SegmentAttention(sa) => vec![sa.q, sa.k, sa.v],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data[0]
    }

    /// A differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A fixed input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y), "elementwise shape mismatch {}x{} vs {}x{}", x.rows, x.cols, y.rows, y.cols);
        Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    fn broadcast_row(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, r) = (self.value(a), self.value(row));
        assert!(r.rows == 1 && r.cols == x.cols, "row broadcast shape mismatch");
        let mut out = x.clone();
        for i in 0..x.rows {
            for j in 0..x.cols {
                out.data[i * x.cols + j] = f(x.data[i * x.cols + j], r.data[j]);
            }
        }
        out
    }

    /// `a + row`, broadcasting a `1×n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.broadcast_row(a, row, |x, r| x + r);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a ⊙ row`, broadcasting a `1×n` row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.broadcast_row(a, row, |x, r| x * r);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let width = if causal { (i + 1).min(x.cols) } else { x.cols };
            let row = &x.row(i)[..width];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out.data[i * x.cols + j] = e;
                total += e;
            }
            for j in 0..width {
                out.data[i * x.cols + j] /= total;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows {
            let lse = log_sum_exp(x.row(i));
            for j in 0..x.cols {
                out.data[i * x.cols + j] -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Sum of all entries as a `1×1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    /// Column means, `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(1, x.cols);
        for i in 0..x.rows {
            for j in 0..x.cols {
                out.data[j] += x.at(i, j);
            }
        }
        let n = x.rows as f64;
        for v in &mut out.data {
            *v /= n;
        }
        self.push(out, Op::MeanRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "concat_cols row mismatch");
                out.data[i * cols + offset..i * cols + offset + t.cols].copy_from_slice(t.row(i));
                offset += t.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let x = self.value(a);
        assert!(start + width <= x.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(x.rows, width);
        for i in 0..x.rows {
            out.data[i * width..(i + 1) * width].copy_from_slice(&x.row(i)[start..start + width]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Gathers rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * x.cols);
        for &r in indices {
            data.extend_from_slice(x.row(r));
        }
        let out = Tensor::from_vec(indices.len(), x.cols, data);
        self.push(out, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    /// Scales every row to unit Euclidean norm. Rows must be non-zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows {
            let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..x.cols {
                out.data[i * x.cols + j] /= norm;
            }
        }
        self.push(out, Op::L2NormalizeRows(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Row `t` of the result is the mean of rows `starts[t]..=t` of `a`.
    pub fn window_mean(&mut self, a: Var, starts: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(starts.len(), x.rows, "window_mean needs one start per row");
        let mut out = Tensor::zeros(x.rows, x.cols);
        for (t, &s) in starts.iter().enumerate() {
            assert!(s <= t, "window start after row");
            let n = (t - s + 1) as f64;
            for r in s..=t {
                for j in 0..x.cols {
                    out.data[t * x.cols + j] += x.at(r, j);
                }
            }
            for j in 0..x.cols {
                out.data[t * x.cols + j] /= n;
            }
        }
        self.push(out, Op::WindowMean(a, starts.to_vec()))
    }

    /// Selects one column per row, `m×n → m×1`.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(cols.len(), x.rows, "pick_per_row needs one index per row");
        let data = cols.iter().enumerate().map(|(i, &c)| x.at(i, c)).collect();
        self.push(Tensor::from_vec(x.rows, 1, data), Op::PickPerRow(a, cols.to_vec()))
    }

    /// Summed binary cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), targets.len(), "bce target count mismatch");
        let total = z
            .data
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(Tensor::from_vec(1, 1, vec![total]), Op::BceWithLogits(logits, targets.to_vec()))
    }

    /// Elementwise multiplication by a fixed mask (already scaled by the keep probability).
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.len());
        let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Dropout(a, mask))
    }

    /// Causal multi-head self-attention applied independently to each row
    /// segment `(start, len)`. `q`, `k` and `v` are `n × d` with `d`
    /// divisible by `heads`; rows outside every segment produce zeros.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[(usize, usize)]) -> Var {
        let (qx, kx, vx) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qx.rows, qx.cols);
        assert!(kx.rows == n && vx.rows == n && kx.cols == d && vx.cols == d, "attention shape mismatch");
        assert!(heads >= 1 && d % heads == 0, "attention dim must divide into heads");
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Tensor::zeros(n, d);
        let mut probs = Vec::with_capacity(segments.iter().map(|&(_, l)| heads * l * l).sum());
        let mut row = Vec::new();
        for &(start, len) in segments {
            assert!(start + len <= n, "segment outside the input");
            for h in 0..heads {
                let c0 = h * hd;
                for i in 0..len {
                    let qi = &qx.row(start + i)[c0..c0 + hd];
                    row.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kx.row(start + j)[c0..c0 + hd];
                        let sc = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        max = max.max(sc);
                        row.push(sc);
                    }
                    let mut total = 0.0;
                    for e in row.iter_mut() {
                        *e = (*e - max).exp();
                        total += *e;
                    }
                    let o = &mut out.data[(start + i) * d + c0..(start + i) * d + c0 + hd];
                    for (j, e) in row.iter_mut().enumerate() {
                        *e /= total;
                        let vj = &vx.row(start + j)[c0..c0 + hd];
                        for (ov, vv) in o.iter_mut().zip(vj) {
                            *ov += *e * vv;
                        }
                    }
                    probs.extend_from_slice(&row);
                    probs.extend(std::iter::repeat_n(0.0, len - i - 1));
                }
            }
        }
        self.push(
            out,
            Op::SegmentAttention(Box::new(SegmentAttention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            })),
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        let seed = self.value(loss);
        grads[loss.0] = Some(Tensor::filled(seed.rows, seed.cols, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = g.matmul_t(self.value(*b));
                        acc(&self.nodes, &mut grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = self.value(*a).t_matmul(&g);
                        acc(&self.nodes, &mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    if self.needs_grad(*a) {
                        let ga = g.matmul(self.value(*b));
                        acc(&self.nodes, &mut grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = g.t_matmul(self.value(*a));
                        acc(&self.nodes, &mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    acc(&self.nodes, &mut grads, *a, g.clone());
                    acc(&self.nodes, &mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&self.nodes, &mut grads, *b, g.map(|v| -v));
                    acc(&self.nodes, &mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = elementwise(&g, y, |g, y| g * y);
                    let gb = elementwise(&g, x, |g, x| g * x);
                    acc(&self.nodes, &mut grads, *a, ga);
                    acc(&self.nodes, &mut grads, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let gr = column_sums(&g);
                    acc(&self.nodes, &mut grads, *r, gr);
                    acc(&self.nodes, &mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let (x, row) = (self.value(*a), self.value(*r));
                    let mut ga = g.clone();
                    let mut gr = Tensor::zeros(1, x.cols);
                    for i in 0..x.rows {
                        for j in 0..x.cols {
                            let k = i * x.cols + j;
                            ga.data[k] = g.data[k] * row.data[j];
                            gr.data[j] += g.data[k] * x.data[k];
                        }
                    }
                    acc(&self.nodes, &mut grads, *a, ga);
                    acc(&self.nodes, &mut grads, *r, gr);
                }
                Op::Scale(a, s) => acc(&self.nodes, &mut grads, *a, g.map(|v| v * s)),
                Op::Tanh(a) => {
                    let ga = elementwise(&g, &node.value, |g, y| g * (1.0 - y * y));
                    acc(&self.nodes, &mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = elementwise(&g, &node.value, |g, y| g * y * (1.0 - y));
                    acc(&self.nodes, &mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = elementwise(&g, &node.value, |g, y| g * y);
                    acc(&self.nodes, &mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..y.cols {
                            let k = i * y.cols + j;
                            ga.data[k] = y.data[k] * (g.data[k] - dot);
                        }
                    }
                    acc(&self.nodes, &mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for i in 0..y.rows {
                        let total: f64 = g.row(i).iter().sum();
                        for j in 0..y.cols {
                            let k = i * y.cols + j;
                            ga.data[k] -= y.data[k].exp() * total;
                        }
                    }
                    acc(&self.nodes, &mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    acc(&self.nodes, &mut grads, *a, Tensor::filled(x.rows, x.cols, g.data[0]));
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let n = x.rows as f64;
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for i in 0..x.rows {
                        for j in 0..x.cols {
                            ga.data[i * x.cols + j] = g.data[j] / n;
                        }
                    }
                    acc(&self.nodes, &mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut gp = Tensor::zeros(g.rows, w);
                        for i in 0..g.rows {
                            gp.data[i * w..(i + 1) * w].copy_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&self.nodes, &mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let n = t.len();
                        let gp = Tensor::from_vec(t.rows, t.cols, g.data[offset..offset + n].to_vec());
                        offset += n;
                        acc(&self.nodes, &mut grads, p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let w = g.cols;
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for i in 0..x.rows {
                        ga.data[i * x.cols + start..i * x.cols + start + w].copy_from_slice(g.row(i));
                    }
                    acc(&self.nodes, &mut grads, *a, ga);
                }
                Op::GatherRows(a, indices) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for (i, &r) in indices.iter().enumerate() {
                        for j in 0..x.cols {
                            ga.data[r * x.cols + j] += g.at(i, j);
                        }
                    }
                    acc(&self.nodes, &mut grads, *a, ga);
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for i in 0..x.rows {
                        let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..x.cols {
                            let k = i * x.cols + j;
                            ga.data[k] = (g.data[k] - y.data[k] * dot) / norm;
                        }
                    }
                    acc(&self.nodes, &mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    let ga = elementwise(&g, x, |g, x| if x >= *lo && x <= *hi { g } else { 0.0 });
                    acc(&self.nodes, &mut grads, *a, ga);
                }
                Op::WindowMean(a, starts) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for (t, &s) in starts.iter().enumerate() {
                        let n = (t - s + 1) as f64;
                        for r in s..=t {
                            for j in 0..x.cols {
                                ga.data[r * x.cols + j] += g.at(t, j) / n;
                            }
                        }
                    }
                    acc(&self.nodes, &mut grads, *a, ga);
                }
                Op::PickPerRow(a, cols) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for (i, &c) in cols.iter().enumerate() {
                        ga.data[i * x.cols + c] = g.data[i];
                    }
                    acc(&self.nodes, &mut grads, *a, ga);
                }
                Op::BceWithLogits(a, targets) => {
                    let z = self.value(*a);
                    let mut ga = Tensor::zeros(z.rows, z.cols);
                    for (k, (&zv, &y)) in z.data.iter().zip(targets).enumerate() {
                        ga.data[k] = g.data[0] * (sigmoid(zv) - y);
                    }
                    acc(&self.nodes, &mut grads, *a, ga);
                }
                Op::Dropout(a, mask) => {
                    let mut ga = g.clone();
                    for (v, m) in ga.data.iter_mut().zip(mask) {
                        *v *= m;
                    }
                    acc(&self.nodes, &mut grads, *a, ga);
                }
                Op::SegmentAttention(sa) => {
                    let (gq, gk, gv) = self.segment_attention_grads(sa, &g);
                    acc(&self.nodes, &mut grads, sa.q, gq);
                    acc(&self.nodes, &mut grads, sa.k, gk);
                    acc(&self.nodes, &mut grads, sa.v, gv);
                }
            }
        }
        Gradients { grads }
    }
}

impl Tape {
    fn segment_attention_grads(&self, sa: &SegmentAttention, g: &Tensor) -> (Tensor, Tensor, Tensor) {
        let (qx, kx, vx) = (self.value(sa.q), self.value(sa.k), self.value(sa.v));
        let (n, d) = (qx.rows, qx.cols);
        let hd = d / sa.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut gq = Tensor::zeros(n, d);
        let mut gk = Tensor::zeros(n, d);
        let mut gv = Tensor::zeros(n, d);
        let mut offset = 0;
        let mut dp = Vec::new();
        for &(start, len) in &sa.segments {
            for h in 0..sa.heads {
                let c0 = h * hd;
                for i in 0..len {
                    let p = &sa.probs[offset + i * len..offset + i * len + i + 1];
                    let gi = &g.row(start + i)[c0..c0 + hd];
                    dp.clear();
                    let mut dot = 0.0;
                    for (j, &pij) in p.iter().enumerate() {
                        let vj = &vx.row(start + j)[c0..c0 + hd];
                        let d_ij: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dot += pij * d_ij;
                        dp.push(d_ij);
                        let gvj = &mut gv.data[(start + j) * d + c0..(start + j) * d + c0 + hd];
                        for (x, y) in gvj.iter_mut().zip(gi) {
                            *x += pij * y;
                        }
                    }
                    let qi = &qx.row(start + i)[c0..c0 + hd];
                    for (j, &pij) in p.iter().enumerate() {
                        let ds = scale * pij * (dp[j] - dot);
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kx.row(start + j)[c0..c0 + hd];
                        let gqi = &mut gq.data[(start + i) * d + c0..(start + i) * d + c0 + hd];
                        for (x, y) in gqi.iter_mut().zip(kj) {
                            *x += ds * y;
                        }
                        let gkj = &mut gk.data[(start + j) * d + c0..(start + j) * d + c0 + hd];
                        for (x, y) in gkj.iter_mut().zip(qi) {
                            *x += ds * y;
                        }
                    }
                }
                offset += len * len;
            }
        }
        (gq, gk, gv)
    }
}

fn acc(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols);
    for i in 0..g.rows {
        for j in 0..g.cols {
            out.data[j] += g.at(i, j);
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
