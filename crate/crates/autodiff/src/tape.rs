//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. A node only keeps
//! its operator (and therefore participates in `backward`) when at least one of
//! its inputs requires a gradient; otherwise it is stored as a constant.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

/// Lower clamp applied to probabilities before taking their log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear combination of table rows: each output row is
/// `sum(weight * table[row])` over its entries.
pub type SparseRows = Vec<Vec<(usize, f64)>>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    MaxRowGroups(Var, Vec<usize>),
    Sparse(Var, Arc<SparseRows>),
    CrossEntropy(Var, Vec<usize>),
    AddN(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    // Branch decisions taken at non-smooth points (ReLU sign, max argmax,
    // probability clamp). Used by gradient checks to detect kink crossings.
    branches: RefCell<Vec<u32>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(Tensor::mat_shape(rows, cols), data).expect("internal shape")
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

    /// Registers a tensor as a leaf.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a shared tensor as a leaf without copying it.
    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Branch decisions recorded at non-smooth operations so far.
    pub fn branch_signature(&self) -> Vec<u32> {
        self.branches.borrow().clone()
    }

    fn push(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        self.push(Arc::new(value), op, rg)
    }

    fn note_branches(&self, bits: impl IntoIterator<Item = u32>) {
        self.branches.borrow_mut().extend(bits);
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(mismatch("matmul", &av, &bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = mat(m, n, matmul_raw(av.data(), bv.data(), m, k, n));
        Ok(self.record(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                msg: format!("expected a matrix, got {:?}", av.shape()),
            });
        }
        let out = mat(av.cols(), av.rows(), transpose_raw(av.data(), av.rows(), av.cols()));
        Ok(self.record(out, Op::Transpose(a), &[a]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op, &av, &bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.record(out, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(mismatch("add_row", &av, &rv));
        }
        let n = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv.data()[i % n])
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.record(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Sum of any number of equally shaped tensors.
    pub fn add_n(&self, vars: &[Var]) -> Result<Var> {
        let first = vars.first().ok_or(AutodiffError::InvalidArgument {
            op: "add_n",
            msg: "no operands".into(),
        })?;
        let fv = self.value(*first);
        let mut acc = fv.data().to_vec();
        for v in &vars[1..] {
            let vv = self.value(*v);
            if vv.shape() != fv.shape() {
                return Err(mismatch("add_n", &fv, &vv));
            }
            for (a, b) in acc.iter_mut().zip(vv.data()) {
                *a += b;
            }
        }
        let out = Tensor::new(fv.shape().to_vec(), acc)?;
        Ok(self.record(out, Op::AddN(vars.to_vec()), vars))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.record(out, Op::Scale(a, factor), &[a])
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.unary(a, f64::exp);
        self.record(out, Op::Exp(a), &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        self.note_branches(av.data().iter().map(|x| u32::from(*x > 0.0)));
        let out = self.unary(a, |x| x.max(0.0));
        self.record(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.unary(a, sigmoid);
        self.record(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.unary(a, f64::tanh);
        self.record(out, Op::Tanh(a), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut data = Vec::with_capacity(av.numel());
        for r in 0..av.rows() {
            data.extend(softmax_row(av.row_slice(r), None));
        }
        debug_assert_eq!(data.len(), av.rows() * n);
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.record(out, Op::Softmax(a), &[a])
    }

    /// Row-wise softmax restricted to entries where `mask` is set; masked-off
    /// entries are exactly zero. Every row must keep at least one entry.
    pub fn masked_softmax(&self, a: Var, mask: &[bool]) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.numel() {
            return Err(AutodiffError::InvalidArgument {
                op: "masked_softmax",
                msg: format!("mask has {} entries for shape {:?}", mask.len(), av.shape()),
            });
        }
        let n = av.cols();
        let mut data = Vec::with_capacity(av.numel());
        for r in 0..av.rows() {
            let m = &mask[r * n..(r + 1) * n];
            if !m.iter().any(|b| *b) {
                return Err(AutodiffError::InvalidArgument {
                    op: "masked_softmax",
                    msg: format!("row {r} has no admissible entry"),
                });
            }
            data.extend(softmax_row(av.row_slice(r), Some(m)));
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.record(out, Op::MaskedSoftmax(a), &[a]))
    }

    /// Row-wise layer normalization with per-feature `gain` and `bias` rows.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.numel() != n || bv.numel() != n {
            return Err(mismatch("layer_norm", &xv, &gv));
        }
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut data = Vec::with_capacity(xv.numel());
        for r in 0..xv.rows() {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                data.push(h * gv.data()[c] + bv.data()[c]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.record(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    pub fn concat_cols(&self, vars: &[Var]) -> Result<Var> {
        let vals: Vec<_> = vars.iter().map(|v| self.value(*v)).collect();
        let rows = vals.first().map(|v| v.rows()).ok_or(AutodiffError::InvalidArgument {
            op: "concat_cols",
            msg: "no operands".into(),
        })?;
        if let Some(bad) = vals.iter().find(|v| v.rows() != rows) {
            return Err(mismatch("concat_cols", &vals[0], bad));
        }
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row_slice(r));
            }
        }
        Ok(self.record(mat(rows, cols, data), Op::ConcatCols(vars.to_vec()), vars))
    }

    pub fn concat_rows(&self, vars: &[Var]) -> Result<Var> {
        let vals: Vec<_> = vars.iter().map(|v| self.value(*v)).collect();
        let cols = vals.first().map(|v| v.cols()).ok_or(AutodiffError::InvalidArgument {
            op: "concat_rows",
            msg: "no operands".into(),
        })?;
        if let Some(bad) = vals.iter().find(|v| v.cols() != cols) {
            return Err(mismatch("concat_rows", &vals[0], bad));
        }
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        Ok(self.record(mat(rows, cols, data), Op::ConcatRows(vars.to_vec()), vars))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.rows() || len == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{} of {}", start + len, av.rows()),
            });
        }
        let c = av.cols();
        let data = av.data()[start * c..(start + len) * c].to_vec();
        Ok(self.record(mat(len, c, data), Op::SliceRows(a, start), &[a]))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if start + len > c || len == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                msg: format!("cols {start}..{} of {c}", start + len),
            });
        }
        let mut data = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row_slice(r)[start..start + len]);
        }
        Ok(self.record(mat(av.rows(), len, data), Op::SliceCols(a, start), &[a]))
    }

    /// Gathers rows by index; an index may repeat.
    pub fn select_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if indices.is_empty() || indices.iter().any(|i| *i >= av.rows()) {
            return Err(AutodiffError::InvalidArgument {
                op: "select_rows",
                msg: format!("indices {indices:?} for {} rows", av.rows()),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * av.cols());
        for &i in indices {
            data.extend_from_slice(av.row_slice(i));
        }
        Ok(self.record(mat(indices.len(), av.cols(), data), Op::SelectRows(a, indices.to_vec()), &[a]))
    }

    pub fn row(&self, a: Var, r: usize) -> Result<Var> {
        self.slice_rows(a, r, 1)
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.record(Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Column means: `[m, n] -> [1, n]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut data = vec![0.0; n];
        for r in 0..m {
            for (d, v) in data.iter_mut().zip(av.row_slice(r)) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        self.record(mat(1, n, data), Op::MeanRows(a), &[a])
    }

    /// Column-wise maximum: `[m, n] -> [1, n]`. Ties pick the first row.
    pub fn max_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut arg = vec![0usize; n];
        let mut data = av.row_slice(0).to_vec();
        for r in 1..m {
            for c in 0..n {
                let v = av.get(r, c);
                if v > data[c] {
                    data[c] = v;
                    arg[c] = r;
                }
            }
        }
        self.note_branches(arg.iter().map(|a| *a as u32));
        self.record(mat(1, n, data), Op::MaxRows(a, arg), &[a])
    }

    /// Column-wise maximum within consecutive blocks of `group` rows:
    /// `[m, n] -> [m / group, n]`. Ties pick the first row of the block.
    pub fn max_row_groups(&self, a: Var, group: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        if group == 0 || m % group != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "max_row_groups",
                msg: format!("{m} rows in groups of {group}"),
            });
        }
        let blocks = m / group;
        let mut arg = vec![0usize; blocks * n];
        let mut data = vec![0.0; blocks * n];
        for b in 0..blocks {
            for c in 0..n {
                let mut best = b * group;
                for r in b * group + 1..(b + 1) * group {
                    if av.get(r, c) > av.get(best, c) {
                        best = r;
                    }
                }
                arg[b * n + c] = best;
                data[b * n + c] = av.get(best, c);
            }
        }
        self.note_branches(arg.iter().map(|a| *a as u32));
        Ok(self.record(mat(blocks, n, data), Op::MaxRowGroups(a, arg), &[a]))
    }

    /// Sparse weighted gather over the rows of `table`.
    pub fn sparse_combine(&self, table: Var, rows: Arc<SparseRows>) -> Result<Var> {
        let tv = self.value(table);
        let n = tv.cols();
        let mut data = vec![0.0; rows.len() * n];
        for (i, entries) in rows.iter().enumerate() {
            let out = &mut data[i * n..(i + 1) * n];
            for &(k, w) in entries {
                if k >= tv.rows() {
                    return Err(AutodiffError::InvalidArgument {
                        op: "sparse_combine",
                        msg: format!("row {k} out of {}", tv.rows()),
                    });
                }
                for (o, t) in out.iter_mut().zip(tv.row_slice(k)) {
                    *o += w * t;
                }
            }
        }
        let out = mat(rows.len(), n, data);
        Ok(self.record(out, Op::Sparse(table, rows), &[table]))
    }

    /// Mean over rows of `-ln(max(p[r, target_r], 1e-12))` for rows of
    /// probabilities.
    pub fn cross_entropy(&self, probs: Var, targets: &[usize]) -> Result<Var> {
        let pv = self.value(probs);
        if targets.len() != pv.rows() {
            return Err(AutodiffError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("{} targets for {} rows", targets.len(), pv.rows()),
            });
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= pv.cols() {
                return Err(AutodiffError::InvalidArgument {
                    op: "cross_entropy",
                    msg: format!("class {t} out of {}", pv.cols()),
                });
            }
            let p = pv.get(r, t);
            self.note_branches([u32::from(p > PROB_FLOOR)]);
            total -= p.max(PROB_FLOOR).ln();
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        Ok(self.record(out, Op::CrossEntropy(probs, targets.to_vec()), &[probs]))
    }

    /// Reverse sweep from a scalar node. The tape is left untouched, so calling
    /// this twice gives identical results.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_node = &nodes[output.0];
        if !out_node.value.is_scalar() {
            return Err(AutodiffError::NotScalar(out_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let val = &node.value;
            let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                contrib(slot);
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    acc(*a, &|s| {
                        let bt = transpose_raw(bv.data(), k, n);
                        let ga = matmul_raw(&g, &bt, m, n, k);
                        add_into(s, &ga);
                    });
                    acc(*b, &|s| {
                        let at = transpose_raw(av.data(), m, k);
                        let gb = matmul_raw(&at, &g, k, m, n);
                        add_into(s, &gb);
                    });
                }
                Op::Transpose(a) => {
                    let (r, c) = (val.rows(), val.cols());
                    acc(*a, &|s| add_into(s, &transpose_raw(&g, r, c)));
                }
                Op::Add(a, b) => {
                    acc(*a, &|s| add_into(s, &g));
                    acc(*b, &|s| add_into(s, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|s| add_into(s, &g));
                    acc(*b, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(*a, &|s| {
                        for ((x, gy), bb) in s.iter_mut().zip(&g).zip(bv.data()) {
                            *x += gy * bb;
                        }
                    });
                    acc(*b, &|s| {
                        for ((x, gy), aa) in s.iter_mut().zip(&g).zip(av.data()) {
                            *x += gy * aa;
                        }
                    });
                }
                Op::AddRow(a, row) => {
                    let n = val.cols();
                    acc(*a, &|s| add_into(s, &g));
                    acc(*row, &|s| {
                        for (j, gy) in g.iter().enumerate() {
                            s[j % n] += gy;
                        }
                    });
                }
                Op::AddN(vars) => {
                    for v in vars {
                        acc(*v, &|s| add_into(s, &g));
                    }
                }
                Op::Scale(a, f) => {
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += f * y));
                }
                Op::Exp(a) => acc(*a, &|s| {
                    for ((x, gy), y) in s.iter_mut().zip(&g).zip(val.data()) {
                        *x += gy * y;
                    }
                }),
                Op::Relu(a) => {
                    let av = &nodes[a.0].value;
                    acc(*a, &|s| {
                        for ((x, gy), inp) in s.iter_mut().zip(&g).zip(av.data()) {
                            if *inp > 0.0 {
                                *x += gy;
                            }
                        }
                    })
                }
                Op::Sigmoid(a) => acc(*a, &|s| {
                    for ((x, gy), y) in s.iter_mut().zip(&g).zip(val.data()) {
                        *x += gy * y * (1.0 - y);
                    }
                }),
                Op::Tanh(a) => acc(*a, &|s| {
                    for ((x, gy), y) in s.iter_mut().zip(&g).zip(val.data()) {
                        *x += gy * (1.0 - y * y);
                    }
                }),
                Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                    let n = val.cols();
                    acc(*a, &|s| {
                        for r in 0..val.rows() {
                            let y = val.row_slice(r);
                            let gy = &g[r * n..(r + 1) * n];
                            let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                            for c in 0..n {
                                s[r * n + c] += y[c] * (gy[c] - dot);
                            }
                        }
                    })
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let n = val.cols();
                    let rows = val.rows();
                    let gv = &nodes[gain.0].value;
                    acc(*x, &|s| {
                        for r in 0..rows {
                            let gy = &g[r * n..(r + 1) * n];
                            let xh = &xhat[r * n..(r + 1) * n];
                            let dxh: Vec<f64> = gy.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                            let mean_d = dxh.iter().sum::<f64>() / n as f64;
                            let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            for c in 0..n {
                                s[r * n + c] += inv_std[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
                            }
                        }
                    });
                    acc(*gain, &|s| {
                        for (j, gy) in g.iter().enumerate() {
                            s[j % n] += gy * xhat[j];
                        }
                    });
                    acc(*bias, &|s| {
                        for (j, gy) in g.iter().enumerate() {
                            s[j % n] += gy;
                        }
                    });
                }
                Op::ConcatCols(vars) => {
                    let total = val.cols();
                    let mut offset = 0;
                    for v in vars {
                        let w = nodes[v.0].value.cols();
                        acc(*v, &|s| {
                            for r in 0..val.rows() {
                                for c in 0..w {
                                    s[r * w + c] += g[r * total + offset + c];
                                }
                            }
                        });
                        offset += w;
                    }
                }
                Op::ConcatRows(vars) => {
                    let mut offset = 0;
                    for v in vars {
                        let len = nodes[v.0].value.numel();
                        acc(*v, &|s| add_into(s, &g[offset..offset + len]));
                        offset += len;
                    }
                }
                Op::SliceRows(a, start) => {
                    let c = val.cols();
                    acc(*a, &|s| add_into(&mut s[start * c..start * c + g.len()], &g));
                }
                Op::SliceCols(a, start) => {
                    let (w, total) = (val.cols(), nodes[a.0].value.cols());
                    acc(*a, &|s| {
                        for r in 0..val.rows() {
                            add_into(&mut s[r * total + start..r * total + start + w], &g[r * w..(r + 1) * w]);
                        }
                    });
                }
                Op::SelectRows(a, indices) => {
                    let c = val.cols();
                    acc(*a, &|s| {
                        for (k, &i) in indices.iter().enumerate() {
                            add_into(&mut s[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                        }
                    });
                }
                Op::MaxRowGroups(a, arg) => {
                    let n = val.cols();
                    acc(*a, &|s| {
                        for (j, &r) in arg.iter().enumerate() {
                            s[r * n + j % n] += g[j];
                        }
                    });
                }
                Op::SumAll(a) => acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0])),
                Op::MeanAll(a) => {
                    let n = nodes[a.0].value.numel() as f64;
                    acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0] / n));
                }
                Op::MeanRows(a) => {
                    let av = &nodes[a.0].value;
                    let (m, n) = (av.rows(), av.cols());
                    acc(*a, &|s| {
                        for r in 0..m {
                            for c in 0..n {
                                s[r * n + c] += g[c] / m as f64;
                            }
                        }
                    });
                }
                Op::MaxRows(a, arg) => {
                    let n = val.cols();
                    acc(*a, &|s| {
                        for c in 0..n {
                            s[arg[c] * n + c] += g[c];
                        }
                    });
                }
                Op::Sparse(table, rows) => {
                    let n = val.cols();
                    acc(*table, &|s| {
                        for (i, entries) in rows.iter().enumerate() {
                            let gy = &g[i * n..(i + 1) * n];
                            for &(k, w) in entries {
                                for (x, q) in s[k * n..(k + 1) * n].iter_mut().zip(gy) {
                                    *x += w * q;
                                }
                            }
                        }
                    });
                }
                Op::CrossEntropy(p, targets) => {
                    let pv = &nodes[p.0].value;
                    let n = pv.cols();
                    let count = targets.len() as f64;
                    acc(*p, &|s| {
                        for (r, &t) in targets.iter().enumerate() {
                            let pr = pv.get(r, t);
                            if pr > PROB_FLOOR {
                                s[r * n + t] -= g[0] / (count * pr);
                            }
                        }
                    });
                }
            }
        }
        let mut full: Vec<Option<Tensor>> = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            full.push(g.map(|d| Tensor::new(nodes[i].value.shape().to_vec(), d).expect("grad shape")));
        }
        Ok(Gradients { grads: full })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(i, v)| if keep(i) { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
