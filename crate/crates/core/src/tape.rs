//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the inputs
//! it read. Because a node can only reference nodes that already exist, the
//! tape is always in topological order and `backward` is a single reverse
//! sweep. All values are 2-D matrices internally; 1-D tensors enter as one
//! row.
//!
//! A tape supports exactly one backward pass. Call [`Tape::reset`] before
//! recording the next step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Softmax(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

/// Value used for masked logits before the softmax.
pub const MASKED_LOGIT: f64 = -1e30;

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

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads = None;
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf; it takes part in backward iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.matrix_dims();
        self.push(r, c, t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a raw matrix as a leaf.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "input",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.input(rows, cols, data, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node dims are consistent")
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.rows * n.cols != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    /// Gradient of the last backward pass with respect to `v`, if it was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    /// Gradient of `v`, or zeros when backward never reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.node(v).value.len()])
    }

    // ---------------------------------------------------------------------
    // Operations
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}x{k}] x [{k2}x{n}]: inner dimensions differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(n, m, out, Op::Transpose(a), rg)
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::shape(
                op,
                format!("[{}x{}] vs [{}x{}]", da.0, da.1, db.0, db.1),
            ));
        }
        Ok(da)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, record: Op) -> Result<Var> {
        let (r, c) = self.check_same(op, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, record, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let rg = self.rg(a);
        self.push(r, c, out, Op::Scale(a, factor), rg)
    }

    /// Multiplies every entry of `a` by the 1x1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            let (r, c) = self.dims(s);
            return Err(Error::shape("scale_by", format!("scalar operand is {r}x{c}")));
        }
        let (r, c) = self.dims(a);
        let f = self.value(s)[0];
        let out = self.value(a).iter().map(|&x| x * f).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(r, c, out, Op::ScaleBy(a, s), rg))
    }

    /// Adds the 1xn row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(b) != (1, n) {
            let (br, bc) = self.dims(b);
            return Err(Error::shape("add_row", format!("[{m}x{n}] + row [{br}x{bc}]")));
        }
        let bias = self.value(b);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(m, n, out, Op::AddRow(x, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(r, c, out, Op::Relu(a), rg)
    }

    /// Row-wise softmax. Positions where `mask` is false get probability
    /// exactly zero and never influence the other entries of their row.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::shape(
                    "softmax_rows",
                    format!("mask has {} entries for [{m}x{n}]", mask.len()),
                ));
            }
        }
        let src = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let keep = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let logit = |j: usize| if keep(j) { row[j] } else { MASKED_LOGIT };
            if !(0..n).any(keep) {
                return Err(Error::DegenerateRow { row: i });
            }
            let max = (0..n).filter(|&j| keep(j)).map(logit).fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if keep(j) {
                    let e = (logit(j) - max).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(m, n, out, Op::Softmax(x), rg))
    }

    /// Stacks matrices vertically, preserving order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no parts"));
        };
        let cols = self.dims(first).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column mismatch: {cols} vs {c}"),
                ));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > m {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {m}", start + len),
            ));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(len, n, out, Op::SliceRows(x, start), rg))
    }

    /// Inverse of [`Tape::concat_rows`]: contiguous row blocks of the given
    /// lengths.
    pub fn split_rows(&mut self, x: Var, lengths: &[usize]) -> Result<Vec<Var>> {
        let m = self.dims(x).0;
        let total: usize = lengths.iter().sum();
        if total != m || lengths.contains(&0) {
            return Err(Error::shape(
                "split_rows",
                format!("lengths {lengths:?} do not partition {m} rows"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(lengths.len());
        for &len in lengths {
            out.push(self.slice_rows(x, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Places matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no parts"));
        };
        let rows = self.dims(first).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape("concat_cols", format!("row mismatch: {rows} vs {r}")));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {n}", start + len),
            ));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(m, len, out, Op::SliceCols(x, start), rg))
    }

    /// Normalizes every row to zero mean and unit variance, then applies the
    /// per-column affine `gain`, `bias` (both 1xd).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims(x);
        if self.dims(gain) != (1, d) || self.dims(bias) != (1, d) {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {d}",
                    self.dims(gain),
                    self.dims(bias)
                ),
            ));
        }
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            m,
            d,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires them. Errors if `loss` is not 1x1 or if backward already
    /// ran on this tape without a [`reset`](Tape::reset).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::State(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let n = self.node(v).value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = cols;
                let av = self.value(a);
                let bv = self.value(b);
                // dA = dC . B^T
                self.accumulate(grads, a, |da| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            da[i * k + kk] += dot(gi, brow);
                        }
                    }
                });
                // dB = A^T . dC
                self.accumulate(grads, b, |db| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let s = av[i * k + kk];
                            if s != 0.0 {
                                axpy(s, gi, &mut db[kk * n..(kk + 1) * n]);
                            }
                        }
                    }
                });
            }
            &Op::Transpose(a) => {
                // node is cols x rows of a; a is rows_a x cols_a = cols x rows
                self.accumulate(grads, a, |da| {
                    for i in 0..rows {
                        for j in 0..cols {
                            da[j * rows + i] += g[i * cols + j];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |da| axpy(1.0, g, da));
                self.accumulate(grads, b, |db| axpy(1.0, g, db));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |da| axpy(1.0, g, da));
                self.accumulate(grads, b, |db| axpy(-1.0, g, db));
            }
            &Op::Mul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                self.accumulate(grads, a, |da| {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                self.accumulate(grads, b, |db| {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            &Op::Scale(a, f) => self.accumulate(grads, a, |da| axpy(f, g, da)),
            &Op::ScaleBy(a, s) => {
                let f = self.value(s)[0];
                let av = self.value(a);
                self.accumulate(grads, a, |da| axpy(f, g, da));
                self.accumulate(grads, s, |ds| ds[0] += dot(g, av));
            }
            &Op::AddRow(x, b) => {
                self.accumulate(grads, x, |dx| axpy(1.0, g, dx));
                self.accumulate(grads, b, |db| {
                    for row in g.chunks(cols) {
                        axpy(1.0, row, db);
                    }
                });
            }
            &Op::Relu(a) => {
                let av = self.value(a);
                self.accumulate(grads, a, |da| {
                    for ((d, &gi), &x) in da.iter_mut().zip(g).zip(av) {
                        if x > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            &Op::Softmax(x) => {
                let y = &node.value;
                self.accumulate(grads, x, |dx| {
                    for i in 0..rows {
                        let yr = &y[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let inner = dot(yr, gr);
                        for j in 0..cols {
                            dx[i * cols + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.node(p).value.len();
                    self.accumulate(grads, p, |dp| axpy(1.0, &g[offset..offset + len], dp));
                    offset += len;
                }
            }
            &Op::SliceRows(x, start) => {
                self.accumulate(grads, x, |dx| {
                    axpy(1.0, g, &mut dx[start * cols..(start + rows) * cols]);
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    self.accumulate(grads, p, |dp| {
                        for i in 0..rows {
                            axpy(
                                1.0,
                                &g[i * cols + offset..i * cols + offset + pc],
                                &mut dp[i * pc..(i + 1) * pc],
                            );
                        }
                    });
                    offset += pc;
                }
            }
            &Op::SliceCols(x, start) => {
                let n = self.dims(x).1;
                self.accumulate(grads, x, |dx| {
                    for i in 0..rows {
                        axpy(
                            1.0,
                            &g[i * cols..(i + 1) * cols],
                            &mut dx[i * n + start..i * n + start + cols],
                        );
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = cols;
                let gv = self.value(*gain);
                self.accumulate(grads, *gain, |dg| {
                    for i in 0..rows {
                        for j in 0..d {
                            dg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for row in g.chunks(d) {
                        axpy(1.0, row, db);
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    let mut dxhat = vec![0.0; d];
                    for i in 0..rows {
                        let h = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[i * d + j] * gv[j];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh = dot(&dxhat, h);
                        let scale = inv_std[i] / d as f64;
                        for j in 0..d {
                            dx[i * d + j] += scale * (d as f64 * dxhat[j] - sum_d - h[j] * sum_dh);
                        }
                    }
                });
            }
            &Op::Sum(a) => {
                let s = g[0];
                self.accumulate(grads, a, |da| {
                    for d in da.iter_mut() {
                        *d += s;
                    }
                });
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = a (m x k) . b (k x n)`, row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let s = a[i * k + kk];
            if s != 0.0 {
                axpy(s, &b[kk * n..(kk + 1) * n], orow);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let i = t.leaf(&Tensor::identity(2).unwrap());
        let a = t.leaf(&m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = t.matmul(i, a).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let x = t.leaf(&m(&[&[1.0, 2.0]]));
        let y = t.leaf(&m(&[&[3.0], &[4.0]]));
        let p = t.matmul(x, y).unwrap();
        assert_eq!(t.value(p), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::zeros(vec![2, 3]).unwrap());
        let b = t.leaf(&Tensor::zeros(vec![2, 3]).unwrap());
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("[2x3] x [2x3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let f = |x: &Tensor| {
            let mut t = Tape::new();
            let xa = t.leaf(x);
            let xb = t.leaf(&b);
            let p = t.matmul(xa, xb).unwrap();
            let s = t.sum(p);
            t.scalar(s).unwrap()
        };
        let mut t = Tape::new();
        let xa = t.leaf(&a.clone().with_requires_grad(true));
        let xb = t.leaf(&b);
        let p = t.matmul(xa, xb).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        let numeric = finite_diff_grad(f, &a, 1e-5);
        assert!(max_rel_error(t.grad(xa).unwrap(), numeric.data()) < 1e-6);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut t = Tape::new();
        let x = t.leaf(&m(&[&[0.0, 0.0, 0.0], &[1f64.ln(), 2f64.ln(), 3f64.ln()]]));
        let y = t.softmax_rows(x, None).unwrap();
        let v = t.value(y);
        for &p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        for (j, &p) in v[3..].iter().enumerate() {
            assert!((p - (j + 1) as f64 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut t = Tape::new();
        let x = t.leaf(&m(&[&[1000.0, 0.0]]));
        let y = t.softmax_rows(x, None).unwrap();
        assert_eq!(t.value(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_masked_entries_are_exactly_zero() {
        let mut t = Tape::new();
        let x = t.leaf(&m(&[&[5.0, 1.0, 2.0]]));
        let y = t.softmax_rows(x, Some(&[false, true, true])).unwrap();
        let v = t.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(&m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let err = t.softmax_rows(x, Some(&[true, false, false, false])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
    }

    #[test]
    fn concat_and_split() {
        let mut t = Tape::new();
        let a = t.leaf(&m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let b = t.leaf(&m(&[&[7.0, 8.0, 9.0]]));
        let c = t.concat_rows(&[a, b]).unwrap();
        assert_eq!(t.dims(c), (3, 3));
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let single = t.concat_rows(&[a]).unwrap();
        assert_eq!(t.value(single), t.value(a));

        let parts = t.split_rows(c, &[2, 1]).unwrap();
        assert_eq!(t.value(parts[0]), t.value(a));
        assert_eq!(t.value(parts[1]), t.value(b));
        let whole = t.split_rows(c, &[3]).unwrap();
        assert_eq!(t.value(whole[0]), t.value(c));

        assert!(t.split_rows(c, &[2, 2]).is_err());
        let narrow = t.leaf(&m(&[&[1.0, 2.0]]));
        assert!(t.concat_rows(&[a, narrow]).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let mut t = Tape::new();
        let x = t.leaf(&m(&[&[-1.0, 0.0, 2.0]]));
        let z = t.leaf(&Tensor::zeros(vec![1, 3]).unwrap());
        let s = t.add(x, z).unwrap();
        assert_eq!(t.value(s), t.value(x));
        let r = t.relu(x);
        assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);
        let bad = t.leaf(&Tensor::zeros(vec![3, 1]).unwrap());
        assert!(t.add(x, bad).is_err());
        assert!(t.mul(x, bad).is_err());
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut t = Tape::new();
        let g = t.leaf(&Tensor::filled(vec![2], 1.0).unwrap());
        let b = t.leaf(&Tensor::zeros(vec![2]).unwrap());
        let x = t.leaf(&m(&[&[1.0, 3.0], &[5.0, 5.0]]));
        let y = t.layer_norm(x, g, b, 0.0 + 1e-300).unwrap();
        let v = t.value(y);
        assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn backward_simple_losses() {
        let x0 = Tensor::vector(vec![0.5, -2.0, 3.0]).unwrap().with_requires_grad(true);
        let mut t = Tape::new();
        let x = t.leaf(&x0);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(&x0);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_contract_and_state_errors() {
        let x0 = Tensor::vector(vec![1.0, 2.0]).unwrap().with_requires_grad(true);
        let mut t = Tape::new();
        let x = t.leaf(&x0);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::State(_))));
        t.reset();
        assert!(t.is_empty());
        let x = t.leaf(&x0);
        let s = t.sum(x);
        t.backward(s).unwrap();
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.leaf(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let x = t.leaf(&Tensor::vector(vec![3.0, 4.0]).unwrap().with_requires_grad(true));
        let p = t.mul(c, x).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn ops_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(&a);
            let y = t.leaf(&b);
            let p = t.matmul(x, y).unwrap();
            let s = t.softmax_rows(p, None).unwrap();
            t.to_tensor(s)
        };
        assert!(run().bit_eq(&run()));
    }
}
