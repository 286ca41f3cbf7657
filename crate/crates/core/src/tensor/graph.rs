use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
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
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    MulRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Sigmoid(Var),
    Relu(Var),
    Softmax {
        x: Var,
        n: usize,
    },
    AvgPool2d {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
        ph: usize,
        pw: usize,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Reshape(Var),
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Sum(Var),
    MeanRows {
        x: Var,
        rows: usize,
    },
    MseMean(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Arc<[u8]>,
        probs: Vec<f64>,
        classes: usize,
    },
    SoftDice {
        probs: Var,
        labels: Arc<[u8]>,
        classes: usize,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only op tape. Nodes are topologically ordered by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf tracked for gradients (a trainable parameter or probe input).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t.detach(),
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op, rg: bool) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad: rg,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// `[.., m, k] x [.., k, n]`; a rank-2 right operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::dim(format!("matmul inner dims differ: {sa:?} x {sb:?}")));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && lead != &sb[..sb.len() - 2] {
            return Err(Error::dim(format!("matmul batch dims differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            if shared_rhs {
                gemm_acc(ad, bd, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    gemm_acc(
                        &ad[i * m * k..(i + 1) * m * k],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "matmul",
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_len_check(&self, x: Var, row: Var, what: &str) -> Result<usize> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.value(row).numel() != n {
            return Err(Error::dim(format!(
                "{what}: row of {} values against last dim {n}",
                self.value(row).numel()
            )));
        }
        Ok(n)
    }

    /// Adds a `[n]` row to every row of `x[.., n]` (bias broadcast).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_len_check(x, row, "add_row")?;
        let r = self.data(row);
        let out = self.data(x).chunks(n).flat_map(|c| c.iter().zip(r).map(|(a, b)| a + b)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(row);
        self.push("add_row", shape, out, Op::AddRow { x, row }, rg)
    }

    /// Multiplies every row of `x[.., n]` elementwise by a `[n]` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_len_check(x, row, "mul_row")?;
        let r = self.data(row);
        let out = self.data(x).chunks(n).flat_map(|c| c.iter().zip(r).map(|(a, b)| a * b)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(row);
        self.push("mul_row", shape, out, Op::MulRow { x, row }, rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * k).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("scale", shape, out, Op::Scale { x, k }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("sigmoid", shape, out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("relu", shape, out, Op::Relu(x), rg)
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if n == 0 {
            return Err(Error::dim("softmax over an empty last dim"));
        }
        let mut out = self.data(x).to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let rg = self.rg(x);
        self.push("softmax", shape, out, Op::Softmax { x, n }, rg)
    }

    /// Average pooling of a `[h, w, c]` map with a square kernel and stride `p`.
    pub fn avgpool2d(&mut self, x: Var, p: usize) -> Result<Var> {
        self.avgpool2d_rect(x, p, p)
    }

    /// Mean over all spatial positions of a `[h, w, c]` map, giving `[c]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("global_avgpool expects [h, w, c], got {s:?}")));
        }
        let pooled = self.avgpool2d_rect(x, s[0], s[1])?;
        self.reshape(pooled, &[s[2]])
    }

    fn avgpool2d_rect(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("avgpool2d expects [h, w, c], got {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::dim(format!("avgpool2d kernel {ph}x{pw} does not divide {h}x{w}")));
        }
        let (oh, ow) = (h / ph, w / pw);
        let inv = 1.0 / (ph * pw) as f64;
        let xd = self.data(x);
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..h {
            for xx in 0..w {
                let o = ((y / ph) * ow + xx / pw) * c;
                let i = (y * w + xx) * c;
                for ch in 0..c {
                    out[o + ch] += xd[i + ch];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(x);
        self.push("avgpool2d", vec![oh, ow, c], out, Op::AvgPool2d { x, h, w, c, ph, pw }, rg)
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::dim(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
            }
            widths.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (v, &wd) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(*v)[o * wd..(o + 1) * wd]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            rg,
        )
    }

    /// `out.flat[i] = x.flat[index[i]]`. Covers slicing, window reordering,
    /// upsampling and token selection; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::dim(format!("gather of {} indices into shape {shape:?}", index.len())));
        }
        let xd = self.data(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xd.len()) {
            return Err(Error::dim(format!("gather index {bad} out of range {}", xd.len())));
        }
        let out = index.iter().map(|&i| xd[i]).collect();
        let rg = self.rg(x);
        self.push("gather", shape.to_vec(), out, Op::Gather { x, index }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", self.shape(x))));
        }
        let out = self.data(x).to_vec();
        let rg = self.rg(x);
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x), rg)
    }

    /// Swaps the last two dims.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim(format!("transpose needs rank >= 2, got {s:?}")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value(x).numel() / (rows * cols);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[off + c * rows + r] = xd[off + r * cols + c];
                }
            }
        }
        let mut shape = s;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.rg(x);
        self.push("transpose", shape, out, Op::Transpose { x, batch, rows, cols }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push("sum", vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Mean over the leading axis: `[r, ..rest] -> [..rest]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim(format!("mean_rows needs rank >= 2, got {s:?}")));
        }
        let rows = s[0];
        let width = self.value(x).numel() / rows;
        let mut out = vec![0.0; width];
        for r in self.data(x).chunks(width) {
            out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(x);
        self.push("mean_rows", s[1..].to_vec(), out, Op::MeanRows { x, rows }, rg)
    }

    /// `(1/N) * sum((a - b)^2)` with `N` the element count.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse_mean")?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push("mse_mean", vec![1], vec![s / n], Op::MseMean(a, b), rg)
    }

    /// Mean cross-entropy of `logits[N, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<[u8]>) -> Result<Var> {
        let (n, classes) = self.label_check(logits, &labels, "cross_entropy")?;
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0;
        for (row, &y) in probs.chunks_mut(classes).zip(labels.iter()) {
            let lse = log_sum_exp(row);
            total += lse - row[y as usize];
            softmax_in_place(row);
        }
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            vec![1],
            vec![total / n as f64],
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                classes,
            },
            rg,
        )
    }

    /// Soft Dice loss `1 - mean_k (2 I_k + eps) / (P_k + Y_k + eps)` over
    /// class probabilities `probs[N, C]`.
    pub fn soft_dice(&mut self, probs: Var, labels: Arc<[u8]>, eps: f64) -> Result<Var> {
        let (_, classes) = self.label_check(probs, &labels, "soft_dice")?;
        let (inter, psum, ysum) = dice_sums(self.data(probs), &labels, classes);
        let mean: f64 = (0..classes)
            .map(|k| (2.0 * inter[k] + eps) / (psum[k] + ysum[k] + eps))
            .sum::<f64>()
            / classes as f64;
        let rg = self.rg(probs);
        self.push(
            "soft_dice",
            vec![1],
            vec![1.0 - mean],
            Op::SoftDice {
                probs,
                labels,
                classes,
                eps,
            },
            rg,
        )
    }

    fn label_check(&self, x: Var, labels: &[u8], what: &str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim(format!("{what} expects [N, C], got {s:?}")));
        }
        let (n, classes) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::dim(format!("{what}: {} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
            return Err(Error::data(format!("{what}: label {bad} >= class count {classes}")));
        }
        Ok((n, classes))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                    continue;
                }
                op => backprop(&self.nodes, op, &node.value, &g, &mut grads),
            }
        }
        Ok(())
    }
}

fn backprop(nodes: &[Node], op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    match op {
        Op::Leaf => unreachable!(),
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let (ad, bd) = (val(a), val(b));
            if let Some(da) = slot(nodes, grads, a) {
                if shared_rhs {
                    gemm_nt_acc(g, bd, da, batch * m, n, k);
                } else {
                    for i in 0..batch {
                        gemm_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                if shared_rhs {
                    gemm_tn_acc(ad, g, db, batch * m, k, n);
                } else {
                    for i in 0..batch {
                        gemm_tn_acc(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
        }
        &Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, b) {
                add_into(db, g);
            }
        }
        &Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, b) {
                db.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi);
            }
        }
        &Op::Mul(a, b) => {
            let (ad, bd) = (val(a), val(b));
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(bd) {
                    *d += gi * y;
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for ((d, gi), x) in db.iter_mut().zip(g).zip(ad) {
                    *d += gi * x;
                }
            }
        }
        &Op::AddRow { x, row } => {
            let n = val(row).len();
            if let Some(dx) = slot(nodes, grads, x) {
                add_into(dx, g);
            }
            if let Some(dr) = slot(nodes, grads, row) {
                for gr in g.chunks(n) {
                    add_into(dr, gr);
                }
            }
        }
        &Op::MulRow { x, row } => {
            let (xd, rd) = (val(x), val(row));
            let n = rd.len();
            if let Some(dx) = slot(nodes, grads, x) {
                for (dxr, gr) in dx.chunks_mut(n).zip(g.chunks(n)) {
                    for ((d, gi), r) in dxr.iter_mut().zip(gr).zip(rd) {
                        *d += gi * r;
                    }
                }
            }
            if let Some(dr) = slot(nodes, grads, row) {
                for (xr, gr) in xd.chunks(n).zip(g.chunks(n)) {
                    for ((d, gi), xv) in dr.iter_mut().zip(gr).zip(xr) {
                        *d += gi * xv;
                    }
                }
            }
        }
        &Op::Scale { x, k } => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * k);
            }
        }
        &Op::Sigmoid(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                for ((d, gi), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        &Op::Relu(x) => {
            let xd = val(x);
            if let Some(dx) = slot(nodes, grads, x) {
                for ((d, gi), xv) in dx.iter_mut().zip(g).zip(xd) {
                    if *xv > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        &Op::Softmax { x, n } => {
            if let Some(dx) = slot(nodes, grads, x) {
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gi), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += y * (gi - dot);
                    }
                }
            }
        }
        &Op::AvgPool2d { x, h, w, c, ph, pw } => {
            if let Some(dx) = slot(nodes, grads, x) {
                let ow = w / pw;
                let inv = 1.0 / (ph * pw) as f64;
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((y / ph) * ow + xx / pw) * c;
                        let i = (y * w + xx) * c;
                        for ch in 0..c {
                            dx[i + ch] += g[o + ch] * inv;
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, outer, widths } => {
            let row: usize = widths.iter().sum();
            let mut off = 0;
            for (&v, &wd) in inputs.iter().zip(widths) {
                if let Some(dv) = slot(nodes, grads, v) {
                    for o in 0..*outer {
                        add_into(
                            &mut dv[o * wd..(o + 1) * wd],
                            &g[o * row + off..o * row + off + wd],
                        );
                    }
                }
                off += wd;
            }
        }
        Op::Gather { x, index } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (&i, gi) in index.iter().zip(g) {
                    dx[i] += gi;
                }
            }
        }
        &Op::Reshape(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                add_into(dx, g);
            }
        }
        &Op::Transpose { x, batch, rows, cols } => {
            if let Some(dx) = slot(nodes, grads, x) {
                for b in 0..batch {
                    let off = b * rows * cols;
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[off + r * cols + c] += g[off + c * rows + r];
                        }
                    }
                }
            }
        }
        &Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::MeanRows { x, rows } => {
            let inv = 1.0 / rows as f64;
            if let Some(dx) = slot(nodes, grads, x) {
                for dr in dx.chunks_mut(g.len()) {
                    dr.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * inv);
                }
            }
        }
        &Op::MseMean(a, b) => {
            let (ad, bd) = (val(a), val(b));
            let k = 2.0 * g[0] / ad.len() as f64;
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, x), y) in da.iter_mut().zip(ad).zip(bd) {
                    *d += k * (x - y);
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for ((d, x), y) in db.iter_mut().zip(ad).zip(bd) {
                    *d -= k * (x - y);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            classes,
        } => {
            let k = g[0] / labels.len() as f64;
            if let Some(dl) = slot(nodes, grads, *logits) {
                for ((dr, pr), &y) in dl.chunks_mut(*classes).zip(probs.chunks(*classes)).zip(labels.iter()) {
                    for (j, (d, p)) in dr.iter_mut().zip(pr).enumerate() {
                        let target = if j == y as usize { 1.0 } else { 0.0 };
                        *d += k * (p - target);
                    }
                }
            }
        }
        Op::SoftDice {
            probs,
            labels,
            classes,
            eps,
        } => {
            let pd = val(*probs);
            let (inter, psum, ysum) = dice_sums(pd, labels, *classes);
            let scale = -g[0] / *classes as f64;
            let coef: Vec<(f64, f64)> = (0..*classes)
                .map(|k| {
                    let den = psum[k] + ysum[k] + eps;
                    (2.0 / den, (2.0 * inter[k] + eps) / (den * den))
                })
                .collect();
            if let Some(dp) = slot(nodes, grads, *probs) {
                for (dr, &y) in dp.chunks_mut(*classes).zip(labels.iter()) {
                    for (k, d) in dr.iter_mut().enumerate() {
                        let yk = if k == y as usize { 1.0 } else { 0.0 };
                        *d += scale * (coef[k].0 * yk - coef[k].1);
                    }
                }
            }
        }
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn dice_sums(probs: &[f64], labels: &[u8], classes: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut inter = vec![0.0; classes];
    let mut psum = vec![0.0; classes];
    let mut ysum = vec![0.0; classes];
    for (row, &y) in probs.chunks(classes).zip(labels) {
        for (k, p) in row.iter().enumerate() {
            psum[k] += p;
        }
        inter[y as usize] += row[y as usize];
        ysum[y as usize] += 1.0;
    }
    (inter, psum, ysum)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    let inv = 1.0 / z;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// `out[m, n] += a[m, k] * b[k, n]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `da[m, k] += g[m, n] * b[k, n]^T`
fn gemm_nt_acc(g: &[f64], b: &[f64], da: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `db[k, n] += a[m, k]^T * g[m, n]`
fn gemm_tn_acc(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, gv) in drow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut g = Graph::new();
        let i2 = g.constant(&Tensor::identity(2));
        let b = g.constant(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

        let x = g.constant(&t(&[1, 2], &[1.0, 2.0]));
        let y = g.constant(&t(&[2, 1], &[3.0, 4.0]));
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z).shape(), &[1, 1]);
        assert_eq!(g.value(z).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        let a3 = g.constant(&Tensor::zeros(&[2, 2, 3]));
        let b3 = g.constant(&Tensor::zeros(&[3, 3, 1]));
        assert!(matches!(g.matmul(a3, b3), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2], &[0.0, 0.0]));
        let y = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(&t(&[3], &[1000.0, 1000.0, 1000.0]));
        let y = g.softmax_lastdim(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        // 50-digit reference values
        let x = g.constant(&t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.softmax_lastdim(x).unwrap();
        let want = [
            0.090_030_573_170_380_457_998,
            0.244_728_471_054_797_652_47,
            0.665_240_955_774_821_889_53,
        ];
        for (v, w) in g.value(y).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-12, "{v} vs {w}");
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2, 3], &[0.1, -2.0, 3.5, 7.0, 7.5, 6.0]));
        let b = g.constant(&t(&[2, 3], &[100.1, 98.0, 103.5, -93.0, -92.5, -94.0]));
        let sa = g.softmax_lastdim(a).unwrap();
        let sb = g.softmax_lastdim(b).unwrap();
        assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
        for row in g.value(sa).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_stays_in_open_unit_interval() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[5], &[-30.0, -1.0, 0.0, 1.0, 30.0]));
        let y = g.sigmoid(x).unwrap();
        let d = g.value(y).data();
        assert!(d.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn avgpool_constant_and_shapes() {
        let mut g = Graph::new();
        for p in [1, 2, 4, 7] {
            let x = g.constant(&Tensor::full(&[28, 28, 3], 7.0));
            let y = g.avgpool2d(x, p).unwrap();
            assert_eq!(g.shape(y), &[28 / p, 28 / p, 3]);
            assert!(g.value(y).data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
        }
        let x = g.constant(&Tensor::zeros(&[28, 28, 2]));
        assert!(matches!(g.avgpool2d(x, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[3], &[1.0, -2.0, 4.0]));
        let l = g.mse_mean(a, a).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::full(&[2, 3, 4], 0.25));
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).unwrap().iter().all(|&v| v == 1.0));
        // second call accumulates
        g.backward(s).unwrap();
        assert!(g.grad(w).unwrap().iter().all(|&v| v == 2.0));
        g.zero_grad();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn mse_against_zero_gradient() {
        // d/dw (w - 0)^2 / 1 = 2w = 4 at w = 2
        let mut g = Graph::new();
        let w = g.param(&t(&[1], &[2.0]));
        let z = g.constant(&Tensor::zeros(&[1]));
        let l = g.mse_mean(w, z).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[4.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_y() {
        // one pixel, two classes
        let mut g = Graph::new();
        let logits = g.param(&t(&[1, 2], &[0.3, -0.9]));
        let l = g.cross_entropy(logits, Arc::from(vec![1u8])).unwrap();
        g.backward(l).unwrap();
        let p0 = 1.0 / (1.0 + (-1.2f64).exp());
        let grad = g.grad(logits).unwrap();
        assert!((grad[0] - p0).abs() < 1e-15);
        assert!((grad[1] - (1.0 - p0 - 1.0)).abs() < 1e-15);
        assert!((g.value(l).data()[0] + (1.0 - p0).ln()).abs() < 1e-14);
    }

    #[test]
    fn labels_out_of_range_are_data_errors() {
        let mut g = Graph::new();
        let logits = g.param(&Tensor::zeros(&[2, 4]));
        let err = g.cross_entropy(logits, Arc::from(vec![0u8, 4])).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[1], &[1e300]));
        let err = g.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn concat_along_axes() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let d = g.concat(&[b, b], 0).unwrap();
        assert_eq!(g.shape(d), &[4, 2]);
        assert!(g.concat(&[a, b], 0).is_err());
    }
}
