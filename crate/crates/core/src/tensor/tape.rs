use super::{matmul_acc, matmul_tn_acc, ParamId, ParamStore, Tensor, TensorError};
use crate::math;
use crate::prelude::*;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; also the index into [`Tape::gradients`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weighted directed message list for graph aggregation: for every
/// `(src, dst, w)` the destination receives `w · h_src`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    nodes: usize,
    edges: Vec<(u32, u32, f64)>,
}

impl EdgeList {
    pub fn new(nodes: usize, edges: Vec<(u32, u32, f64)>) -> Result<Self, TensorError> {
        for &(s, d, _) in &edges {
            let bad = (s as usize).max(d as usize);
            if bad >= nodes {
                return Err(TensorError::IndexOutOfRange {
                    op: "edge_list",
                    index: bad,
                    len: nodes,
                });
            }
        }
        Ok(Self { nodes, edges })
    }

    /// Both directions of each undirected `(i, j, w)` plus a `+1` self-loop on every node.
    pub fn undirected_with_self_loops(
        nodes: usize,
        undirected: &[(usize, usize, f64)],
    ) -> Result<Self, TensorError> {
        let mut edges = Vec::with_capacity(nodes + 2 * undirected.len());
        for v in 0..nodes {
            edges.push((v as u32, v as u32, 1.0));
        }
        for &(i, j, w) in undirected {
            edges.push((i as u32, j as u32, w));
            edges.push((j as u32, i as u32, w));
        }
        Self::new(nodes, edges)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &[(u32, u32, f64)] {
        &self.edges
    }
}

/// Assignment of rows to graphs for pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct Segments {
    of_row: Vec<u32>,
    counts: Vec<usize>,
}

impl Segments {
    pub fn new(of_row: Vec<u32>, segments: usize) -> Result<Self, TensorError> {
        let mut counts = vec![0usize; segments];
        for &s in &of_row {
            let s = s as usize;
            if s >= segments {
                return Err(TensorError::IndexOutOfRange {
                    op: "segments",
                    index: s,
                    len: segments,
                });
            }
            counts[s] += 1;
        }
        if counts.contains(&0) {
            return Err(TensorError::EmptyMask);
        }
        Ok(Self { of_row, counts })
    }

    /// Rows whose mask entry is true form the single segment 0.
    pub fn from_mask(mask: &[bool]) -> Result<(Self, Vec<usize>), TensorError> {
        let rows: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return Err(TensorError::EmptyMask);
        }
        let seg = Self::new(vec![0; rows.len()], 1)?;
        Ok((seg, rows))
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.of_row.len()
    }

    pub fn of_row(&self) -> &[u32] {
        &self.of_row
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv: Vec<f64>,
        kind: NormKind,
    },
    Gine(Var, Rc<EdgeList>),
    SegmentMean(Var, Rc<Segments>),
    GatherRows(Var, Rc<Vec<usize>>),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    SmoothL1(Var, Tensor),
    CrossEntropy {
        logits: Var,
        start: usize,
        probs: Tensor,
        targets: Rc<Vec<usize>>,
    },
    GaussianKl {
        mq: Var,
        lq: Var,
        mp: Var,
        lp: Var,
    },
    Reparam {
        mu: Var,
        logvar: Var,
        eps: Tensor,
    },
}

impl Op {
    fn inputs(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Scale(x, _)
            | Op::MulConst(x, _)
            | Op::LeakyRelu(x, _)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Clamp(x, _, _)
            | Op::Gine(x, _)
            | Op::SegmentMean(x, _)
            | Op::GatherRows(x, _)
            | Op::SliceCols(x, _)
            | Op::Sum(x)
            | Op::SmoothL1(x, _)
            | Op::CrossEntropy { logits: x, .. } => f(*x),
            Op::Norm { x, gamma, beta, .. } => {
                f(*x);
                f(*gamma);
                f(*beta);
            }
            Op::Concat(parts) => parts.iter().for_each(|&p| f(p)),
            Op::GaussianKl { mq, lq, mp, lp } => {
                f(*mq);
                f(*lq);
                f(*mp);
                f(*lp);
            }
            Op::Reparam { mu, logvar, .. } => {
                f(*mu);
                f(*logvar);
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum NormKind {
    /// Per-column statistics of the current batch.
    BatchTrain,
    /// Fixed per-column statistics.
    BatchEval,
    /// Per-row statistics.
    Layer,
}

struct Node {
    value: Tensor,
    op: Op,
    /// Whether any leaf or parameter feeds this value; untracked nodes get no gradient.
    tracked: bool,
}

/// Records forward computations so `backward` can replay them in reverse.
///
/// A tape is single-writer; independent tapes may run concurrently and
/// their parameter gradients merged with [`ParamStore::merge_grads`].
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
    fault: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
            fault: None,
        }
    }

    /// A tape that flags the first op producing NaN or infinity.
    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
            fault: None,
        }
    }

    pub fn fault(&self) -> Result<(), TensorError> {
        match self.fault {
            Some(op) => Err(TensorError::NonFinite(op)),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Var {
        if self.checked && self.fault.is_none() && !value.is_finite() {
            self.fault = Some(name);
        }
        let tracked = match &op {
            Op::Leaf | Op::Param(_) => true,
            op => {
                let mut any = false;
                op.inputs(|v| any |= self.nodes[v.0].tracked);
                any
            }
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, "leaf")
    }

    /// A value that never receives a gradient (inputs such as text embeddings).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = Tensor::zeros(n, m);
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            n,
            k,
            m,
        );
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `x + b` with `b: 1×d` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (_, d) = self.shape(x);
        assert_eq!(self.shape(b), (1, d), "add_row bias shape");
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(d) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(x, b), "add_row")
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), "scale")
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        assert_eq!(self.shape(x), c.shape(), "mul_const shape");
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .collect();
        let (r, k) = c.shape();
        self.push(
            Tensor::from_vec(r, k, data),
            Op::MulConst(x, c),
            "mul_const",
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope), "leaky_relu")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::tanh);
        self.push(out, Op::Tanh(x), "tanh")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::exp);
        self.push(out, Op::Exp(x), "exp")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(x, lo, hi), "clamp")
    }

    /// Batch normalization over rows using the batch's own statistics.
    /// Returns the output together with the per-column mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let t = self.value(x);
        let (n, d) = t.shape();
        let mut mean = vec![0.0; d];
        for row in t.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for row in t.data().chunks(d) {
            for c in 0..d {
                let z = row[c] - mean[c];
                var[c] += z * z;
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let out = self.norm_cols(x, gamma, beta, &mean, inv, NormKind::BatchTrain);
        (out, mean, var)
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        self.norm_cols(x, gamma, beta, mean, inv, NormKind::BatchEval)
    }

    fn norm_cols(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv: Vec<f64>,
        kind: NormKind,
    ) -> Var {
        let t = self.value(x);
        let (n, d) = t.shape();
        assert_eq!(self.shape(gamma), (1, d));
        assert_eq!(self.shape(beta), (1, d));
        let mut xhat = Tensor::zeros(n, d);
        for (r, row) in t.data().chunks(d).enumerate() {
            let o = xhat.row_mut(r);
            for c in 0..d {
                o[c] = (row[c] - mean[c]) * inv[c];
            }
        }
        let out = affine(&xhat, self.value(gamma).data(), self.value(beta).data());
        self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv,
                kind,
            },
            "batch_norm",
        )
    }

    /// Layer normalization over the columns of each row.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (n, d) = t.shape();
        assert_eq!(self.shape(gamma), (1, d));
        let mut xhat = Tensor::zeros(n, d);
        let mut inv = Vec::with_capacity(n);
        for (r, row) in t.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let iv = 1.0 / math::sqrt(var + eps);
            inv.push(iv);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * iv;
            }
        }
        let out = affine(&xhat, self.value(gamma).data(), self.value(beta).data());
        self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv,
                kind: NormKind::Layer,
            },
            "layer_norm",
        )
    }

    /// `out_v = h_v + Σ w · h_src` over the message list (which carries the self-loops).
    pub fn gine_aggregate(&mut self, x: Var, edges: Rc<EdgeList>) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (n, d) = t.shape();
        if edges.nodes() != n {
            return Err(TensorError::Shape {
                op: "gine",
                left: (n, d),
                right: (edges.nodes(), d),
            });
        }
        let mut out = t.clone();
        for &(s, dst, w) in edges.edges() {
            let (s, dst) = (s as usize, dst as usize);
            for c in 0..d {
                out.data_mut()[dst * d + c] += w * t.data()[s * d + c];
            }
        }
        Ok(self.push(out, Op::Gine(x, edges), "gine"))
    }

    pub fn segment_mean(&mut self, x: Var, seg: Rc<Segments>) -> Var {
        let t = self.value(x);
        let (n, d) = t.shape();
        assert_eq!(seg.rows(), n, "segment rows");
        let mut out = Tensor::zeros(seg.len(), d);
        for (r, row) in t.data().chunks(d).enumerate() {
            let s = seg.of_row[r] as usize;
            for (o, v) in out.row_mut(s).iter_mut().zip(row) {
                *o += v;
            }
        }
        for s in 0..seg.len() {
            let c = seg.counts[s] as f64;
            for o in out.row_mut(s) {
                *o /= c;
            }
        }
        self.push(out, Op::SegmentMean(x, seg), "segment_mean")
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (n, d) = t.shape();
        let mut out = Tensor::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        Ok(self.push(out, Op::GatherRows(x, idx), "gather_rows"))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(n, total);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.rows(), n, "concat rows");
            for r in 0..n {
                out.data_mut()[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        self.push(out, Op::Concat(parts.to_vec()), "concat")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let t = self.value(x);
        let (n, d) = t.shape();
        assert!(start + width <= d, "slice_cols range");
        let mut out = Tensor::zeros(n, width);
        for r in 0..n {
            out.row_mut(r)
                .copy_from_slice(&t.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols(x, start), "slice_cols")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).data().len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Σ SmoothL1(pred − target) with unit transition point.
    pub fn smooth_l1_sum(&mut self, pred: Var, target: Tensor) -> Var {
        assert_eq!(self.shape(pred), target.shape(), "smooth_l1 shape");
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| smooth_l1(p - t))
            .sum();
        self.push(Tensor::scalar(s), Op::SmoothL1(pred, target), "smooth_l1")
    }

    /// Σ over rows of the softmax cross-entropy of `logits[:, start..start+width]`
    /// against class indices `targets` (one per row).
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        start: usize,
        width: usize,
        targets: Rc<Vec<usize>>,
    ) -> Var {
        let t = self.value(logits);
        let (n, d) = t.shape();
        assert_eq!(targets.len(), n, "one target per row");
        assert!(start + width <= d);
        let mut probs = Tensor::zeros(n, width);
        let mut total = 0.0;
        for r in 0..n {
            let row = &t.row(r)[start..start + width];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = math::exp(v - mx);
                z += *p;
            }
            for p in probs.row_mut(r) {
                *p /= z;
            }
            total += mx + math::ln(z) - row[targets[r]];
        }
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                start,
                probs,
                targets,
            },
            "cross_entropy",
        )
    }

    /// Σ KL(N(mq, e^lq) ‖ N(mp, e^lp)) over all entries (diagonal Gaussians, log-variances).
    pub fn gaussian_kl(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
        let s = {
            let (a, b, c, d) = (
                self.value(mq),
                self.value(lq),
                self.value(mp),
                self.value(lp),
            );
            assert!(a.shape() == b.shape() && b.shape() == c.shape() && c.shape() == d.shape());
            let mut s = 0.0;
            for i in 0..a.data().len() {
                s += kl_term(a.data()[i], b.data()[i], c.data()[i], d.data()[i]);
            }
            s
        };
        self.push(
            Tensor::scalar(s),
            Op::GaussianKl { mq, lq, mp, lp },
            "gaussian_kl",
        )
    }

    /// `mu + exp(logvar / 2) ⊙ eps` with caller-provided noise.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eps: Tensor) -> Var {
        let out = {
            let (m, l) = (self.value(mu), self.value(logvar));
            assert_eq!(m.shape(), eps.shape());
            let data = (0..m.data().len())
                .map(|i| m.data()[i] + math::exp(0.5 * l.data()[i]) * eps.data()[i])
                .collect();
            Tensor::from_vec(m.rows(), m.cols(), data)
        };
        self.push(out, Op::Reparam { mu, logvar, eps }, "reparameterize")
    }

    /// Reverse pass from a `1×1` loss. Parameter gradients are added to `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        let grads = self.gradients(loss)?;
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Param(id)) = (g, &self.nodes[i].op) {
                store.accumulate_grad(*id, &g);
            }
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to every recorded value.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>, TensorError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NonScalar(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = ta.shape();
                let m = tb.cols();
                if self.nodes[a.0].tracked {
                    let mut ga = Tensor::zeros(n, k);
                    let bt = tb.transpose();
                    matmul_acc(g.data(), bt.data(), ga.data_mut(), n, m, k);
                    acc(grads, *a, ga);
                }
                if self.nodes[b.0].tracked {
                    let mut gb = Tensor::zeros(k, m);
                    matmul_tn_acc(ta.data(), g.data(), gb.data_mut(), n, k, m);
                    acc(grads, *b, gb);
                }
            }
            Op::AddRow(x, b) => {
                let d = g.cols();
                let mut gb = Tensor::zeros(1, d);
                for row in g.data().chunks(d) {
                    for (o, v) in gb.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(grads, *x, g.clone());
                acc(grads, *b, gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(grads, *a, zip_map(g, tb, |x, y| x * y));
                acc(grads, *b, zip_map(g, ta, |x, y| x * y));
            }
            Op::Scale(x, s) => {
                let s = *s;
                acc(grads, *x, g.map(|v| v * s));
            }
            Op::MulConst(x, c) => acc(grads, *x, zip_map(g, c, |x, y| x * y)),
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let gx = zip_map(
                    g,
                    self.value(*x),
                    |gv, xv| if xv > 0.0 { gv } else { slope * gv },
                );
                acc(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = zip_map(g, &node.value, |gv, y| gv * (1.0 - y * y));
                acc(grads, *x, gx);
            }
            Op::Exp(x) => acc(grads, *x, zip_map(g, &node.value, |gv, y| gv * y)),
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let gx = zip_map(
                    g,
                    self.value(*x),
                    |gv, xv| if xv > lo && xv < hi { gv } else { 0.0 },
                );
                acc(grads, *x, gx);
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv,
                kind,
            } => {
                let (n, d) = xhat.shape();
                let gam = self.value(*gamma).data();
                let mut ggamma = Tensor::zeros(1, d);
                let mut gbeta = Tensor::zeros(1, d);
                for r in 0..n {
                    for c in 0..d {
                        let gv = g.data()[r * d + c];
                        ggamma.data_mut()[c] += gv * xhat.data()[r * d + c];
                        gbeta.data_mut()[c] += gv;
                    }
                }
                let mut gx = Tensor::zeros(n, d);
                match kind {
                    NormKind::BatchEval => {
                        for r in 0..n {
                            for c in 0..d {
                                gx.data_mut()[r * d + c] = g.data()[r * d + c] * gam[c] * inv[c];
                            }
                        }
                    }
                    NormKind::BatchTrain => {
                        let mut s1 = vec![0.0; d];
                        let mut s2 = vec![0.0; d];
                        for r in 0..n {
                            for c in 0..d {
                                let dxh = g.data()[r * d + c] * gam[c];
                                s1[c] += dxh;
                                s2[c] += dxh * xhat.data()[r * d + c];
                            }
                        }
                        let nf = n as f64;
                        for r in 0..n {
                            for c in 0..d {
                                let dxh = g.data()[r * d + c] * gam[c];
                                let xh = xhat.data()[r * d + c];
                                gx.data_mut()[r * d + c] =
                                    inv[c] / nf * (nf * dxh - s1[c] - xh * s2[c]);
                            }
                        }
                    }
                    NormKind::Layer => {
                        let df = d as f64;
                        for r in 0..n {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for c in 0..d {
                                let dxh = g.data()[r * d + c] * gam[c];
                                s1 += dxh;
                                s2 += dxh * xhat.data()[r * d + c];
                            }
                            for c in 0..d {
                                let dxh = g.data()[r * d + c] * gam[c];
                                let xh = xhat.data()[r * d + c];
                                gx.data_mut()[r * d + c] = inv[r] / df * (df * dxh - s1 - xh * s2);
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, ggamma);
                acc(grads, *beta, gbeta);
            }
            Op::Gine(x, edges) => {
                let d = g.cols();
                let mut gx = g.clone();
                for &(s, dst, w) in edges.edges() {
                    let (s, dst) = (s as usize, dst as usize);
                    for c in 0..d {
                        gx.data_mut()[s * d + c] += w * g.data()[dst * d + c];
                    }
                }
                acc(grads, *x, gx);
            }
            Op::SegmentMean(x, seg) => {
                let d = g.cols();
                let mut gx = Tensor::zeros(seg.rows(), d);
                for r in 0..seg.rows() {
                    let s = seg.of_row[r] as usize;
                    let c = seg.counts[s] as f64;
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(s)) {
                        *o = v / c;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::GatherRows(x, idx) => {
                let (n, d) = self.shape(*x);
                let mut gx = Tensor::zeros(n, d);
                for (r, &src) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let (n, total) = g.shape();
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    let mut gp = Tensor::zeros(n, w);
                    for r in 0..n {
                        gp.row_mut(r)
                            .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    acc(grads, p, gp);
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                let (n, d) = self.shape(*x);
                let w = g.cols();
                let mut gx = Tensor::zeros(n, d);
                for r in 0..n {
                    gx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                acc(grads, *x, gx);
            }
            Op::Sum(x) => {
                let (n, d) = self.shape(*x);
                acc(grads, *x, Tensor::full(n, d, g.item()));
            }
            Op::SmoothL1(pred, target) => {
                let s = g.item();
                let gx = zip_map(self.value(*pred), target, |p, t| {
                    s * (p - t).clamp(-1.0, 1.0)
                });
                acc(grads, *pred, gx);
            }
            Op::CrossEntropy {
                logits,
                start,
                probs,
                targets,
            } => {
                let s = g.item();
                let (n, d) = self.shape(*logits);
                let w = probs.cols();
                let mut gx = Tensor::zeros(n, d);
                for r in 0..n {
                    let row = &mut gx.row_mut(r)[*start..*start + w];
                    for (c, o) in row.iter_mut().enumerate() {
                        let y = if c == targets[r] { 1.0 } else { 0.0 };
                        *o = s * (probs.get(r, c) - y);
                    }
                }
                acc(grads, *logits, gx);
            }
            Op::GaussianKl { mq, lq, mp, lp } => {
                let s = g.item();
                let (a, b, c, d) = (
                    self.value(*mq),
                    self.value(*lq),
                    self.value(*mp),
                    self.value(*lp),
                );
                let (r, k) = a.shape();
                let len = r * k;
                let mut gmq = vec![0.0; len];
                let mut glq = vec![0.0; len];
                let mut gmp = vec![0.0; len];
                let mut glp = vec![0.0; len];
                for i in 0..len {
                    let (m1, l1, m2, l2) = (a.data()[i], b.data()[i], c.data()[i], d.data()[i]);
                    let inv_vp = math::exp(-l2);
                    let diff = m1 - m2;
                    let vq = math::exp(l1);
                    gmq[i] = s * diff * inv_vp;
                    gmp[i] = -s * diff * inv_vp;
                    glq[i] = s * (-0.5 + 0.5 * vq * inv_vp);
                    glp[i] = s * (0.5 - 0.5 * (vq + diff * diff) * inv_vp);
                }
                acc(grads, *mq, Tensor::from_vec(r, k, gmq));
                acc(grads, *lq, Tensor::from_vec(r, k, glq));
                acc(grads, *mp, Tensor::from_vec(r, k, gmp));
                acc(grads, *lp, Tensor::from_vec(r, k, glp));
            }
            Op::Reparam { mu, logvar, eps } => {
                acc(grads, *mu, g.clone());
                let l = self.value(*logvar);
                let data = (0..g.data().len())
                    .map(|i| g.data()[i] * eps.data()[i] * 0.5 * math::exp(0.5 * l.data()[i]))
                    .collect();
                acc(grads, *logvar, Tensor::from_vec(g.rows(), g.cols(), data));
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    // Untracked slots are skipped by the reverse sweep, so stray sums are harmless.
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn affine(xhat: &Tensor, gamma: &[f64], beta: &[f64]) -> Tensor {
    let d = xhat.cols();
    let mut out = xhat.clone();
    for row in out.data_mut().chunks_mut(d) {
        for c in 0..d {
            row[c] = row[c] * gamma[c] + beta[c];
        }
    }
    out
}

pub fn smooth_l1(diff: f64) -> f64 {
    let a = diff.abs();
    if a < 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

/// KL(N(mq, e^lq) ‖ N(mp, e^lp)) for one coordinate.
pub fn kl_term(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    let diff = mq - mp;
    0.5 * (lp - lq) + (math::exp(lq) + diff * diff) / (2.0 * math::exp(lp)) - 0.5
}
