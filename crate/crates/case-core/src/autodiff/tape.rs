use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::rng::Rng;
use crate::autodiff::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{CaseError, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`]. Ids are topologically ordered: an op's
/// inputs always have smaller ids than its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

struct Node<F: Scalar> {
    value: Rc<Tensor<F>>,
    rule: Rule<F>,
}

/// Backward rule per recorded op, with whatever the gradient needs saved at
/// record time (masks, normalization statistics, indices).
enum Rule<F: Scalar> {
    Leaf,
    Constant,
    Matmul { a: NodeId, b: NodeId },
    MatmulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { x: NodeId, v: NodeId },
    Scale { x: NodeId, c: F },
    Relu { x: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { x: NodeId, from: usize, to: usize },
    Conv1d { x: NodeId, kernel: NodeId, bias: NodeId, width: usize },
    SoftmaxRows { x: NodeId, mask: Option<Vec<bool>> },
    LayerNorm { x: NodeId, gain: NodeId, shift: NodeId, xhat: Tensor<F>, inv_std: Vec<F> },
    MulMask { x: NodeId, mask: Tensor<F> },
    GatherRows { table: NodeId, indices: Vec<usize> },
    MeanRows { x: NodeId, mask: Option<Vec<bool>>, count: usize },
    BceWithLogits { scores: NodeId, labels: Tensor<F>, mask: Option<Vec<bool>>, count: usize },
}

/// Gradients of a scalar loss with respect to tape leaves, keyed by node id.
pub struct Gradients<F: Scalar> {
    by_node: HashMap<usize, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.by_node.remove(&id.0)
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.by_node.get(&id.0)
    }
}

/// Reverse-mode tape. Ops record their output value plus a backward rule;
/// [`Tape::backward`] replays the rules in reverse topological order, visiting
/// each node exactly once.
///
/// Every op validates its output for non-finite values and returns an error
/// rather than letting a NaN propagate silently; shape mismatches are
/// programmer errors and panic with both shapes in the message. The tape also
/// tallies forward floating-point work (multiply and add each count as one
/// flop); the counter only covers recorded ops, not backward.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    flops: Cell<u64>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            flops: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Forward flops recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn reset_flops(&self) {
        self.flops.set(0);
    }

    fn add_flops(&self, n: u64) {
        self.flops.set(self.flops.get() + n);
    }

    pub fn value(&self, id: NodeId) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    fn push(&self, op: &'static str, value: Tensor<F>, rule: Rule<F>) -> Result<NodeId> {
        if !value.is_all_finite() {
            return Err(CaseError::NonFinite {
                op,
                detail: format!("output of shape {:?}", value.shape()),
            });
        }
        self.push_rc(op, Rc::new(value), rule)
    }

    fn push_rc(&self, op: &'static str, value: Rc<Tensor<F>>, rule: Rule<F>) -> Result<NodeId> {
        if !value.is_all_finite() {
            return Err(CaseError::NonFinite {
                op,
                detail: format!("input of shape {:?}", value.shape()),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, rule });
        Ok(NodeId(nodes.len() - 1))
    }

    /// Trainable input; its gradient is collected by [`Tape::backward`].
    pub fn leaf(&self, t: Tensor<F>) -> Result<NodeId> {
        self.push_rc("leaf", Rc::new(t), Rule::Leaf)
    }

    /// Trainable input shared by reference (no copy of the data).
    pub fn leaf_rc(&self, t: Rc<Tensor<F>>) -> Result<NodeId> {
        self.push_rc("leaf", t, Rule::Leaf)
    }

    /// Non-trainable input (data, labels); no gradient flows into it.
    pub fn constant(&self, t: Tensor<F>) -> Result<NodeId> {
        self.push_rc("constant", Rc::new(t), Rule::Constant)
    }

    pub fn matmul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = av.dims2();
            let (_, p) = bv.dims2();
            self.add_flops(2 * (m * k * p) as u64);
            matmul(av, bv)
        };
        self.push("matmul", value, Rule::Matmul { a, b })
    }

    /// `a . b^T` where `b` is `[p, k]`.
    pub fn matmul_nt(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = av.dims2();
            let (p, _) = bv.dims2();
            self.add_flops(2 * (m * k * p) as u64);
            matmul_nt(av, bv)
        };
        self.push("matmul_nt", value, Rule::MatmulNt { a, b })
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(
                av.shape(),
                bv.shape(),
                "add shape mismatch: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            );
            self.add_flops(av.len() as u64);
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
            Tensor::from_vec(av.shape(), data)
        };
        self.push("add", value, Rule::Add { a, b })
    }

    /// Adds a row vector `v` (shape `[n]` or `[1, n]`) to every row of `x`.
    pub fn add_row(&self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, vv) = (&nodes[x.0].value, &nodes[v.0].value);
            let (m, n) = xv.dims2();
            assert_eq!(
                vv.len(),
                n,
                "add_row width mismatch: {:?} vs {:?}",
                xv.shape(),
                vv.shape()
            );
            self.add_flops((m * n) as u64);
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for (j, &b) in vv.data().iter().enumerate() {
                    data.push(xv.data()[i * n + j] + b);
                }
            }
            Tensor::from_vec(&[m, n], data)
        };
        self.push("add_row", value, Rule::AddRow { x, v })
    }

    pub fn scale(&self, x: NodeId, c: f64) -> Result<NodeId> {
        let cf = F::from_f64(c);
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            self.add_flops(xv.len() as u64);
            xv.map(|v| v * cf)
        };
        self.push("scale", value, Rule::Scale { x, c: cf })
    }

    pub fn relu(&self, x: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            self.add_flops(xv.len() as u64);
            xv.map(|v| if v > F::zero() { v } else { F::zero() })
        };
        self.push("relu", value, Rule::Relu { x })
    }

    pub fn concat_cols(&self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_cols needs at least one input");
        let value = {
            let nodes = self.nodes.borrow();
            let m = nodes[parts[0].0].value.dims2().0;
            let total: usize = parts
                .iter()
                .map(|p| {
                    let (pm, pn) = nodes[p.0].value.dims2();
                    assert_eq!(
                        pm,
                        m,
                        "concat_cols row mismatch: {:?} vs {:?}",
                        nodes[parts[0].0].value.shape(),
                        nodes[p.0].value.shape()
                    );
                    pn
                })
                .sum();
            let mut data = Vec::with_capacity(m * total);
            for i in 0..m {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row(i));
                }
            }
            Tensor::from_vec(&[m, total], data)
        };
        self.push("concat_cols", value, Rule::ConcatCols { parts: parts.to_vec() })
    }

    pub fn slice_cols(&self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (m, n) = xv.dims2();
            assert!(
                from < to && to <= n,
                "slice_cols {from}..{to} out of bounds for shape {:?}",
                xv.shape()
            );
            let mut data = Vec::with_capacity(m * (to - from));
            for i in 0..m {
                data.extend_from_slice(&xv.row(i)[from..to]);
            }
            Tensor::from_vec(&[m, to - from], data)
        };
        self.push("slice_cols", value, Rule::SliceCols { x, from, to })
    }

    /// Non-overlapping strided 1-d convolution over each row of `x [n, T]`
    /// with `kernel [F, w]` and `bias [F]`, stride = `w`. Produces
    /// `[n, F * floor(T/w)]` with features laid out filter-major. When `w`
    /// does not divide `T`, windows are anchored at the end of the row so the
    /// remainder (oldest days) is dropped, never the most recent ones.
    pub fn conv1d(&self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (value, width) = {
            let nodes = self.nodes.borrow();
            let (xv, kv, bv) = (&nodes[x.0].value, &nodes[kernel.0].value, &nodes[bias.0].value);
            let (n, t) = xv.dims2();
            let (f, w) = kv.dims2();
            assert!(
                w >= 1 && w <= t,
                "conv1d kernel width {w} incompatible with signal shape {:?}",
                xv.shape()
            );
            assert_eq!(
                bv.len(),
                f,
                "conv1d bias shape {:?} does not match kernel shape {:?}",
                bv.shape(),
                kv.shape()
            );
            let j = t / w;
            let offset = t - j * w;
            self.add_flops((n * f * j * (2 * w + 1)) as u64);
            let mut data = vec![F::zero(); n * f * j];
            for r in 0..n {
                let row = xv.row(r);
                for fi in 0..f {
                    let krow = kv.row(fi);
                    let b = bv.data()[fi];
                    for ji in 0..j {
                        let start = offset + ji * w;
                        let mut s = b;
                        for (u, &kw) in krow.iter().enumerate() {
                            s += kw * row[start + u];
                        }
                        data[r * f * j + fi * j + ji] = s;
                    }
                }
            }
            (Tensor::from_vec(&[n, f * j], data), w)
        };
        self.push("conv1d", value, Rule::Conv1d { x, kernel, bias, width })
    }

    pub fn softmax_rows(&self, x: NodeId) -> Result<NodeId> {
        self.softmax_rows_impl(x, None)
    }

    /// Softmax over each row restricted to key columns where `mask` is true.
    /// Masked columns get probability exactly zero; the mask is applied inside
    /// the op so no infinity is ever materialized in a tensor.
    pub fn softmax_rows_masked(&self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        self.softmax_rows_impl(x, Some(mask.to_vec()))
    }

    fn softmax_rows_impl(&self, x: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (m, n) = xv.dims2();
            if let Some(mk) = &mask {
                assert_eq!(
                    mk.len(),
                    n,
                    "softmax mask length {} does not match shape {:?}",
                    mk.len(),
                    xv.shape()
                );
                assert!(mk.iter().any(|&b| b), "softmax with all keys masked");
            }
            self.add_flops((5 * m * n) as u64);
            let active = |j: usize| mask.as_ref().is_none_or(|mk| mk[j]);
            let mut data = vec![F::zero(); m * n];
            for i in 0..m {
                let row = xv.row(i);
                let mut mx = F::neg_infinity();
                for (j, &v) in row.iter().enumerate() {
                    if active(j) && v > mx {
                        mx = v;
                    }
                }
                let mut sum = F::zero();
                for (j, &v) in row.iter().enumerate() {
                    if active(j) {
                        let e = (v - mx).exp();
                        data[i * n + j] = e;
                        sum += e;
                    }
                }
                for j in 0..n {
                    if active(j) {
                        data[i * n + j] /= sum;
                    }
                }
            }
            Tensor::from_vec(&[m, n], data)
        };
        self.push("softmax_rows", value, Rule::SoftmaxRows { x, mask })
    }

    /// Row-wise layer normalization with learned gain and shift (shape `[d]`),
    /// population variance, and `eps` inside the square root.
    pub fn layer_norm(&self, x: NodeId, gain: NodeId, shift: NodeId, eps: f64) -> Result<NodeId> {
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, sv) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[shift.0].value);
            let (m, d) = xv.dims2();
            assert_eq!(
                gv.len(),
                d,
                "layer_norm gain shape {:?} does not match {:?}",
                gv.shape(),
                xv.shape()
            );
            assert_eq!(
                sv.len(),
                d,
                "layer_norm shift shape {:?} does not match {:?}",
                sv.shape(),
                xv.shape()
            );
            self.add_flops((8 * m * d) as u64);
            let epsf = F::from_f64(eps);
            let dn = F::from_f64(d as f64);
            let mut out = vec![F::zero(); m * d];
            let mut xh = vec![F::zero(); m * d];
            let mut inv = vec![F::zero(); m];
            for i in 0..m {
                let row = xv.row(i);
                let mut mean = F::zero();
                for &v in row {
                    mean += v;
                }
                mean /= dn;
                let mut var = F::zero();
                for &v in row {
                    let c = v - mean;
                    var += c * c;
                }
                var /= dn;
                let istd = (var + epsf).sqrt().recip();
                inv[i] = istd;
                for j in 0..d {
                    let h = (row[j] - mean) * istd;
                    xh[i * d + j] = h;
                    out[i * d + j] = gv.data()[j] * h + sv.data()[j];
                }
            }
            (
                Tensor::from_vec(&[m, d], out),
                Tensor::from_vec(&[m, d], xh),
                inv,
            )
        };
        self.push("layer_norm", value, Rule::LayerNorm { x, gain, shift, xhat, inv_std })
    }

    /// Inverted dropout: keeps each element with probability `1 - p` and
    /// scales survivors by `1/(1-p)` so expectations match eval mode. With
    /// `training == false` or `p == 0` this is the identity (no node is
    /// recorded).
    pub fn dropout(&self, x: NodeId, p: f64, rng: &mut Rng, training: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(CaseError::config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let (value, mask) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            self.add_flops(xv.len() as u64);
            let keep = F::from_f64(1.0 / (1.0 - p));
            let mask_data: Vec<F> = (0..xv.len())
                .map(|_| if rng.uniform() >= p { keep } else { F::zero() })
                .collect();
            let mask = Tensor::from_vec(xv.shape(), mask_data);
            let data = xv.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
            (Tensor::from_vec(xv.shape(), data), mask)
        };
        self.push("dropout", value, Rule::MulMask { x, mask })
    }

    /// Copies `table` rows at `indices` into a new `[indices.len(), d]`
    /// tensor. Backward scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let tv = &nodes[table.0].value;
            let (v, d) = tv.dims2();
            let mut data = Vec::with_capacity(indices.len() * d);
            for &ix in indices {
                assert!(
                    ix < v,
                    "gather_rows index {ix} out of bounds for table shape {:?}",
                    tv.shape()
                );
                data.extend_from_slice(tv.row(ix));
            }
            Tensor::from_vec(&[indices.len(), d], data)
        };
        self.push(
            "gather_rows",
            value,
            Rule::GatherRows { table, indices: indices.to_vec() },
        )
    }

    /// Mean over rows (restricted to `mask` when given), producing `[1, d]`.
    pub fn mean_rows(&self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let (value, mask, count) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (n, d) = xv.dims2();
            let mask = mask.map(|m| {
                assert_eq!(
                    m.len(),
                    n,
                    "mean_rows mask length {} does not match shape {:?}",
                    m.len(),
                    xv.shape()
                );
                m.to_vec()
            });
            let active = |i: usize| mask.as_ref().is_none_or(|mk| mk[i]);
            let count = (0..n).filter(|&i| active(i)).count();
            assert!(count > 0, "mean_rows with no active rows");
            self.add_flops((n * d) as u64);
            let inv = F::from_f64(1.0 / count as f64);
            let mut acc = vec![F::zero(); d];
            for i in 0..n {
                if active(i) {
                    for (a, &v) in acc.iter_mut().zip(xv.row(i)) {
                        *a += v;
                    }
                }
            }
            for a in acc.iter_mut() {
                *a *= inv;
            }
            (Tensor::from_vec(&[1, d], acc), mask, count)
        };
        self.push("mean_rows", value, Rule::MeanRows { x, mask, count })
    }

    /// Numerically stable binary cross-entropy with logits, averaged over the
    /// active rows: `max(s, 0) - s*y + ln(1 + exp(-|s|))`. `scores` is `[n]`
    /// or `[n, 1]`, `labels` must contain only 0 and 1. Returns a scalar node.
    pub fn bce_with_logits(
        &self,
        scores: NodeId,
        labels: &Tensor<F>,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let (value, labels, mask, count) = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[scores.0].value;
            let n = sv.len();
            assert_eq!(
                labels.len(),
                n,
                "bce_with_logits labels shape {:?} does not match scores shape {:?}",
                labels.shape(),
                sv.shape()
            );
            for &y in labels.data() {
                if y != F::zero() && y != F::one() {
                    return Err(CaseError::data(format!(
                        "bce_with_logits labels must be 0 or 1, got {y}"
                    )));
                }
            }
            let mask = mask.map(|m| {
                assert_eq!(
                    m.len(),
                    n,
                    "bce_with_logits mask length {} does not match scores shape {:?}",
                    m.len(),
                    sv.shape()
                );
                m.to_vec()
            });
            let active = |i: usize| mask.as_ref().is_none_or(|mk| mk[i]);
            let count = (0..n).filter(|&i| active(i)).count();
            assert!(count > 0, "bce_with_logits with no active rows");
            self.add_flops((10 * n) as u64);
            let mut total = 0.0f64;
            for i in 0..n {
                if active(i) {
                    let s = sv.data()[i].as_f64();
                    let y = labels.data()[i].as_f64();
                    total += s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
                }
            }
            let value = Tensor::scalar(F::from_f64(total / count as f64));
            (value, labels.clone(), mask, count)
        };
        self.push(
            "bce_with_logits",
            value,
            Rule::BceWithLogits { scores, labels, mask, count },
        )
    }

    /// Reverse pass from a scalar loss node. Returns gradients for leaf nodes
    /// only; intermediate gradients are freed as soon as they are consumed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.len(),
            1,
            "backward target must be scalar, got shape {:?}",
            nodes[loss.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(nodes[loss.0].value.shape(), F::one()));
        let mut leaf_grads: HashMap<usize, Tensor<F>> = HashMap::new();

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &nodes[i].rule {
                Rule::Leaf => {
                    leaf_grads.insert(i, g);
                }
                Rule::Constant => {}
                Rule::Matmul { a, b } => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    acc(&mut grads[a.0], matmul_nt(&g, bv));
                    acc(&mut grads[b.0], matmul_tn(av, &g));
                }
                Rule::MatmulNt { a, b } => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    acc(&mut grads[a.0], matmul(&g, bv));
                    acc(&mut grads[b.0], matmul_tn(&g, av));
                }
                Rule::Add { a, b } => {
                    acc(&mut grads[a.0], g.clone());
                    acc(&mut grads[b.0], g);
                }
                Rule::AddRow { x, v } => {
                    let vshape = nodes[v.0].value.shape().to_vec();
                    let (m, n) = g.dims2();
                    let mut dv = vec![F::zero(); n];
                    for i in 0..m {
                        for (a, &gv) in dv.iter_mut().zip(g.row(i)) {
                            *a += gv;
                        }
                    }
                    acc(&mut grads[v.0], Tensor::from_vec(&vshape, dv));
                    acc(&mut grads[x.0], g);
                }
                Rule::Scale { x, c } => {
                    let c = *c;
                    acc(&mut grads[x.0], g.map(|v| v * c));
                }
                Rule::Relu { x } => {
                    let xv = &nodes[x.0].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &v)| if v > F::zero() { gv } else { F::zero() })
                        .collect();
                    acc(&mut grads[x.0], Tensor::from_vec(g.shape(), data));
                }
                Rule::ConcatCols { parts } => {
                    let (m, _) = g.dims2();
                    let mut from = 0;
                    for p in parts {
                        let (_, w) = nodes[p.0].value.dims2();
                        let mut data = Vec::with_capacity(m * w);
                        for i in 0..m {
                            data.extend_from_slice(&g.row(i)[from..from + w]);
                        }
                        acc(&mut grads[p.0], Tensor::from_vec(&[m, w], data));
                        from += w;
                    }
                }
                Rule::SliceCols { x, from, to } => {
                    let xv = &nodes[x.0].value;
                    let (m, n) = xv.dims2();
                    let mut dx = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        let grow = g.row(i);
                        let drow = &mut dx.data_mut()[i * n + from..i * n + to];
                        drow.copy_from_slice(grow);
                    }
                    acc(&mut grads[x.0], dx);
                }
                Rule::Conv1d { x, kernel, bias, width } => {
                    let xv = &nodes[x.0].value;
                    let kv = &nodes[kernel.0].value;
                    let (n, t) = xv.dims2();
                    let (f, w) = kv.dims2();
                    debug_assert_eq!(w, *width);
                    let j = t / w;
                    let offset = t - j * w;
                    let mut dx = Tensor::zeros(&[n, t]);
                    let mut dk = Tensor::zeros(&[f, w]);
                    let mut db = vec![F::zero(); f];
                    for r in 0..n {
                        let xrow = xv.row(r);
                        let grow = g.row(r);
                        for fi in 0..f {
                            let krow = kv.row(fi);
                            for ji in 0..j {
                                let gv = grow[fi * j + ji];
                                if gv == F::zero() {
                                    continue;
                                }
                                db[fi] += gv;
                                let start = offset + ji * w;
                                let dxrow = &mut dx.data_mut()[r * t + start..r * t + start + w];
                                let dkrow = &mut dk.data_mut()[fi * w..(fi + 1) * w];
                                for u in 0..w {
                                    dkrow[u] += gv * xrow[start + u];
                                    dxrow[u] += gv * krow[u];
                                }
                            }
                        }
                    }
                    acc(&mut grads[x.0], dx);
                    acc(&mut grads[kernel.0], dk);
                    let bshape = nodes[bias.0].value.shape().to_vec();
                    acc(&mut grads[bias.0], Tensor::from_vec(&bshape, db));
                }
                Rule::SoftmaxRows { x, mask } => {
                    let pv = &nodes[i].value;
                    let (m, n) = pv.dims2();
                    let active = |j: usize| mask.as_ref().is_none_or(|mk| mk[j]);
                    let mut dx = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        let prow = pv.row(r);
                        let grow = g.row(r);
                        let mut dot = F::zero();
                        for j in 0..n {
                            if active(j) {
                                dot += grow[j] * prow[j];
                            }
                        }
                        let drow = &mut dx.data_mut()[r * n..(r + 1) * n];
                        for j in 0..n {
                            if active(j) {
                                drow[j] = prow[j] * (grow[j] - dot);
                            }
                        }
                    }
                    acc(&mut grads[x.0], dx);
                }
                Rule::LayerNorm { x, gain, shift, xhat, inv_std } => {
                    let gv = &nodes[gain.0].value;
                    let (m, d) = g.dims2();
                    let gain_shape = gv.shape().to_vec();
                    let shift_shape = nodes[shift.0].value.shape().to_vec();
                    let mut dgain = vec![F::zero(); d];
                    let mut dshift = vec![F::zero(); d];
                    let mut dx = Tensor::zeros(&[m, d]);
                    let dn = F::from_f64(d as f64);
                    for (r, &istd) in inv_std.iter().enumerate().take(m) {
                        let grow = g.row(r);
                        let hrow = xhat.row(r);
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        // dxhat_j = g_j * gain_j
                        for j in 0..d {
                            let dh = grow[j] * gv.data()[j];
                            s1 += dh;
                            s2 += dh * hrow[j];
                            dgain[j] += grow[j] * hrow[j];
                            dshift[j] += grow[j];
                        }
                        let drow = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dh = grow[j] * gv.data()[j];
                            drow[j] = istd / dn * (dn * dh - s1 - hrow[j] * s2);
                        }
                    }
                    acc(&mut grads[x.0], dx);
                    acc(&mut grads[gain.0], Tensor::from_vec(&gain_shape, dgain));
                    acc(&mut grads[shift.0], Tensor::from_vec(&shift_shape, dshift));
                }
                Rule::MulMask { x, mask } => {
                    let data = g
                        .data()
                        .iter()
                        .zip(mask.data())
                        .map(|(&gv, &mv)| gv * mv)
                        .collect();
                    acc(&mut grads[x.0], Tensor::from_vec(g.shape(), data));
                }
                Rule::GatherRows { table, indices } => {
                    let tv = &nodes[table.0].value;
                    let (v, d) = tv.dims2();
                    let mut dt = Tensor::zeros(&[v, d]);
                    for (r, &ix) in indices.iter().enumerate() {
                        let grow = g.row(r);
                        let trow = &mut dt.data_mut()[ix * d..(ix + 1) * d];
                        for (a, &gv) in trow.iter_mut().zip(grow) {
                            *a += gv;
                        }
                    }
                    acc(&mut grads[table.0], dt);
                }
                Rule::MeanRows { x, mask, count } => {
                    let xv = &nodes[x.0].value;
                    let (n, d) = xv.dims2();
                    let active = |r: usize| mask.as_ref().is_none_or(|mk| mk[r]);
                    let inv = F::from_f64(1.0 / *count as f64);
                    let mut dx = Tensor::zeros(&[n, d]);
                    for r in 0..n {
                        if active(r) {
                            let drow = &mut dx.data_mut()[r * d..(r + 1) * d];
                            for (a, &gv) in drow.iter_mut().zip(g.row(0)) {
                                *a = gv * inv;
                            }
                        }
                    }
                    acc(&mut grads[x.0], dx);
                }
                Rule::BceWithLogits { scores, labels, mask, count } => {
                    let sv = &nodes[scores.0].value;
                    let n = sv.len();
                    let active = |r: usize| mask.as_ref().is_none_or(|mk| mk[r]);
                    let gscalar = g.first();
                    let inv = F::from_f64(1.0 / *count as f64);
                    let mut ds = vec![F::zero(); n];
                    for (r, slot) in ds.iter_mut().enumerate() {
                        if active(r) {
                            let s = sv.data()[r].as_f64();
                            let sigma = if s >= 0.0 {
                                1.0 / (1.0 + (-s).exp())
                            } else {
                                let e = s.exp();
                                e / (1.0 + e)
                            };
                            *slot = F::from_f64(sigma - labels.data()[r].as_f64()) * inv * gscalar;
                        }
                    }
                    acc(&mut grads[scores.0], Tensor::from_vec(sv.shape(), ds));
                }
            }
        }
        Ok(Gradients { by_node: leaf_grads })
    }
}

fn acc<F: Scalar>(slot: &mut Option<Tensor<F>>, delta: Tensor<F>) {
    match slot {
        None => *slot = Some(delta),
        Some(g) => {
            assert_eq!(
                g.shape(),
                delta.shape(),
                "gradient accumulation shape mismatch: {:?} vs {:?}",
                g.shape(),
                delta.shape()
            );
            for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
    }
}
