use std::collections::HashMap;

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    AddChannel(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    NarrowRows(NodeId, usize),
    NarrowCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Linear(NodeId, NodeId, Option<NodeId>),
    SoftmaxRows(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LayerNorm(NodeId, NodeId, NodeId, f64),
    LayerNormChannels(NodeId, NodeId, NodeId, f64),
    Conv2d(NodeId, NodeId, Option<NodeId>, ConvGeom),
    ConvT2(NodeId, NodeId, NodeId),
    Bilinear(NodeId),
    MeanSpatial(NodeId),
    SumAll(NodeId),
    WeightedSum(Vec<NodeId>, NodeId),
    BceWithLogits(NodeId, Tensor),
    SoftDice(NodeId, Tensor, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// A define-by-run tape. Nodes are appended in evaluation order, so a reverse
/// sweep over the node list is a valid topological order for backprop.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; receives gradients but is not a parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let key = (store.id(), id.0);
        if let Some(&n) = self.params.get(&key) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(key, n);
        n
    }

    /// Node bound to a parameter during this forward pass, if any.
    pub fn param_node(&self, store: &ParamStore, id: ParamId) -> Option<NodeId> {
        self.params.get(&(store.id(), id.0)).copied()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape(), data);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape(), data);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape(), data);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let t = self.value(a).map(|v| v * factor);
        self.push(t, Op::Scale(a, factor))
    }

    /// `a[N,C] + row[C]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let va = self.value(a);
        let vr = self.value(row);
        let c = *va.shape().last().expect("non-scalar");
        assert_eq!(vr.len(), c, "add_row width mismatch");
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (d, r) in chunk.iter_mut().zip(vr.data()) {
                *d += r;
            }
        }
        let t = Tensor::new(va.shape(), data);
        self.push(t, Op::AddRow(a, row))
    }

    /// `a[C,H,W] + v[C]` broadcast over pixels.
    pub fn add_channel(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let va = self.value(a);
        let vv = self.value(v);
        let c = va.shape()[0];
        assert_eq!(vv.len(), c, "add_channel width mismatch");
        let hw = va.len() / c;
        let mut data = va.data().to_vec();
        for (ch, chunk) in data.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|d| *d += vv.data()[ch]);
        }
        let t = Tensor::new(va.shape(), data);
        self.push(t, Op::AddChannel(a, v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        self.push(Tensor::new(&[sa[0], sb[1]], data), Op::MatMul(a, b))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "matmul_bt {sa:?} x {sb:?}");
        let data =
            kernels::matmul_bt(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[0]);
        self.push(Tensor::new(&[sa[0], sb[0]], data), Op::MatMulBt(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2, "transpose expects 2-D");
        let data = kernels::transpose(self.value(a).data(), s[0], s[1]);
        self.push(Tensor::new(&[s[1], s[0]], data), Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let t = self.value(a).clone().reshaped(shape);
        self.push(t, Op::Reshape(a))
    }

    /// Rows `start..start+len` of a 2-D node.
    pub fn narrow_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.shape(a).to_vec();
        assert!(s.len() == 2 && start + len <= s[0], "narrow_rows out of range");
        let data = self.value(a).data()[start * s[1]..(start + len) * s[1]].to_vec();
        self.push(Tensor::new(&[len, s[1]], data), Op::NarrowRows(a, start))
    }

    /// Columns `start..start+len` of a 2-D node.
    pub fn narrow_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.shape(a).to_vec();
        assert!(s.len() == 2 && start + len <= s[1], "narrow_cols out of range");
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            data.extend_from_slice(&src[r * s[1] + start..r * s[1] + start + len]);
        }
        self.push(Tensor::new(&[s[0], len], data), Op::NarrowCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert!(s.len() == 2 && s[1] == cols, "concat_rows width mismatch");
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new(&[rows, cols], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert!(s.len() == 2 && s[0] == rows, "concat_cols height mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::new(&[rows, total], data), Op::ConcatCols(parts.to_vec()))
    }

    /// `x[N,in] · w[out,in]ᵀ + b[out]`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(sx.len() == 2 && sw.len() == 2 && sx[1] == sw[1], "linear {sx:?} w {sw:?}");
        let mut data =
            kernels::matmul_bt(self.value(x).data(), self.value(w).data(), sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), sw[0]);
            for row in data.chunks_mut(sw[0]) {
                row.iter_mut().zip(bv).for_each(|(d, b)| *d += b);
            }
        }
        self.push(Tensor::new(&[sx[0], sw[0]], data), Op::Linear(x, w, b))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let c = *va.shape().last().expect("non-scalar");
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(va.shape(), data);
        self.push(t, Op::SoftmaxRows(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(kernels::gelu);
        self.push(t, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(kernels::sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let vx = self.value(x);
        let c = *vx.shape().last().expect("non-scalar");
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert!(g.len() == c && b.len() == c, "layer_norm affine width");
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            let (mean, rstd) = moments(row, eps);
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[i] + b[i];
            }
        }
        let t = Tensor::new(vx.shape(), data);
        self.push(t, Op::LayerNorm(x, gamma, beta, eps))
    }

    /// Layer norm across channels at each pixel of a `C×H×W` map.
    pub fn layer_norm_channels(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> NodeId {
        let vx = self.value(x);
        let c = vx.shape()[0];
        let hw = vx.len() / c;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = vx.data();
        let mut data = vec![0.0; src.len()];
        let mut col = vec![0.0; c];
        for p in 0..hw {
            for ch in 0..c {
                col[ch] = src[ch * hw + p];
            }
            let (mean, rstd) = moments(&col, eps);
            for ch in 0..c {
                data[ch * hw + p] = (col[ch] - mean) * rstd * g[ch] + b[ch];
            }
        }
        let t = Tensor::new(vx.shape(), data);
        self.push(t, Op::LayerNormChannels(x, gamma, beta, eps))
    }

    /// 2-D convolution over a `C×H×W` map with weight `out×(in/groups)×k×k`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> NodeId {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 3, "conv2d expects C×H×W");
        assert!(sw.len() == 4 && sw[2] == sw[3], "conv2d weight {sw:?}");
        assert_eq!(sx[0] / groups, sw[1], "conv2d channel mismatch {sx:?} vs {sw:?}");
        let geom = ConvGeom {
            in_ch: sx[0],
            out_ch: sw[0],
            h: sx[1],
            w: sx[2],
            k: sw[2],
            stride,
            pad,
            groups,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::new(&[geom.out_ch, geom.out_h(), geom.out_w()], data);
        self.push(t, Op::Conv2d(x, w, b, geom))
    }

    /// Kernel-2 stride-2 transposed convolution; weight is `in×out×2×2`.
    pub fn conv_transpose2(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(sw.len() == 4 && sw[0] == sx[0] && sw[2] == 2 && sw[3] == 2);
        let data = kernels::conv_t2_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            sx[0],
            sw[1],
            sx[1],
            sx[2],
        );
        let t = Tensor::new(&[sw[1], 2 * sx[1], 2 * sx[2]], data);
        self.push(t, Op::ConvT2(x, w, b))
    }

    /// Bilinear resize of a `C×H×W` map (half-pixel centers).
    pub fn bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        let data = kernels::bilinear_forward(self.value(x).data(), s[0], s[1], s[2], out_h, out_w);
        self.push(Tensor::new(&[s[0], out_h, out_w], data), Op::Bilinear(x))
    }

    /// Global average pool `C×H×W → [C]`.
    pub fn mean_spatial(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let c = v.shape()[0];
        let hw = v.len() / c;
        let data = v.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        self.push(Tensor::new(&[c], data), Op::MeanSpatial(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// `Σ_m weights[m] · inputs[m]` with a `[M]` weight node.
    pub fn weighted_sum(&mut self, inputs: &[NodeId], weights: NodeId) -> NodeId {
        let w = self.value(weights).data().to_vec();
        assert_eq!(w.len(), inputs.len(), "weighted_sum arity");
        let shape = self.shape(inputs[0]).to_vec();
        let mut acc = vec![0.0; self.value(inputs[0]).len()];
        for (&i, &wm) in inputs.iter().zip(&w) {
            let v = self.value(i);
            assert_eq!(v.shape(), &shape[..], "weighted_sum shape mismatch");
            for (a, x) in acc.iter_mut().zip(v.data()) {
                *a += wm * x;
            }
        }
        self.push(Tensor::new(&shape, acc), Op::WeightedSum(inputs.to_vec(), weights))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant target.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: &Tensor) -> NodeId {
        let l = self.value(logits);
        assert_eq!(l.shape(), target.shape(), "bce shape mismatch");
        let n = l.len() as f64;
        let total: f64 = l
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| kernels::softplus(x) - t * x)
            .sum();
        self.push(Tensor::scalar(total / n), Op::BceWithLogits(logits, target.clone()))
    }

    /// `1 − (2Σpt + ε)/(Σp + Σt + ε)` with `p = sigmoid(logits)`.
    pub fn soft_dice_loss(&mut self, logits: NodeId, target: &Tensor, eps: f64) -> NodeId {
        let l = self.value(logits);
        assert_eq!(l.shape(), target.shape(), "dice shape mismatch");
        let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
        for (&x, &t) in l.data().iter().zip(target.data()) {
            let p = kernels::sigmoid(x);
            inter += p * t;
            sp += p;
            st += t;
        }
        let loss = 1.0 - (2.0 * inter + eps) / (sp + st + eps);
        self.push(Tensor::scalar(loss), Op::SoftDice(logits, target.clone(), eps))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: NodeId) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(self.value(output).shape()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Accumulated gradient for every parameter of `store` bound in this graph.
    pub fn param_grads(&self, store: &ParamStore, grads: &Gradients) -> Vec<Option<Tensor>> {
        store
            .ids()
            .map(|id| self.param_node(store, id).and_then(|n| grads.get(n).cloned()))
            .collect()
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = zip_map(gd, vb.data(), |x, y| x * y);
                let gb = zip_map(gd, va.data(), |x, y| x * y);
                accumulate(grads, *a, Tensor::new(va.shape(), ga));
                accumulate(grads, *b, Tensor::new(vb.shape(), gb));
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.map(|v| v * f)),
            Op::AddRow(a, row) => {
                let c = self.value(*row).len();
                let mut gr = vec![0.0; c];
                for chunk in gd.chunks(c) {
                    gr.iter_mut().zip(chunk).for_each(|(r, v)| *r += v);
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, Tensor::new(self.shape(*row), gr));
            }
            Op::AddChannel(a, v) => {
                let c = self.value(*v).len();
                let hw = gd.len() / c;
                let gv: Vec<f64> = gd.chunks(hw).map(|p| p.iter().sum()).collect();
                accumulate(grads, *a, g.clone());
                accumulate(grads, *v, Tensor::new(self.shape(*v), gv));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let ga = kernels::matmul_bt(gd, self.value(*b).data(), m, n, k);
                let gb = kernels::matmul_at(self.value(*a).data(), gd, m, k, n);
                accumulate(grads, *a, Tensor::new(sa, ga));
                accumulate(grads, *b, Tensor::new(sb, gb));
            }
            Op::MatMulBt(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let ga = kernels::matmul(gd, self.value(*b).data(), m, n, k);
                let gb = kernels::matmul_at(gd, self.value(*a).data(), m, n, k);
                accumulate(grads, *a, Tensor::new(sa, ga));
                accumulate(grads, *b, Tensor::new(sb, gb));
            }
            Op::Transpose(a) => {
                let s = g.shape();
                let t = kernels::transpose(gd, s[0], s[1]);
                accumulate(grads, *a, Tensor::new(self.shape(*a), t));
            }
            Op::Reshape(a) => accumulate(grads, *a, g.clone().reshaped(self.shape(*a))),
            Op::NarrowRows(a, start) => {
                let sa = self.shape(*a);
                let mut t = vec![0.0; sa[0] * sa[1]];
                t[start * sa[1]..start * sa[1] + gd.len()].copy_from_slice(gd);
                accumulate(grads, *a, Tensor::new(sa, t));
            }
            Op::NarrowCols(a, start) => {
                let sa = self.shape(*a);
                let len = g.shape()[1];
                let mut t = vec![0.0; sa[0] * sa[1]];
                for r in 0..sa[0] {
                    t[r * sa[1] + start..r * sa[1] + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                accumulate(grads, *a, Tensor::new(sa, t));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    accumulate(grads, p, Tensor::new(self.shape(p), gd[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.shape()[1];
                let rows = g.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut t = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        t.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                    }
                    accumulate(grads, p, Tensor::new(self.shape(p), t));
                    off += w;
                }
            }
            Op::Linear(x, w, b) => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, din, dout) = (sx[0], sx[1], sw[0]);
                let gx = kernels::matmul(gd, self.value(*w).data(), n, dout, din);
                let gw = kernels::matmul_at(gd, self.value(*x).data(), n, dout, din);
                accumulate(grads, *x, Tensor::new(sx, gx));
                accumulate(grads, *w, Tensor::new(sw, gw));
                if let Some(b) = b {
                    let mut gb = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    accumulate(grads, *b, Tensor::new(&[dout], gb));
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let c = *g.shape().last().unwrap();
                let mut t = vec![0.0; y.len()];
                for ((tr, yr), gr) in t.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        tr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(g.shape(), t));
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let t = zip_map(gd, x, |gv, xv| gv * kernels::gelu_grad(xv));
                accumulate(grads, *a, Tensor::new(g.shape(), t));
            }
            Op::Tanh(a) => {
                let t = zip_map(gd, node.value.data(), |gv, y| gv * (1.0 - y * y));
                accumulate(grads, *a, Tensor::new(g.shape(), t));
            }
            Op::Sigmoid(a) => {
                let t = zip_map(gd, node.value.data(), |gv, y| gv * y * (1.0 - y));
                accumulate(grads, *a, Tensor::new(g.shape(), t));
            }
            Op::LayerNorm(x, gamma, beta, eps) => {
                let vx = self.value(*x);
                let c = *vx.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                let mut gx = vec![0.0; vx.len()];
                let mut ggam = vec![0.0; c];
                let mut gbet = vec![0.0; c];
                for ((xr, gr), dxr) in vx.data().chunks(c).zip(gd.chunks(c)).zip(gx.chunks_mut(c))
                {
                    norm_backward(xr, gr, gam, *eps, dxr, &mut ggam, &mut gbet);
                }
                accumulate(grads, *x, Tensor::new(vx.shape(), gx));
                accumulate(grads, *gamma, Tensor::new(&[c], ggam));
                accumulate(grads, *beta, Tensor::new(&[c], gbet));
            }
            Op::LayerNormChannels(x, gamma, beta, eps) => {
                let vx = self.value(*x);
                let c = vx.shape()[0];
                let hw = vx.len() / c;
                let gam = self.value(*gamma).data();
                let src = vx.data();
                let mut gx = vec![0.0; vx.len()];
                let mut ggam = vec![0.0; c];
                let mut gbet = vec![0.0; c];
                let (mut col, mut gcol, mut dcol) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
                for p in 0..hw {
                    for ch in 0..c {
                        col[ch] = src[ch * hw + p];
                        gcol[ch] = gd[ch * hw + p];
                    }
                    dcol.iter_mut().for_each(|v| *v = 0.0);
                    norm_backward(&col, &gcol, gam, *eps, &mut dcol, &mut ggam, &mut gbet);
                    for ch in 0..c {
                        gx[ch * hw + p] = dcol[ch];
                    }
                }
                accumulate(grads, *x, Tensor::new(vx.shape(), gx));
                accumulate(grads, *gamma, Tensor::new(&[c], ggam));
                accumulate(grads, *beta, Tensor::new(&[c], gbet));
            }
            Op::Conv2d(x, w, b, geom) => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), gd, geom);
                accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
                accumulate(grads, *w, Tensor::new(self.shape(*w), dw));
                if let Some(b) = b {
                    accumulate(grads, *b, Tensor::new(self.shape(*b), db));
                }
            }
            Op::ConvT2(x, w, b) => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (dx, dw, db) = kernels::conv_t2_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    sx[0],
                    sw[1],
                    sx[1],
                    sx[2],
                );
                accumulate(grads, *x, Tensor::new(sx, dx));
                accumulate(grads, *w, Tensor::new(sw, dw));
                accumulate(grads, *b, Tensor::new(self.shape(*b), db));
            }
            Op::Bilinear(x) => {
                let s = self.shape(*x);
                let go = g.shape();
                let dx = kernels::bilinear_backward(gd, s[0], s[1], s[2], go[1], go[2]);
                accumulate(grads, *x, Tensor::new(s, dx));
            }
            Op::MeanSpatial(x) => {
                let s = self.shape(*x);
                let c = s[0];
                let hw = self.value(*x).len() / c;
                let mut dx = vec![0.0; c * hw];
                for ch in 0..c {
                    let v = gd[ch] / hw as f64;
                    dx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d = v);
                }
                accumulate(grads, *x, Tensor::new(s, dx));
            }
            Op::SumAll(x) => {
                accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0]));
            }
            Op::WeightedSum(inputs, weights) => {
                let w = self.value(*weights).data();
                let mut gw = vec![0.0; w.len()];
                for (m, &inp) in inputs.iter().enumerate() {
                    let v = self.value(inp);
                    gw[m] = v.data().iter().zip(gd).map(|(x, y)| x * y).sum();
                    accumulate(grads, inp, g.map(|y| y * w[m]));
                }
                accumulate(grads, *weights, Tensor::new(self.shape(*weights), gw));
            }
            Op::BceWithLogits(logits, target) => {
                let l = self.value(*logits);
                let n = l.len() as f64;
                let t = zip_map(l.data(), target.data(), |x, tv| {
                    gd[0] * (kernels::sigmoid(x) - tv) / n
                });
                accumulate(grads, *logits, Tensor::new(l.shape(), t));
            }
            Op::SoftDice(logits, target, eps) => {
                let l = self.value(*logits);
                let p: Vec<f64> = l.data().iter().map(|&x| kernels::sigmoid(x)).collect();
                let inter: f64 = p.iter().zip(target.data()).map(|(a, b)| a * b).sum();
                let denom = p.iter().sum::<f64>() + target.sum() + eps;
                let num = 2.0 * inter + eps;
                // d/dp of −num/denom
                let t: Vec<f64> = p
                    .iter()
                    .zip(target.data())
                    .map(|(&pv, &tv)| {
                        let dl_dp = -(2.0 * tv * denom - num) / (denom * denom);
                        gd[0] * dl_dp * pv * (1.0 - pv)
                    })
                    .collect();
                accumulate(grads, *logits, Tensor::new(l.shape(), t));
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn norm_backward(
    x: &[f64],
    g: &[f64],
    gamma: &[f64],
    eps: f64,
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let n = x.len() as f64;
    let (mean, rstd) = moments(x, eps);
    let mut sum_gy = 0.0;
    let mut sum_gy_xhat = 0.0;
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * rstd;
        let gy = g[i] * gamma[i];
        dgamma[i] += g[i] * xhat;
        dbeta[i] += g[i];
        sum_gy += gy;
        sum_gy_xhat += gy * xhat;
    }
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * rstd;
        let gy = g[i] * gamma[i];
        dx[i] += rstd * (gy - sum_gy / n - xhat * sum_gy_xhat / n);
    }
}
