//! Reverse-mode autodiff over a linear tape.
//!
//! Every primitive computes its value eagerly and records one node. The
//! tape is in topological order by construction, so the backward pass is a
//! single reverse sweep. Gradients from multiple consumers accumulate by
//! addition, in tape order, which makes backward bitwise deterministic.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::{numel, TensorData};

pub type NodeId = usize;

static NEXT_GRAPH_TAG: AtomicU64 = AtomicU64::new(1);

/// Probability floor inside the entropy primitive; defines 0*ln(0) = 0.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
struct ConvMeta {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Sigmoid,
    Softplus,
    Sqrt,
    Recip,
    /// a[m,k] * b[k,n]
    Matmul { m: usize, k: usize, n: usize },
    /// a[m,k] * b[n,k]^T
    MatmulNt { m: usize, k: usize, n: usize },
    /// w[m,n] * x[n]
    Matvec { m: usize, n: usize },
    Conv2d(ConvMeta),
    Softmax { rows: usize, cols: usize },
    EntropyRows { rows: usize, cols: usize },
    CrossEntropy { label: usize, k: usize },
    GlobalAvgPool { h: usize, w: usize, c: usize },
    RegionAvgPool { x0: usize, y0: usize, x1: usize, y1: usize, w: usize, c: usize },
    MulChannels { c: usize },
    AddChannels { c: usize },
    SubChannels { c: usize },
    AddRows { rows: usize, cols: usize },
    Reshape,
    MeanAll,
    MeanScalars,
}

struct Node<S> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Rc<TensorData<S>>,
    needs_grad: bool,
}

/// Handle to a value on a graph. Cheap to clone; the underlying buffer is
/// immutable once produced.
#[derive(Clone)]
pub struct Tensor<S> {
    id: NodeId,
    graph_tag: u64,
    value: Rc<TensorData<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn data(&self) -> &[S] {
        self.value.data()
    }

    pub fn value(&self) -> &TensorData<S> {
        &self.value
    }

    pub fn to_data(&self) -> TensorData<S> {
        (*self.value).clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node_id(&self) -> NodeId {
        self.id
    }

    pub fn scalar_value(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.value.data()[0]
    }
}

/// The tape. Single-owner; independent graphs may run on separate threads.
pub struct Graph<S> {
    tag: u64,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            tag: NEXT_GRAPH_TAG.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: TensorData<S>, needs_grad: bool) -> Tensor<S> {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by {:?}",
            op
        );
        let id = self.nodes.len();
        let rc = Rc::new(value);
        self.nodes.push(Node { op, inputs, value: Rc::clone(&rc), needs_grad });
        self.grads.push(None);
        Tensor { id, graph_tag: self.tag, value: rc, requires_grad: needs_grad }
    }

    fn check_owned(&self, t: &Tensor<S>) -> Result<()> {
        if t.graph_tag != self.tag {
            return Err(Error::contract("tensor belongs to a different graph"));
        }
        Ok(())
    }

    fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Leaf that does not receive a gradient (data).
    pub fn input(&mut self, value: TensorData<S>) -> Tensor<S> {
        self.push(Op::Leaf, vec![], value, false)
    }

    /// Leaf that receives a gradient (parameter). The data is copied onto
    /// the tape, so later mutation of the source cannot disturb this step.
    pub fn param(&mut self, value: &TensorData<S>) -> Tensor<S> {
        self.push(Op::Leaf, vec![], value.clone(), true)
    }

    pub fn leaf(&mut self, value: TensorData<S>, requires_grad: bool) -> Tensor<S> {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    // ---- elementwise ----

    fn binary_same_shape(&mut self, op: Op, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_owned(a)?;
        self.check_owned(b)?;
        if a.shape() != b.shape() {
            return Err(Error::dim(format!(
                "elementwise {:?}: shape {:?} vs {:?}",
                op,
                a.shape(),
                b.shape()
            )));
        }
        let data = match op {
            Op::Add => a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
            Op::Sub => a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect(),
            Op::Mul => a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
            _ => unreachable!(),
        };
        let needs = self.any_needs_grad(&[a.id, b.id]);
        Ok(self.push(op, vec![a.id, b.id], TensorData::new(a.shape().to_vec(), data)?, needs))
    }

    pub fn add(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_same_shape(Op::Mul, a, b)
    }

    pub fn scale(&mut self, x: &Tensor<S>, s: f64) -> Result<Tensor<S>> {
        self.check_owned(x)?;
        let sv = S::from_f64(s);
        let data = x.data().iter().map(|&v| v * sv).collect();
        let needs = self.nodes[x.id].needs_grad;
        Ok(self.push(Op::Scale(s), vec![x.id], TensorData::new(x.shape().to_vec(), data)?, needs))
    }

    pub fn add_scalar(&mut self, x: &Tensor<S>, s: f64) -> Result<Tensor<S>> {
        self.check_owned(x)?;
        let sv = S::from_f64(s);
        let data = x.data().iter().map(|&v| v + sv).collect();
        let needs = self.nodes[x.id].needs_grad;
        Ok(self.push(Op::AddScalar(s), vec![x.id], TensorData::new(x.shape().to_vec(), data)?, needs))
    }

    fn unary(&mut self, op: Op, x: &Tensor<S>, f: impl Fn(S) -> S) -> Result<Tensor<S>> {
        self.check_owned(x)?;
        let data = x.data().iter().map(|&v| f(v)).collect();
        let needs = self.nodes[x.id].needs_grad;
        Ok(self.push(op, vec![x.id], TensorData::new(x.shape().to_vec(), data)?, needs))
    }

    pub fn relu(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.unary(Op::Relu, x, |v| if v > S::zero() { v } else { S::zero() })
    }

    pub fn sigmoid(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.unary(Op::Sigmoid, x, sigmoid_stable)
    }

    pub fn softplus(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.unary(Op::Softplus, x, softplus_stable)
    }

    pub fn sqrt(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.unary(Op::Sqrt, x, |v| v.sqrt())
    }

    pub fn recip(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.unary(Op::Recip, x, |v| S::one() / v)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_owned(a)?;
        self.check_owned(b)?;
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = linalg::matmul_nn(a.data(), b.data(), m, k, n);
        let needs = self.any_needs_grad(&[a.id, b.id]);
        Ok(self.push(Op::Matmul { m, k, n }, vec![a.id, b.id], TensorData::new(vec![m, n], data)?, needs))
    }

    /// a[m,k] * b[n,k]^T -> [m,n]; the row-major layout of `b` is the
    /// transposed operand, which is how classifier weights are stored.
    pub fn matmul_nt(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_owned(a)?;
        self.check_owned(b)?;
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim(format!("matmul_nt: {sa:?} x {sb:?}^T")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let data = linalg::matmul_nt(a.data(), b.data(), m, k, n);
        let needs = self.any_needs_grad(&[a.id, b.id]);
        Ok(self.push(Op::MatmulNt { m, k, n }, vec![a.id, b.id], TensorData::new(vec![m, n], data)?, needs))
    }

    pub fn matvec(&mut self, w: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_owned(w)?;
        self.check_owned(x)?;
        let (sw, sx) = (w.shape(), x.shape());
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(Error::dim(format!("matvec: {sw:?} x {sx:?}")));
        }
        let (m, n) = (sw[0], sw[1]);
        let mut data = vec![S::zero(); m];
        for (i, out) in data.iter_mut().enumerate() {
            let row = &w.data()[i * n..(i + 1) * n];
            let mut acc = S::zero();
            for (&wv, &xv) in row.iter().zip(x.data()) {
                acc = acc + wv * xv;
            }
            *out = acc;
        }
        let needs = self.any_needs_grad(&[w.id, x.id]);
        Ok(self.push(Op::Matvec { m, n }, vec![w.id, x.id], TensorData::new(vec![m], data)?, needs))
    }

    /// 2-D cross-correlation over an `[h, w, cin]` map with a
    /// `[kh, kw, cin, cout]` kernel. Output spatial size is
    /// `floor((dim + 2*pad - kdim)/stride) + 1`.
    pub fn conv2d(&mut self, x: &Tensor<S>, kernel: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
        self.check_owned(x)?;
        self.check_owned(kernel)?;
        let (sx, sk) = (x.shape(), kernel.shape());
        if sx.len() != 3 || sk.len() != 4 {
            return Err(Error::dim(format!("conv2d: input {sx:?}, kernel {sk:?}")));
        }
        if sk[2] != sx[2] {
            return Err(Error::dim(format!(
                "conv2d: kernel expects {} input channels, map has {}",
                sk[2], sx[2]
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d: stride must be >= 1".to_string()));
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let meta = ConvMeta { h, w, cin, kh, kw, cout, stride, pad, oh, ow };
        let cols = im2col(x.data(), &meta);
        let data = linalg::matmul_nn(&cols, kernel.data(), oh * ow, kh * kw * cin, cout);
        let needs = self.any_needs_grad(&[x.id, kernel.id]);
        Ok(self.push(
            Op::Conv2d(meta),
            vec![x.id, kernel.id],
            TensorData::new(vec![oh, ow, cout], data)?,
            needs,
        ))
    }

    // ---- reductions and structured ops ----

    /// Max-subtracted softmax along the last axis.
    pub fn softmax(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_owned(x)?;
        let sh = x.shape();
        if sh.is_empty() || *sh.last().unwrap() == 0 {
            return Err(Error::dim(format!("softmax needs a last axis of size >= 1, got {sh:?}")));
        }
        let cols = *sh.last().unwrap();
        let rows = x.numel() / cols;
        let mut data = vec![S::zero(); x.numel()];
        for r in 0..rows {
            let xr = &x.data()[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut mx = xr[0];
            for &v in xr.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = S::zero();
            for (o, &v) in out.iter_mut().zip(xr) {
                let e = (v - mx).exp();
                *o = e;
                sum = sum + e;
            }
            let inv = S::one() / sum;
            for o in out.iter_mut() {
                *o = *o * inv;
            }
        }
        let needs = self.nodes[x.id].needs_grad;
        Ok(self.push(Op::Softmax { rows, cols }, vec![x.id], TensorData::new(sh.to_vec(), data)?, needs))
    }

    /// Shannon entropy (natural log) of each row of probabilities along
    /// the last axis; output drops that axis. Probabilities below
    /// `PROB_FLOOR` contribute via the floored logarithm, so zero rows of
    /// p*ln(p) are defined as 0.
    pub fn entropy_rows(&mut self, p: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_owned(p)?;
        let sh = p.shape();
        if sh.is_empty() {
            return Err(Error::dim("entropy_rows needs at least rank 1".to_string()));
        }
        let cols = *sh.last().unwrap();
        let rows = p.numel() / cols;
        let floor = S::from_f64(PROB_FLOOR);
        let mut data = vec![S::zero(); rows];
        for (r, out) in data.iter_mut().enumerate() {
            let pr = &p.data()[r * cols..(r + 1) * cols];
            let mut acc = S::zero();
            for &v in pr {
                acc = acc - v * v.max(floor).ln();
            }
            *out = acc;
        }
        let out_shape = sh[..sh.len() - 1].to_vec();
        let needs = self.nodes[p.id].needs_grad;
        Ok(self.push(Op::EntropyRows { rows, cols }, vec![p.id], TensorData::new(out_shape, data)?, needs))
    }

    /// Negative log-likelihood of `label` under softmax(logits), computed
    /// with a log-sum-exp. Scalar output.
    pub fn cross_entropy(&mut self, logits: &Tensor<S>, label: usize) -> Result<Tensor<S>> {
        self.check_owned(logits)?;
        let sh = logits.shape();
        if sh.len() != 1 {
            return Err(Error::dim(format!("cross_entropy expects [K] logits, got {sh:?}")));
        }
        let k = sh[0];
        if label >= k {
            return Err(Error::contract(format!("label {label} out of range for K={k}")));
        }
        let xs = logits.data();
        let mut mx = xs[0];
        for &v in xs {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = S::zero();
        for &v in xs {
            sum = sum + (v - mx).exp();
        }
        let loss = mx + sum.ln() - xs[label];
        let needs = self.nodes[logits.id].needs_grad;
        Ok(self.push(Op::CrossEntropy { label, k }, vec![logits.id], TensorData::scalar(loss), needs))
    }

    /// Per-channel mean over all spatial positions: [h,w,c] -> [c].
    pub fn global_avg_pool(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_owned(x)?;
        let sh = x.shape();
        if sh.len() != 3 || sh[0] * sh[1] == 0 {
            return Err(Error::dim(format!("global_avg_pool expects nonempty [h,w,c], got {sh:?}")));
        }
        let (h, w, c) = (sh[0], sh[1], sh[2]);
        let mut data = vec![S::zero(); c];
        for px in x.data().chunks_exact(c) {
            for (o, &v) in data.iter_mut().zip(px) {
                *o = *o + v;
            }
        }
        let inv = S::from_f64(1.0 / (h * w) as f64);
        for o in data.iter_mut() {
            *o = *o * inv;
        }
        let needs = self.nodes[x.id].needs_grad;
        Ok(self.push(Op::GlobalAvgPool { h, w, c }, vec![x.id], TensorData::new(vec![c], data)?, needs))
    }

    /// Per-channel mean over the pixels of an inclusive-exclusive box
    /// (x0, y0, x1, y1), where x indexes width and y height.
    pub fn region_avg_pool(&mut self, x: &Tensor<S>, bx: (usize, usize, usize, usize)) -> Result<Tensor<S>> {
        self.check_owned(x)?;
        let sh = x.shape();
        if sh.len() != 3 {
            return Err(Error::dim(format!("region_avg_pool expects [h,w,c], got {sh:?}")));
        }
        let (h, w, c) = (sh[0], sh[1], sh[2]);
        let (x0, y0, x1, y1) = bx;
        if !(x0 < x1 && x1 <= w && y0 < y1 && y1 <= h) {
            return Err(Error::Geometry(format!(
                "box ({x0},{y0},{x1},{y1}) invalid for {w}x{h} map"
            )));
        }
        let area = (x1 - x0) * (y1 - y0);
        let mut data = vec![S::zero(); c];
        for i in y0..y1 {
            for j in x0..x1 {
                let px = &x.data()[(i * w + j) * c..(i * w + j + 1) * c];
                for (o, &v) in data.iter_mut().zip(px) {
                    *o = *o + v;
                }
            }
        }
        let inv = S::from_f64(1.0 / area as f64);
        for o in data.iter_mut() {
            *o = *o * inv;
        }
        let needs = self.nodes[x.id].needs_grad;
        Ok(self.push(
            Op::RegionAvgPool { x0, y0, x1, y1, w, c },
            vec![x.id],
            TensorData::new(vec![c], data)?,
            needs,
        ))
    }

    // ---- explicit per-channel / per-row combinations ----

    fn channel_op(&mut self, op: Op, x: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_owned(x)?;
        self.check_owned(v)?;
        let sh = x.shape();
        if sh.len() != 3 || v.shape().len() != 1 || v.shape()[0] != sh[2] {
            return Err(Error::dim(format!(
                "channel op: map {sh:?} with vector {:?}",
                v.shape()
            )));
        }
        let c = sh[2];
        let mut data = vec![S::zero(); x.numel()];
        match op {
            Op::MulChannels { .. } => {
                for (outs, px) in data.chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
                    for ((o, &xv), &vv) in outs.iter_mut().zip(px).zip(v.data()) {
                        *o = xv * vv;
                    }
                }
            }
            Op::AddChannels { .. } => {
                for (outs, px) in data.chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
                    for ((o, &xv), &vv) in outs.iter_mut().zip(px).zip(v.data()) {
                        *o = xv + vv;
                    }
                }
            }
            Op::SubChannels { .. } => {
                for (outs, px) in data.chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
                    for ((o, &xv), &vv) in outs.iter_mut().zip(px).zip(v.data()) {
                        *o = xv - vv;
                    }
                }
            }
            _ => unreachable!(),
        }
        let needs = self.any_needs_grad(&[x.id, v.id]);
        Ok(self.push(op, vec![x.id, v.id], TensorData::new(sh.to_vec(), data)?, needs))
    }

    /// out(i,j,k) = x(i,j,k) * v[k]
    pub fn mul_channels(&mut self, x: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
        let c = if x.shape().len() == 3 { x.shape()[2] } else { 0 };
        self.channel_op(Op::MulChannels { c }, x, v)
    }

    /// out(i,j,k) = x(i,j,k) + v[k]
    pub fn add_channels(&mut self, x: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
        let c = if x.shape().len() == 3 { x.shape()[2] } else { 0 };
        self.channel_op(Op::AddChannels { c }, x, v)
    }

    /// out(i,j,k) = x(i,j,k) - v[k]
    pub fn sub_channels(&mut self, x: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
        let c = if x.shape().len() == 3 { x.shape()[2] } else { 0 };
        self.channel_op(Op::SubChannels { c }, x, v)
    }

    /// out[r, j] = x[r, j] + v[j]
    pub fn add_rows(&mut self, x: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_owned(x)?;
        self.check_owned(v)?;
        let sh = x.shape();
        if sh.len() != 2 || v.shape().len() != 1 || v.shape()[0] != sh[1] {
            return Err(Error::dim(format!("add_rows: {sh:?} with {:?}", v.shape())));
        }
        let (rows, cols) = (sh[0], sh[1]);
        let mut data = vec![S::zero(); x.numel()];
        for (outs, row) in data.chunks_exact_mut(cols).zip(x.data().chunks_exact(cols)) {
            for ((o, &xv), &vv) in outs.iter_mut().zip(row).zip(v.data()) {
                *o = xv + vv;
            }
        }
        let needs = self.any_needs_grad(&[x.id, v.id]);
        Ok(self.push(Op::AddRows { rows, cols }, vec![x.id, v.id], TensorData::new(sh.to_vec(), data)?, needs))
    }

    pub fn reshape(&mut self, x: &Tensor<S>, shape: Vec<usize>) -> Result<Tensor<S>> {
        self.check_owned(x)?;
        if numel(&shape) != x.numel() {
            return Err(Error::dim(format!(
                "reshape {:?} -> {:?} changes element count",
                x.shape(),
                shape
            )));
        }
        let needs = self.nodes[x.id].needs_grad;
        Ok(self.push(Op::Reshape, vec![x.id], TensorData::new(shape, x.data().to_vec())?, needs))
    }

    /// Mean of all elements; scalar output.
    pub fn mean_all(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_owned(x)?;
        if x.numel() == 0 {
            return Err(Error::dim("mean_all of empty tensor".to_string()));
        }
        let mut acc = S::zero();
        for &v in x.data() {
            acc = acc + v;
        }
        let mean = acc * S::from_f64(1.0 / x.numel() as f64);
        let needs = self.nodes[x.id].needs_grad;
        Ok(self.push(Op::MeanAll, vec![x.id], TensorData::scalar(mean), needs))
    }

    /// Mean of a list of scalars; used to combine per-sample losses.
    pub fn mean_scalars(&mut self, xs: &[Tensor<S>]) -> Result<Tensor<S>> {
        if xs.is_empty() {
            return Err(Error::dim("mean_scalars of empty list".to_string()));
        }
        let mut ids = Vec::with_capacity(xs.len());
        let mut acc = S::zero();
        for t in xs {
            self.check_owned(t)?;
            if t.numel() != 1 {
                return Err(Error::dim(format!("mean_scalars expects scalars, got {:?}", t.shape())));
            }
            acc = acc + t.data()[0];
            ids.push(t.id);
        }
        let mean = acc * S::from_f64(1.0 / xs.len() as f64);
        let needs = self.any_needs_grad(&ids);
        Ok(self.push(Op::MeanScalars, ids, TensorData::scalar(mean), needs))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// tensor that requires one and is reachable from `loss`; gradients
    /// from multiple consumers are summed.
    pub fn backward(&mut self, loss: &Tensor<S>) -> Result<()> {
        self.check_owned(loss)?;
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.id] = Some(vec![S::one()]);
        for id in (0..self.nodes.len()).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let grad = std::mem::take(&mut self.grads[id]).unwrap();
            self.backward_node(id, &grad);
            self.grads[id] = Some(grad);
        }
        Ok(())
    }

    /// Gradient of the most recent `backward` with respect to `t`, if any
    /// reached it.
    pub fn grad(&self, t: &Tensor<S>) -> Option<&[S]> {
        if t.graph_tag != self.tag {
            return None;
        }
        self.grads[t.id].as_deref()
    }

    fn accumulate(&mut self, id: NodeId, contrib: &[S]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => {
                for (gv, &cv) in g.iter_mut().zip(contrib) {
                    *gv = *gv + cv;
                }
            }
            None => self.grads[id] = Some(contrib.to_vec()),
        }
    }

    fn input_needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn backward_node(&mut self, id: NodeId, grad: &[S]) {
        let op = self.nodes[id].op.clone();
        let inputs = self.nodes[id].inputs.clone();
        let out_value = Rc::clone(&self.nodes[id].value);
        let in_value = |ix: usize| Rc::clone(&self.nodes[inputs[ix]].value);

        match op {
            Op::Leaf => {}

            Op::Add => {
                self.accumulate(inputs[0], grad);
                self.accumulate(inputs[1], grad);
            }

            Op::Sub => {
                self.accumulate(inputs[0], grad);
                if self.input_needs_grad(inputs[1]) {
                    let neg: Vec<S> = grad.iter().map(|&g| S::zero() - g).collect();
                    self.accumulate(inputs[1], &neg);
                }
            }

            Op::Mul => {
                let (a, b) = (in_value(0), in_value(1));
                if self.input_needs_grad(inputs[0]) {
                    let da: Vec<S> = grad.iter().zip(b.data()).map(|(&g, &bv)| g * bv).collect();
                    self.accumulate(inputs[0], &da);
                }
                if self.input_needs_grad(inputs[1]) {
                    let db: Vec<S> = grad.iter().zip(a.data()).map(|(&g, &av)| g * av).collect();
                    self.accumulate(inputs[1], &db);
                }
            }

            Op::Scale(s) => {
                if self.input_needs_grad(inputs[0]) {
                    let sv = S::from_f64(s);
                    let dx: Vec<S> = grad.iter().map(|&g| g * sv).collect();
                    self.accumulate(inputs[0], &dx);
                }
            }

            Op::AddScalar(_) => {
                self.accumulate(inputs[0], grad);
            }

            Op::Relu => {
                if self.input_needs_grad(inputs[0]) {
                    // subgradient at 0 is 0
                    let x = in_value(0);
                    let dx: Vec<S> = grad
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &xv)| if xv > S::zero() { g } else { S::zero() })
                        .collect();
                    self.accumulate(inputs[0], &dx);
                }
            }

            Op::Sigmoid => {
                if self.input_needs_grad(inputs[0]) {
                    // dx = g * y * (1 - y)
                    let dx: Vec<S> = grad
                        .iter()
                        .zip(out_value.data())
                        .map(|(&g, &y)| g * y * (S::one() - y))
                        .collect();
                    self.accumulate(inputs[0], &dx);
                }
            }

            Op::Softplus => {
                if self.input_needs_grad(inputs[0]) {
                    // dx = g * sigmoid(x)
                    let x = in_value(0);
                    let dx: Vec<S> = grad
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &xv)| g * sigmoid_stable(xv))
                        .collect();
                    self.accumulate(inputs[0], &dx);
                }
            }

            Op::Sqrt => {
                if self.input_needs_grad(inputs[0]) {
                    // dx = g / (2 * y)
                    let half = S::from_f64(0.5);
                    let dx: Vec<S> = grad
                        .iter()
                        .zip(out_value.data())
                        .map(|(&g, &y)| g * half / y)
                        .collect();
                    self.accumulate(inputs[0], &dx);
                }
            }

            Op::Recip => {
                if self.input_needs_grad(inputs[0]) {
                    // dx = -g * y^2
                    let dx: Vec<S> = grad
                        .iter()
                        .zip(out_value.data())
                        .map(|(&g, &y)| S::zero() - g * y * y)
                        .collect();
                    self.accumulate(inputs[0], &dx);
                }
            }

            Op::Matmul { m, k, n } => {
                let (a, b) = (in_value(0), in_value(1));
                if self.input_needs_grad(inputs[0]) {
                    // dA = dC * B^T
                    let da = linalg::matmul_nt(grad, b.data(), m, n, k);
                    self.accumulate(inputs[0], &da);
                }
                if self.input_needs_grad(inputs[1]) {
                    // dB = A^T * dC
                    let db = linalg::matmul_tn(a.data(), grad, m, k, n);
                    self.accumulate(inputs[1], &db);
                }
            }

            Op::MatmulNt { m, k, n } => {
                let (a, b) = (in_value(0), in_value(1));
                if self.input_needs_grad(inputs[0]) {
                    // dA = dC * B
                    let da = linalg::matmul_nn(grad, b.data(), m, n, k);
                    self.accumulate(inputs[0], &da);
                }
                if self.input_needs_grad(inputs[1]) {
                    // dB = dC^T * A
                    let db = linalg::matmul_tn(grad, a.data(), m, n, k);
                    self.accumulate(inputs[1], &db);
                }
            }

            Op::Matvec { m, n } => {
                let (w, x) = (in_value(0), in_value(1));
                if self.input_needs_grad(inputs[0]) {
                    // dW = dy (x) x  (outer product)
                    let mut dw = vec![S::zero(); m * n];
                    for (i, &g) in grad.iter().enumerate() {
                        let row = &mut dw[i * n..(i + 1) * n];
                        for (o, &xv) in row.iter_mut().zip(x.data()) {
                            *o = g * xv;
                        }
                    }
                    self.accumulate(inputs[0], &dw);
                }
                if self.input_needs_grad(inputs[1]) {
                    // dx = W^T * dy
                    let mut dx = vec![S::zero(); n];
                    for (i, &g) in grad.iter().enumerate() {
                        let row = &w.data()[i * n..(i + 1) * n];
                        for (o, &wv) in dx.iter_mut().zip(row) {
                            *o = *o + g * wv;
                        }
                    }
                    self.accumulate(inputs[1], &dx);
                }
            }

            Op::Conv2d(meta) => {
                let (x, kern) = (in_value(0), in_value(1));
                let kdim = meta.kh * meta.kw * meta.cin;
                if self.input_needs_grad(inputs[1]) {
                    // dK = cols^T * dY; the im2col buffer is recomputed
                    // rather than saved.
                    let cols = im2col(x.data(), &meta);
                    let dk = linalg::matmul_tn(&cols, grad, meta.oh * meta.ow, kdim, meta.cout);
                    self.accumulate(inputs[1], &dk);
                }
                if self.input_needs_grad(inputs[0]) {
                    // dX = col2im(dY * K^T)
                    let dcols = linalg::matmul_nt(grad, kern.data(), meta.oh * meta.ow, meta.cout, kdim);
                    let mut dx = vec![S::zero(); meta.h * meta.w * meta.cin];
                    col2im_acc(&dcols, &mut dx, &meta);
                    self.accumulate(inputs[0], &dx);
                }
            }

            Op::Softmax { rows, cols } => {
                if self.input_needs_grad(inputs[0]) {
                    // dx = p .* (g - <g, p>) per row
                    let p = out_value.data();
                    let mut dx = vec![S::zero(); rows * cols];
                    for r in 0..rows {
                        let pr = &p[r * cols..(r + 1) * cols];
                        let gr = &grad[r * cols..(r + 1) * cols];
                        let mut dot = S::zero();
                        for (&gv, &pv) in gr.iter().zip(pr) {
                            dot = dot + gv * pv;
                        }
                        let out = &mut dx[r * cols..(r + 1) * cols];
                        for ((o, &pv), &gv) in out.iter_mut().zip(pr).zip(gr) {
                            *o = pv * (gv - dot);
                        }
                    }
                    self.accumulate(inputs[0], &dx);
                }
            }

            Op::EntropyRows { rows, cols } => {
                if self.input_needs_grad(inputs[0]) {
                    // d/dp [-p ln max(p, f)] = -(ln p + 1) above the floor,
                    // -ln f below it.
                    let p = in_value(0);
                    let floor = S::from_f64(PROB_FLOOR);
                    let mut dx = vec![S::zero(); rows * cols];
                    for r in 0..rows {
                        let g = grad[r];
                        let pr = &p.data()[r * cols..(r + 1) * cols];
                        let out = &mut dx[r * cols..(r + 1) * cols];
                        for (o, &pv) in out.iter_mut().zip(pr) {
                            let d = if pv > floor {
                                S::zero() - (pv.ln() + S::one())
                            } else {
                                S::zero() - floor.ln()
                            };
                            *o = g * d;
                        }
                    }
                    self.accumulate(inputs[0], &dx);
                }
            }

            Op::CrossEntropy { label, k } => {
                if self.input_needs_grad(inputs[0]) {
                    // d_logits = (softmax - onehot) * g
                    let x = in_value(0);
                    let xs = x.data();
                    let g = grad[0];
                    let mut mx = xs[0];
                    for &v in xs {
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut dx = vec![S::zero(); k];
                    let mut sum = S::zero();
                    for (o, &v) in dx.iter_mut().zip(xs) {
                        let e = (v - mx).exp();
                        *o = e;
                        sum = sum + e;
                    }
                    let inv = S::one() / sum;
                    for o in dx.iter_mut() {
                        *o = *o * inv;
                    }
                    dx[label] = dx[label] - S::one();
                    for o in dx.iter_mut() {
                        *o = *o * g;
                    }
                    self.accumulate(inputs[0], &dx);
                }
            }

            Op::GlobalAvgPool { h, w, c } => {
                if self.input_needs_grad(inputs[0]) {
                    let inv = S::from_f64(1.0 / (h * w) as f64);
                    let mut dx = vec![S::zero(); h * w * c];
                    for px in dx.chunks_exact_mut(c) {
                        for (o, &g) in px.iter_mut().zip(grad) {
                            *o = g * inv;
                        }
                    }
                    self.accumulate(inputs[0], &dx);
                }
            }

            Op::RegionAvgPool { x0, y0, x1, y1, w, c } => {
                if self.input_needs_grad(inputs[0]) {
                    let n = self.nodes[inputs[0]].value.numel();
                    let inv = S::from_f64(1.0 / ((x1 - x0) * (y1 - y0)) as f64);
                    let mut dx = vec![S::zero(); n];
                    for i in y0..y1 {
                        for j in x0..x1 {
                            let px = &mut dx[(i * w + j) * c..(i * w + j + 1) * c];
                            for (o, &g) in px.iter_mut().zip(grad) {
                                *o = g * inv;
                            }
                        }
                    }
                    self.accumulate(inputs[0], &dx);
                }
            }

            Op::MulChannels { c } => {
                let (x, v) = (in_value(0), in_value(1));
                if self.input_needs_grad(inputs[0]) {
                    let mut dx = vec![S::zero(); x.numel()];
                    for (outs, gs) in dx.chunks_exact_mut(c).zip(grad.chunks_exact(c)) {
                        for ((o, &g), &vv) in outs.iter_mut().zip(gs).zip(v.data()) {
                            *o = g * vv;
                        }
                    }
                    self.accumulate(inputs[0], &dx);
                }
                if self.input_needs_grad(inputs[1]) {
                    // dv[k] = sum_ij g(i,j,k) * x(i,j,k)
                    let mut dv = vec![S::zero(); c];
                    for (gs, xs) in grad.chunks_exact(c).zip(x.data().chunks_exact(c)) {
                        for ((o, &g), &xv) in dv.iter_mut().zip(gs).zip(xs) {
                            *o = *o + g * xv;
                        }
                    }
                    self.accumulate(inputs[1], &dv);
                }
            }

            Op::AddChannels { c } => {
                self.accumulate(inputs[0], grad);
                if self.input_needs_grad(inputs[1]) {
                    let mut dv = vec![S::zero(); c];
                    for gs in grad.chunks_exact(c) {
                        for (o, &g) in dv.iter_mut().zip(gs) {
                            *o = *o + g;
                        }
                    }
                    self.accumulate(inputs[1], &dv);
                }
            }

            Op::SubChannels { c } => {
                self.accumulate(inputs[0], grad);
                if self.input_needs_grad(inputs[1]) {
                    let mut dv = vec![S::zero(); c];
                    for gs in grad.chunks_exact(c) {
                        for (o, &g) in dv.iter_mut().zip(gs) {
                            *o = *o - g;
                        }
                    }
                    self.accumulate(inputs[1], &dv);
                }
            }

            Op::AddRows { rows: _, cols } => {
                self.accumulate(inputs[0], grad);
                if self.input_needs_grad(inputs[1]) {
                    let mut dv = vec![S::zero(); cols];
                    for gs in grad.chunks_exact(cols) {
                        for (o, &g) in dv.iter_mut().zip(gs) {
                            *o = *o + g;
                        }
                    }
                    self.accumulate(inputs[1], &dv);
                }
            }

            Op::Reshape => {
                self.accumulate(inputs[0], grad);
            }

            Op::MeanAll => {
                if self.input_needs_grad(inputs[0]) {
                    let n = self.nodes[inputs[0]].value.numel();
                    let g = grad[0] * S::from_f64(1.0 / n as f64);
                    let dx = vec![g; n];
                    self.accumulate(inputs[0], &dx);
                }
            }

            Op::MeanScalars => {
                let g = grad[0] * S::from_f64(1.0 / inputs.len() as f64);
                let contrib = [g];
                for &ix in &inputs {
                    self.accumulate(ix, &contrib);
                }
            }
        }
    }
}

fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (S::zero() - x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// ln(1 + e^x): above 30 the linear term dominates to machine precision,
/// below -30 the exponential itself is the value.
fn softplus_stable<S: Scalar>(x: S) -> S {
    let hi = S::from_f64(30.0);
    let lo = S::from_f64(-30.0);
    if x > hi {
        x
    } else if x < lo {
        x.exp()
    } else {
        (S::one() + x.exp()).ln()
    }
}

fn im2col<S: Scalar>(x: &[S], m: &ConvMeta) -> Vec<S> {
    let kdim = m.kh * m.kw * m.cin;
    let mut cols = vec![S::zero(); m.oh * m.ow * kdim];
    for oy in 0..m.oh {
        for ox in 0..m.ow {
            let row = &mut cols[(oy * m.ow + ox) * kdim..(oy * m.ow + ox + 1) * kdim];
            for ky in 0..m.kh {
                let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                for kx in 0..m.kw {
                    let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                    let dst = &mut row[(ky * m.kw + kx) * m.cin..(ky * m.kw + kx + 1) * m.cin];
                    if iy >= 0 && (iy as usize) < m.h && ix >= 0 && (ix as usize) < m.w {
                        let src = (iy as usize * m.w + ix as usize) * m.cin;
                        dst.copy_from_slice(&x[src..src + m.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc<S: Scalar>(dcols: &[S], dx: &mut [S], m: &ConvMeta) {
    let kdim = m.kh * m.kw * m.cin;
    for oy in 0..m.oh {
        for ox in 0..m.ow {
            let row = &dcols[(oy * m.ow + ox) * kdim..(oy * m.ow + ox + 1) * kdim];
            for ky in 0..m.kh {
                let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                if iy < 0 || iy as usize >= m.h {
                    continue;
                }
                for kx in 0..m.kw {
                    let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                    if ix < 0 || ix as usize >= m.w {
                        continue;
                    }
                    let src = &row[(ky * m.kw + kx) * m.cin..(ky * m.kw + kx + 1) * m.cin];
                    let dst_ix = (iy as usize * m.w + ix as usize) * m.cin;
                    let dst = &mut dx[dst_ix..dst_ix + m.cin];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}
