//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Graph`] evaluates eagerly, appends a node holding its
//! value, and records enough to replay the chain rule backwards. Nodes are
//! stored in creation order, which is already a topological order, so
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Binary operations follow one broadcast rule: the right operand is
//! right-aligned against the left operand's shape and each of its axes must
//! either match or be 1 (missing leading axes count as 1). The output always
//! has the left operand's shape.

use std::ops::Range;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, inverse_perm, permute_raw, MatMut, MatRef, Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Scale(f64),
    Clamp(f64, f64),
}

/// How the right operand of a binary op maps onto the output index space.
#[derive(Debug, Clone)]
enum Bcast {
    Same,
    /// `b` is contiguous in the output index space: `b[(i / inner) % bn]`.
    Block {
        inner: usize,
    },
    General(Vec<usize>),
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        bcast: Bcast,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Sum {
        a: usize,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        width: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Conv1d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        cin: usize,
        cout: usize,
        width: usize,
        lin: usize,
        lout: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Slice {
        a: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        inner: usize,
    },
    Segment {
        a: usize,
        frames: usize,
        feat: usize,
        seg_len: usize,
        segments: usize,
    },
    OverlapAdd {
        a: usize,
        count: usize,
        width: usize,
        feat: usize,
        hop: usize,
        start: usize,
        len: usize,
        normalize: bool,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Tanh => "tanh",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Relu => "relu",
                UnaryKind::Exp => "exp",
                UnaryKind::Log => "log",
                UnaryKind::Scale(_) => "scale",
                UnaryKind::Clamp(..) => "clamp",
            },
            Op::Sum { .. } => "sum",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Segment { .. } => "segment",
            Op::OverlapAdd { .. } => "overlap_add",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Recording of one forward evaluation. Confined to a single thread.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    check_finite: bool,
    macs: u64,
    consumed: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: false,
            macs: 0,
            consumed: false,
        }
    }

    /// Fail any operation whose output holds NaN or infinity.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by contractions (matmul, batched matmul, conv1d).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Elements materialized by non-leaf nodes in `range`. Reshapes are free.
    pub fn activation_elements(&self, range: Range<usize>) -> u64 {
        self.nodes[range]
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf | Op::Reshape { .. }))
            .map(|n| n.value.numel() as u64)
            .sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[usize]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, i: usize) -> &[F] {
        self.nodes[i].value.data()
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    // ---- contractions -------------------------------------------------

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err!(
                "matmul expects 2-D operands, got {sa:?} and {sb:?}"
            ));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(dim_err!("matmul inner extents differ: {sa:?} x {sb:?}"));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            view(self.data(a.0), sa[0], sa[1], ta),
            view(self.data(b.0), sb[0], sb[1], tb),
            F::zero(),
            MatMut::row_major(&mut out, m, n),
        );
        self.macs += (m * k * n) as u64;
        let op = Op::MatMul {
            a: a.0,
            b: b.0,
            ta,
            tb,
            m,
            k,
            n,
        };
        self.push(Tensor::new([m, n], out)?, op, &[a.0, b.0])
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when `tb`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err!(
                "batch_matmul expects [B,m,k] and [B,k,n], got {sa:?} and {sb:?}"
            ));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(dim_err!(
                "batch_matmul inner extents differ: {sa:?} x {sb:?}"
            ));
        }
        let mut out = vec![F::zero(); batch * m * n];
        let (da, db) = (self.data(a.0), self.data(b.0));
        for i in 0..batch {
            gemm(
                MatRef::row_major(&da[i * m * k..(i + 1) * m * k], m, k),
                view(&db[i * k * n..(i + 1) * k * n], sb[1], sb[2], tb),
                F::zero(),
                MatMut::row_major(&mut out[i * m * n..(i + 1) * m * n], m, n),
            );
        }
        self.macs += (batch * m * k * n) as u64;
        let op = Op::BatchMatMul {
            a: a.0,
            b: b.0,
            tb,
            batch,
            m,
            k,
            n,
        };
        self.push(Tensor::new([batch, m, n], out)?, op, &[a.0, b.0])
    }

    /// Valid (unpadded) strided cross-correlation of `x: [Cin, L]` with `w: [Cout, Cin, M]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[1] {
            return Err(dim_err!(
                "conv1d expects x [Cin, L] and w [Cout, Cin, M], got {sx:?} and {sw:?}"
            ));
        }
        if stride == 0 {
            return Err(Error::Usage("conv1d stride must be positive".into()));
        }
        let (cin, lin, cout, width) = (sx[0], sx[1], sw[0], sw[2]);
        if lin < width {
            return Err(dim_err!(
                "conv1d input length {lin} shorter than kernel {width}"
            ));
        }
        let lout = (lin - width) / stride + 1;
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(dim_err!(
                    "conv1d bias shape {:?}, expected [{cout}]",
                    self.shape(b)
                ));
            }
        }
        let cols = im2col(self.data(x.0), cin, lin, width, stride, lout);
        let mut out = vec![F::zero(); cout * lout];
        gemm(
            MatRef::row_major(self.data(w.0), cout, cin * width),
            MatRef::row_major(&cols, cin * width, lout),
            F::zero(),
            MatMut::row_major(&mut out, cout, lout),
        );
        if let Some(b) = bias {
            let bd = self.data(b.0);
            for (row, &bv) in out.chunks_mut(lout).zip(bd) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        self.macs += (cout * cin * width * lout) as u64;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(bias.map(|b| b.0));
        let op = Op::Conv1d {
            x: x.0,
            w: w.0,
            bias: bias.map(|b| b.0),
            stride,
            cin,
            cout,
            width,
            lin,
            lout,
        };
        self.push(Tensor::new([cout, lout], out)?, op, &inputs)
    }

    // ---- pointwise ----------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let bcast = bcast_plan(&sa, self.shape(b))?;
        let (da, db) = (self.data(a.0), self.data(b.0));
        let mut out = vec![F::zero(); da.len()];
        let f = |x: F, y: F| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        for_each_bidx(da.len(), db.len(), &bcast, |i, j| out[i] = f(da[i], db[j]));
        let op = Op::Binary {
            kind,
            a: a.0,
            b: b.0,
            bcast,
        };
        self.push(Tensor::new(sa, out)?, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let f = |x: F| -> F {
            match kind {
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Sigmoid => sigmoid(x),
                UnaryKind::Relu => x.max(F::zero()),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Scale(c) => x * F::c(c),
                UnaryKind::Clamp(lo, hi) => x.max(F::c(lo)).min(F::c(hi)),
            }
        };
        let value = self.value(a).map(f);
        self.push(value, Op::Unary { kind, a: a.0 }, &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), a)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryKind::Clamp(lo, hi), a)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: F = self.data(a.0).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ---- normalization ------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax axis {axis} for shape {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data(a.0);
        let mut y = vec![F::zero(); x.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |j: usize| (o * len + j) * inner + r;
                let mx = (0..len).map(|j| x[at(j)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] = y[at(j)] / total;
                }
            }
        }
        let op = Op::Softmax {
            a: a.0,
            outer,
            len,
            inner,
        };
        self.push(Tensor::new(shape, y)?, op, &[a.0])
    }

    /// Layer normalization over the trailing axes covered by `gain`/`bias`
    /// (both shaped like those trailing axes), with [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.layer_norm_eps(x, gain, bias, LAYER_NORM_EPS)
    }

    pub fn layer_norm_eps(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let gshape = self.shape(gain).to_vec();
        if self.shape(bias) != gshape.as_slice()
            || gshape.len() > shape.len()
            || shape[shape.len() - gshape.len()..] != gshape[..]
        {
            return Err(dim_err!(
                "layer_norm gain {gshape:?} / bias {:?} must match trailing axes of {shape:?}",
                self.shape(bias)
            ));
        }
        let width: usize = gshape.iter().product();
        let rows = self.value(x).numel() / width;
        let (xd, gd, bd) = (self.data(x.0), self.data(gain.0), self.data(bias.0));
        let mut y = vec![F::zero(); xd.len()];
        let mut xhat = vec![F::zero(); xd.len()];
        let mut rstd = vec![F::zero(); rows];
        let nw = F::c(width as f64);
        for r in 0..rows {
            let row = &xd[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<F>() / nw;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nw;
            let rs = F::one() / (var + F::c(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..width {
                let h = (row[j] - mean) * rs;
                xhat[r * width + j] = h;
                y[r * width + j] = h * gd[j] + bd[j];
            }
        }
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            width,
            xhat,
            rstd,
        };
        self.push(Tensor::new(shape, y)?, op, &[x.0, gain.0, bias.0])
    }

    // ---- layout -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape { a: a.0 }, &[a.0])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        let op = Op::Permute {
            a: a.0,
            axes: axes.to_vec(),
        };
        self.push(value, op, &[a.0])
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err!(
                "slice [{start}, {}) of axis {axis} in {shape:?}",
                start + len
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let x = self.data(a.0);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let op = Op::Slice {
            a: a.0,
            outer,
            axis_len,
            inner,
            start,
            len,
        };
        self.push(Tensor::new(oshape, out)?, op, &[a.0])
    }

    /// Joins tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} for shape {base:?}"));
        }
        let mut total = 0;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(dim_err!(
                    "concat shape {s:?} incompatible with {base:?} on axis {axis}"
                ));
            }
            lens.push((p.0, s[axis]));
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(id, len) in &lens {
                let d = self.data(id);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        let inputs: Vec<usize> = lens.iter().map(|p| p.0).collect();
        let op = Op::Concat {
            parts: lens,
            outer,
            inner,
        };
        self.push(Tensor::new(oshape, out)?, op, &inputs)
    }

    /// Splits frames `x: [I, F]` into `S = ceil(2I/K) + 1` half-overlapping
    /// segments `[S, K, F]`, with `K/2` zero frames in front and zero fill at the tail.
    pub fn segment(&mut self, x: Var, seg_len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(dim_err!(
                "segment expects [frames, features], got {shape:?}"
            ));
        }
        if seg_len < 2 || seg_len % 2 != 0 {
            return Err(Error::Usage(format!(
                "segment length must be even and >= 2, got {seg_len}"
            )));
        }
        let (frames, feat) = (shape[0], shape[1]);
        let segments = segment_count(frames, seg_len);
        let hop = seg_len / 2;
        let xd = self.data(x.0);
        let mut out = vec![F::zero(); segments * seg_len * feat];
        for s in 0..segments {
            for k in 0..seg_len {
                let p = s * hop + k;
                if p >= hop && p - hop < frames {
                    let i = p - hop;
                    let dst = (s * seg_len + k) * feat;
                    out[dst..dst + feat].copy_from_slice(&xd[i * feat..(i + 1) * feat]);
                }
            }
        }
        let op = Op::Segment {
            a: x.0,
            frames,
            feat,
            seg_len,
            segments,
        };
        self.push(Tensor::new([segments, seg_len, feat], out)?, op, &[x.0])
    }

    /// Sums windows `x: [N, W, F]` placed `hop` apart, returning positions
    /// `[start, start + len)` of the result as `[len, F]`. With `normalize`, each
    /// position is divided by how many windows cover it.
    pub fn overlap_add(
        &mut self,
        x: Var,
        hop: usize,
        normalize: bool,
        start: usize,
        len: usize,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(dim_err!(
                "overlap_add expects [windows, width, features], got {shape:?}"
            ));
        }
        let (count, width, feat) = (shape[0], shape[1], shape[2]);
        if hop == 0 || hop > width {
            return Err(Error::Usage(format!(
                "overlap_add hop {hop} inconsistent with width {width}"
            )));
        }
        let xd = self.data(x.0);
        let mut out = vec![F::zero(); len * feat];
        let cover = coverage(count, width, hop);
        for n in 0..count {
            for w in 0..width {
                let p = n * hop + w;
                if p < start || p - start >= len {
                    continue;
                }
                let q = p - start;
                let scale = if normalize {
                    F::one() / F::c(cover[p] as f64)
                } else {
                    F::one()
                };
                let src = (n * width + w) * feat;
                for f in 0..feat {
                    out[q * feat + f] += xd[src + f] * scale;
                }
            }
        }
        let op = Op::OverlapAdd {
            a: x.0,
            count,
            width,
            feat,
            hop,
            start,
            len,
            normalize,
        };
        self.push(Tensor::new([len, feat], out)?, op, &[x.0])
    }

    // ---- reverse sweep ------------------------------------------------

    /// Populates gradients of `loss` (a one-element tensor) with respect to every
    /// node that requires them. Intermediate gradients are released once used;
    /// leaf gradients remain readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage(
                "backward called twice on the same graph".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        if !self.needs(loss.0) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop(idx, &op, &g);
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, contrib: Vec<F>) {
        let node = &mut self.nodes[id];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib),
        }
    }

    fn backprop(&mut self, idx: usize, op: &Op<F>, g: &[F]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (sa, sb) = (self.shape(Var(a)).to_vec(), self.shape(Var(b)).to_vec());
                let gm = MatRef::row_major(g, m, n);
                if self.needs(a) {
                    // d op(a) = g · op(b)^T, written back through a's layout
                    let mut da = vec![F::zero(); m * k];
                    let target = MatMut::row_major(&mut da, sa[0], sa[1]);
                    let target = if ta { target.t() } else { target };
                    gemm(
                        gm,
                        view(self.data(b), sb[0], sb[1], tb).t(),
                        F::zero(),
                        target,
                    );
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    let mut db = vec![F::zero(); k * n];
                    let target = MatMut::row_major(&mut db, sb[0], sb[1]);
                    let target = if tb { target.t() } else { target };
                    gemm(
                        view(self.data(a), sa[0], sa[1], ta).t(),
                        gm,
                        F::zero(),
                        target,
                    );
                    self.accumulate(b, db);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                tb,
                batch,
                m,
                k,
                n,
            } => {
                let sb = self.shape(Var(b)).to_vec();
                if self.needs(a) {
                    let mut da = vec![F::zero(); batch * m * k];
                    let bd = self.data(b);
                    for i in 0..batch {
                        gemm(
                            MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n),
                            view(&bd[i * k * n..(i + 1) * k * n], sb[1], sb[2], tb).t(),
                            F::zero(),
                            MatMut::row_major(&mut da[i * m * k..(i + 1) * m * k], m, k),
                        );
                    }
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    let mut db = vec![F::zero(); batch * k * n];
                    let ad = self.data(a);
                    for i in 0..batch {
                        let target =
                            MatMut::row_major(&mut db[i * k * n..(i + 1) * k * n], sb[1], sb[2]);
                        let target = if tb { target.t() } else { target };
                        gemm(
                            MatRef::row_major(&ad[i * m * k..(i + 1) * m * k], m, k).t(),
                            MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n),
                            F::zero(),
                            target,
                        );
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Binary {
                kind,
                a,
                b,
                ref bcast,
            } => {
                let (na, nb) = (self.needs(a), self.needs(b));
                let (ad, bd) = (self.data(a), self.data(b));
                let n = ad.len();
                let bn = bd.len();
                let mut ga = if na { vec![F::zero(); n] } else { Vec::new() };
                let mut gb = if nb { vec![F::zero(); bn] } else { Vec::new() };
                for_each_bidx(n, bn, bcast, |i, j| {
                    let (da, db) = match kind {
                        BinaryKind::Add => (g[i], g[i]),
                        BinaryKind::Sub => (g[i], -g[i]),
                        BinaryKind::Mul => (g[i] * bd[j], g[i] * ad[i]),
                        BinaryKind::Div => (g[i] / bd[j], -g[i] * ad[i] / (bd[j] * bd[j])),
                    };
                    if na {
                        ga[i] += da;
                    }
                    if nb {
                        gb[j] += db;
                    }
                });
                if na {
                    self.accumulate(a, ga);
                }
                if nb {
                    self.accumulate(b, gb);
                }
            }
            Op::Unary { kind, a } => {
                if !self.needs(a) {
                    return;
                }
                let x = self.data(a);
                let y = self.nodes[idx].value.data();
                let one = F::one();
                let da: Vec<F> = (0..g.len())
                    .map(|i| match kind {
                        UnaryKind::Tanh => g[i] * (one - y[i] * y[i]),
                        UnaryKind::Sigmoid => g[i] * y[i] * (one - y[i]),
                        UnaryKind::Relu => {
                            if x[i] > F::zero() {
                                g[i]
                            } else {
                                F::zero()
                            }
                        }
                        UnaryKind::Exp => g[i] * y[i],
                        UnaryKind::Log => g[i] / x[i],
                        UnaryKind::Scale(c) => g[i] * F::c(c),
                        UnaryKind::Clamp(lo, hi) => {
                            if x[i] >= F::c(lo) && x[i] <= F::c(hi) {
                                g[i]
                            } else {
                                F::zero()
                            }
                        }
                    })
                    .collect();
                self.accumulate(a, da);
            }
            Op::Sum { a } => {
                let n = self.value(Var(a)).numel();
                self.accumulate(a, vec![g[0]; n]);
            }
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                if !self.needs(a) {
                    return;
                }
                let y = self.nodes[idx].value.data();
                let mut da = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + r;
                        let dot: F = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            da[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                width,
                ref xhat,
                ref rstd,
            } => {
                let rows = rstd.len();
                if self.needs(x) {
                    let gd = self.data(gain);
                    let nw = F::c(width as f64);
                    let mut dx = vec![F::zero(); rows * width];
                    for r in 0..rows {
                        let base = r * width;
                        let mut mean_d = F::zero();
                        let mut mean_dh = F::zero();
                        for j in 0..width {
                            let d = g[base + j] * gd[j];
                            mean_d += d;
                            mean_dh += d * xhat[base + j];
                        }
                        mean_d = mean_d / nw;
                        mean_dh = mean_dh / nw;
                        for j in 0..width {
                            let d = g[base + j] * gd[j];
                            dx[base + j] = rstd[r] * (d - mean_d - xhat[base + j] * mean_dh);
                        }
                    }
                    self.accumulate(x, dx);
                }
                if self.needs(gain) {
                    let mut dg = vec![F::zero(); width];
                    for r in 0..rows {
                        for j in 0..width {
                            dg[j] += g[r * width + j] * xhat[r * width + j];
                        }
                    }
                    self.accumulate(gain, dg);
                }
                if self.needs(bias) {
                    let mut db = vec![F::zero(); width];
                    for r in 0..rows {
                        for j in 0..width {
                            db[j] += g[r * width + j];
                        }
                    }
                    self.accumulate(bias, db);
                }
            }
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                cin,
                cout,
                width,
                lin,
                lout,
            } => {
                let gm = MatRef::row_major(g, cout, lout);
                if self.needs(w) {
                    let cols = im2col(self.data(x), cin, lin, width, stride, lout);
                    let mut dw = vec![F::zero(); cout * cin * width];
                    gemm(
                        gm,
                        MatRef::row_major(&cols, cin * width, lout).t(),
                        F::zero(),
                        MatMut::row_major(&mut dw, cout, cin * width),
                    );
                    self.accumulate(w, dw);
                }
                if self.needs(x) {
                    let mut dcols = vec![F::zero(); cin * width * lout];
                    gemm(
                        MatRef::row_major(self.data(w), cout, cin * width).t(),
                        gm,
                        F::zero(),
                        MatMut::row_major(&mut dcols, cin * width, lout),
                    );
                    let mut dx = vec![F::zero(); cin * lin];
                    for c in 0..cin {
                        for m in 0..width {
                            let row = &dcols[(c * width + m) * lout..(c * width + m + 1) * lout];
                            for (t, &v) in row.iter().enumerate() {
                                dx[c * lin + t * stride + m] += v;
                            }
                        }
                    }
                    self.accumulate(x, dx);
                }
                if let Some(b) = bias {
                    if self.needs(b) {
                        let db = g
                            .chunks(lout)
                            .map(|row| row.iter().copied().sum())
                            .collect();
                        self.accumulate(b, db);
                    }
                }
            }
            Op::Reshape { a } => self.accumulate(a, g.to_vec()),
            Op::Permute { a, ref axes } => {
                if !self.needs(a) {
                    return;
                }
                let oshape = self.nodes[idx].value.shape().to_vec();
                let (_, da) =
                    permute_raw(&oshape, g, &inverse_perm(axes)).expect("valid permutation");
                self.accumulate(a, da);
            }
            Op::Slice {
                a,
                outer,
                axis_len,
                inner,
                start,
                len,
            } => {
                let mut da = vec![F::zero(); outer * axis_len * inner];
                for o in 0..outer {
                    let dst = (o * axis_len + start) * inner;
                    da[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(a, da);
            }
            Op::Concat {
                ref parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(id, len) in parts {
                    if self.needs(id) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[src..src + len * inner]);
                        }
                        self.accumulate(id, dp);
                    }
                    offset += len;
                }
            }
            Op::Segment {
                a,
                frames,
                feat,
                seg_len,
                segments,
            } => {
                let hop = seg_len / 2;
                let mut da = vec![F::zero(); frames * feat];
                for s in 0..segments {
                    for k in 0..seg_len {
                        let p = s * hop + k;
                        if p >= hop && p - hop < frames {
                            let i = p - hop;
                            let src = (s * seg_len + k) * feat;
                            for f in 0..feat {
                                da[i * feat + f] += g[src + f];
                            }
                        }
                    }
                }
                self.accumulate(a, da);
            }
            Op::OverlapAdd {
                a,
                count,
                width,
                feat,
                hop,
                start,
                len,
                normalize,
            } => {
                let cover = coverage(count, width, hop);
                let mut da = vec![F::zero(); count * width * feat];
                for n in 0..count {
                    for w in 0..width {
                        let p = n * hop + w;
                        if p < start || p - start >= len {
                            continue;
                        }
                        let q = p - start;
                        let scale = if normalize {
                            F::one() / F::c(cover[p] as f64)
                        } else {
                            F::one()
                        };
                        let dst = (n * width + w) * feat;
                        for f in 0..feat {
                            da[dst + f] = g[q * feat + f] * scale;
                        }
                    }
                }
                self.accumulate(a, da);
            }
        }
    }
}

/// Number of half-overlapping segments of length `seg_len` covering `frames` frames.
pub fn segment_count(frames: usize, seg_len: usize) -> usize {
    (2 * frames).div_ceil(seg_len) + 1
}

fn coverage(count: usize, width: usize, hop: usize) -> Vec<u32> {
    let total = if count == 0 {
        0
    } else {
        (count - 1) * hop + width
    };
    let mut cover = vec![0u32; total];
    for n in 0..count {
        for c in &mut cover[n * hop..n * hop + width] {
            *c += 1;
        }
    }
    cover
}

fn view<F>(data: &[F], rows: usize, cols: usize, transpose: bool) -> MatRef<'_, F> {
    let m = MatRef::row_major(data, rows, cols);
    if transpose {
        m.t()
    } else {
        m
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn im2col<F: Real>(
    x: &[F],
    cin: usize,
    lin: usize,
    width: usize,
    stride: usize,
    lout: usize,
) -> Vec<F> {
    let mut cols = vec![F::zero(); cin * width * lout];
    for c in 0..cin {
        for m in 0..width {
            let row = &mut cols[(c * width + m) * lout..(c * width + m + 1) * lout];
            for (t, v) in row.iter_mut().enumerate() {
                *v = x[c * lin + t * stride + m];
            }
        }
    }
    cols
}

fn bcast_plan(a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    if b.len() > a.len() {
        return Err(dim_err!("cannot broadcast {b:?} onto {a:?}"));
    }
    let pad = a.len() - b.len();
    let bp: Vec<usize> = std::iter::repeat_n(1, pad)
        .chain(b.iter().copied())
        .collect();
    for (d, (&x, &y)) in a.iter().zip(&bp).enumerate() {
        if y != x && y != 1 {
            return Err(dim_err!("cannot broadcast {b:?} onto {a:?} (axis {d})"));
        }
    }
    let bn: usize = bp.iter().product();
    if bn == 1 {
        return Ok(Bcast::Block {
            inner: a.iter().product::<usize>().max(1),
        });
    }
    // contiguous run of matching axes, ones elsewhere
    let first = bp.iter().position(|&y| y != 1).unwrap_or(0);
    let last = bp.iter().rposition(|&y| y != 1).unwrap_or(0);
    if (first..=last).all(|d| bp[d] == a[d]) {
        let inner = a[last + 1..].iter().product();
        if bn == a.iter().product::<usize>() {
            return Ok(Bcast::Same);
        }
        return Ok(Bcast::Block { inner });
    }
    let n: usize = a.iter().product();
    let bstrides = crate::tensor::strides(&bp);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a.len()];
    for _ in 0..n {
        map.push(
            idx.iter()
                .zip(&bp)
                .zip(&bstrides)
                .map(|((&i, &dim), &s)| if dim == 1 { 0 } else { i * s })
                .sum(),
        );
        for d in (0..a.len()).rev() {
            idx[d] += 1;
            if idx[d] < a[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Bcast::General(map))
}

#[inline]
fn for_each_bidx(n: usize, bn: usize, plan: &Bcast, mut f: impl FnMut(usize, usize)) {
    match plan {
        Bcast::Same => (0..n).for_each(|i| f(i, i)),
        Bcast::Block { inner } => {
            let inner = *inner;
            if bn == 0 || inner == 0 {
                return;
            }
            let outer = n / (bn * inner);
            let mut i = 0;
            for _ in 0..outer {
                for j in 0..bn {
                    for _ in 0..inner {
                        f(i, j);
                        i += 1;
                    }
                }
            }
        }
        Bcast::General(map) => map.iter().enumerate().for_each(|(i, &j)| f(i, j)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);
        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.]);
        assert_eq!(g.macs(), 8 + 2);
    }

    #[test]
    fn matmul_rejects_bad_inner_extent() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        assert!(g.matmul_t(a, b, false, true).is_ok());
    }

    #[test]
    fn pointwise_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);
        let z = g.constant(t(&[1], &[0.]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn tanh_derivative_at_zero_is_one() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[0.]));
        let y = g.tanh(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let row = g.constant(t(&[3], &[10., 20., 30.]));
        let col = g.constant(t(&[2, 1], &[100., 200.]));
        let one = g.constant(t(&[1], &[1.]));
        let r = g.add(a, row).unwrap();
        assert_eq!(g.value(r).data(), &[11., 22., 33., 14., 25., 36.]);
        let c = g.add(a, col).unwrap();
        assert_eq!(g.value(c).data(), &[101., 102., 103., 204., 205., 206.]);
        let s = g.sub(a, one).unwrap();
        assert_eq!(g.value(s).data(), &[0., 1., 2., 3., 4., 5.]);
        let bad = g.constant(t(&[2], &[1., 2.]));
        assert!(matches!(g.add(a, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn general_broadcast_matches_manual() {
        // b: [2,1,4] onto a: [2,3,4] is not a contiguous block
        let mut g = Graph::<f64>::new();
        let av: Vec<f64> = (0..24).map(f64::from).collect();
        let bv: Vec<f64> = (0..8).map(|x| f64::from(x) * 100.0).collect();
        let a = g.param(t(&[2, 3, 4], &av));
        let b = g.param(t(&[2, 1, 4], &bv));
        let c = g.add(a, b).unwrap();
        let out = g.value(c).clone();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(out.at(&[i, j, k]), av[i * 12 + j * 4 + k] + bv[i * 4 + k]);
                }
            }
        }
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000., 0.]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-12);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([2, 4], 3.5));
        let gain = g.constant(Tensor::full([4], 1.0));
        let bias = g.constant(Tensor::zeros([4]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1d_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[1., 2., 3., 4.]));
        let w = g.constant(t(&[1, 1, 2], &[1., 1.]));
        let y = g.conv1d(x, w, None, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3., 7.]);
        let imp = g.constant(t(&[1, 1, 1], &[1.]));
        let y = g.conv1d(x, imp, None, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);
        let w3 = g.constant(Tensor::zeros([1, 1, 5]));
        assert!(matches!(g.conv1d(x, w3, None, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([2, 3], 0.7));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let sq = g.mul(x, x).unwrap();
        let dot = g.sum(sq).unwrap();
        g.backward(dot).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn finite_check_flags_overflow() {
        let mut g = Graph::<f32>::new().with_finite_check(true);
        let x = g.constant(Tensor::full([1], 1000.0));
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full([1], 1000.0));
        assert!(g.exp(x).is_ok());
    }

    #[test]
    fn segment_counts_and_degenerate_case() {
        assert_eq!(segment_count(100, 50), 5);
        assert_eq!(segment_count(1, 2), 2);
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1], &[7.]));
        let s = g.segment(x, 2).unwrap();
        assert_eq!(g.shape(s), &[2, 2, 1]);
        assert_eq!(g.value(s).data(), &[0., 7., 7., 0.]);
    }

    #[test]
    fn overlap_add_hand_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2, 1], &[1., 1., 1., 1.]));
        let y = g.overlap_add(x, 1, false, 0, 3).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 1.]);
        let y = g.overlap_add(x, 1, true, 0, 3).unwrap();
        assert_eq!(g.value(y).data(), &[1., 1., 1.]);
        assert!(matches!(
            g.overlap_add(x, 3, false, 0, 3),
            Err(Error::Usage(_))
        ));
    }
}
