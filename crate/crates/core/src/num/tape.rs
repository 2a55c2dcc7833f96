//! Tape-based reverse-mode automatic differentiation over real tensors.
//!
//! Every primitive appends a node holding its forward value and the handles
//! of its inputs. Nodes are only ever appended after their inputs, so the
//! node index order is a topological order and [`Tape::backward`] is a
//! single reverse sweep that visits each node once.
//!
//! Shape errors inside the tape are programming errors and panic with the
//! offending shapes; public entry points of the model modules validate
//! user-supplied shapes before building graphs.

use crate::error::{Error, Result};
use crate::num::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddBroadcast(Var, Var),
    Exp(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    SumPerSample(Var),
    Mean(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MulChannel(Var, Var),
    AddChannel(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ConcatChannels(Vec<Var>),
    Squeeze2(Var),
    Unsqueeze2(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Reshape(Var),
    RepeatBatch(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::SumPerSample(..) => "sum_per_sample",
            Op::Mean(..) => "mean",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::MulChannel(..) => "mul_channel",
            Op::AddChannel(..) => "add_channel",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ConcatChannels(..) => "concat_channels",
            Op::Squeeze2(..) => "squeeze2",
            Op::Unsqueeze2(..) => "unsqueeze2",
            Op::AvgPool2(..) => "avg_pool2",
            Op::Upsample2(..) => "upsample2",
            Op::Reshape(..) => "reshape",
            Op::RepeatBatch(..) => "repeat_batch",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Move the gradient out, falling back to zeros.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

// C (m x n) = op(A) (m x k) * op(B) (k x n) + beta * C, row-major storage.
// `at` means A is stored as its transpose (k x m); `bt` likewise for B.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    at: bool,
    b: &[f64],
    bt: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents asserted above, and `c`
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.ho * self.wo;
        for c in 0..self.ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let seg = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            seg.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in seg.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.ho * self.wo;
        for c in 0..self.ci {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = iy as usize * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[base + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn squeeze_t(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "squeeze needs even dims, got {h}x{w}"
    );
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, 4 * c, h2, w2]);
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let oc = ch * 4 + dy * 2 + dx;
                    for i in 0..h2 {
                        for j in 0..w2 {
                            dst[((b * 4 * c + oc) * h2 + i) * w2 + j] =
                                src[((b * c + ch) * h + 2 * i + dy) * w + 2 * j + dx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn unsqueeze_t(x: &Tensor) -> Tensor {
    let (n, c4, h2, w2) = x.dims4();
    assert!(
        c4 % 4 == 0,
        "unsqueeze needs channels divisible by 4, got {c4}"
    );
    let c = c4 / 4;
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let ic = ch * 4 + dy * 2 + dx;
                    for i in 0..h2 {
                        for j in 0..w2 {
                            dst[((b * c + ch) * h + 2 * i + dy) * w + 2 * j + dx] =
                                src[((b * c4 + ic) * h2 + i) * w2 + j];
                        }
                    }
                }
            }
        }
    }
    out
}

fn pool_sum2(x: &Tensor, scale: f64) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "pooling needs even dims, got {h}x{w}"
    );
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, h2, w2]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for i in 0..h2 {
            for j in 0..w2 {
                let base = p * h * w + 2 * i * w + 2 * j;
                dst[(p * h2 + i) * w2 + j] =
                    scale * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
            }
        }
    }
    out
}

fn upsample_t(x: &Tensor, scale: f64) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, h2, w2]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for i in 0..h2 {
            for j in 0..w2 {
                dst[(p * h2 + i) * w2 + j] = scale * src[(p * h + i / 2) * w + j / 2];
            }
        }
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
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
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    /// `a + s` where `s` holds a single value.
    pub fn add_broadcast(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(
            self.value(s).len(),
            1,
            "add_broadcast: rhs must be a scalar"
        );
        let c = self.value(s).data()[0];
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddBroadcast(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Sum over all axes except the leading one, shape `[N]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.batch();
        let per = t.len() / n.max(1);
        let data = t
            .data()
            .chunks(per.max(1))
            .map(|c| c.iter().sum())
            .collect();
        let v = Tensor::new(vec![n], data).expect("sum_per_sample shape");
        self.push(v, Op::SumPerSample(a))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            out.data_mut(),
            0.0,
        );
        self.push(out, Op::MatMul(a, b))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> (ConvGeom, usize, usize) {
        let (n, ci, h, wd) = self.value(x).dims4();
        let ws = self.shape(w);
        assert!(
            ws.len() == 4 && ws[1] == ci && ws[2] == ws[3],
            "conv2d: weight {ws:?} incompatible with input {:?}",
            self.shape(x)
        );
        let k = ws[2];
        assert!(
            h + 2 * pad >= k && wd + 2 * pad >= k,
            "conv2d: kernel larger than padded input"
        );
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        (
            ConvGeom {
                ci,
                h,
                w: wd,
                k,
                stride,
                pad,
                ho,
                wo,
            },
            n,
            ws[0],
        )
    }

    /// 2-D cross-correlation of `x [N, Ci, H, W]` with `w [Co, Ci, k, k]`,
    /// zero padding `pad`, optional per-output-channel bias `b [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (g, n, co) = self.conv_geom(x, w, stride, pad);
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[co], "conv2d: bias shape");
        }
        let kk = g.ci * g.k * g.k;
        let p = g.ho * g.wo;
        let mut out = Tensor::zeros(&[n, co, g.ho, g.wo]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kk * p]
        };
        let in_per = g.ci * g.h * g.w;
        for (bi, o) in out.data_mut().chunks_mut(co * p).enumerate() {
            let xs = &xv[bi * in_per..(bi + 1) * in_per];
            let cm: &[f64] = if g.is_pointwise() {
                xs
            } else {
                g.im2col(xs, &mut cols);
                &cols
            };
            gemm(co, kk, p, wv, false, cm, false, o, 0.0);
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data();
                for (c, row) in o.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Per-channel scaling of `x [N, C, H, W]` by `s [C]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(s), &[c], "mul_channel: scale shape");
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        let hw = h * w;
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let f = sv[i % c];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        debug_assert_eq!(out.len(), n * c * hw);
        self.push(out, Op::MulChannel(x, s))
    }

    /// Per-channel offset of `x [N, C, H, W]` by `b [C]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let (_, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(b), &[c], "add_channel: bias shape");
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            let f = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += f);
        }
        self.push(out, Op::AddChannel(x, b))
    }

    /// Channels `[start, start + len)` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(start + len <= c, "slice_channels: {start}+{len} > {c}");
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            data.extend_from_slice(&src[base..base + len * hw]);
        }
        let out = Tensor::new(vec![n, len, h, w], data).expect("slice shape");
        self.push(out, Op::SliceChannels { x, start })
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_channels: no inputs");
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let hw = h * w;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert!(
                pn == n && ph == h && pw == w,
                "concat_channels: mismatched shapes"
            );
            total += pc;
        }
        let mut data = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                data.extend_from_slice(&t.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let out = Tensor::new(vec![n, total, h, w], data).expect("concat shape");
        self.push(out, Op::ConcatChannels(parts.to_vec()))
    }

    /// 2x2 space-to-channel rearrangement `[N,C,H,W] -> [N,4C,H/2,W/2]`.
    pub fn squeeze2(&mut self, x: Var) -> Var {
        let v = squeeze_t(self.value(x));
        self.push(v, Op::Squeeze2(x))
    }

    /// Inverse of [`Tape::squeeze2`].
    pub fn unsqueeze2(&mut self, x: Var) -> Var {
        let v = unsqueeze_t(self.value(x));
        self.push(v, Op::Unsqueeze2(x))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let v = pool_sum2(self.value(x), 0.25);
        self.push(v, Op::AvgPool2(x))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let v = upsample_t(self.value(x), 1.0);
        self.push(v, Op::Upsample2(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape: element count");
        self.push(v, Op::Reshape(x))
    }

    /// Tile a batch-1 tensor `n` times along the leading axis.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.batch(), 1, "repeat_batch expects a batch of one");
        let mut shape = t.shape().to_vec();
        shape[0] = n;
        let mut data = Vec::with_capacity(t.len() * n);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(shape, data).expect("repeat shape");
        self.push(v, Op::RepeatBatch(x))
    }

    /// First node with a non-finite value, by op name.
    pub fn first_non_finite(&self, upto: Var) -> Option<&'static str> {
        self.nodes[..=upto.0]
            .iter()
            .find(|n| !n.value.all_finite())
            .map(|n| n.op.name())
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if let Some(op) = self.first_non_finite(loss) {
            return Err(Error::Poisoned { op });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::Poisoned { op: "backward" });
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accumulate(&mut grads[a.0], g.zip_map(val(*b), |x, y| x * y));
                accumulate(&mut grads[b.0], g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(&mut grads[a.0], g.map(|v| c * v));
            }
            Op::AddConst(a) => accumulate(&mut grads[a.0], g.clone()),
            Op::AddBroadcast(a, s) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[s.0], Tensor::full(val(*s).shape(), g.sum()));
            }
            Op::Exp(a) => accumulate(&mut grads[a.0], g.zip_map(&node.value, |x, y| x * y)),
            Op::Tanh(a) => accumulate(
                &mut grads[a.0],
                g.zip_map(&node.value, |x, y| x * (1.0 - y * y)),
            ),
            Op::Relu(a) => accumulate(
                &mut grads[a.0],
                g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::Square(a) => accumulate(&mut grads[a.0], g.zip_map(val(*a), |x, y| 2.0 * x * y)),
            Op::Sum(a) => accumulate(&mut grads[a.0], Tensor::full(val(*a).shape(), g.data()[0])),
            Op::Mean(a) => {
                let t = val(*a);
                accumulate(
                    &mut grads[a.0],
                    Tensor::full(t.shape(), g.data()[0] / t.len() as f64),
                )
            }
            Op::SumPerSample(a) => {
                let t = val(*a);
                let per = t.len() / t.batch().max(1);
                let mut out = Tensor::zeros(t.shape());
                for (chunk, gv) in out.data_mut().chunks_mut(per.max(1)).zip(g.data()) {
                    chunk.fill(*gv);
                }
                accumulate(&mut grads[a.0], out);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut ga = Tensor::zeros(av.shape());
                gemm(
                    m,
                    n,
                    k,
                    g.data(),
                    false,
                    bv.data(),
                    true,
                    ga.data_mut(),
                    0.0,
                );
                let mut gb = Tensor::zeros(bv.shape());
                gemm(
                    k,
                    m,
                    n,
                    av.data(),
                    true,
                    g.data(),
                    false,
                    gb.data_mut(),
                    0.0,
                );
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (geo, n, co) = self.conv_geom(*x, *w, *stride, *pad);
                let kk = geo.ci * geo.k * geo.k;
                let p = geo.ho * geo.wo;
                let xv = val(*x).data();
                let wv = val(*w).data();
                let in_per = geo.ci * geo.h * geo.w;
                let mut gw = Tensor::zeros(val(*w).shape());
                let mut gx = Tensor::zeros(val(*x).shape());
                let mut cols = if geo.is_pointwise() {
                    Vec::new()
                } else {
                    vec![0.0; kk * p]
                };
                let mut dcols = vec![0.0; kk * p];
                for bi in 0..n {
                    let go = &g.data()[bi * co * p..(bi + 1) * co * p];
                    let xs = &xv[bi * in_per..(bi + 1) * in_per];
                    let cm: &[f64] = if geo.is_pointwise() {
                        xs
                    } else {
                        geo.im2col(xs, &mut cols);
                        &cols
                    };
                    gemm(co, p, kk, go, false, cm, true, gw.data_mut(), 1.0);
                    let gxs = &mut gx.data_mut()[bi * in_per..(bi + 1) * in_per];
                    if geo.is_pointwise() {
                        gemm(kk, co, p, wv, true, go, false, gxs, 1.0);
                    } else {
                        gemm(kk, co, p, wv, true, go, false, &mut dcols, 0.0);
                        geo.col2im(&dcols, gxs);
                    }
                }
                if let Some(b) = b {
                    let mut gb = Tensor::zeros(&[co]);
                    for (i, chunk) in g.data().chunks(p).enumerate() {
                        gb.data_mut()[i % co] += chunk.iter().sum::<f64>();
                    }
                    accumulate(&mut grads[b.0], gb);
                }
                accumulate(&mut grads[w.0], gw);
                accumulate(&mut grads[x.0], gx);
            }
            Op::MulChannel(x, s) => {
                let xv = val(*x);
                let (_, c, h, w) = xv.dims4();
                let sv = val(*s).data();
                let hw = h * w;
                let mut gx = g.clone();
                let mut gs = Tensor::zeros(&[c]);
                for (i, (gc, xc)) in gx
                    .data_mut()
                    .chunks_mut(hw)
                    .zip(xv.data().chunks(hw))
                    .enumerate()
                {
                    let ch = i % c;
                    gs.data_mut()[ch] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                    gc.iter_mut().for_each(|v| *v *= sv[ch]);
                }
                accumulate(&mut grads[x.0], gx);
                accumulate(&mut grads[s.0], gs);
            }
            Op::AddChannel(x, b) => {
                let (_, c, h, w) = val(*x).dims4();
                let mut gb = Tensor::zeros(&[c]);
                for (i, chunk) in g.data().chunks(h * w).enumerate() {
                    gb.data_mut()[i % c] += chunk.iter().sum::<f64>();
                }
                accumulate(&mut grads[x.0], g.clone());
                accumulate(&mut grads[b.0], gb);
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = val(*x).dims4();
                let len = g.shape()[1];
                let hw = h * w;
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for b in 0..n {
                    let dst = (b * c + start) * hw;
                    gx.data_mut()[dst..dst + len * hw]
                        .copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::ConcatChannels(parts) => {
                let (n, total, h, w) = g.dims4();
                let hw = h * w;
                let mut offset = 0;
                for p in parts {
                    let pc = val(*p).shape()[1];
                    let mut gp = Tensor::zeros(&[n, pc, h, w]);
                    for b in 0..n {
                        let src = (b * total + offset) * hw;
                        gp.data_mut()[b * pc * hw..(b + 1) * pc * hw]
                            .copy_from_slice(&g.data()[src..src + pc * hw]);
                    }
                    accumulate(&mut grads[p.0], gp);
                    offset += pc;
                }
            }
            Op::Squeeze2(x) => accumulate(&mut grads[x.0], unsqueeze_t(g)),
            Op::Unsqueeze2(x) => accumulate(&mut grads[x.0], squeeze_t(g)),
            Op::AvgPool2(x) => accumulate(&mut grads[x.0], upsample_t(g, 0.25)),
            Op::Upsample2(x) => accumulate(&mut grads[x.0], pool_sum2(g, 1.0)),
            Op::Reshape(x) => accumulate(
                &mut grads[x.0],
                g.clone().reshape(val(*x).shape()).expect("reshape grad"),
            ),
            Op::RepeatBatch(x) => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for chunk in g.data().chunks(xv.len()) {
                    for (a, b) in gx.data_mut().iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
        }
    }
}
