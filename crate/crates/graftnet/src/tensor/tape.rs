//! Reverse-mode autodiff over an append-only tape. Ops push nodes in
//! execution order (so operands always precede results); `backward` walks the
//! tape once in exact reverse order, accumulating gradients into parents.
//! Gradients of reused values add up naturally. Running `backward` twice
//! without `reset_grads` is an error by design.

use super::kernels;
use super::{numel, strides, Scalar, Tensor};
use crate::error::{GraftError, Result};

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;

/// Handle to a tensor on a tape. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Ln(Var),
    Clamp(Var, F, F),
    MatMul(Var, Var),
    Bmm(Var, Var),
    SoftmaxRows(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, invstd: Vec<F>, training: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, invstd: Vec<F> },
    BilinearResize(Var),
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Result of a batch-norm op: the output plus, in training mode, the updated
/// running statistics the caller should store back into its buffers.
pub struct BnOut<F: Scalar> {
    pub out: Var,
    pub updated: Option<(Vec<F>, Vec<F>)>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. `requires_grad` marks it as a gradient
    /// target; everything computed from it inherits the flag.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        v
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated for `v`, if it required one and `backward` ran.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape().to_vec(),
            data: g.clone(),
        })
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, name: &str, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(GraftError::NonFinite { op: name.to_string() });
        }
        let v = Var(self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(v)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise binary ops ------------------------------------------

    fn broadcast_shape(&self, op: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != sb.len() {
            return Err(GraftError::shape(op, format!("rank mismatch {sa:?} vs {sb:?}")));
        }
        let mut out = Vec::with_capacity(sa.len());
        for (&da, &db) in sa.iter().zip(sb) {
            if da == db || da == 1 || db == 1 {
                out.push(da.max(db));
            } else {
                return Err(GraftError::shape(op, format!("incompatible {sa:?} vs {sb:?}")));
            }
        }
        Ok(out)
    }

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let out_shape = self.broadcast_shape(name, a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(numel(&out_shape));
            for_each_broadcast(&out_shape, ta.shape(), tb.shape(), |ai, bi| {
                out.push(f(ta.data()[ai], tb.data()[bi]));
            });
            out
        };
        let req = self.requires(a) || self.requires(b);
        self.push(name, Tensor { shape: out_shape, data }, op, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- elementwise unary ops -------------------------------------------

    fn unary(&mut self, name: &str, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let value = self.value(a).map(f);
        let req = self.requires(a);
        self.push(name, value, op, req)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = F::from_f64(c);
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = F::from_f64(c);
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu(a))
    }

    /// Numerically stable logistic: never exponentiates a positive argument.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            a,
            |x| {
                if x >= F::zero() {
                    F::one() / (F::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (F::one() + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn abs_op(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |x| x.abs(), Op::Abs(a))
    }

    /// Natural log. Non-positive inputs produce a NonFinite error; callers
    /// clamp into a safe interval first (see the BCE pieces in `losses`).
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, |x| x.ln(), Op::Ln(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(GraftError::domain("clamp", format!("lo {lo} > hi {hi}")));
        }
        let (flo, fhi) = (F::from_f64(lo), F::from_f64(hi));
        self.unary(
            "clamp",
            a,
            |x| {
                if x < flo {
                    flo
                } else if x > fhi {
                    fhi
                } else {
                    x
                }
            },
            Op::Clamp(a, flo, fhi),
        )
    }

    /// 1 - x, a common subexpression in the losses.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    // ---- contractions ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraftError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let req = self.requires(a) || self.requires(b);
        self.push("matmul", Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), req)
    }

    /// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(GraftError::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); bt * m * n];
        for i in 0..bt {
            kernels::matmul(
                &self.value(a).data()[i * m * k..][..m * k],
                &self.value(b).data()[i * k * n..][..k * n],
                m,
                k,
                n,
                &mut out[i * m * n..][..m * n],
            );
        }
        let req = self.requires(a) || self.requires(b);
        self.push("bmm", Tensor { shape: vec![bt, m, n], data: out }, Op::Bmm(a, b), req)
    }

    /// Row-wise softmax of a rank-2 tensor, with max subtraction so huge
    /// logits cannot overflow.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(GraftError::shape("softmax_rows", format!("want rank 2, got {sa:?}")));
        }
        let (r, c) = (sa[0], sa[1]);
        let x = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = F::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *o = e;
                sum = sum + e;
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        let req = self.requires(a);
        self.push("softmax_rows", Tensor { shape: vec![r, c], data: out }, Op::SoftmaxRows(a), req)
    }

    // ---- structured ops ----------------------------------------------------

    /// Cross-correlation conv with square odd kernel and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(GraftError::shape("conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        if sw[2] != sw[3] {
            return Err(GraftError::dim("conv2d", format!("kernel not square: {sw:?}")));
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(GraftError::dim("conv2d", format!("kernel size {k} must be odd")));
        }
        if sw[1] != sx[1] {
            return Err(GraftError::shape(
                "conv2d",
                format!("input channels {} != kernel channels {}", sx[1], sw[1]),
            ));
        }
        if stride == 0 {
            return Err(GraftError::dim("conv2d", "stride must be >= 1"));
        }
        let (nb, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let co = sw[0];
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(GraftError::dim(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{wd} (pad {pad})"),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![F::zero(); nb * co * oh * ow];
        kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            nb,
            ci,
            h,
            wd,
            co,
            k,
            stride,
            pad,
            oh,
            ow,
            &mut out,
        );
        let req = self.requires(x) || self.requires(w);
        self.push(
            "conv2d",
            Tensor { shape: vec![nb, co, oh, ow], data: out },
            Op::Conv2d { x, w, stride, pad },
            req,
        )
    }

    /// Batch norm over NCHW. Training mode normalizes with batch statistics
    /// and returns updated running stats; eval mode reads the provided
    /// running stats. Batches with fewer than two values per channel are
    /// rejected in training mode.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        training: bool,
        momentum: f64,
    ) -> Result<BnOut<F>> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(GraftError::shape("batch_norm2d", format!("want NCHW, got {sx:?}")));
        }
        let (nb, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(GraftError::shape(
                "batch_norm2d",
                format!("gamma/beta must be [{c}]"),
            ));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(GraftError::shape(
                "batch_norm2d",
                format!("running stats must have {c} channels"),
            ));
        }
        let cnt = nb * h * w;
        let (mean, var): (Vec<F>, Vec<F>) = if training {
            if cnt < 2 {
                return Err(GraftError::DegenerateBatch {
                    op: "batch_norm2d".to_string(),
                    detail: format!("{cnt} value(s) per channel; need at least 2"),
                });
            }
            let xd = self.value(x).data();
            let mut mean = vec![F::zero(); c];
            let mut var = vec![F::zero(); c];
            for ch in 0..c {
                let mut s = F::zero();
                for n in 0..nb {
                    let plane = &xd[(n * c + ch) * h * w..][..h * w];
                    for &v in plane {
                        s = s + v;
                    }
                }
                let m = s / F::from_f64(cnt as f64);
                let mut sq = F::zero();
                for n in 0..nb {
                    let plane = &xd[(n * c + ch) * h * w..][..h * w];
                    for &v in plane {
                        let d = v - m;
                        sq = sq + d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = sq / F::from_f64(cnt as f64);
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let invstd: Vec<F> =
            var.iter().map(|&v| F::one() / (v + F::from_f64(BN_EPS)).sqrt()).collect();

        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![F::zero(); xd.len()];
        for n in 0..nb {
            for ch in 0..c {
                let base = (n * c + ch) * h * w;
                let (m, is, ga, be) = (mean[ch], invstd[ch], gd[ch], bd[ch]);
                for i in 0..h * w {
                    out[base + i] = (xd[base + i] - m) * is * ga + be;
                }
            }
        }
        let updated = if training {
            let mom = F::from_f64(momentum);
            let keep = F::one() - mom;
            let new_mean: Vec<F> =
                running_mean.iter().zip(&mean).map(|(&r, &b)| keep * r + mom * b).collect();
            let new_var: Vec<F> =
                running_var.iter().zip(&var).map(|(&r, &b)| keep * r + mom * b).collect();
            Some((new_mean, new_var))
        } else {
            None
        };
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let out = self.push(
            "batch_norm2d",
            Tensor { shape: sx, data: out },
            Op::BatchNorm { x, gamma, beta, mean, invstd, training },
            req,
        )?;
        Ok(BnOut { out, updated })
    }

    /// Layer norm over the last axis; gamma/beta have that axis's length.
    /// Zero variance is handled by the epsilon.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() {
            return Err(GraftError::shape("layer_norm", "rank must be >= 1"));
        }
        let c = *sx.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(GraftError::shape("layer_norm", format!("gamma/beta must be [{c}]")));
        }
        let positions = numel(&sx) / c;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut mean = vec![F::zero(); positions];
        let mut invstd = vec![F::zero(); positions];
        let mut out = vec![F::zero(); xd.len()];
        let fc = F::from_f64(c as f64);
        for p in 0..positions {
            let row = &xd[p * c..(p + 1) * c];
            let mut s = F::zero();
            for &v in row {
                s = s + v;
            }
            let m = s / fc;
            let mut sq = F::zero();
            for &v in row {
                let d = v - m;
                sq = sq + d * d;
            }
            let is = F::one() / (sq / fc + F::from_f64(LN_EPS)).sqrt();
            mean[p] = m;
            invstd[p] = is;
            let orow = &mut out[p * c..(p + 1) * c];
            for (i, o) in orow.iter_mut().enumerate() {
                *o = (row[i] - m) * is * gd[i] + bd[i];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            "layer_norm",
            Tensor { shape: sx, data: out },
            Op::LayerNorm { x, gamma, beta, mean, invstd },
            req,
        )
    }

    /// Bilinear resize of NCHW to a new H x W (half-pixel convention).
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(GraftError::shape("bilinear_resize", format!("want NCHW, got {sx:?}")));
        }
        if oh == 0 || ow == 0 {
            return Err(GraftError::dim("bilinear_resize", "output dims must be positive"));
        }
        let (nb, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let out = kernels::bilinear_resize_nchw(self.value(x).data(), nb, c, h, w, oh, ow);
        let req = self.requires(x);
        self.push(
            "bilinear_resize",
            Tensor { shape: vec![nb, c, oh, ow], data: out },
            Op::BilinearResize(x),
            req,
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len() || axes.iter().any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(GraftError::dim(
                "permute",
                format!("axes {axes:?} is not a permutation of 0..{}", sx.len()),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let data = permute_data(self.value(x).data(), &sx, axes);
        let req = self.requires(x);
        self.push(
            "permute",
            Tensor { shape: out_shape, data },
            Op::Permute { x, axes: axes.to_vec() },
            req,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let req = self.requires(x);
        self.push("reshape", value, Op::Reshape(x), req)
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(GraftError::shape("transpose", "rank must be >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// NCHW -> [N, H*W, C] token layout, positions ordered row-major by (h, w).
    pub fn flatten_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(GraftError::shape("flatten_spatial", format!("want NCHW, got {s:?}")));
        }
        let p = self.permute(x, &[0, 2, 3, 1])?;
        self.reshape(p, &[s[0], s[2] * s[3], s[1]])
    }

    /// [N, H*W, C] tokens -> NCHW.
    pub fn unflatten_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(GraftError::shape(
                "unflatten_spatial",
                format!("tokens {s:?} do not cover {h}x{w}"),
            ));
        }
        let r = self.reshape(x, &[s[0], h, w, s[2]])?;
        self.permute(r, &[0, 3, 1, 2])
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut s = F::zero();
        for &v in self.value(a).data() {
            s = s + v;
        }
        let req = self.requires(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), req)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let mut s = F::zero();
        for &v in self.value(a).data() {
            s = s + v;
        }
        let req = self.requires(a);
        self.push("mean", Tensor::scalar(s / F::from_f64(n as f64)), Op::Mean(a), req)
    }

    /// Sum over all axes except the first: [N, ...] -> [N].
    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(GraftError::shape("sum_per_sample", "rank must be >= 1"));
        }
        let n = s[0];
        let per = numel(&s) / n;
        let d = self.value(a).data();
        let mut out = vec![F::zero(); n];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = F::zero();
            for &v in &d[i * per..(i + 1) * per] {
                acc = acc + v;
            }
            *o = acc;
        }
        let req = self.requires(a);
        self.push("sum_per_sample", Tensor { shape: vec![n], data: out }, Op::SumPerSample(a), req)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar loss. Visits nodes in exact reverse
    /// execution order; every reuse of a value accumulates into one gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(GraftError::Autodiff("backward on an empty tape".into()));
        }
        if self.backward_done {
            return Err(GraftError::Autodiff(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(GraftError::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            // Nothing on the tape wants gradients; trivially done.
            return Ok(());
        }
        for i in 0..=loss.0 {
            if self.nodes[i].requires_grad && self.nodes[i].grad.is_none() {
                self.nodes[i].grad = Some(vec![F::zero(); self.nodes[i].value.numel()]);
            }
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = g[0] + F::one();
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.clone() else { continue };
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &g, &op);
        }
        Ok(())
    }

    /// Zeroes accumulated gradients and re-arms `backward`.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = F::zero());
            }
        }
        self.backward_done = false;
    }

    fn add_grad(&mut self, v: Var, contrib: &[F]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = self.nodes[v.0]
            .grad
            .get_or_insert_with(|| vec![F::zero(); contrib.len()]);
        for (gi, &c) in g.iter_mut().zip(contrib) {
            *gi = *gi + c;
        }
    }

    fn binary_backward(
        &mut self,
        node: usize,
        g: &[F],
        a: Var,
        b: Var,
        da: impl Fn(F, F) -> F,
        db: impl Fn(F, F) -> F,
    ) {
        let out_shape = self.nodes[node].value.shape().to_vec();
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let need_a = self.requires(a);
        let need_b = self.requires(b);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut ca = if need_a { vec![F::zero(); ad.len()] } else { Vec::new() };
        let mut cb = if need_b { vec![F::zero(); bd.len()] } else { Vec::new() };
        let mut flat = 0usize;
        for_each_broadcast(&out_shape, &sa, &sb, |ai, bi| {
            let gv = g[flat];
            if need_a {
                ca[ai] = ca[ai] + gv * da(ad[ai], bd[bi]);
            }
            if need_b {
                cb[bi] = cb[bi] + gv * db(ad[ai], bd[bi]);
            }
            flat += 1;
        });
        if need_a {
            self.add_grad(a, &ca);
        }
        if need_b {
            self.add_grad(b, &cb);
        }
    }

    fn unary_backward(&mut self, g: &[F], a: Var, df: impl Fn(F, F) -> F, use_out: Option<&[F]>) {
        if !self.requires(a) {
            return;
        }
        let contrib: Vec<F> = match use_out {
            Some(out) => g.iter().zip(out).map(|(&gv, &y)| gv * df(y, y)).collect(),
            None => {
                let xd = self.value(a).data();
                g.iter().zip(xd).map(|(&gv, &x)| gv * df(x, x)).collect()
            }
        };
        self.add_grad(a, &contrib);
    }

    fn backprop_node(&mut self, i: usize, g: &[F], op: &Op<F>) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.binary_backward(i, g, *a, *b, |_, _| F::one(), |_, _| F::one())
            }
            Op::Sub(a, b) => {
                self.binary_backward(i, g, *a, *b, |_, _| F::one(), |_, _| -F::one())
            }
            Op::Mul(a, b) => self.binary_backward(i, g, *a, *b, |_, y| y, |x, _| x),
            Op::Div(a, b) => self.binary_backward(
                i,
                g,
                *a,
                *b,
                |_, y| F::one() / y,
                |x, y| -x / (y * y),
            ),
            Op::Scale(a, c) => {
                let c = *c;
                self.unary_backward(g, *a, move |_, _| c, None);
            }
            Op::AddScalar(a) => self.unary_backward(g, *a, |_, _| F::one(), None),
            Op::Relu(a) => self.unary_backward(
                g,
                *a,
                |x, _| if x > F::zero() { F::one() } else { F::zero() },
                None,
            ),
            Op::Sigmoid(a) => {
                let out = self.nodes[i].value.data().to_vec();
                self.unary_backward(g, *a, |y, _| y * (F::one() - y), Some(&out));
            }
            Op::Abs(a) => self.unary_backward(
                g,
                *a,
                |x, _| {
                    if x > F::zero() {
                        F::one()
                    } else if x < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    }
                },
                None,
            ),
            Op::Ln(a) => self.unary_backward(g, *a, |x, _| F::one() / x, None),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                // Boundary values count as interior: gradient passes through.
                self.unary_backward(
                    g,
                    *a,
                    move |x, _| if x >= lo && x <= hi { F::one() } else { F::zero() },
                    None,
                );
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires(*a) {
                    let mut da = vec![F::zero(); m * k];
                    kernels::matmul_nt(g, self.value(*b).data(), m, n, k, &mut da);
                    self.add_grad(*a, &da);
                }
                if self.requires(*b) {
                    let mut db = vec![F::zero(); k * n];
                    kernels::matmul_tn(self.value(*a).data(), g, k, m, n, &mut db);
                    self.add_grad(*b, &db);
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.requires(*a) {
                    let mut da = vec![F::zero(); bt * m * k];
                    for t in 0..bt {
                        kernels::matmul_nt(
                            &g[t * m * n..][..m * n],
                            &self.value(*b).data()[t * k * n..][..k * n],
                            m,
                            n,
                            k,
                            &mut da[t * m * k..][..m * k],
                        );
                    }
                    self.add_grad(*a, &da);
                }
                if self.requires(*b) {
                    let mut db = vec![F::zero(); bt * k * n];
                    for t in 0..bt {
                        kernels::matmul_tn(
                            &self.value(*a).data()[t * m * k..][..m * k],
                            &g[t * m * n..][..m * n],
                            k,
                            m,
                            n,
                            &mut db[t * k * n..][..k * n],
                        );
                    }
                    self.add_grad(*b, &db);
                }
            }
            Op::SoftmaxRows(a) => {
                if !self.requires(*a) {
                    return;
                }
                let y = self.nodes[i].value.data();
                let s = self.nodes[i].value.shape();
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![F::zero(); r * c];
                for row in 0..r {
                    let yr = &y[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let mut dot = F::zero();
                    for (yv, gv) in yr.iter().zip(gr) {
                        dot = dot + *yv * *gv;
                    }
                    let dr = &mut dx[row * c..(row + 1) * c];
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = *yv * (*gv - dot);
                    }
                }
                self.add_grad(*a, &dx);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let so = self.nodes[i].value.shape().to_vec();
                let (nb, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, k) = (sw[0], sw[2]);
                let (oh, ow) = (so[2], so[3]);
                let need_x = self.requires(*x);
                let need_w = self.requires(*w);
                let mut dx = if need_x { vec![F::zero(); nb * ci * h * wd] } else { Vec::new() };
                let mut dw = if need_w { vec![F::zero(); co * ci * k * k] } else { Vec::new() };
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    nb,
                    ci,
                    h,
                    wd,
                    co,
                    k,
                    *stride,
                    *pad,
                    oh,
                    ow,
                    need_x.then_some(dx.as_mut_slice()),
                    need_w.then_some(dw.as_mut_slice()),
                );
                if need_x {
                    self.add_grad(*x, &dx);
                }
                if need_w {
                    self.add_grad(*w, &dw);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, invstd, training } => {
                let sx = self.shape(*x).to_vec();
                let (nb, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let cnt = (nb * h * w) as f64;
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let need_x = self.requires(*x);
                let need_g = self.requires(*gamma);
                let need_b = self.requires(*beta);
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let mut dx = if need_x { vec![F::zero(); xd.len()] } else { Vec::new() };
                for ch in 0..c {
                    let (m, is) = (mean[ch], invstd[ch]);
                    let mut s1 = F::zero(); // sum of g
                    let mut s2 = F::zero(); // sum of g * xhat
                    for n in 0..nb {
                        let base = (n * c + ch) * h * w;
                        for idx in 0..h * w {
                            let gv = g[base + idx];
                            let xh = (xd[base + idx] - m) * is;
                            s1 = s1 + gv;
                            s2 = s2 + gv * xh;
                        }
                    }
                    dbeta[ch] = s1;
                    dgamma[ch] = s2;
                    if need_x {
                        let ga = gd[ch];
                        let inv_cnt = F::from_f64(1.0 / cnt);
                        for n in 0..nb {
                            let base = (n * c + ch) * h * w;
                            for idx in 0..h * w {
                                let gv = g[base + idx];
                                let xh = (xd[base + idx] - m) * is;
                                dx[base + idx] = if *training {
                                    ga * is * (gv - s1 * inv_cnt - xh * (s2 * inv_cnt))
                                } else {
                                    ga * is * gv
                                };
                            }
                        }
                    }
                }
                if need_x {
                    self.add_grad(*x, &dx);
                }
                if need_g {
                    self.add_grad(*gamma, &dgamma);
                }
                if need_b {
                    self.add_grad(*beta, &dbeta);
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, invstd } => {
                let sx = self.shape(*x).to_vec();
                let c = *sx.last().unwrap();
                let positions = numel(&sx) / c;
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let need_x = self.requires(*x);
                let need_g = self.requires(*gamma);
                let need_b = self.requires(*beta);
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let mut dx = if need_x { vec![F::zero(); xd.len()] } else { Vec::new() };
                let fc = F::from_f64(c as f64);
                for p in 0..positions {
                    let (m, is) = (mean[p], invstd[p]);
                    let row = &xd[p * c..(p + 1) * c];
                    let gr = &g[p * c..(p + 1) * c];
                    let mut sdy = F::zero();
                    let mut sdyxh = F::zero();
                    for j in 0..c {
                        let xh = (row[j] - m) * is;
                        let dy = gr[j] * gd[j];
                        sdy = sdy + dy;
                        sdyxh = sdyxh + dy * xh;
                        dgamma[j] = dgamma[j] + gr[j] * xh;
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    if need_x {
                        let mdy = sdy / fc;
                        let mdyxh = sdyxh / fc;
                        let drow = &mut dx[p * c..(p + 1) * c];
                        for j in 0..c {
                            let xh = (row[j] - m) * is;
                            let dy = gr[j] * gd[j];
                            drow[j] = is * (dy - mdy - xh * mdyxh);
                        }
                    }
                }
                if need_x {
                    self.add_grad(*x, &dx);
                }
                if need_g {
                    self.add_grad(*gamma, &dgamma);
                }
                if need_b {
                    self.add_grad(*beta, &dbeta);
                }
            }
            Op::BilinearResize(x) => {
                if !self.requires(*x) {
                    return;
                }
                let sx = self.shape(*x).to_vec();
                let so = self.nodes[i].value.shape().to_vec();
                let mut dx = vec![F::zero(); numel(&sx)];
                kernels::bilinear_resize_backward_nchw(
                    g, sx[0], sx[1], sx[2], sx[3], so[2], so[3], &mut dx,
                );
                self.add_grad(*x, &dx);
            }
            Op::Permute { x, axes } => {
                if !self.requires(*x) {
                    return;
                }
                let out_shape = self.nodes[i].value.shape().to_vec();
                let mut inverse = vec![0usize; axes.len()];
                for (j, &a) in axes.iter().enumerate() {
                    inverse[a] = j;
                }
                let dx = permute_data(g, &out_shape, &inverse);
                self.add_grad(*x, &dx);
            }
            Op::Reshape(x) => {
                if self.requires(*x) {
                    self.add_grad(*x, g);
                }
            }
            Op::Sum(a) => {
                if !self.requires(*a) {
                    return;
                }
                let n = self.value(*a).numel();
                self.add_grad(*a, &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                if !self.requires(*a) {
                    return;
                }
                let n = self.value(*a).numel();
                let gv = g[0] / F::from_f64(n as f64);
                self.add_grad(*a, &vec![gv; n]);
            }
            Op::SumPerSample(a) => {
                if !self.requires(*a) {
                    return;
                }
                let s = self.shape(*a).to_vec();
                let n = s[0];
                let per = numel(&s) / n;
                let mut dx = vec![F::zero(); n * per];
                for si in 0..n {
                    for j in 0..per {
                        dx[si * per + j] = g[si];
                    }
                }
                self.add_grad(*a, &dx);
            }
        }
    }
}

/// Calls `f(a_flat, b_flat)` for every output position of a broadcast binary
/// op, in row-major output order.
fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let rank = out_shape.len();
    let out_strides = strides(out_shape);
    let a_str = strides(a_shape);
    let b_str = strides(b_shape);
    // stride 0 on broadcast (size-1) axes
    let a_bs: Vec<usize> =
        (0..rank).map(|i| if a_shape[i] == 1 { 0 } else { a_str[i] }).collect();
    let b_bs: Vec<usize> =
        (0..rank).map(|i| if b_shape[i] == 1 { 0 } else { b_str[i] }).collect();
    let total = numel(out_shape);
    for flat in 0..total {
        let mut rem = flat;
        let mut ai = 0usize;
        let mut bi = 0usize;
        for d in 0..rank {
            let idx = rem / out_strides[d];
            rem %= out_strides[d];
            ai += idx * a_bs[d];
            bi += idx * b_bs[d];
        }
        f(ai, bi);
    }
}

/// Raw permute of row-major data. `axes[i]` names the source axis that
/// becomes output axis `i`.
fn permute_data<F: Scalar>(data: &[F], in_shape: &[usize], axes: &[usize]) -> Vec<F> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_str = strides(in_shape);
    let out_str = strides(&out_shape);
    let mut out = vec![data[0]; data.len()];
    let total = data.len();
    for flat in 0..total {
        let mut rem = flat;
        let mut src = 0usize;
        for d in 0..rank {
            let idx = rem / out_str[d];
            rem %= out_str[d];
            src += idx * in_str[axes[d]];
        }
        out[flat] = data[src];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_add_row_vector() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let b = tape.leaf(t64(&[1, 3], &[10.0, 20.0, 30.0]), false);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn broadcast_rejects_rank_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2, 3], &[0.0; 6]), false);
        let b = tape.leaf(t64(&[3], &[0.0; 3]), false);
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn broadcast_grads_reduce_over_expanded_axes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2, 3], &[1.0; 6]), true);
        let b = tape.leaf(t64(&[1, 3], &[2.0, 3.0, 4.0]), true);
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        // each b element sees both rows of a
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sigmoid_basics_and_saturation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[0.0, 1000.0, -1000.0]), false);
        let y = tape.sigmoid(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.5);
        assert_eq!(d[1], 1.0);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_huge_logits() {
        let mut rng = SplitMix64::new(2);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::rand_uniform(&[5, 7], -3.0, 3.0, &mut rng), false);
        let y = tape.softmax_rows(x).unwrap();
        for r in 0..5 {
            let s: f64 = tape.value(y).data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let big = tape.leaf(t64(&[1, 2], &[1000.0, 1000.0]), false);
        let yb = tape.softmax_rows(big).unwrap();
        assert_eq!(tape.value(yb).data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv_identity_and_box_sum() {
        // 1x1 kernel of weight 1 is the identity
        let mut tape = Tape::<f64>::new();
        let mut rng = SplitMix64::new(8);
        let img = Tensor::rand_uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let x = tape.leaf(img.clone(), false);
        let w = tape.leaf(t64(&[1, 1, 1, 1], &[1.0]), false);
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), img.data());

        // all-ones 3x3 kernel over an all-ones 3x3 image, pad 1: center sums 9
        let xo = tape.leaf(Tensor::ones(&[1, 1, 3, 3]), false);
        let wo = tape.leaf(Tensor::ones(&[1, 1, 3, 3]), false);
        let yo = tape.conv2d(xo, wo, 1, 1).unwrap();
        let d = tape.value(yo).data();
        assert_eq!(d[4], 9.0); // center
        assert_eq!(d[0], 4.0); // corner
        assert_eq!(d[1], 6.0); // edge
    }

    #[test]
    fn conv_rejects_kernel_larger_than_padded_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 2, 2]), false);
        let w = tape.leaf(Tensor::ones(&[1, 1, 5, 5]), false);
        assert!(matches!(tape.conv2d(x, w, 1, 1), Err(GraftError::Dimension { .. })));
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 4, 4]), false);
        let w = tape.leaf(Tensor::ones(&[1, 1, 2, 2]), false);
        assert!(tape.conv2d(x, w, 1, 0).is_err());
    }

    #[test]
    fn batch_norm_constant_channel_returns_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2, 1, 2, 2], 7.0), false);
        let gamma = tape.leaf(Tensor::ones(&[1]), false);
        let beta = tape.leaf(t64(&[1], &[0.25]), false);
        let bn = tape
            .batch_norm2d(x, gamma, beta, &[0.0], &[1.0], true, 0.1)
            .unwrap();
        for &v in tape.value(bn.out).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let (rm, rv) = bn.updated.unwrap();
        assert!((rm[0] - 0.7).abs() < 1e-12); // 0.9*0 + 0.1*7
        assert!((rv[0] - 0.9).abs() < 1e-12); // 0.9*1 + 0.1*0
    }

    #[test]
    fn batch_norm_normalizes_batch_stats() {
        let mut rng = SplitMix64::new(13);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::rand_uniform(&[4, 3, 5, 5], -2.0, 2.0, &mut rng), false);
        let gamma = tape.leaf(Tensor::ones(&[3]), false);
        let beta = tape.leaf(Tensor::zeros(&[3]), false);
        let bn = tape
            .batch_norm2d(x, gamma, beta, &[0.0; 3], &[1.0; 3], true, 0.1)
            .unwrap();
        let d = tape.value(bn.out).data();
        let cnt = 4 * 5 * 5;
        for ch in 0..3 {
            let mut s = 0.0;
            let mut sq = 0.0;
            for n in 0..4 {
                for i in 0..25 {
                    let v = d[(n * 3 + ch) * 25 + i];
                    s += v;
                    sq += v * v;
                }
            }
            let mean = s / cnt as f64;
            let var = sq / cnt as f64 - mean * mean;
            assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn batch_norm_degenerate_batch_is_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 2, 1, 1]), false);
        let gamma = tape.leaf(Tensor::ones(&[2]), false);
        let beta = tape.leaf(Tensor::zeros(&[2]), false);
        let r = tape.batch_norm2d(x, gamma, beta, &[0.0; 2], &[1.0; 2], true, 0.1);
        assert!(matches!(r, Err(GraftError::DegenerateBatch { .. })));
        // eval mode is fine with a single value
        let r2 = tape.batch_norm2d(x, gamma, beta, &[0.0; 2], &[1.0; 2], false, 0.1);
        assert!(r2.is_ok());
        assert!(r2.unwrap().updated.is_none());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        // constant input -> zeros (gamma 1, beta 0)
        let x = tape.leaf(Tensor::full(&[2, 4], 3.0), false);
        let g1 = tape.leaf(Tensor::ones(&[4]), false);
        let b0 = tape.leaf(Tensor::zeros(&[4]), false);
        let y = tape.layer_norm(x, g1, b0).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
        // x = [1, 3] -> approx [-1, 1] up to the epsilon effect
        let x2 = tape.leaf(t64(&[1, 2], &[1.0, 3.0]), false);
        let g2 = tape.leaf(Tensor::ones(&[2]), false);
        let b2 = tape.leaf(Tensor::zeros(&[2]), false);
        let y2 = tape.layer_norm(x2, g2, b2).unwrap();
        let d = tape.value(y2).data();
        assert!((d[0] + 1.0).abs() < 1e-4);
        assert!((d[1] - 1.0).abs() < 1e-4);
        // gamma = 0 -> output equals beta
        let g3 = tape.leaf(Tensor::zeros(&[2]), false);
        let b3 = tape.leaf(t64(&[2], &[5.0, -5.0]), false);
        let y3 = tape.layer_norm(x2, g3, b3).unwrap();
        assert_eq!(tape.value(y3).data(), &[5.0, -5.0]);
    }

    #[test]
    fn resize_identity_is_bit_exact_through_tape() {
        let mut rng = SplitMix64::new(77);
        let mut tape = Tape::<f32>::new();
        let img = Tensor::<f32>::rand_uniform(&[2, 3, 6, 5], -2.0, 2.0, &mut rng);
        let x = tape.leaf(img.clone(), false);
        let y = tape.bilinear_resize(x, 6, 5).unwrap();
        assert_eq!(tape.value(y).data(), img.data());
    }

    #[test]
    fn flatten_spatial_orders_positions_row_major() {
        let mut tape = Tape::<f64>::new();
        // single sample, single channel, 2x2 pixel values a,b,c,d
        let x = tape.leaf(t64(&[1, 1, 2, 2], &[10.0, 11.0, 12.0, 13.0]), false);
        let f = tape.flatten_spatial(x).unwrap();
        assert_eq!(tape.shape(f), &[1, 4, 1]);
        assert_eq!(tape.value(f).data(), &[10.0, 11.0, 12.0, 13.0]);
        // and back
        let u = tape.unflatten_spatial(f, 2, 2).unwrap();
        assert_eq!(tape.shape(u), &[1, 1, 2, 2]);
        assert_eq!(tape.value(u).data(), &[10.0, 11.0, 12.0, 13.0]);
    }

    #[test]
    fn permute_reshape_round_trip_bit_exact() {
        let mut rng = SplitMix64::new(3);
        let mut tape = Tape::<f32>::new();
        let t = Tensor::<f32>::rand_uniform(&[2, 3, 4], -2.0, 2.0, &mut rng);
        let x = tape.leaf(t.clone(), false);
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), t.data());
        let r = tape.reshape(x, &[4, 6]).unwrap();
        let rback = tape.reshape(r, &[2, 3, 4]).unwrap();
        assert_eq!(tape.value(rback).data(), t.data());
    }

    #[test]
    fn sum_backward_is_ones_and_quadratic_grad_is_2x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4], &[1.0, -2.0, 3.0, 0.5]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);

        let mut tape2 = Tape::<f64>::new();
        let x2 = tape2.leaf(t64(&[4], &[1.0, -2.0, 3.0, 0.5]), true);
        let sq = tape2.mul(x2, x2).unwrap(); // parents alias: grads must add
        let s2 = tape2.sum(sq).unwrap();
        tape2.backward(s2).unwrap();
        assert_eq!(tape2.grad(x2).unwrap().data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn value_reuse_accumulates_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]), true);
        let s1 = tape.sum(x).unwrap();
        let s2 = tape.sum(x).unwrap();
        let both = tape.add(s1, s2).unwrap();
        tape.backward(both).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(GraftError::Autodiff(_))));
    }

    #[test]
    fn double_backward_without_reset_is_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(GraftError::Autodiff(_))));
        tape.reset_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_on_empty_tape_is_error() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(Var(0)), Err(GraftError::Autodiff(_))));
    }

    #[test]
    fn non_finite_results_error_instead_of_propagating() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1], &[-1.0]), false);
        assert!(matches!(tape.ln(x), Err(GraftError::NonFinite { .. })));
        let zero = tape.leaf(t64(&[1], &[0.0]), false);
        assert!(matches!(tape.div(zero, zero), Err(GraftError::NonFinite { .. })));
    }

    #[test]
    fn clamp_boundary_counts_as_interior() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4], &[-0.5, 0.0, 1.0, 1.5]), true);
        let c = tape.clamp(x, 0.0, 1.0).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn abs_gradient_is_zero_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[-2.0, 0.0, 2.0]), true);
        let a = tape.abs_op(x).unwrap();
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_gradients_match_hand_formula() {
        let mut rng = SplitMix64::new(21);
        let mut tape = Tape::<f64>::new();
        let a_t = Tensor::<f64>::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b_t = Tensor::<f64>::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let a = tape.leaf(a_t.clone(), true);
        let b = tape.leaf(b_t.clone(), true);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        // d/dA sum(AB) = ones . B^T ; d/dB = A^T . ones
        let ga = tape.grad(a).unwrap();
        let gb = tape.grad(b).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let expect: f64 = (0..2).map(|n| b_t.at(&[j, n])).sum();
                assert!((ga.at(&[i, j]) - expect).abs() < 1e-12);
            }
        }
        for i in 0..4 {
            for j in 0..2 {
                let expect: f64 = (0..3).map(|m| a_t.at(&[m, i])).sum();
                assert!((gb.at(&[i, j]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_and_sum_per_sample() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.value(m).data(), &[3.5]);
        let ps = tape.sum_per_sample(x).unwrap();
        assert_eq!(tape.value(ps).data(), &[6.0, 15.0]);
        let total = tape.sum(ps).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }
}
