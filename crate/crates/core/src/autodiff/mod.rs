//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation in execution order, so inputs always
//! precede their consumers. [`Tape::backward`] walks the record once in reverse
//! and accumulates gradients into every node that depends on a leaf created
//! with `requires_grad`.

mod conv;
mod gradcheck;

pub use gradcheck::{check_leaves, GradCheckReport};

use conv::{
    batch_major_to_channel_major, channel_major_to_batch_major, col2im_accumulate, im2col,
    ConvGeometry,
};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied unary op: `(input, output, grad_output) -> grad_input`.
pub type CustomBackward<T> = Box<dyn Fn(&[T], &[T], &[T]) -> Vec<T>>;

enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
        cols: Vec<T>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    ConcatChannels(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Ln(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows {
        input: Var,
        start: usize,
    },
    Custom {
        input: Var,
        backward: CustomBackward<T>,
    },
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![*input, *kernel, *bias],
            Op::Dense {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::ConcatChannels(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Sigmoid(x)
            | Op::AvgPool2(x)
            | Op::GlobalAvgPool(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Ln(x)
            | Op::Clamp(x, _, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::SliceRows { input: x, .. }
            | Op::Custom { input: x, .. } => vec![*x],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Record of executed operations for one forward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e = *e + c;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last backward pass, if the node was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Input handles of the op that produced `v` (empty for leaves).
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert!(op.inputs().iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())
            .expect("elementwise map preserves shape");
        let tracked = self.tracked(&[x]);
        self.push(value, op, tracked)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), what)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, op, tracked))
    }

    /// Cross-correlation of `[N,C_in,H,W]` with `[C_out,C_in,k,k]` plus per-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (is, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if is.len() != 4 || ks.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "conv2d expects [N,C,H,W], [O,C,k,k], [O]; got {is:?}, {ks:?}, {bs:?}"
            )));
        }
        if is[1] != ks[1] {
            return Err(Error::shape(format!(
                "conv2d input has {} channels but kernel expects {}",
                is[1], ks[1]
            )));
        }
        if ks[2] != ks[3] {
            return Err(Error::shape(format!("conv2d kernel must be square, got {ks:?}")));
        }
        if bs[0] != ks[0] {
            return Err(Error::shape(format!(
                "conv2d bias has {} entries for {} output channels",
                bs[0], ks[0]
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        let geometry = ConvGeometry {
            batch: is[0],
            in_channels: is[1],
            height: is[2],
            width: is[3],
            kernel: ks[2],
            stride,
            padding,
        };
        if geometry.kernel > geometry.height + 2 * padding
            || geometry.kernel > geometry.width + 2 * padding
        {
            return Err(Error::shape(format!(
                "kernel {} exceeds padded input {}x{}",
                geometry.kernel,
                geometry.height + 2 * padding,
                geometry.width + 2 * padding
            )));
        }
        let out_channels = ks[0];
        let (ho, wo) = (geometry.out_height(), geometry.out_width());
        let cols = im2col(self.data(input), &geometry);
        let positions = geometry.positions();
        let mut out = vec![T::zero(); out_channels * positions];
        T::gemm(
            out_channels,
            geometry.patch_len(),
            positions,
            self.data(kernel),
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        let bias_data = self.data(bias);
        for (row, &b) in out.chunks_mut(positions).zip(bias_data) {
            for v in row {
                *v = *v + b;
            }
        }
        let out = channel_major_to_batch_major(&out, out_channels, geometry.batch, ho * wo);
        let value = Tensor::new(vec![geometry.batch, out_channels, ho, wo], out)?;
        let tracked = self.tracked(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
                cols,
            },
            tracked,
        ))
    }

    /// Affine map `x·Wᵀ + b` over rows of `[N,F]` with `W: [F_out,F]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if is.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "dense expects [N,F], [O,F], [O]; got {is:?}, {ws:?}, {bs:?}"
            )));
        }
        if is[1] != ws[1] {
            return Err(Error::shape(format!(
                "dense input has {} features but weight expects {}",
                is[1], ws[1]
            )));
        }
        if bs[0] != ws[0] {
            return Err(Error::shape(format!(
                "dense bias has {} entries for {} outputs",
                bs[0], ws[0]
            )));
        }
        let (n, f, o) = (is[0], is[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        T::gemm(n, f, o, self.data(input), false, self.data(weight), true, &mut out, false);
        let bias_data = self.data(bias);
        for row in out.chunks_mut(o) {
            for (v, &b) in row.iter_mut().zip(bias_data) {
                *v = *v + b;
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        let tracked = self.tracked(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            tracked,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), move |v| {
            if v > T::zero() {
                v
            } else {
                v * slope
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// 2×2 mean pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape(format!("avg_pool2 needs [N,C,H>=2,W>=2], got {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let src = self.data(x);
        let mut out = Vec::with_capacity(nc * ho * wo);
        for plane in src.chunks(h * w) {
            for oy in 0..ho {
                let r0 = &plane[2 * oy * w..];
                let r1 = &plane[(2 * oy + 1) * w..];
                for ox in 0..wo {
                    let sum = r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1];
                    out.push(sum * quarter);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::AvgPool2(x), tracked))
    }

    /// `[N,C,H,W]` → `[N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape(format!("global_avg_pool needs [N,C,H,W], got {s:?}")));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::lit(plane as f64);
        let out = self
            .data(x)
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), tracked))
    }

    /// Concatenation of `[N,Ca,H,W]` and `[N,Cb,H,W]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(format!("concat_channels: {sa:?} vs {sb:?}")));
        }
        let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let shape = vec![n, ca + cb, sa[2], sa[3]];
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&self.data(a)[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&self.data(b)[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(shape, out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::ConcatChannels(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), move |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), move |v| v + c)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), |v| v.ln())
    }

    /// Clamp to `[lo, hi]`; gradient passes only where the input lies inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), move |v| v.max(lo).min(hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().copied().sum::<T>();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let total = d.iter().copied().sum::<T>() / T::lit(d.len() as f64);
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(total), Op::Mean(x), tracked)
    }

    /// `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose needs a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Transpose(x), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] || len == 0 {
            return Err(Error::shape(format!(
                "slice_rows {start}..{} out of range for {s:?}",
                start + len
            )));
        }
        let row: usize = s[1..].iter().product();
        let data = self.data(x)[start * row..(start + len) * row].to_vec();
        let mut shape = s;
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::SliceRows { input: x, start }, tracked))
    }

    /// Elementwise op with caller-provided forward value and backward rule.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(T) -> T,
        backward: CustomBackward<T>,
    ) -> Var {
        let op = Op::Custom { input: x, backward };
        self.unary(x, op, forward)
    }

    /// Populates gradients of `loss` with respect to every tracked node.
    ///
    /// Returns the number of operations visited; each reachable op is
    /// visited exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].tracked {
            return Ok(0);
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            visited += 1;
            let contribs = self.input_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, contrib) in contribs {
                if self.nodes[v.0].tracked {
                    accumulate(&mut self.nodes[v.0].grad, contrib);
                }
            }
        }
        Ok(visited)
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let is_tracked = |v: Var| self.nodes[v.0].tracked;
        let map = |x: Var, f: &dyn Fn(usize, T) -> T| -> Vec<(Var, Vec<T>)> {
            vec![(x, g.iter().enumerate().map(|(j, &gj)| f(j, gj)).collect())]
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
                cols,
            } => {
                let out_channels = self.shape(*kernel)[0];
                let plane = geometry.out_height() * geometry.out_width();
                let positions = geometry.positions();
                let gmat = batch_major_to_channel_major(g, out_channels, geometry.batch, plane);
                let mut res = Vec::with_capacity(3);
                if is_tracked(*kernel) {
                    let mut gk = vec![T::zero(); out_channels * geometry.patch_len()];
                    T::gemm(
                        out_channels,
                        positions,
                        geometry.patch_len(),
                        &gmat,
                        false,
                        cols,
                        true,
                        &mut gk,
                        false,
                    );
                    res.push((*kernel, gk));
                }
                if is_tracked(*bias) {
                    let gb = gmat
                        .chunks(positions)
                        .map(|row| row.iter().copied().sum::<T>())
                        .collect();
                    res.push((*bias, gb));
                }
                if is_tracked(*input) {
                    let mut gcols = vec![T::zero(); geometry.patch_len() * positions];
                    T::gemm(
                        geometry.patch_len(),
                        out_channels,
                        positions,
                        self.data(*kernel),
                        true,
                        &gmat,
                        false,
                        &mut gcols,
                        false,
                    );
                    let mut gi = vec![T::zero(); self.nodes[input.0].value.len()];
                    col2im_accumulate(&gcols, geometry, &mut gi);
                    res.push((*input, gi));
                }
                res
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (n, f) = (self.shape(*input)[0], self.shape(*input)[1]);
                let o = self.shape(*weight)[0];
                let mut res = Vec::with_capacity(3);
                if is_tracked(*weight) {
                    let mut gw = vec![T::zero(); o * f];
                    T::gemm(o, n, f, g, true, self.data(*input), false, &mut gw, false);
                    res.push((*weight, gw));
                }
                if is_tracked(*bias) {
                    let mut gb = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        for (b, &v) in gb.iter_mut().zip(row) {
                            *b = *b + v;
                        }
                    }
                    res.push((*bias, gb));
                }
                if is_tracked(*input) {
                    let mut gi = vec![T::zero(); n * f];
                    T::gemm(n, o, f, g, false, self.data(*weight), false, &mut gi, false);
                    res.push((*input, gi));
                }
                res
            }
            Op::Relu(x) => {
                let xs = self.data(*x);
                map(*x, &|j, gj| if xs[j] > T::zero() { gj } else { T::zero() })
            }
            Op::LeakyRelu(x, slope) => {
                let xs = self.data(*x);
                map(*x, &|j, gj| if xs[j] > T::zero() { gj } else { gj * *slope })
            }
            Op::Sigmoid(x) => map(*x, &|j, gj| gj * out[j] * (T::one() - out[j])),
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                let mut gi = vec![T::zero(); self.nodes[x.0].value.len()];
                for (p, gp) in g.chunks(ho * wo).enumerate() {
                    let dst = &mut gi[p * h * w..(p + 1) * h * w];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let v = gp[oy * wo + ox] * quarter;
                            dst[2 * oy * w + 2 * ox] = v;
                            dst[2 * oy * w + 2 * ox + 1] = v;
                            dst[(2 * oy + 1) * w + 2 * ox] = v;
                            dst[(2 * oy + 1) * w + 2 * ox + 1] = v;
                        }
                    }
                }
                vec![(*x, gi)]
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let inv = T::one() / T::lit(plane as f64);
                let gi = g
                    .iter()
                    .flat_map(|&gj| std::iter::repeat_n(gj * inv, plane))
                    .collect();
                vec![(*x, gi)]
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let plane = sa[2] * sa[3];
                let (ca, cb) = (sa[1] * plane, sb[1] * plane);
                let mut ga = Vec::with_capacity(sa[0] * ca);
                let mut gb = Vec::with_capacity(sa[0] * cb);
                for chunk in g.chunks(ca + cb) {
                    ga.extend_from_slice(&chunk[..ca]);
                    gb.extend_from_slice(&chunk[ca..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(db).map(|(&gj, &y)| gj * y).collect()),
                    (*b, g.iter().zip(da).map(|(&gj, &x)| gj * x).collect()),
                ]
            }
            Op::Scale(x, c) => map(*x, &|_, gj| gj * *c),
            Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Ln(x) => {
                let xs = self.data(*x);
                map(*x, &|j, gj| gj / xs[j])
            }
            Op::Clamp(x, lo, hi) => {
                let xs = self.data(*x);
                map(*x, &|j, gj| {
                    if xs[j] >= *lo && xs[j] <= *hi {
                        gj
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.nodes[x.0].value.len()])],
            Op::Mean(x) => {
                let len = self.nodes[x.0].value.len();
                vec![(*x, vec![g[0] / T::lit(len as f64); len])]
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, false, self.data(*b), true, &mut ga, false);
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, self.data(*a), true, g, false, &mut gb, false);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let mut gi = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gi[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*x, gi)]
            }
            Op::SliceRows { input, start } => {
                let s = self.shape(*input);
                let row: usize = s[1..].iter().product();
                let mut gi = vec![T::zero(); s[0] * row];
                gi[start * row..start * row + g.len()].copy_from_slice(g);
                vec![(*input, gi)]
            }
            Op::Custom { input, backward } => {
                vec![(*input, backward(self.data(*input), out, g))]
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn scalar_kernel_scales_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let k = tape.param(t(vec![1, 1, 1, 1], &[2.0]));
        let b = tape.param(t(vec![1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2, 2, 5, 5], &(0..100).map(|i| i as f64 * 0.3).collect::<Vec<_>>()));
        let k = tape.param(Tensor::zeros(vec![3, 2, 3, 3]));
        let b = tape.param(t(vec![3], &[0.7, 0.7, 0.7]));
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn conv_channel_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let k = tape.param(Tensor::zeros(vec![1, 3, 3, 3]));
        let b = tape.param(Tensor::zeros(vec![1]));
        let err = tape.conv2d(x, k, b, 1, 0).unwrap_err();
        assert!(err.to_string().contains("2 channels"));
    }

    #[test]
    fn dense_hand_value() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 2], &[1.0, 2.0]));
        let w = tape.param(t(vec![1, 2], &[3.0, 4.0]));
        let b = tape.param(t(vec![1], &[5.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[16.0]);
        let bad = tape.param(Tensor::zeros(vec![1, 3]));
        assert!(tape.dense(x, bad, b).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(2.0f64) - 0.880_797_077_977_882_3).abs() < 1e-15);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(t(vec![3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.param(t(vec![3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(t(vec![2], &[1.0, 2.0]));
        let y = tape.scale(w, 2.0);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn backward_visits_each_op_once() {
        let mut tape = Tape::new();
        let w = tape.param(t(vec![2], &[1.0, 2.0]));
        let a = tape.scale(w, 2.0);
        let b = tape.mul(a, a).unwrap();
        let c = tape.add(b, a).unwrap();
        let l = tape.sum(c);
        assert_eq!(tape.backward(l).unwrap(), 4);
        // d/dw (4w² + 2w) = 8w + 2
        assert_eq!(tape.grad(w).unwrap(), &[10.0, 18.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(vec![2], &[1.0, 2.0]));
        let w = tape.param(t(vec![2], &[3.0, 4.0]));
        let m = tape.mul(c, w).unwrap();
        let l = tape.sum(m);
        tape.backward(l).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0]);
    }
}
