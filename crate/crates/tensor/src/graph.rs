use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom, Tap};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this crate. Receives the
/// forward inputs, the forward output, and the output gradient; returns one
/// optional gradient per input (`None` for inputs with no dependence).
pub trait CustomBackward<T: Real> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

impl<T, F> CustomBackward<T> for F
where
    T: Real,
    F: Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>,
{
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        self(inputs, output, grad_output)
    }
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    TransposedConv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        offset: (isize, isize),
    },
    Bilinear {
        input: Var,
        rows: Vec<Tap>,
        cols: Vec<Tap>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        mul: T,
    },
    Scale {
        input: Var,
        scalar: Var,
    },
    Concat(Vec<Var>),
    SliceChannels {
        input: Var,
        start: usize,
    },
    AvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Rot90 {
        input: Var,
        quarter_turns: usize,
    },
    Custom {
        inputs: Vec<Var>,
        backward: Box<dyn CustomBackward<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct Binding {
    pub set_id: u64,
    pub index: usize,
    pub var: Var,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// reverse index order is a valid topological order for backpropagation.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    pub(crate) bindings: Vec<Binding>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite<T: Real>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let value = finite(op_name, value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    /// 2-D convolution of an NCHW input with an `[O, C, kh, kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(TensorError::invalid(OP, "stride must be >= 1"));
        }
        let (b, c, h, w) = self.value(input).dims4()?;
        let (o, kc, kh, kw) = self.value(kernel).dims4()?;
        if kc != c {
            return Err(TensorError::shape(OP, format!("{c} kernel input channels"), format!("{kc}")));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(TensorError::shape(OP, format!("bias [{o}]"), format!("{:?}", self.shape(bv))));
            }
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::invalid(OP, format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        let geom = ConvGeom {
            batch: b,
            channels: c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = kernels::im2col(&geom, self.value(input).data());
        let grid = geom.grid_len();
        let mut tmp = vec![T::zero(); o * grid];
        gemm(o, geom.patch_len(), grid, self.value(kernel).data(), false, &cols, false, &mut tmp, false);
        let plane = geom.oh * geom.ow;
        let mut out = kernels::channel_major_to_batch(&tmp, b, o, plane);
        if let Some(bv) = bias {
            let bias_data = self.value(bv).data();
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bo = bias_data[i % o];
                chunk.iter_mut().for_each(|v| *v = *v + bo);
            }
        }
        let value = Tensor::new(vec![b, o, geom.oh, geom.ow], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(OP, value, Op::Conv2d { input, kernel, bias, geom }, &inputs)
    }

    /// Transposed convolution with an `[C_in, C_out, kh, kw]` kernel and no
    /// padding. The nominal output `(H-1)*stride + kh` is center-cropped or
    /// zero-padded to `target_hw`.
    pub fn transposed_conv2d(&mut self, input: Var, kernel: Var, stride: usize, target_hw: (usize, usize)) -> Result<Var> {
        const OP: &str = "transposed_conv2d";
        if stride == 0 {
            return Err(TensorError::invalid(OP, "stride must be >= 1"));
        }
        let (b, ci, h, w) = self.value(input).dims4()?;
        let (kci, co, kh, kw) = self.value(kernel).dims4()?;
        if kci != ci {
            return Err(TensorError::shape(OP, format!("{ci} kernel input channels"), format!("{kci}")));
        }
        let (nh, nw) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        let (th, tw) = target_hw;
        if th == 0 || tw == 0 || nh.abs_diff(th) > kh || nw.abs_diff(tw) > kw {
            return Err(TensorError::invalid(
                OP,
                format!("target {th}x{tw} unreachable from nominal {nh}x{nw} with kernel {kh}x{kw}"),
            ));
        }
        let geom = ConvGeom {
            batch: b,
            channels: co,
            h: nh,
            w: nw,
            kh,
            kw,
            stride,
            pad: 0,
            oh: h,
            ow: w,
        };
        let offset = ((nh as isize - th as isize) / 2, (nw as isize - tw as isize) / 2);
        let xm = kernels::batch_to_channel_major(self.value(input).data(), b, ci, h * w);
        let grid = geom.grid_len();
        let mut cols = vec![T::zero(); geom.patch_len() * grid];
        gemm(geom.patch_len(), ci, grid, self.value(kernel).data(), true, &xm, false, &mut cols, false);
        let mut nominal = vec![T::zero(); b * co * nh * nw];
        kernels::col2im(&geom, &cols, &mut nominal);
        let mut out = vec![T::zero(); b * co * th * tw];
        kernels::shift_window(b * co, &nominal, (nh, nw), &mut out, (th, tw), offset);
        let value = Tensor::new(vec![b, co, th, tw], out)?;
        self.push(OP, value, Op::TransposedConv2d { input, kernel, geom, offset }, &[input, kernel])
    }

    /// Bilinear resampling of the spatial dims (align-corners-false).
    pub fn bilinear_resize(&mut self, input: Var, target_hw: (usize, usize)) -> Result<Var> {
        const OP: &str = "bilinear_resize";
        let (b, c, h, w) = self.value(input).dims4()?;
        let (th, tw) = target_hw;
        if th == 0 || tw == 0 || h == 0 || w == 0 {
            return Err(TensorError::invalid(OP, "extents must be >= 1"));
        }
        let rows = kernels::bilinear_taps(h, th);
        let cols = kernels::bilinear_taps(w, tw);
        let out = kernels::bilinear_forward(b * c, self.value(input).data(), (h, w), &rows, &cols);
        let value = Tensor::new(vec![b, c, th, tw], out)?;
        self.push(OP, value, Op::Bilinear { input, rows, cols }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| v.max(T::zero()));
        self.push("relu", value, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", value, Op::Sigmoid(input), &[input])
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// `mul * x + add` with constant coefficients.
    pub fn affine(&mut self, input: Var, mul: T, add: T) -> Result<Var> {
        let value = self.value(input).map(|v| v * mul + add);
        self.push("affine", value, Op::Affine { input, mul }, &[input])
    }

    /// Multiplies every element of `input` by the one-element `scalar`.
    pub fn scale(&mut self, input: Var, scalar: Var) -> Result<Var> {
        let s = self.value(scalar).item()?;
        let value = self.value(input).map(|v| v * s);
        self.push("scale", value, Op::Scale { input, scalar }, &[input, scalar])
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *inputs.first().ok_or_else(|| TensorError::invalid(OP, "empty channel list"))?;
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut channels = 0;
        for &v in inputs {
            let (vb, vc, vh, vw) = self.value(v).dims4()?;
            if (vb, vh, vw) != (b, h, w) {
                return Err(TensorError::shape(OP, format!("[{b}, _, {h}, {w}]"), format!("{:?}", self.shape(v))));
            }
            channels += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * channels * plane);
        for bi in 0..b {
            for &v in inputs {
                let t = self.value(v);
                let per = t.shape()[1] * plane;
                out.extend_from_slice(&t.data()[bi * per..(bi + 1) * per]);
            }
        }
        let value = Tensor::new(vec![b, channels, h, w], out)?;
        self.push(OP, value, Op::Concat(inputs.to_vec()), inputs)
    }

    /// Channels `[start, start+len)` of an NCHW tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "slice_channels";
        let (b, c, h, w) = self.value(input).dims4()?;
        if start + len > c || len == 0 {
            return Err(TensorError::invalid(OP, format!("channels {start}..{} of {c}", start + len)));
        }
        let plane = h * w;
        let data = self.value(input).data();
        let mut out = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            out.extend_from_slice(&data[(bi * c + start) * plane..(bi * c + start + len) * plane]);
        }
        let value = Tensor::new(vec![b, len, h, w], out)?;
        self.push(OP, value, Op::SliceChannels { input, start }, &[input])
    }

    /// `[B, C, H, W]` -> `[B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let n = T::from_usize(h * w).unwrap();
        let data = self.value(input).data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / n).collect();
        let value = Tensor::new(vec![b, c], data)?;
        self.push("global_avg_pool", value, Op::AvgPool(input), &[input])
    }

    /// `[B, I] x [O, I]^T + [O]` -> `[B, O]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "fully_connected";
        let (b, i) = match self.shape(input) {
            &[b, i] => (b, i),
            s => return Err(TensorError::shape(OP, "[B, I] input", format!("{s:?}"))),
        };
        let o = match self.shape(weight) {
            &[o, wi] if wi == i => o,
            s => return Err(TensorError::shape(OP, format!("[O, {i}] weight"), format!("{s:?}"))),
        };
        let mut out = vec![T::zero(); b * o];
        gemm(b, i, o, self.value(input).data(), false, self.value(weight).data(), true, &mut out, false);
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(TensorError::shape(OP, format!("bias [{o}]"), format!("{:?}", self.shape(bv))));
            }
            let bd = self.value(bv).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bd).for_each(|(v, &bb)| *v = *v + bb);
            }
        }
        let value = Tensor::new(vec![b, o], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(OP, value, Op::Linear { input, weight, bias }, &inputs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let n = *t.shape().last().ok_or_else(|| TensorError::invalid("softmax", "rank-0 input"))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(input), &[input])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`;
    /// logits are `[B, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let (b, k) = match self.shape(logits) {
            &[b, k] => (b, k),
            s => return Err(TensorError::shape(OP, "[B, classes]", format!("{s:?}"))),
        };
        if labels.len() != b {
            return Err(TensorError::shape(OP, format!("{b} labels"), format!("{}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::invalid(OP, format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total = total + lse - row[label];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / T::from_usize(b.max(1)).unwrap());
        self.push(OP, value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = T::from_usize(self.value(input).numel().max(1)).unwrap();
        let s = self.sum(input)?;
        self.affine(s, T::one() / n, T::zero())
    }

    /// Counter-clockwise rotation of the spatial grid by `quarter_turns * 90`
    /// degrees. Odd turns swap H and W.
    pub fn rot90(&mut self, input: Var, quarter_turns: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let k = quarter_turns % 4;
        let idx = kernels::rot90_source_indices(h, w, k);
        let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
        let data = self.value(input).data();
        let mut out = Vec::with_capacity(data.len());
        for plane in data.chunks(h * w) {
            out.extend(idx.iter().map(|&i| plane[i]));
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        self.push("rot90", value, Op::Rot90 { input, quarter_turns: k }, &[input])
    }

    /// Records an externally computed operation.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        backward: impl CustomBackward<T> + 'static,
    ) -> Result<Var> {
        self.push(
            name,
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            inputs,
        )
    }

    /// Reverse-mode sweep from a one-element output. Every node is visited at
    /// most once; leaves that do not require gradients are never written.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(TensorError::NotScalar(out.value.shape().to_vec()));
        }
        if !out.requires_grad {
            return Ok(());
        }
        let seed = Tensor::full(out.value.shape().to_vec(), T::one());
        self.nodes[output.0].grad = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            let contributions = self.input_grads(i, &grad)?;
            self.nodes[i].grad = Some(grad);
            for (v, g) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
            }
        }
        for n in &self.nodes {
            if let (Op::Leaf, Some(g)) = (&n.op, &n.grad) {
                if !g.all_finite() {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let (b, o) = (geom.batch, self.value(*kernel).shape()[0]);
                let plane = geom.oh * geom.ow;
                let grid = geom.grid_len();
                let dtmp = kernels::batch_to_channel_major(gd, b, o, plane);
                if let Some(bv) = bias.filter(|&bv| self.wants(bv)) {
                    let mut db = vec![T::zero(); o];
                    for (r, row) in dtmp.chunks(grid).enumerate() {
                        db[r] = row.iter().copied().sum();
                    }
                    out.push((bv, Tensor::new(vec![o], db)?));
                }
                if self.wants(*kernel) {
                    let cols = kernels::im2col(geom, self.value(*input).data());
                    let mut dk = vec![T::zero(); o * geom.patch_len()];
                    gemm(o, grid, geom.patch_len(), &dtmp, false, &cols, true, &mut dk, false);
                    out.push((*kernel, Tensor::new(self.shape(*kernel).to_vec(), dk)?));
                }
                if self.wants(*input) {
                    let mut dcols = vec![T::zero(); geom.patch_len() * grid];
                    gemm(geom.patch_len(), o, grid, self.value(*kernel).data(), true, &dtmp, false, &mut dcols, false);
                    let mut dx = vec![T::zero(); self.value(*input).numel()];
                    kernels::col2im(geom, &dcols, &mut dx);
                    out.push((*input, Tensor::new(self.shape(*input).to_vec(), dx)?));
                }
            }
            Op::TransposedConv2d { input, kernel, geom, offset } => {
                let (b, co, nh, nw) = (geom.batch, geom.channels, geom.h, geom.w);
                let (_, _, th, tw) = node.value.dims4()?;
                let ci = self.shape(*input)[1];
                let mut dnominal = vec![T::zero(); b * co * nh * nw];
                kernels::shift_window_adjoint(b * co, gd, (th, tw), &mut dnominal, (nh, nw), *offset);
                let dcols = kernels::im2col(geom, &dnominal);
                let grid = geom.grid_len();
                if self.wants(*input) {
                    let mut dxm = vec![T::zero(); ci * grid];
                    gemm(ci, geom.patch_len(), grid, self.value(*kernel).data(), false, &dcols, false, &mut dxm, false);
                    let dx = kernels::channel_major_to_batch(&dxm, b, ci, geom.oh * geom.ow);
                    out.push((*input, Tensor::new(self.shape(*input).to_vec(), dx)?));
                }
                if self.wants(*kernel) {
                    let xm = kernels::batch_to_channel_major(self.value(*input).data(), b, ci, geom.oh * geom.ow);
                    let mut dk = vec![T::zero(); ci * geom.patch_len()];
                    gemm(ci, grid, geom.patch_len(), &xm, false, &dcols, true, &mut dk, false);
                    out.push((*kernel, Tensor::new(self.shape(*kernel).to_vec(), dk)?));
                }
            }
            Op::Bilinear { input, rows, cols } => {
                let (b, c, h, w) = self.value(*input).dims4()?;
                let dx = kernels::bilinear_backward(b * c, gd, (h, w), rows, cols);
                out.push((*input, Tensor::new(vec![b, c, h, w], dx)?));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = gd.iter().zip(xv).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                out.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                out.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = gd.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                    out.push((*a, Tensor::new(g.shape().to_vec(), d)?));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    out.push((*b, Tensor::new(g.shape().to_vec(), d)?));
                }
            }
            Op::Affine { input, mul } => out.push((*input, g.map(|v| v * *mul))),
            Op::Scale { input, scalar } => {
                let s = self.value(*scalar).item()?;
                if self.wants(*input) {
                    out.push((*input, g.map(|v| v * s)));
                }
                if self.wants(*scalar) {
                    let ds = gd.iter().zip(self.value(*input).data()).map(|(&g, &x)| g * x).sum();
                    out.push((*scalar, Tensor::new(self.shape(*scalar).to_vec(), vec![ds])?));
                }
            }
            Op::Concat(inputs) => {
                let (b, c, h, w) = node.value.dims4()?;
                let plane = h * w;
                let mut start = 0;
                for &v in inputs {
                    let vc = self.shape(v)[1];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(b * vc * plane);
                        for bi in 0..b {
                            d.extend_from_slice(&gd[(bi * c + start) * plane..(bi * c + start + vc) * plane]);
                        }
                        out.push((v, Tensor::new(vec![b, vc, h, w], d)?));
                    }
                    start += vc;
                }
            }
            Op::SliceChannels { input, start } => {
                let (b, c, h, w) = self.value(*input).dims4()?;
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut d = vec![T::zero(); b * c * plane];
                for bi in 0..b {
                    d[(bi * c + start) * plane..(bi * c + start + len) * plane]
                        .copy_from_slice(&gd[bi * len * plane..(bi + 1) * len * plane]);
                }
                out.push((*input, Tensor::new(vec![b, c, h, w], d)?));
            }
            Op::AvgPool(x) => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let n = T::from_usize(h * w).unwrap();
                let mut d = Vec::with_capacity(b * c * h * w);
                for &gv in gd {
                    d.extend(std::iter::repeat_n(gv / n, h * w));
                }
                out.push((*x, Tensor::new(vec![b, c, h, w], d)?));
            }
            Op::Linear { input, weight, bias } => {
                let (b, i) = (self.shape(*input)[0], self.shape(*input)[1]);
                let o = self.shape(*weight)[0];
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); b * i];
                    gemm(b, o, i, gd, false, self.value(*weight).data(), false, &mut dx, false);
                    out.push((*input, Tensor::new(vec![b, i], dx)?));
                }
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); o * i];
                    gemm(o, b, i, gd, true, self.value(*input).data(), false, &mut dw, false);
                    out.push((*weight, Tensor::new(vec![o, i], dw)?));
                }
                if let Some(bv) = bias.filter(|&bv| self.wants(bv)) {
                    let mut db = vec![T::zero(); o];
                    for row in gd.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, &r)| *a = *a + r);
                    }
                    out.push((bv, Tensor::new(vec![o], db)?));
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut d = Vec::with_capacity(gd.len());
                for (yr, gr) in node.value.data().chunks(n).zip(gd.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    d.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
                }
                out.push((*x, Tensor::new(node.value.shape().to_vec(), d)?));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = gd[0] / T::from_usize(labels.len().max(1)).unwrap();
                let mut d = probs.clone();
                for (row, &l) in d.chunks_mut(k).zip(labels) {
                    row[l] = row[l] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * scale);
                }
                out.push((*logits, Tensor::new(self.shape(*logits).to_vec(), d)?));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x).to_vec(), gd[0]))),
            Op::Rot90 { input, quarter_turns } => {
                let (b, c, h, w) = self.value(*input).dims4()?;
                let idx = kernels::rot90_source_indices(h, w, *quarter_turns);
                let mut d = vec![T::zero(); b * c * h * w];
                for (dp, gp) in d.chunks_mut(h * w).zip(gd.chunks(h * w)) {
                    for (o, &src) in idx.iter().enumerate() {
                        dp[src] = gp[o];
                    }
                }
                out.push((*input, Tensor::new(vec![b, c, h, w], d)?));
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = backward.backward(&values, &node.value, g)?;
                if grads.len() != inputs.len() {
                    return Err(TensorError::invalid("custom", "backward returned wrong number of gradients"));
                }
                for (v, gr) in inputs.iter().zip(grads) {
                    if let Some(gr) = gr {
                        if gr.shape() != self.shape(*v) {
                            return Err(TensorError::shape(
                                "custom",
                                format!("{:?}", self.shape(*v)),
                                format!("{:?}", gr.shape()),
                            ));
                        }
                        out.push((*v, gr));
                    }
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}
