use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    ChannelAffine {
        x: Var,
        scale: Vec<f64>,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

/// Accumulator for input `v`, allocated on first use; `None` when `v` needs no gradient.
fn grad_slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Records primitive operations in creation order so `backward` can replay
/// them in reverse. A tape is single-threaded; independent tapes may live on
/// different threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records an input tensor. Only leaves created with `requires_grad`
    /// (and values derived from them) receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::dim(format!("row bias {sb:?} for {sx:?}")));
        }
        let n = sx[1];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[i % n];
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, rg, Op::AddRowBias(x, bias)))
    }

    /// `x[C×H×W] + bias[C]` broadcast over each channel plane.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 3 || sb != [sx[0]] {
            return Err(Error::dim(format!("channel bias {sb:?} for {sx:?}")));
        }
        let plane = sx[1] * sx[2];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            for v in chunk {
                *v += b[c];
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, rg, Op::AddChannelBias(x, bias)))
    }

    /// Frozen per-channel affine map `y = x * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let sx = self.value(x).shape();
        if sx.len() != 3 || scale.len() != sx[0] || shift.len() != sx[0] {
            return Err(Error::dim(format!(
                "channel affine with {} scales / {} shifts for {sx:?}",
                scale.len(),
                shift.len()
            )));
        }
        let plane = sx[1] * sx[2];
        let mut out = self.value(x).clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = *v * scale[c] + shift[c];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            rg,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
        ))
    }

    /// Cross-correlation (no kernel flip) of `x[C_in×H×W]` with
    /// `kernels[C_out×C_in×kH×kW]`, zero padding on every side.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.value(x).shape(), self.value(kernels).shape());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] {
            return Err(Error::dim(format!("conv2d of {sx:?} with kernels {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be at least 1"));
        }
        let (hp, wp) = (sx[1] + 2 * padding, sx[2] + 2 * padding);
        if sk[2] > hp || sk[3] > wp {
            return Err(Error::dim(format!(
                "kernel {}x{} larger than padded input {hp}x{wp}",
                sk[2], sk[3]
            )));
        }
        let geom = ConvGeom {
            c_in: sx[0],
            h: sx[1],
            w: sx[2],
            c_out: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad: padding,
            oh: (hp - sk[2]) / stride + 1,
            ow: (wp - sk[3]) / stride + 1,
        };
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(kernels).data(), &geom);
        let out = Tensor::new(vec![geom.c_out, geom.oh, geom.ow], data)?;
        let rg = self.rg(&[x, kernels]);
        Ok(self.push(out, rg, Op::Conv2d { x, k: kernels, geom }))
    }

    /// Non-overlapping max pooling over `window × window` blocks.
    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let sx = self.value(x).shape();
        if sx.len() != 3 || window == 0 || sx[1] % window != 0 || sx[2] % window != 0 {
            return Err(Error::dim(format!(
                "maxpool window {window} needs extents divisible by it, got {sx:?}"
            )));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (data, argmax) = kernels::maxpool_forward(self.value(x).data(), c, h, w, window);
        let out = Tensor::new(vec![c, h / window, w / window], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::MaxPool { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Relu(x))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, max-subtracted.
    /// A rank-1 `logits` is treated as a single row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape();
        let (n, c) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => return Err(Error::dim(format!("logits must be n×c, got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::dim(format!(
                "{} labels for {n} rows of logits",
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Label {
                index,
                label,
                classes: c,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= denom;
            }
            total += max + denom.ln() - row[labels[i]];
        }
        let out = Tensor::scalar(total / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a single-element `loss`. Every reachable node that
    /// requires a gradient ends up with the sum over all of its uses.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for node in &mut self.nodes {
            node.grad = None;
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(shape, g)?);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr, |$d:ident| $body:block) => {
                if let Some($d) = grad_slot(nodes, grads, $v) $body
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc!(v, |d| {
                        for (x, y) in d.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc!(*a, |d| {
                    for ((x, y), w) in d.iter_mut().zip(g).zip(vb) {
                        *x += y * w;
                    }
                });
                acc!(*b, |d| {
                    for ((x, y), w) in d.iter_mut().zip(g).zip(va) {
                        *x += y * w;
                    }
                });
            }
            Op::Scale(a, c) => acc!(*a, |d| {
                for (x, y) in d.iter_mut().zip(g) {
                    *x += c * y;
                }
            }),
            Op::Sum(a) => acc!(*a, |d| {
                for x in d.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Reshape(a) => acc!(*a, |d| {
                for (x, y) in d.iter_mut().zip(g) {
                    *x += y;
                }
            }),
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc!(*a, |d| {
                    kernels::matmul_grad_a(g, vb, *m, *k, *n, d);
                });
                acc!(*b, |d| {
                    kernels::matmul_grad_b(g, va, *m, *k, *n, d);
                });
            }
            Op::AddRowBias(x, bias) => {
                acc!(*x, |d| {
                    for (p, y) in d.iter_mut().zip(g) {
                        *p += y;
                    }
                });
                acc!(*bias, |d| {
                    let n = d.len();
                    for (j, y) in g.iter().enumerate() {
                        d[j % n] += y;
                    }
                });
            }
            Op::AddChannelBias(x, bias) => {
                acc!(*x, |d| {
                    for (p, y) in d.iter_mut().zip(g) {
                        *p += y;
                    }
                });
                acc!(*bias, |d| {
                    let plane = g.len() / d.len();
                    for (c, chunk) in g.chunks(plane).enumerate() {
                        d[c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::ChannelAffine { x, scale } => acc!(*x, |d| {
                let plane = g.len() / scale.len();
                for (c, (dc, gc)) in d.chunks_mut(plane).zip(g.chunks(plane)).enumerate() {
                    for (p, y) in dc.iter_mut().zip(gc) {
                        *p += scale[c] * y;
                    }
                }
            }),
            Op::Conv2d { x, k, geom } => {
                let (vx, vk) = (nodes[x.0].value.data(), nodes[k.0].value.data());
                acc!(*x, |d| {
                    kernels::conv2d_grad_input(g, vk, geom, d);
                });
                acc!(*k, |d| {
                    kernels::conv2d_grad_kernel(g, vx, geom, d);
                });
            }
            Op::MaxPool { x, argmax } => acc!(*x, |d| {
                for (&src, y) in argmax.iter().zip(g) {
                    d[src] += y;
                }
            }),
            Op::Relu(x) => {
                let vx = nodes[x.0].value.data();
                acc!(*x, |d| {
                    for ((p, y), &v) in d.iter_mut().zip(g).zip(vx) {
                        if v > 0.0 {
                            *p += y;
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => acc!(*logits, |d| {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                for (row, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        d[row * c + j] += scale * (probs[row * c + j] - onehot);
                    }
                }
            }),
        }
    }
}
