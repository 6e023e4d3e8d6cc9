use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::kernels::{self, ConvGeom};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Batch-norm normalization source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T = f32> {
    Train { eps: f64 },
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
        eps: f64,
    },
}

/// Per-channel batch statistics produced by a train-mode batch norm.
/// `var` is the unbiased estimate, which is what running stats track.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Deliberately broken backward rules, used to prove the gradient checker
/// catches them.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    FlipConvBackward,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    /// Max pooling and SPP both route each output's gradient to one input index.
    Gather {
        x: Var,
        src: Vec<u32>,
    },
    AvgPool {
        x: Var,
        window: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    ScaleChannels {
        x: Var,
        s: Var,
    },
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Bce {
        p: Var,
        /// d loss / d p, precomputed at forward time.
        dp: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// A forward-pass tape. Every op appends one node; [`Graph::backward`]
/// walks the tape once in reverse.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }
}

/// Gradients of the tracked leaves, indexed by their [`Var`].
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn spatial(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

fn pool_out(len: usize, window: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - window) / stride + 1
}

impl Graph<f32> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Graph<T> {
    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Some(fault),
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

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records an input. Only tracked leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::shape(op, format!("expected rank {rank}, got {s:?}")));
        }
        Ok(s)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.expect_rank("conv2d", x, 4)?.to_vec();
        let ws = self.expect_rank("conv2d", w, 4)?.to_vec();
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != wcin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight {ws:?} expects {wcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} does not match {cout} output channels", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: pool_out(h, kh, stride, pad),
            ow: pool_out(wd, kw, stride, pad),
        };
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            batch,
            cout,
            &geom,
        );
        let value = Tensor::from_parts(vec![batch, cout, geom.oh, geom.ow], y);
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &ins))
    }

    /// 2-D pooling. Max pooling ignores padded cells; average pooling
    /// divides by the full window area.
    pub fn pool2d(
        &mut self,
        x: Var,
        mode: PoolMode,
        window: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.expect_rank("pool2d", x, 4)?.to_vec();
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if window == 0 || stride == 0 {
            return Err(Error::shape("pool2d", "window and stride must be >= 1"));
        }
        if window > h + 2 * pad || window > w + 2 * pad {
            return Err(Error::shape(
                "pool2d",
                format!("window {window} larger than spatial extent {h}x{w}"),
            ));
        }
        if pad * 2 >= window && pad > 0 {
            return Err(Error::shape("pool2d", "padding must be less than half the window"));
        }
        let oh = pool_out(h, window, stride, pad);
        let ow = pool_out(w, window, stride, pad);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); batch * c * oh * ow];
        match mode {
            PoolMode::Max => {
                let mut src = vec![0u32; out.len()];
                for plane in 0..batch * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = T::neg_infinity();
                            let mut arg = usize::MAX;
                            for ky in 0..window {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..window {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = base + iy as usize * w + ix as usize;
                                    // strict > keeps the first maximum in row-major order
                                    if arg == usize::MAX || data[idx] > best {
                                        best = data[idx];
                                        arg = idx;
                                    }
                                }
                            }
                            let o = (plane * oh + oy) * ow + ox;
                            out[o] = best;
                            src[o] = arg as u32;
                        }
                    }
                }
                let value = Tensor::from_parts(vec![batch, c, oh, ow], out);
                Ok(self.push(value, Op::Gather { x, src }, &[x]))
            }
            PoolMode::Avg => {
                let inv = T::one() / T::from_f64((window * window) as f64);
                for plane in 0..batch * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = T::zero();
                            for ky in 0..window {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..window {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && (ix as usize) < w {
                                        s += data[base + iy as usize * w + ix as usize];
                                    }
                                }
                            }
                            out[(plane * oh + oy) * ow + ox] = s * inv;
                        }
                    }
                }
                let value = Tensor::from_parts(vec![batch, c, oh, ow], out);
                Ok(self.push(
                    value,
                    Op::AvgPool {
                        x,
                        window,
                        stride,
                        pad,
                    },
                    &[x],
                ))
            }
        }
    }

    /// Spatial pyramid max pooling to `[B, C·Σ b²]`.
    ///
    /// Level `b` splits each axis into `b` bins; bin `i` covers
    /// `[floor(i·H/b), ceil((i+1)·H/b))`. Output order is level, then
    /// channel, then bin row, then bin column.
    pub fn spp(&mut self, x: Var, bins: &[usize]) -> Result<Var> {
        let xs = self.expect_rank("spp", x, 4)?.to_vec();
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if bins.is_empty() {
            return Err(Error::shape("spp", "no pyramid levels"));
        }
        for &b in bins {
            if b == 0 || b > h || b > w {
                return Err(Error::shape(
                    "spp",
                    format!("level with {b} bins does not fit a {h}x{w} map"),
                ));
            }
        }
        let per_sample: usize = bins.iter().map(|b| c * b * b).sum();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(batch * per_sample);
        let mut src = Vec::with_capacity(batch * per_sample);
        for n in 0..batch {
            for &b in bins {
                for ch in 0..c {
                    let base = (n * c + ch) * h * w;
                    for i in 0..b {
                        let (y0, y1) = (i * h / b, ((i + 1) * h).div_ceil(b));
                        for j in 0..b {
                            let (x0, x1) = (j * w / b, ((j + 1) * w).div_ceil(b));
                            let mut best = T::neg_infinity();
                            let mut arg = usize::MAX;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    let idx = base + yy * w + xx;
                                    if arg == usize::MAX || data[idx] > best {
                                        best = data[idx];
                                        arg = idx;
                                    }
                                }
                            }
                            out.push(best);
                            src.push(arg as u32);
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![batch, per_sample], out);
        Ok(self.push(value, Op::Gather { x, src }, &[x]))
    }

    /// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.expect_rank("global_avg_pool", x, 4)?.to_vec();
        let hw = spatial(&xs);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() / T::from_f64(hw as f64))
            .collect();
        let value = Tensor::from_parts(vec![xs[0], xs[1]], out);
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.max(T::zero())).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// Multiplies every spatial map of `x: [B,C,H,W]` by a per-channel
    /// factor from `s: [B,C]` or `[C]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.expect_rank("scale_channels", x, 4)?.to_vec();
        let ss = self.shape(s).to_vec();
        let (batch, c) = (xs[0], xs[1]);
        if ss != [batch, c] && ss != [c] {
            return Err(Error::shape(
                "scale_channels",
                format!("scale {ss:?} cannot broadcast over {xs:?}"),
            ));
        }
        let hw = spatial(&xs);
        let sd = self.value(s).data();
        let per_batch = ss.len() == 2;
        let mut out = self.value(x).data().to_vec();
        for (plane, chunk) in out.chunks_exact_mut(hw).enumerate() {
            let f = if per_batch { sd[plane] } else { sd[plane % c] };
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let value = Tensor::from_parts(xs, out);
        Ok(self.push(value, Op::ScaleChannels { x, s }, &[x, s]))
    }

    /// `x: [B,N]`, `w: [M,N]`, `b: [M]` -> `x·wᵀ + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.expect_rank("affine", x, 2)?.to_vec();
        let ws = self.expect_rank("affine", w, 2)?.to_vec();
        let (batch, n) = (xs[0], xs[1]);
        let m = ws[0];
        if ws[1] != n {
            return Err(Error::shape(
                "affine",
                format!("input width {n} does not match weight {ws:?}"),
            ));
        }
        if self.shape(b) != [m] {
            return Err(Error::shape(
                "affine",
                format!("bias {:?} does not match {m} outputs", self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); batch * m];
        for row in out.chunks_exact_mut(m) {
            row.copy_from_slice(self.value(b).data());
        }
        kernels::gemm(
            batch,
            n,
            m,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::one(),
            &mut out,
        );
        let value = Tensor::from_parts(vec![batch, m], out);
        Ok(self.push(value, Op::Affine { x, w, b }, &[x, w, b]))
    }

    /// Per-channel batch normalization over `[B,C,H,W]`. In train mode the
    /// batch statistics are returned for the caller to fold into running stats.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.expect_rank("batch_norm", x, 4)?.to_vec();
        let (batch, c) = (xs[0], xs[1]);
        let hw = spatial(&xs);
        let n = batch * hw;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("affine params must have shape [{c}]"),
            ));
        }
        let data = self.value(x).data();
        let (mean, var_biased, eps, train) = match mode {
            BnMode::Train { eps } => {
                if n < 2 {
                    return Err(Error::shape(
                        "batch_norm",
                        "train mode needs at least 2 values per channel",
                    ));
                }
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for b in 0..batch {
                    for ch in 0..c {
                        let p = &data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        mean[ch] += p.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for b in 0..batch {
                    for ch in 0..c {
                        let p = &data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        var[ch] += p
                            .iter()
                            .map(|v| (v.as_f64() - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var, eps, true)
            }
            BnMode::Eval {
                running_mean,
                running_var,
                eps,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running stats must have {c} channels"),
                    ));
                }
                (
                    running_mean.iter().map(|v| v.as_f64()).collect(),
                    running_var.iter().map(|v| v.as_f64()).collect(),
                    eps,
                    false,
                )
            }
        };
        let inv_std: Vec<T> = var_biased
            .iter()
            .map(|&v| T::from_f64(1.0 / (v + eps).sqrt()))
            .collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..batch {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                let m = T::from_f64(mean[ch]);
                for i in r {
                    let h = (data[i] - m) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let stats = train.then(|| BatchStats {
            mean: mean.iter().map(|&m| T::from_f64(m)).collect(),
            var: var_biased
                .iter()
                .map(|&v| T::from_f64(v * n as f64 / (n - 1) as f64))
                .collect(),
        });
        let value = Tensor::from_parts(xs, out);
        let var = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok((var, stats))
    }

    /// Concatenates along axis 1. All other extents must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat_channels", "inputs need a channel axis"));
        }
        let mut total_c = 0;
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{s:?} does not line up with {s0:?}"),
                ));
            }
            total_c += s[1];
            meta.push((p, s[1]));
        }
        let batch = s0[0];
        let hw = spatial(&s0);
        let mut out = Vec::with_capacity(batch * total_c * hw);
        for b in 0..batch {
            for &(p, c) in &meta {
                out.extend_from_slice(&self.value(p).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let mut shape = s0;
        shape[1] = total_c;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Concat { parts: meta }, parts))
    }

    /// Channels `start..start+len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || len == 0 || start + len > xs[1] {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{} out of {xs:?}", start + len),
            ));
        }
        let (batch, c) = (xs[0], xs[1]);
        let hw = spatial(&xs);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(batch * len * hw);
        for b in 0..batch {
            out.extend_from_slice(&d[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let mut shape = xs;
        shape[1] = len;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Slice { x, start }, &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// `[B, ...] -> [B, rest]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let b = s[0];
        let rest = s[1..].iter().product();
        self.reshape(a, &[b, rest])
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    /// Probabilities are clamped to `[CLAMP, 1 - CLAMP]`; the clamp has zero
    /// slope outside that interval.
    pub fn bce(&mut self, p: Var, labels: &Tensor<T>) -> Result<Var> {
        const CLAMP: f64 = 1e-7;
        if self.shape(p) != labels.shape() {
            return Err(Error::shape(
                "bce",
                format!("probas {:?} vs labels {:?}", self.shape(p), labels.shape()),
            ));
        }
        if let Some(bad) = labels
            .data()
            .iter()
            .find(|&&y| y != T::zero() && y != T::one())
        {
            return Err(Error::Data(format!("label {bad:?} is not 0 or 1")));
        }
        let pv = self.value(p).data();
        let n = pv.len() as f64;
        let mut loss = 0.0f64;
        let mut dp = Vec::with_capacity(pv.len());
        for (&pi, &yi) in pv.iter().zip(labels.data()) {
            let raw = pi.as_f64();
            let pc = raw.clamp(CLAMP, 1.0 - CLAMP);
            let y = yi.as_f64();
            loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            let inside = raw > CLAMP && raw < 1.0 - CLAMP;
            dp.push(if inside {
                T::from_f64((pc - y) / (pc * (1.0 - pc)) / n)
            } else {
                T::zero()
            });
        }
        let value = Tensor::scalar(T::from_f64(loss / n));
        Ok(self.push(value, Op::Bce { p, dp }, &[p]))
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate over every
    /// path; only tracked leaves are reported.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Autodiff("backward on an empty graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].tracked {
            return Ok(Gradients {
                grads: (0..self.nodes.len()).map(|_| None).collect(),
            });
        }
        grads[loss.0] = Some(vec![T::one()]);
        let flip = self.fault == Some(Fault::FlipConvBackward);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let mut acc = Acc {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, geom } => {
                    let xv = self.value(*x);
                    let cout = node.value.shape()[1];
                    let mut cg = kernels::conv2d_backward(
                        xv.data(),
                        self.value(*w).data(),
                        &dy,
                        xv.shape()[0],
                        cout,
                        geom,
                        acc.wants(*x),
                        acc.wants(*w),
                        b.is_some_and(|b| acc.wants(b)),
                    );
                    if flip {
                        for g in [&mut cg.dx, &mut cg.dw, &mut cg.db].into_iter().flatten() {
                            g.iter_mut().for_each(|v| *v = -*v);
                        }
                    }
                    if let Some(dx) = cg.dx {
                        acc.add(*x, &dx);
                    }
                    if let Some(dw) = cg.dw {
                        acc.add(*w, &dw);
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        acc.add(*b, &db);
                    }
                }
                Op::Gather { x, src } => {
                    if let Some(g) = acc.slot(*x) {
                        for (&s, &d) in src.iter().zip(&dy) {
                            g[s as usize] += d;
                        }
                    }
                }
                Op::AvgPool {
                    x,
                    window,
                    stride,
                    pad,
                } => {
                    let xs = self.shape(*x);
                    let (h, w) = (xs[2], xs[3]);
                    let os = node.value.shape();
                    let (oh, ow) = (os[2], os[3]);
                    let inv = T::one() / T::from_f64((window * window) as f64);
                    if let Some(g) = acc.slot(*x) {
                        for plane in 0..xs[0] * xs[1] {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let d = dy[(plane * oh + oy) * ow + ox] * inv;
                                    for ky in 0..*window {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..*window {
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if ix >= 0 && (ix as usize) < w {
                                                g[plane * h * w + iy as usize * w + ix as usize] +=
                                                    d;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::GlobalAvgPool { x } => {
                    let hw = spatial(self.shape(*x));
                    if let Some(g) = acc.slot(*x) {
                        for (chunk, &d) in g.chunks_exact_mut(hw).zip(&dy) {
                            let d = d / T::from_f64(hw as f64);
                            chunk.iter_mut().for_each(|v| *v += d);
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc.add(*a, &dy);
                    acc.add(*b, &dy);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if let Some(g) = acc.slot(*a) {
                        for ((g, d), y) in g.iter_mut().zip(&dy).zip(bv) {
                            *g += *d * *y;
                        }
                    }
                    if let Some(g) = acc.slot(*b) {
                        for ((g, d), x) in g.iter_mut().zip(&dy).zip(av) {
                            *g += *d * *x;
                        }
                    }
                }
                Op::Relu(a) => {
                    let av = self.value(*a).data();
                    if let Some(g) = acc.slot(*a) {
                        for ((g, d), x) in g.iter_mut().zip(&dy).zip(av) {
                            if *x > T::zero() {
                                *g += *d;
                            }
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let yv = node.value.data();
                    if let Some(g) = acc.slot(*a) {
                        for ((g, d), y) in g.iter_mut().zip(&dy).zip(yv) {
                            *g += *d * *y * (T::one() - *y);
                        }
                    }
                }
                Op::ScaleChannels { x, s } => {
                    let xs = self.shape(*x);
                    let c = xs[1];
                    let hw = spatial(xs);
                    let sv = self.value(*s).data();
                    let per_batch = self.shape(*s).len() == 2;
                    if let Some(g) = acc.slot(*x) {
                        for (plane, (gc, dc)) in
                            g.chunks_exact_mut(hw).zip(dy.chunks_exact(hw)).enumerate()
                        {
                            let f = if per_batch { sv[plane] } else { sv[plane % c] };
                            for (g, d) in gc.iter_mut().zip(dc) {
                                *g += *d * f;
                            }
                        }
                    }
                    let xv = self.value(*x).data();
                    if let Some(g) = acc.slot(*s) {
                        for (plane, (xc, dc)) in
                            xv.chunks_exact(hw).zip(dy.chunks_exact(hw)).enumerate()
                        {
                            let dot: T = xc.iter().zip(dc).map(|(&a, &b)| a * b).sum();
                            if per_batch {
                                g[plane] += dot;
                            } else {
                                g[plane % c] += dot;
                            }
                        }
                    }
                }
                Op::Affine { x, w, b } => {
                    let xs = self.shape(*x);
                    let (batch, n) = (xs[0], xs[1]);
                    let m = self.shape(*w)[0];
                    if let Some(g) = acc.slot(*x) {
                        kernels::gemm(batch, m, n, &dy, false, self.value(*w).data(), false, T::one(), g);
                    }
                    if let Some(g) = acc.slot(*w) {
                        kernels::gemm(m, batch, n, &dy, true, self.value(*x).data(), false, T::one(), g);
                    }
                    if let Some(g) = acc.slot(*b) {
                        for row in dy.chunks_exact(m) {
                            for (g, d) in g.iter_mut().zip(row) {
                                *g += *d;
                            }
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let xs = self.shape(*x);
                    let (batch, c) = (xs[0], xs[1]);
                    let hw = spatial(xs);
                    let n = T::from_f64((batch * hw) as f64);
                    let mut sum_dy = vec![T::zero(); c];
                    let mut sum_dy_xhat = vec![T::zero(); c];
                    for b in 0..batch {
                        for ch in 0..c {
                            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                            for i in r {
                                sum_dy[ch] += dy[i];
                                sum_dy_xhat[ch] += dy[i] * xhat[i];
                            }
                        }
                    }
                    let gv = self.value(*gamma).data();
                    if let Some(g) = acc.slot(*x) {
                        for b in 0..batch {
                            for ch in 0..c {
                                let k = gv[ch] * inv_std[ch];
                                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                                for i in r {
                                    g[i] += if *train {
                                        k / n * (n * dy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch])
                                    } else {
                                        k * dy[i]
                                    };
                                }
                            }
                        }
                    }
                    acc.add(*gamma, &sum_dy_xhat);
                    acc.add(*beta, &sum_dy);
                }
                Op::Concat { parts } => {
                    let s = node.value.shape();
                    let batch = s[0];
                    let hw = spatial(s);
                    let total_c = s[1];
                    let mut offset = 0;
                    for &(p, c) in parts {
                        if let Some(g) = acc.slot(p) {
                            for b in 0..batch {
                                let src = &dy[(b * total_c + offset) * hw..(b * total_c + offset + c) * hw];
                                for (g, d) in g[b * c * hw..(b + 1) * c * hw].iter_mut().zip(src) {
                                    *g += *d;
                                }
                            }
                        }
                        offset += c;
                    }
                }
                Op::Slice { x, start } => {
                    let xs = self.shape(*x);
                    let (batch, c) = (xs[0], xs[1]);
                    let hw = spatial(xs);
                    let len = node.value.shape()[1];
                    if let Some(g) = acc.slot(*x) {
                        for b in 0..batch {
                            let dst = &mut g[(b * c + start) * hw..(b * c + start + len) * hw];
                            for (g, d) in dst.iter_mut().zip(&dy[b * len * hw..(b + 1) * len * hw]) {
                                *g += *d;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(g) = acc.slot(*a) {
                        g.iter_mut().for_each(|v| *v += dy[0]);
                    }
                }
                Op::Mean(a) => {
                    if let Some(g) = acc.slot(*a) {
                        let d = dy[0] / T::from_f64(g.len() as f64);
                        g.iter_mut().for_each(|v| *v += d);
                    }
                }
                Op::Reshape(a) => acc.add(*a, &dy),
                Op::Bce { p, dp } => {
                    if let Some(g) = acc.slot(*p) {
                        for (g, d) in g.iter_mut().zip(dp) {
                            *g += *d * dy[0];
                        }
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.tracked => {
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

struct Acc<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> Acc<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Zero-initialized gradient buffer for `v`, or `None` if `v` is untracked.
    fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn add(&mut self, v: Var, d: &[T]) {
        if let Some(g) = self.slot(v) {
            for (g, d) in g.iter_mut().zip(d) {
                *g += *d;
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
