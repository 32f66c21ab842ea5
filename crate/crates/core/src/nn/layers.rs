use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mbconv::{MbConv, MbConvCache};
use super::{gemm, glorot_uniform, he_normal, Buffer, Mode, Param, Tensor};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// "same" padding for stride 1 and odd kernels.
    pub fn same(kernel: usize) -> Self {
        Padding::uniform(kernel / 2)
    }

    /// Explicit zero padding used ahead of stride-2 "valid" convolutions on
    /// even inputs: one less row/column on the leading edge.
    pub fn stride2_even(kernel: usize) -> Self {
        let c = kernel / 2;
        Padding {
            top: c - 1,
            bottom: c,
            left: c - 1,
            right: c,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    /// One filter per input channel (`out_channels == in_channels`).
    pub depthwise: bool,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let n = out_channels * fan_in;
        Conv2d {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            depthwise: false,
            weight: Param::new(
                "kernel",
                vec![out_channels, in_channels, kernel, kernel],
                he_normal(rng, fan_in, n),
            ),
            bias: bias.then(|| Param::new("bias", vec![out_channels], vec![0.0; out_channels])),
        }
    }

    pub fn depthwise<R: Rng + ?Sized>(
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let n = channels * kernel * kernel;
        Conv2d {
            name: name.to_string(),
            in_channels: channels,
            out_channels: channels,
            kernel,
            stride,
            padding,
            depthwise: true,
            weight: Param::new(
                "depthwise_kernel",
                vec![channels, 1, kernel, kernel],
                he_normal(rng, kernel * kernel, n),
            ),
            bias: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.padding;
        (
            (h + p.top + p.bottom - self.kernel) / self.stride + 1,
            (w + p.left + p.right - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == Padding::default()
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.kernel;
        let (s, pt, pl) = (self.stride, self.padding.top, self.padding.left);
        let plane = oh * ow;
        let mut col = vec![0.0f32; self.in_channels * k * k * plane];
        for c in 0..self.in_channels {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * plane;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pt as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - pl as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f32], dx: &mut [f32], h: usize, w: usize, oh: usize, ow: usize) {
        let k = self.kernel;
        let (s, pt, pl) = (self.stride, self.padding.top, self.padding.left);
        let plane = oh * ow;
        for c in 0..self.in_channels {
            let dxc = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * plane;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pt as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - pl as isize;
                            if ix >= 0 && ix < w as isize {
                                dxc[iy as usize * w + ix as usize] += col[row + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.in_channels, "{}: channel mismatch", self.name);
        let (oh, ow) = self.output_hw(h, w);
        let mut y = Tensor::zeros([n, self.out_channels, oh, ow]);
        let out_len = self.out_channels * oh * ow;
        if self.depthwise {
            par::for_each_chunk_mut(&mut y.data, out_len, |i, ys| {
                self.depthwise_forward(x.sample(i), ys, h, w, oh, ow)
            });
        } else {
            let ckk = self.in_channels * self.kernel * self.kernel;
            par::for_each_chunk_mut(&mut y.data, out_len, |i, ys| {
                let xs = x.sample(i);
                if self.is_pointwise() {
                    gemm(self.out_channels, ckk, oh * ow, &self.weight.value, false, xs, false, ys, 0.0);
                } else {
                    let col = self.im2col(xs, h, w, oh, ow);
                    gemm(self.out_channels, ckk, oh * ow, &self.weight.value, false, &col, false, ys, 0.0);
                }
            });
        }
        if let Some(b) = &self.bias {
            let plane = oh * ow;
            par::for_each_chunk_mut(&mut y.data, out_len, |_, ys| {
                for (oc, bv) in b.value.iter().enumerate() {
                    ys[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v += bv);
                }
            });
        }
        y
    }

    fn depthwise_forward(&self, x: &[f32], y: &mut [f32], h: usize, w: usize, oh: usize, ow: usize) {
        let k = self.kernel;
        let (s, pt, pl) = (self.stride, self.padding.top as isize, self.padding.left as isize);
        for c in 0..self.in_channels {
            let xc = &x[c * h * w..(c + 1) * h * w];
            let wc = &self.weight.value[c * k * k..(c + 1) * k * k];
            let yc = &mut y[c * oh * ow..(c + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - pt;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - pl;
                            if ix >= 0 && ix < w as isize {
                                acc += wc[ky * k + kx] * xc[iy as usize * w + ix as usize];
                            }
                        }
                    }
                    yc[oy * ow + ox] = acc;
                }
            }
        }
    }

    /// Accumulates parameter gradients when `accumulate`; returns the input
    /// gradient when `need_dx`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, accumulate: bool, need_dx: bool) -> Option<Tensor> {
        let [n, _, h, w] = x.shape;
        let (oh, ow) = (dy.shape[2], dy.shape[3]);
        let plane = oh * ow;
        let k = self.kernel;
        if accumulate {
            if let Some(b) = &mut self.bias {
                for i in 0..n {
                    let d = dy.sample(i);
                    for (oc, g) in b.grad.iter_mut().enumerate() {
                        *g += d[oc * plane..(oc + 1) * plane].iter().sum::<f32>();
                    }
                }
            }
            let this = &*self;
            let partials: Vec<Vec<f32>> = par::map_range(n, |i| {
                let xs = x.sample(i);
                let ds = dy.sample(i);
                if this.depthwise {
                    this.depthwise_weight_grad(xs, ds, h, w, oh, ow)
                } else {
                    let ckk = this.in_channels * k * k;
                    let mut g = vec![0.0f32; this.out_channels * ckk];
                    if this.is_pointwise() {
                        gemm(this.out_channels, plane, ckk, ds, false, xs, true, &mut g, 0.0);
                    } else {
                        let col = this.im2col(xs, h, w, oh, ow);
                        gemm(this.out_channels, plane, ckk, ds, false, &col, true, &mut g, 0.0);
                    }
                    g
                }
            });
            let grad = &mut self.weight.grad;
            for p in partials {
                grad.iter_mut().zip(p).for_each(|(g, v)| *g += v);
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(x.shape);
        let in_len = x.sample_len();
        let this = &*self;
        par::for_each_chunk_mut(&mut dx.data, in_len, |i, dxs| {
            let ds = dy.sample(i);
            if this.depthwise {
                this.depthwise_input_grad(ds, dxs, h, w, oh, ow);
            } else {
                let ckk = this.in_channels * k * k;
                if this.is_pointwise() {
                    gemm(ckk, this.out_channels, plane, &this.weight.value, true, ds, false, dxs, 0.0);
                } else {
                    let mut dcol = vec![0.0f32; ckk * plane];
                    gemm(ckk, this.out_channels, plane, &this.weight.value, true, ds, false, &mut dcol, 0.0);
                    this.col2im(&dcol, dxs, h, w, oh, ow);
                }
            }
        });
        Some(dx)
    }

    fn depthwise_weight_grad(&self, x: &[f32], dy: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.kernel;
        let (s, pt, pl) = (self.stride, self.padding.top as isize, self.padding.left as isize);
        let mut g = vec![0.0f32; self.in_channels * k * k];
        for c in 0..self.in_channels {
            let xc = &x[c * h * w..(c + 1) * h * w];
            let dc = &dy[c * oh * ow..(c + 1) * oh * ow];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0f32;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pt;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - pl;
                            if ix >= 0 && ix < w as isize {
                                acc += dc[oy * ow + ox] * xc[iy as usize * w + ix as usize];
                            }
                        }
                    }
                    g[(c * k + ky) * k + kx] = acc;
                }
            }
        }
        g
    }

    fn depthwise_input_grad(&self, dy: &[f32], dx: &mut [f32], h: usize, w: usize, oh: usize, ow: usize) {
        let k = self.kernel;
        let (s, pt, pl) = (self.stride, self.padding.top as isize, self.padding.left as isize);
        for c in 0..self.in_channels {
            let wc = &self.weight.value[c * k * k..(c + 1) * k * k];
            let dc = &dy[c * oh * ow..(c + 1) * oh * ow];
            let dxc = &mut dx[c * h * w..(c + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = dc[oy * ow + ox];
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - pt;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - pl;
                            if ix >= 0 && ix < w as isize {
                                dxc[iy as usize * w + ix as usize] += wc[ky * k + kx] * d;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.iter_mut()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: Param::new("gamma", vec![channels], vec![1.0; channels]),
            beta: Param::new("beta", vec![channels], vec![0.0; channels]),
            running_mean: Buffer {
                name: "moving_mean".into(),
                value: vec![0.0; channels],
            },
            running_var: Buffer {
                name: "moving_variance".into(),
                value: vec![1.0; channels],
            },
            eps: 1e-3,
            momentum: 0.99,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> (Tensor, LayerCache) {
        let [n, c, _, _] = x.shape;
        assert_eq!(c, self.channels(), "{}: channel mismatch", self.name);
        let plane = x.plane();
        let count = (n * plane) as f32;
        let (mean, var, train) = match mode {
            Mode::Train => {
                let stats = par::map_range(c, |ch| {
                    let mut sum = 0.0f64;
                    for i in 0..n {
                        let s = &x.sample(i)[ch * plane..(ch + 1) * plane];
                        sum += s.iter().map(|v| *v as f64).sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0f64;
                    for i in 0..n {
                        let s = &x.sample(i)[ch * plane..(ch + 1) * plane];
                        sq += s.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>();
                    }
                    (mean as f32, (sq / count as f64) as f32)
                });
                let mean: Vec<f32> = stats.iter().map(|s| s.0).collect();
                let var: Vec<f32> = stats.iter().map(|s| s.1).collect();
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let m = self.momentum;
                for ch in 0..c {
                    self.running_mean.value[ch] = m * self.running_mean.value[ch] + (1.0 - m) * mean[ch];
                    self.running_var.value[ch] = m * self.running_var.value[ch] + (1.0 - m) * var[ch] * unbias;
                }
                (mean, var, true)
            }
            Mode::Infer => (
                self.running_mean.value.clone(),
                self.running_var.value.clone(),
                false,
            ),
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.data.clone();
        let mut y = Tensor::zeros(x.shape);
        let len = x.sample_len();
        let (g, b) = (&self.gamma.value, &self.beta.value);
        par::for_each_chunk_pair_mut(&mut xhat, len, &mut y.data, len, |_, xh, ys| {
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                for (xv, yv) in xh[r.clone()].iter_mut().zip(&mut ys[r]) {
                    *xv = (*xv - mean[ch]) * inv_std[ch];
                    *yv = g[ch] * *xv + b[ch];
                }
            }
        });
        (y, LayerCache::Bn { xhat, inv_std, train })
    }

    pub fn backward(
        &mut self,
        shape: [usize; 4],
        xhat: &[f32],
        inv_std: &[f32],
        train: bool,
        dy: &Tensor,
        accumulate: bool,
        need_dx: bool,
    ) -> Option<Tensor> {
        let [n, c, _, _] = shape;
        let plane = shape[2] * shape[3];
        let len = c * plane;
        let sums = par::map_range(c, |ch| {
            let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
            for i in 0..n {
                let r = i * len + ch * plane..i * len + (ch + 1) * plane;
                for (d, xh) in dy.data[r.clone()].iter().zip(&xhat[r]) {
                    sdy += *d as f64;
                    sdyx += (*d * *xh) as f64;
                }
            }
            (sdy as f32, sdyx as f32)
        });
        if accumulate {
            for ch in 0..c {
                self.beta.grad[ch] += sums[ch].0;
                self.gamma.grad[ch] += sums[ch].1;
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(shape);
        let g = &self.gamma.value;
        let m = (n * plane) as f32;
        par::for_each_chunk_mut(&mut dx.data, len, |i, dxs| {
            for ch in 0..c {
                let base = i * len + ch * plane;
                let scale = g[ch] * inv_std[ch];
                for p in 0..plane {
                    let d = dy.data[base + p];
                    dxs[ch * plane + p] = if train {
                        scale / m * (m * d - sums[ch].0 - xhat[base + p] * sums[ch].1)
                    } else {
                        scale * d
                    };
                }
            }
        });
        Some(dx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Swish,
    Sigmoid,
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Swish => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        let len = x.sample_len().max(1);
        par::for_each_chunk_mut(&mut y.data, len, |_, c| {
            c.iter_mut().for_each(|v| *v = self.apply(*v))
        });
        y
    }

    pub fn backward(self, x: &Tensor, dy: &Tensor) -> Tensor {
        let mut dx = dy.clone();
        let len = x.sample_len().max(1);
        par::for_each_chunk_mut(&mut dx.data, len, |i, c| {
            let xs = x.sample(i);
            c.iter_mut().zip(xs).for_each(|(d, xv)| *d *= self.derivative(*xv));
        });
        dx
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Dense {
            name: name.to_string(),
            in_features,
            out_features,
            weight: Param::new(
                "kernel",
                vec![out_features, in_features],
                glorot_uniform(rng, in_features, out_features, in_features * out_features),
            ),
            bias: Param::new("bias", vec![out_features], vec![0.0; out_features]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.batch();
        assert_eq!(x.sample_len(), self.in_features, "{}: feature mismatch", self.name);
        let mut y = Tensor::zeros([n, self.out_features, 1, 1]);
        gemm(n, self.in_features, self.out_features, &x.data, false, &self.weight.value, true, &mut y.data, 0.0);
        for row in y.data.chunks_mut(self.out_features) {
            row.iter_mut().zip(&self.bias.value).for_each(|(v, b)| *v += b);
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, accumulate: bool, need_dx: bool) -> Option<Tensor> {
        let n = x.batch();
        if accumulate {
            gemm(self.out_features, n, self.in_features, &dy.data, true, &x.data, false, &mut self.weight.grad, 1.0);
            for row in dy.data.chunks(self.out_features) {
                self.bias.grad.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
        }
        need_dx.then(|| {
            let mut dx = Tensor::zeros(x.shape);
            gemm(n, self.out_features, self.in_features, &dy.data, false, &self.weight.value, false, &mut dx.data, 0.0);
            dx
        })
    }
}

fn avg_pool2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let out_len = c * oh * ow;
    par::for_each_chunk_mut(&mut y.data, out_len, |i, ys| {
        let xs = x.sample(i);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let b = ch * h * w + 2 * oy * w + 2 * ox;
                    ys[(ch * oh + oy) * ow + ox] = 0.25 * (xs[b] + xs[b + 1] + xs[b + w] + xs[b + w + 1]);
                }
            }
        }
    });
    y
}

fn avg_pool2_backward(shape: [usize; 4], dy: &Tensor) -> Tensor {
    let [_, c, h, w] = shape;
    let (oh, ow) = (dy.shape[2], dy.shape[3]);
    let mut dx = Tensor::zeros(shape);
    par::for_each_chunk_mut(&mut dx.data, c * h * w, |i, dxs| {
        let ds = dy.sample(i);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = 0.25 * ds[(ch * oh + oy) * ow + ox];
                    let b = ch * h * w + 2 * oy * w + 2 * ox;
                    dxs[b] += d;
                    dxs[b + 1] += d;
                    dxs[b + w] += d;
                    dxs[b + w + 1] += d;
                }
            }
        }
    });
    dx
}

pub(crate) fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, _, _] = x.shape;
    let plane = x.plane();
    let mut y = Tensor::zeros([n, c, 1, 1]);
    for i in 0..n {
        let xs = x.sample(i);
        for ch in 0..c {
            y.data[i * c + ch] = xs[ch * plane..(ch + 1) * plane].iter().sum::<f32>() / plane as f32;
        }
    }
    y
}

pub(crate) fn global_avg_pool_backward(shape: [usize; 4], dy: &Tensor) -> Tensor {
    let [_, c, h, w] = shape;
    let plane = h * w;
    let mut dx = Tensor::zeros(shape);
    par::for_each_chunk_mut(&mut dx.data, c * plane, |i, dxs| {
        for ch in 0..c {
            let d = dy.data[i * c + ch] / plane as f32;
            dxs[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = d);
        }
    });
    dx
}

/// One node of a stage. Layers without parameters carry no name.
#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Act(Activation),
    AvgPool2,
    GlobalAvgPool,
    Dense(Dense),
    MbConv(Box<MbConv>),
}

pub enum LayerCache {
    Input(Tensor),
    Bn {
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    Shape([usize; 4]),
    MbConv(Box<MbConvCache>),
}

impl Layer {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> (Tensor, LayerCache) {
        match self {
            Layer::Conv(c) => (c.forward(x), LayerCache::Input(x.clone())),
            Layer::BatchNorm(b) => b.forward(x, mode),
            Layer::Act(a) => (a.forward(x), LayerCache::Input(x.clone())),
            Layer::AvgPool2 => (avg_pool2(x), LayerCache::Shape(x.shape)),
            Layer::GlobalAvgPool => (global_avg_pool(x), LayerCache::Shape(x.shape)),
            Layer::Dense(d) => (d.forward(x), LayerCache::Input(x.clone())),
            Layer::MbConv(m) => {
                let (y, c) = m.forward(x, mode);
                (y, LayerCache::MbConv(Box::new(c)))
            }
        }
    }

    /// Forward pass without keeping a cache (inference-only stages).
    pub fn infer(&mut self, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Act(a) => a.forward(x),
            Layer::AvgPool2 => avg_pool2(x),
            Layer::GlobalAvgPool => global_avg_pool(x),
            Layer::Dense(d) => d.forward(x),
            _ => self.forward(x, Mode::Infer).0,
        }
    }

    pub fn backward(&mut self, cache: &LayerCache, dy: &Tensor, accumulate: bool, need_dx: bool) -> Option<Tensor> {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Input(x)) => c.backward(x, dy, accumulate, need_dx),
            (Layer::BatchNorm(b), LayerCache::Bn { xhat, inv_std, train }) => {
                b.backward(dy.shape, xhat, inv_std, *train, dy, accumulate, need_dx)
            }
            (Layer::Act(a), LayerCache::Input(x)) => need_dx.then(|| a.backward(x, dy)),
            (Layer::AvgPool2, LayerCache::Shape(s)) => need_dx.then(|| avg_pool2_backward(*s, dy)),
            (Layer::GlobalAvgPool, LayerCache::Shape(s)) => need_dx.then(|| global_avg_pool_backward(*s, dy)),
            (Layer::Dense(d), LayerCache::Input(x)) => d.backward(x, dy, accumulate, need_dx),
            (Layer::MbConv(m), LayerCache::MbConv(c)) => m.backward(c, dy, accumulate, need_dx),
            _ => panic!("layer/cache mismatch"),
        }
    }

    /// Named layers that own learnable parameters, with their parameters.
    pub fn learnable(&self) -> Vec<(String, Vec<&Param>)> {
        match self {
            Layer::Conv(c) => vec![(c.name.clone(), c.params())],
            Layer::BatchNorm(b) => vec![(b.name.clone(), vec![&b.gamma, &b.beta])],
            Layer::Dense(d) => vec![(d.name.clone(), vec![&d.weight, &d.bias])],
            Layer::MbConv(m) => m.learnable(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(c) => c.params_mut(),
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::MbConv(m) => m.params_mut(),
            _ => Vec::new(),
        }
    }

    /// `(layer name, buffer)` pairs.
    pub fn buffers(&self) -> Vec<(String, &Buffer)> {
        match self {
            Layer::BatchNorm(b) => vec![
                (b.name.clone(), &b.running_mean),
                (b.name.clone(), &b.running_var),
            ],
            Layer::MbConv(m) => m.buffers(),
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Buffer)> {
        match self {
            Layer::BatchNorm(b) => {
                let name = b.name.clone();
                vec![(name.clone(), &mut b.running_mean), (name, &mut b.running_var)]
            }
            Layer::MbConv(m) => m.buffers_mut(),
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.learnable()
            .iter()
            .flat_map(|(_, ps)| ps.iter())
            .map(|p| p.len())
            .sum()
    }
}
