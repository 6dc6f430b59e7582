//! Compact convolutional building blocks with explicit backpropagation.
//!
//! Only what the segmentation backbone and the metacognitive network need:
//! 3×3 / 1×1 convolutions (im2col + SGEMM), ReLU, 2×2 max-pooling,
//! nearest-neighbour upsampling, channel concatenation, a U-shaped network
//! built from those, and Adam. Everything runs single-threaded and in a
//! fixed order, so a given seed always produces the same weights.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// A `C × H × W` float tensor, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "tensor {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    fn padded(&self, height: usize, width: usize) -> Tensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..self.height {
                let src = (c * self.height + y) * self.width;
                let dst = (c * height + y) * width;
                out.data[dst..dst + self.width].copy_from_slice(&self.data[src..src + self.width]);
            }
        }
        out
    }

    fn cropped(&self, height: usize, width: usize) -> Tensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let src = (c * self.height + y) * self.width;
                let dst = (c * height + y) * width;
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        out
    }
}

/// `C = A·B + beta·C` over strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Same-padded convolution with a square odd kernel (1 or 3).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out × (in · kernel²)`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    /// Uniform init with bound `sqrt(gain / fan_in)`; `gain = 6` is He init for ReLU.
    fn new(in_channels: usize, out_channels: usize, kernel: usize, gain: f32, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = libm::sqrtf(gain / fan_in as f32);
        let weight = (0..out_channels * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
        Self { in_channels, out_channels, kernel, weight, bias: vec![0.0; out_channels] }
    }

    #[inline]
    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &Tensor) -> Vec<f32> {
        if self.kernel == 1 {
            return x.data.clone();
        }
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let r = (self.kernel / 2) as isize;
        let mut cols = vec![0.0f32; self.patch() * hw];
        for c in 0..self.in_channels {
            let plane = x.channel(c);
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel * self.kernel + ky * self.kernel + kx) * hw;
                    let dy = ky as isize - r;
                    let dx = kx as isize - r;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = sy as usize * w;
                        let dst = row + y * w;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx.max(0)) as usize;
                        for xx in x0..x1 {
                            cols[dst + xx] = plane[src + (xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize) -> Vec<f32> {
        if self.kernel == 1 {
            return cols.to_vec();
        }
        let hw = h * w;
        let r = (self.kernel / 2) as isize;
        let mut dx_out = vec![0.0f32; self.in_channels * hw];
        for c in 0..self.in_channels {
            let plane = &mut dx_out[c * hw..(c + 1) * hw];
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel * self.kernel + ky * self.kernel + kx) * hw;
                    let dy = ky as isize - r;
                    let dx = kx as isize - r;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = sy as usize * w;
                        let src = row + y * w;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx.max(0)) as usize;
                        for xx in x0..x1 {
                            plane[dst + (xx as isize + dx) as usize] += cols[src + xx];
                        }
                    }
                }
            }
        }
        dx_out
    }

    /// Returns the output and the im2col buffer needed by [`Conv2d::backward`].
    pub fn forward(&self, x: &Tensor) -> (Tensor, Vec<f32>) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let hw = x.plane();
        let cols = self.im2col(x);
        let mut out = Tensor::zeros(self.out_channels, x.height, x.width);
        let k = self.patch();
        gemm(self.out_channels, k, hw, &self.weight, (k, 1), &cols, (hw, 1), 0.0, &mut out.data, (hw, 1));
        for (o, plane) in out.data.chunks_exact_mut(hw).enumerate() {
            let b = self.bias[o];
            plane.iter_mut().for_each(|v| *v += b);
        }
        (out, cols)
    }

    /// Accumulates parameter gradients and optionally returns the input gradient.
    fn backward(
        &self,
        (h, w): (usize, usize),
        cols: &[f32],
        dy: &[f32],
        gw: &mut [f32],
        gb: &mut [f32],
        need_dx: bool,
    ) -> Option<Vec<f32>> {
        let hw = h * w;
        let k = self.patch();
        gemm(self.out_channels, hw, k, dy, (hw, 1), cols, (1, hw), 1.0, gw, (k, 1));
        for (o, plane) in dy.chunks_exact(hw).enumerate() {
            gb[o] += plane.iter().sum::<f32>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![0.0f32; k * hw];
        gemm(k, self.out_channels, hw, &self.weight, (1, k), dy, (hw, 1), 0.0, &mut dcols, (hw, 1));
        Some(self.col2im(&dcols, h, w))
    }
}

fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

fn relu_backward(out: &Tensor, grad: &mut [f32]) {
    for (g, &o) in grad.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max-pool; returns the winning input offset of each output.
fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = Tensor::zeros(x.channels, oh, ow);
    let mut arg = vec![0u32; x.channels * oh * ow];
    for c in 0..x.channels {
        let base = c * x.plane();
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * x.width + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * x.width + 2 * xx + dx;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = (c * oh + y) * ow + xx;
                out.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

fn upsample2(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.height * 2, x.width * 2);
    let mut out = Tensor::zeros(x.channels, oh, ow);
    for c in 0..x.channels {
        for y in 0..oh {
            let src = (c * x.height + y / 2) * x.width;
            let dst = (c * oh + y) * ow;
            for xx in 0..ow {
                out.data[dst + xx] = x.data[src + xx / 2];
            }
        }
    }
    out
}

fn upsample2_backward(dy: &[f32], channels: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h * 2, w * 2);
    let mut dx = vec![0.0f32; channels * h * w];
    for c in 0..channels {
        for y in 0..oh {
            let dst = (c * h + y / 2) * w;
            let src = (c * oh + y) * ow;
            for xx in 0..ow {
                dx[dst + xx / 2] += dy[src + xx];
            }
        }
    }
    dx
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor { channels: a.channels + b.channels, height: a.height, width: a.width, data }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of resolution levels; the input is pooled `depth - 1` times.
    pub depth: usize,
    pub base_width: usize,
    pub seed: u64,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config(format!("network depth must be >= 2, got {}", self.depth)));
        }
        if self.base_width < 8 {
            return Err(Error::config(format!("base width must be >= 8, got {}", self.base_width)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("network needs at least one input and one output channel"));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Encoder–decoder with skip connections: two 3×3 conv+ReLU per level,
/// max-pool down, nearest upsample + concat up, and a linear 1×1 head.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    convs: Vec<Conv2d>,
}

struct ConvTrace {
    cols: Vec<f32>,
    out: Tensor,
}

/// Activations recorded by [`UNet::forward_train`].
pub struct Trace {
    input_dims: (usize, usize),
    padded_dims: (usize, usize),
    enc: Vec<[ConvTrace; 2]>,
    pools: Vec<Vec<u32>>,
    dec: Vec<[ConvTrace; 2]>,
    head_cols: Vec<f32>,
}

/// Per-parameter gradients (or optimizer moments) laid out like [`UNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f32>>,
    pub biases: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(net: &UNet) -> Self {
        Self {
            weights: net.convs.iter().map(|c| vec![0.0; c.weight.len()]).collect(),
            biases: net.convs.iter().map(|c| vec![0.0; c.bias.len()]).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.weights.iter_mut().chain(self.biases.iter_mut()).for_each(|v| v.fill(0.0));
    }

    pub fn flat(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng(config.seed);
        let d = config.depth;
        let mut convs = Vec::with_capacity(4 * d - 1);
        for level in 0..d {
            let cin = if level == 0 { config.in_channels } else { config.width(level - 1) };
            let w = config.width(level);
            convs.push(Conv2d::new(cin, w, 3, 6.0, &mut rng));
            convs.push(Conv2d::new(w, w, 3, 6.0, &mut rng));
        }
        for level in 0..d - 1 {
            let cin = config.width(level + 1) + config.width(level);
            let w = config.width(level);
            convs.push(Conv2d::new(cin, w, 3, 6.0, &mut rng));
            convs.push(Conv2d::new(w, w, 3, 6.0, &mut rng));
        }
        convs.push(Conv2d::new(config.base_width, config.out_channels, 1, 3.0, &mut rng));
        Ok(Self { config, convs })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    /// All weights and biases, conv by conv (weight then bias).
    pub fn params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for c in &self.convs {
            out.extend_from_slice(&c.weight);
            out.extend_from_slice(&c.bias);
        }
        out
    }

    pub fn from_params(config: UNetConfig, params: &[f32]) -> Result<Self> {
        let mut net = Self::new(config)?;
        if params.len() != net.param_count() {
            return Err(Error::shape(format!(
                "network expects {} parameters, got {}",
                net.param_count(),
                params.len()
            )));
        }
        let mut rest = params;
        for c in &mut net.convs {
            let (w, r) = rest.split_at(c.weight.len());
            c.weight.copy_from_slice(w);
            let (b, r) = r.split_at(c.bias.len());
            c.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(net)
    }

    fn enc_index(level: usize) -> usize {
        2 * level
    }

    fn dec_index(&self, level: usize) -> usize {
        2 * self.config.depth + 2 * level
    }

    fn head_index(&self) -> usize {
        self.convs.len() - 1
    }

    fn multiple(&self) -> usize {
        1 << (self.config.depth - 1)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels != self.config.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels, x.channels
            )));
        }
        if x.height == 0 || x.width == 0 {
            return Err(Error::shape("empty input"));
        }
        Ok(())
    }

    fn conv_relu(&self, index: usize, x: &Tensor) -> (Tensor, Vec<f32>) {
        let (mut out, cols) = self.convs[index].forward(x);
        relu_inplace(&mut out);
        (out, cols)
    }

    /// Inference pass. Inputs whose sides are not multiples of `2^(depth-1)`
    /// are zero-padded and the output is cropped back.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, false).map(|(out, _)| out)
    }

    /// Training pass that also records what [`UNet::backward`] needs.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        self.run(x, true).map(|(out, trace)| (out, trace.expect("trace recorded")))
    }

    fn run(&self, x: &Tensor, record: bool) -> Result<(Tensor, Option<Trace>)> {
        self.check_input(x)?;
        let m = self.multiple();
        let (ph, pw) = (x.height.div_ceil(m) * m, x.width.div_ceil(m) * m);
        let d = self.config.depth;

        let mut enc: Vec<[ConvTrace; 2]> = Vec::new();
        let mut pools = Vec::new();
        let mut skips: Vec<Tensor> = Vec::with_capacity(d);
        let mut cur = x.padded(ph, pw);
        for level in 0..d {
            let (a, cols_a) = self.conv_relu(Self::enc_index(level), &cur);
            let (b, cols_b) = self.conv_relu(Self::enc_index(level) + 1, &a);
            if level + 1 < d {
                let (pooled, arg) = maxpool2(&b);
                cur = pooled;
                if record {
                    pools.push(arg);
                }
            }
            if record {
                enc.push([ConvTrace { cols: cols_a, out: a }, ConvTrace { cols: cols_b, out: b.clone() }]);
            }
            skips.push(b);
        }

        let mut cur = skips.pop().expect("depth >= 2");
        let mut dec: Vec<Option<[ConvTrace; 2]>> = (0..d - 1).map(|_| None).collect();
        for level in (0..d - 1).rev() {
            let up = upsample2(&cur);
            let cat = concat(&up, &skips[level]);
            let (a, cols_a) = self.conv_relu(self.dec_index(level), &cat);
            let (b, cols_b) = self.conv_relu(self.dec_index(level) + 1, &a);
            if record {
                dec[level] = Some([ConvTrace { cols: cols_a, out: a }, ConvTrace { cols: cols_b, out: b.clone() }]);
            }
            cur = b;
        }
        let (out, head_cols) = self.convs[self.head_index()].forward(&cur);
        let out = out.cropped(x.height, x.width);
        let trace = record.then(|| Trace {
            input_dims: (x.height, x.width),
            padded_dims: (ph, pw),
            enc,
            pools,
            dec: dec.into_iter().map(|t| t.expect("decoder trace")).collect(),
            head_cols,
        });
        Ok((out, trace))
    }

    /// Accumulates into `grads` the parameter gradient of a loss whose
    /// gradient with respect to the network output is `grad_out`.
    pub fn backward(&self, trace: &Trace, grad_out: &Tensor, grads: &mut Gradients) -> Result<()> {
        let (h, w) = trace.input_dims;
        if grad_out.channels != self.config.out_channels || (grad_out.height, grad_out.width) != (h, w) {
            return Err(Error::shape("output gradient does not match the traced forward pass"));
        }
        let (ph, pw) = trace.padded_dims;
        let d = self.config.depth;
        let dims = |level: usize| (ph >> level, pw >> level);

        let dy = grad_out.padded(ph, pw).data;
        let head = self.head_index();
        let mut d_cur = self.convs[head]
            .backward((ph, pw), &trace.head_cols, &dy, &mut grads.weights[head], &mut grads.biases[head], true)
            .expect("dx requested");

        let mut d_skip: Vec<Vec<f32>> = Vec::with_capacity(d - 1);
        for level in 0..d - 1 {
            let [ta, tb] = &trace.dec[level];
            let i = self.dec_index(level);
            relu_backward(&tb.out, &mut d_cur);
            let mut da = self.convs[i + 1]
                .backward(dims(level), &tb.cols, &d_cur, &mut grads.weights[i + 1], &mut grads.biases[i + 1], true)
                .expect("dx requested");
            relu_backward(&ta.out, &mut da);
            let dcat = self.convs[i]
                .backward(dims(level), &ta.cols, &da, &mut grads.weights[i], &mut grads.biases[i], true)
                .expect("dx requested");
            let plane = dims(level).0 * dims(level).1;
            let up_channels = self.config.width(level + 1);
            let (d_up, d_sk) = dcat.split_at(up_channels * plane);
            d_skip.push(d_sk.to_vec());
            let (lh, lw) = dims(level + 1);
            d_cur = upsample2_backward(d_up, up_channels, lh, lw);
        }

        for level in (0..d).rev() {
            let mut d_out = if level == d - 1 {
                core::mem::take(&mut d_cur)
            } else {
                let mut g = core::mem::take(&mut d_skip[level]);
                for (o, &src) in trace.pools[level].iter().enumerate() {
                    g[src as usize] += d_cur[o];
                }
                g
            };
            let [ta, tb] = &trace.enc[level];
            let i = Self::enc_index(level);
            relu_backward(&tb.out, &mut d_out);
            let mut da = self.convs[i + 1]
                .backward(dims(level), &tb.cols, &d_out, &mut grads.weights[i + 1], &mut grads.biases[i + 1], true)
                .expect("dx requested");
            relu_backward(&ta.out, &mut da);
            if let Some(dx) = self.convs[i].backward(
                dims(level),
                &ta.cols,
                &da,
                &mut grads.weights[i],
                &mut grads.biases[i],
                level > 0,
            ) {
                d_cur = dx;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &UNet, lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn step(&mut self, net: &mut UNet, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - libm::powf(self.beta1, self.step as f32);
        let c2 = 1.0 - libm::powf(self.beta2, self.step as f32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (libm::sqrtf(vh) + eps);
            }
        };
        for (i, conv) in net.convs.iter_mut().enumerate() {
            update(&mut conv.weight, &grads.weights[i], &mut self.m.weights[i], &mut self.v.weights[i]);
            update(&mut conv.bias, &grads.biases[i], &mut self.m.biases[i], &mut self.v.biases[i]);
        }
    }
}
