//! Layer primitives with explicit forward caches and backward passes.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::seed::Rng;

/// How a forward pass treats dropout and batch normalization.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out][in][k][k]`.
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Conv2d {
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < self.kernel || wp < self.kernel {
            return None;
        }
        Some((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [f64]) {
        let k = self.kernel;
        let p = ho * wo;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= w as isize {
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

    fn col2im(&self, cols: &[f64], h: usize, w: usize, ho: usize, wo: usize, x: &mut [f64]) {
        let k = self.kernel;
        let p = ho * wo;
        for c in 0..self.in_channels {
            let plane = &mut x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Single-channel, stride-1, unpadded layers are cheaper as direct
    /// shifted multiply-adds than as im2col + GEMM.
    fn is_direct(&self) -> bool {
        self.in_channels == 1 && self.stride == 1 && self.padding == 0
    }

    fn forward_direct(&self, x: &Tensor, ho: usize, wo: usize) -> Tensor {
        let k = self.kernel;
        let mut out = Tensor::zeros(x.n, self.out_channels, ho, wo);
        for i in 0..x.n {
            let src = x.sample(i);
            let dst = out.sample_mut(i);
            for o in 0..self.out_channels {
                let plane = &mut dst[o * ho * wo..(o + 1) * ho * wo];
                if let Some(bias) = &self.bias {
                    plane.fill(bias[o]);
                }
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = self.weight[(o * k + ki) * k + kj];
                        for oy in 0..ho {
                            let row = &src[(oy + ki) * x.w + kj..][..wo];
                            for (d, s) in plane[oy * wo..(oy + 1) * wo].iter_mut().zip(row) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward_direct(
        &self,
        input: &Tensor,
        grad: &Tensor,
        need_input: bool,
        need_params: bool,
    ) -> (Option<Tensor>, Vec<Vec<f64>>) {
        let k = self.kernel;
        let (ho, wo) = (grad.h, grad.w);
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.out_channels];
        let mut dx = need_input.then(|| Tensor::zeros(input.n, input.c, input.h, input.w));
        for i in 0..input.n {
            let src = input.sample(i);
            let g = grad.sample(i);
            for o in 0..self.out_channels {
                let gp = &g[o * ho * wo..(o + 1) * ho * wo];
                if need_params {
                    db[o] += gp.iter().sum::<f64>();
                    for ki in 0..k {
                        for kj in 0..k {
                            let mut acc = 0.0;
                            for oy in 0..ho {
                                let row = &src[(oy + ki) * input.w + kj..][..wo];
                                acc += gp[oy * wo..(oy + 1) * wo]
                                    .iter()
                                    .zip(row)
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                            dw[(o * k + ki) * k + kj] += acc;
                        }
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let dst = dx.sample_mut(i);
                    for ki in 0..k {
                        for kj in 0..k {
                            let wv = self.weight[(o * k + ki) * k + kj];
                            for oy in 0..ho {
                                let row = &mut dst[(oy + ki) * input.w + kj..][..wo];
                                for (d, gv) in row.iter_mut().zip(&gp[oy * wo..(oy + 1) * wo]) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut grads = Vec::new();
        if need_params {
            grads.push(dw);
            if self.bias.is_some() {
                grads.push(db);
            }
        }
        (dx, grads)
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (ho, wo) = self
            .output_size(x.h, x.w)
            .expect("shape validated at build time");
        if self.is_direct() {
            return self.forward_direct(x, ho, wo);
        }
        let p = ho * wo;
        let kk = self.patch_len();
        let mut out = Tensor::zeros(x.n, self.out_channels, ho, wo);
        let mut cols = vec![0.0; kk * p];
        for i in 0..x.n {
            self.im2col(x.sample(i), x.h, x.w, ho, wo, &mut cols);
            let y = out.sample_mut(i);
            gemm(
                self.out_channels,
                kk,
                p,
                &self.weight,
                false,
                &cols,
                false,
                y,
                0.0,
            );
            if let Some(bias) = &self.bias {
                for (o, b) in bias.iter().enumerate() {
                    for v in &mut y[o * p..(o + 1) * p] {
                        *v += b;
                    }
                }
            }
        }
        out
    }

    fn backward(
        &self,
        input: &Tensor,
        grad: &Tensor,
        need_input: bool,
        need_params: bool,
    ) -> (Option<Tensor>, Vec<Vec<f64>>) {
        if self.is_direct() {
            return self.backward_direct(input, grad, need_input, need_params);
        }
        let (ho, wo) = (grad.h, grad.w);
        let p = ho * wo;
        let kk = self.patch_len();
        let mut cols = vec![0.0; kk * p];
        let mut dcols = vec![0.0; kk * p];
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.out_channels];
        let mut dx = need_input.then(|| Tensor::zeros(input.n, input.c, input.h, input.w));
        for i in 0..input.n {
            let g = grad.sample(i);
            if need_params {
                self.im2col(input.sample(i), input.h, input.w, ho, wo, &mut cols);
                gemm(
                    self.out_channels,
                    p,
                    kk,
                    g,
                    false,
                    &cols,
                    true,
                    &mut dw,
                    1.0,
                );
                for (o, d) in db.iter_mut().enumerate() {
                    *d += g[o * p..(o + 1) * p].iter().sum::<f64>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    kk,
                    self.out_channels,
                    p,
                    &self.weight,
                    true,
                    g,
                    false,
                    &mut dcols,
                    0.0,
                );
                self.col2im(&dcols, input.h, input.w, ho, wo, dx.sample_mut(i));
            }
        }
        let mut grads = Vec::new();
        if need_params {
            grads.push(dw);
            if self.bias.is_some() {
                grads.push(db);
            }
        }
        (dx, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pool2d {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
}

impl Pool2d {
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if h < self.kernel || w < self.kernel {
            return None;
        }
        Some((
            (h - self.kernel) / self.stride + 1,
            (w - self.kernel) / self.stride + 1,
        ))
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Vec<u32>) {
        let (ho, wo) = self
            .output_size(x.h, x.w)
            .expect("shape validated at build time");
        let mut out = Tensor::zeros(x.n, x.c, ho, wo);
        let mut argmax = Vec::new();
        if self.kind == PoolKind::Max {
            argmax.reserve(out.data.len());
        }
        let norm = 1.0 / (self.kernel * self.kernel) as f64;
        for plane_idx in 0..x.n * x.c {
            let plane = &x.data[plane_idx * x.h * x.w..(plane_idx + 1) * x.h * x.w];
            let dst = &mut out.data[plane_idx * ho * wo..(plane_idx + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y0, x0) = (oy * self.stride, ox * self.stride);
                    match self.kind {
                        PoolKind::Max => {
                            let mut best = y0 * x.w + x0;
                            for yy in y0..y0 + self.kernel {
                                for xx in x0..x0 + self.kernel {
                                    if plane[yy * x.w + xx] > plane[best] {
                                        best = yy * x.w + xx;
                                    }
                                }
                            }
                            dst[oy * wo + ox] = plane[best];
                            argmax.push(best as u32);
                        }
                        PoolKind::Average => {
                            let mut acc = 0.0;
                            for yy in y0..y0 + self.kernel {
                                acc += plane[yy * x.w + x0..yy * x.w + x0 + self.kernel]
                                    .iter()
                                    .sum::<f64>();
                            }
                            dst[oy * wo + ox] = acc * norm;
                        }
                    }
                }
            }
        }
        (out, argmax)
    }

    fn backward(&self, in_shape: [usize; 4], argmax: &[u32], grad: &Tensor) -> Tensor {
        let [n, c, h, w] = in_shape;
        let (ho, wo) = (grad.h, grad.w);
        let mut dx = Tensor::zeros(n, c, h, w);
        let norm = 1.0 / (self.kernel * self.kernel) as f64;
        for plane_idx in 0..n * c {
            let g = &grad.data[plane_idx * ho * wo..(plane_idx + 1) * ho * wo];
            let dst = &mut dx.data[plane_idx * h * w..(plane_idx + 1) * h * w];
            match self.kind {
                PoolKind::Max => {
                    let arg = &argmax[plane_idx * ho * wo..(plane_idx + 1) * ho * wo];
                    for (gv, &a) in g.iter().zip(arg) {
                        dst[a as usize] += gv;
                    }
                }
                PoolKind::Average => {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let share = g[oy * wo + ox] * norm;
                            let (y0, x0) = (oy * self.stride, ox * self.stride);
                            for yy in y0..y0 + self.kernel {
                                for v in &mut dst[yy * w + x0..yy * w + x0 + self.kernel] {
                                    *v += share;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn channel_iter(x: &Tensor, c: usize) -> impl Iterator<Item = &[f64]> + '_ {
        let plane = x.h * x.w;
        (0..x.n).map(move |i| &x.data[(i * x.c + c) * plane..(i * x.c + c + 1) * plane])
    }

    fn forward(&self, mut x: Tensor, train: bool) -> (Tensor, BnCache) {
        let plane = x.h * x.w;
        let count = (x.n * plane) as f64;
        let mut mean = vec![0.0; self.channels];
        let mut var = vec![0.0; self.channels];
        if train {
            for c in 0..self.channels {
                let m = Self::channel_iter(&x, c)
                    .map(|s| s.iter().sum::<f64>())
                    .sum::<f64>()
                    / count;
                let v = Self::channel_iter(&x, c)
                    .map(|s| s.iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                    .sum::<f64>()
                    / count;
                mean[c] = m;
                var[c] = v;
            }
        } else {
            mean.clone_from(&self.running_mean);
            var.clone_from(&self.running_var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        self.normalize(&mut x, &mean, &inv_std);
        let mut out = x.clone();
        self.affine(&mut out);
        let cache = BnCache {
            count: x.n * plane,
            xhat: x,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            train,
        };
        (out, cache)
    }

    fn normalize(&self, x: &mut Tensor, mean: &[f64], inv_std: &[f64]) {
        let plane = x.h * x.w;
        for (k, chunk) in x.data.chunks_mut(plane).enumerate() {
            let c = k % self.channels;
            chunk.iter_mut().for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
        }
    }

    fn affine(&self, x: &mut Tensor) {
        let plane = x.h * x.w;
        for (k, chunk) in x.data.chunks_mut(plane).enumerate() {
            let c = k % self.channels;
            chunk.iter_mut().for_each(|v| *v = self.gamma[c] * *v + self.beta[c]);
        }
    }

    fn infer(&self, mut x: Tensor) -> Tensor {
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        self.normalize(&mut x, &self.running_mean, &inv_std);
        self.affine(&mut x);
        x
    }

    fn commit(&mut self, cache: &BnCache) {
        if !cache.train {
            return;
        }
        let unbias = if cache.count > 1 {
            cache.count as f64 / (cache.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.channels {
            self.running_mean[c] =
                (1.0 - self.momentum) * self.running_mean[c] + self.momentum * cache.batch_mean[c];
            self.running_var[c] = (1.0 - self.momentum) * self.running_var[c]
                + self.momentum * cache.batch_var[c] * unbias;
        }
    }

    fn backward(
        &self,
        cache: &BnCache,
        grad: &Tensor,
        need_params: bool,
    ) -> (Tensor, Vec<Vec<f64>>) {
        let plane = grad.h * grad.w;
        let count = cache.count as f64;
        let mut dgamma = vec![0.0; self.channels];
        let mut dbeta = vec![0.0; self.channels];
        for i in 0..grad.n {
            for c in 0..self.channels {
                let range = (i * grad.c + c) * plane..(i * grad.c + c + 1) * plane;
                for (g, xh) in grad.data[range.clone()].iter().zip(&cache.xhat.data[range]) {
                    dgamma[c] += g * xh;
                    dbeta[c] += g;
                }
            }
        }
        let mut dx = grad.clone();
        for i in 0..grad.n {
            for c in 0..self.channels {
                let range = (i * grad.c + c) * plane..(i * grad.c + c + 1) * plane;
                let scale = self.gamma[c] * cache.inv_std[c];
                for (d, xh) in dx.data[range.clone()]
                    .iter_mut()
                    .zip(&cache.xhat.data[range])
                {
                    *d = if cache.train {
                        scale * (*d - dbeta[c] / count - xh * dgamma[c] / count)
                    } else {
                        scale * *d
                    };
                }
            }
        }
        let grads = if need_params {
            vec![dgamma, dbeta]
        } else {
            Vec::new()
        };
        (dx, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out][in]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(x.n, self.out_features, 1, 1);
        gemm(
            x.n,
            self.in_features,
            self.out_features,
            &x.data,
            false,
            &self.weight,
            true,
            &mut out.data,
            0.0,
        );
        for i in 0..x.n {
            for (o, b) in out.sample_mut(i).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        out
    }

    fn backward(
        &self,
        input: &Tensor,
        grad: &Tensor,
        need_input: bool,
        need_params: bool,
    ) -> (Option<Tensor>, Vec<Vec<f64>>) {
        let mut grads = Vec::new();
        if need_params {
            let mut dw = vec![0.0; self.weight.len()];
            gemm(
                self.out_features,
                input.n,
                self.in_features,
                &grad.data,
                true,
                &input.data,
                false,
                &mut dw,
                0.0,
            );
            let mut db = vec![0.0; self.out_features];
            for i in 0..grad.n {
                for (d, g) in db.iter_mut().zip(grad.sample(i)) {
                    *d += g;
                }
            }
            grads.push(dw);
            grads.push(db);
        }
        let dx = need_input.then(|| {
            let mut dx = Tensor::zeros(input.n, input.c, input.h, input.w);
            gemm(
                input.n,
                self.out_features,
                self.in_features,
                &grad.data,
                false,
                &self.weight,
                false,
                &mut dx.data,
                0.0,
            );
            dx
        });
        (dx, grads)
    }
}

/// `tanh` through one `expm1`, within a few ulps of `f64::tanh`.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let e = (2.0 * x).exp_m1();
    e / (e + 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Pool(Pool2d),
    BatchNorm(BatchNorm),
    /// Multiplies every value by a constant.
    Scale(f64),
    Tanh,
    Dropout(f64),
    Flatten,
    Linear(Linear),
}

#[derive(Debug)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    train: bool,
    count: usize,
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug)]
pub enum Cache {
    Input(Tensor),
    Pool {
        in_shape: [usize; 4],
        argmax: Vec<u32>,
    },
    BatchNorm(BnCache),
    Output(Tensor),
    Mask(Option<Vec<f64>>),
    Shape([usize; 4]),
}

impl Layer {
    /// Output shape for an input of shape `(c, h, w)`, `None` when the
    /// input is too small or has the wrong channel count.
    pub fn output_shape(&self, c: usize, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        match self {
            Layer::Conv(conv) => {
                if c != conv.in_channels {
                    return None;
                }
                conv.output_size(h, w)
                    .map(|(ho, wo)| (conv.out_channels, ho, wo))
            }
            Layer::Pool(pool) => pool.output_size(h, w).map(|(ho, wo)| (c, ho, wo)),
            Layer::BatchNorm(bn) => (bn.channels == c).then_some((c, h, w)),
            Layer::Scale(_) | Layer::Tanh | Layer::Dropout(_) => Some((c, h, w)),
            Layer::Flatten => Some((c * h * w, 1, 1)),
            Layer::Linear(lin) => {
                (c * h * w == lin.in_features).then_some((lin.out_features, 1, 1))
            }
        }
    }

    pub fn forward(&self, mut x: Tensor, mode: &mut Mode<'_>) -> (Tensor, Cache) {
        match self {
            Layer::Conv(conv) => (conv.forward(&x), Cache::Input(x)),
            Layer::Pool(pool) => {
                let (out, argmax) = pool.forward(&x);
                (
                    out,
                    Cache::Pool {
                        in_shape: x.shape(),
                        argmax,
                    },
                )
            }
            Layer::BatchNorm(bn) => {
                let (out, cache) = bn.forward(x, mode.is_train());
                (out, Cache::BatchNorm(cache))
            }
            Layer::Tanh => {
                let out = self.infer(x);
                (out.clone(), Cache::Output(out))
            }
            Layer::Dropout(p) => match mode {
                Mode::Train(rng) if *p > 0.0 => {
                    let keep = 1.0 - p;
                    let mask: Vec<f64> = (0..x.data.len())
                        .map(|_| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    x.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    (x, Cache::Mask(Some(mask)))
                }
                _ => (x, Cache::Mask(None)),
            },
            Layer::Scale(_) | Layer::Flatten => {
                let shape = x.shape();
                (self.infer(x), Cache::Shape(shape))
            }
            Layer::Linear(lin) => (lin.forward(&x), Cache::Input(x)),
        }
    }

    /// Eval-mode forward pass that keeps nothing for backpropagation.
    pub fn infer(&self, mut x: Tensor) -> Tensor {
        match self {
            Layer::Conv(conv) => conv.forward(&x),
            Layer::Pool(pool) => pool.forward(&x).0,
            Layer::BatchNorm(bn) => bn.infer(x),
            Layer::Scale(s) => {
                x.data.iter_mut().for_each(|v| *v *= s);
                x
            }
            Layer::Tanh => {
                x.data.iter_mut().for_each(|v| *v = fast_tanh(*v));
                x
            }
            Layer::Dropout(_) => x,
            Layer::Flatten => Tensor {
                n: x.n,
                c: x.sample_len(),
                h: 1,
                w: 1,
                data: x.data,
            },
            Layer::Linear(lin) => lin.forward(&x),
        }
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn commit(&mut self, cache: &Cache) {
        if let (Layer::BatchNorm(bn), Cache::BatchNorm(c)) = (self, cache) {
            bn.commit(c);
        }
    }

    pub fn backward(
        &self,
        cache: &Cache,
        grad: &Tensor,
        need_input: bool,
        need_params: bool,
    ) -> (Option<Tensor>, Vec<Vec<f64>>) {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Input(x)) => conv.backward(x, grad, need_input, need_params),
            (Layer::Pool(pool), Cache::Pool { in_shape, argmax }) => {
                (Some(pool.backward(*in_shape, argmax, grad)), Vec::new())
            }
            (Layer::BatchNorm(bn), Cache::BatchNorm(c)) => {
                let (dx, g) = bn.backward(c, grad, need_params);
                (Some(dx), g)
            }
            (Layer::Scale(s), Cache::Shape(_)) => {
                let mut dx = grad.clone();
                dx.data.iter_mut().for_each(|d| *d *= s);
                (Some(dx), Vec::new())
            }
            (Layer::Tanh, Cache::Output(y)) => {
                let mut dx = grad.clone();
                dx.data
                    .iter_mut()
                    .zip(&y.data)
                    .for_each(|(d, y)| *d *= 1.0 - y * y);
                (Some(dx), Vec::new())
            }
            (Layer::Dropout(_), Cache::Mask(mask)) => {
                let mut dx = grad.clone();
                if let Some(mask) = mask {
                    dx.data.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                }
                (Some(dx), Vec::new())
            }
            (Layer::Flatten, Cache::Shape([n, c, h, w])) => {
                let dx = Tensor {
                    n: *n,
                    c: *c,
                    h: *h,
                    w: *w,
                    data: grad.data.clone(),
                };
                (Some(dx), Vec::new())
            }
            (Layer::Linear(lin), Cache::Input(x)) => lin.backward(x, grad, need_input, need_params),
            _ => unreachable!("cache does not belong to this layer"),
        }
    }

    /// Trainable parameters, in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Vec<f64>)> {
        match self {
            Layer::Conv(c) => {
                let mut v = vec![("weight", &c.weight)];
                if let Some(b) = &c.bias {
                    v.push(("bias", b));
                }
                v
            }
            Layer::BatchNorm(bn) => vec![("gamma", &bn.gamma), ("beta", &bn.beta)],
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Conv(c) => {
                let mut v = vec![&mut c.weight];
                if let Some(b) = &mut c.bias {
                    v.push(b);
                }
                v
            }
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state that must survive checkpointing.
    pub fn buffers(&self) -> Vec<(&'static str, &Vec<f64>)> {
        match self {
            Layer::BatchNorm(bn) => vec![
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::BatchNorm(bn) => vec![&mut bn.running_mean, &mut bn.running_var],
            _ => Vec::new(),
        }
    }

    /// Shapes of [`params`](Self::params) followed by [`buffers`](Self::buffers).
    pub fn state_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Layer::Conv(c) => {
                let mut v = vec![vec![c.out_channels, c.in_channels, c.kernel, c.kernel]];
                if c.bias.is_some() {
                    v.push(vec![c.out_channels]);
                }
                v
            }
            Layer::BatchNorm(bn) => vec![vec![bn.channels]; 4],
            Layer::Linear(l) => vec![vec![l.out_features, l.in_features], vec![l.out_features]],
            _ => Vec::new(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Pool(_) => "pool",
            Layer::BatchNorm(_) => "bn",
            Layer::Scale(_) => "scale",
            Layer::Tanh => "tanh",
            Layer::Dropout(_) => "dropout",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
        }
    }
}
