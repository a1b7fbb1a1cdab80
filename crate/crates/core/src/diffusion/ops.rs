//! Layer primitives with hand-written backward passes.
//!
//! Every layer borrows its parameters from one flat `&[f64]` through a
//! [`ParamRef`] and accumulates gradients into a flat buffer of the same
//! layout. Forward passes return whatever the backward pass needs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

impl ParamRef {
    pub fn slice<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.len]
    }

    pub fn slice_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Fan { fan_in: usize, gain: f64 },
}

/// Allocates named parameter slices and records how to initialize them.
#[derive(Debug, Default, Clone)]
pub struct ParamSpace {
    entries: Vec<(String, ParamRef, Init)>,
    total: usize,
}

impl ParamSpace {
    pub fn alloc(&mut self, name: impl Into<String>, len: usize, init: Init) -> ParamRef {
        let r = ParamRef { offset: self.total, len };
        self.total += len;
        self.entries.push((name.into(), r, init));
        r
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, ParamRef)> {
        self.entries.iter().map(|(n, r, _)| (n.as_str(), *r))
    }

    pub fn initialize(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut params = vec![0.0; self.total];
        for (_, r, init) in &self.entries {
            let s = r.slice_mut(&mut params);
            match *init {
                Init::Zeros => {}
                Init::Ones => s.fill(1.0),
                Init::Fan { fan_in, gain } => {
                    let std = gain / (fan_in.max(1) as f64).sqrt();
                    for v in s {
                        *v = std * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
        params
    }
}

// Row-major gemm wrappers: C = A·B + beta·C with optional transposes.

pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them in bounds for both layouts.
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

fn im2col3(x: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let plane = h * w;
    let mut cols = vec![0.0; c * 9 * plane];
    let src = x.data();
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * plane;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = ch * plane + sy as usize * w;
                    let drow = row + y * w;
                    let (x_lo, x_hi) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    for xx in x_lo..x_hi {
                        cols[drow + xx] = src[srow + xx + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(cols: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    let plane = h * w;
    let mut out = Tensor::zeros(c, h, w);
    let dst = out.data_mut();
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * plane;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = ch * plane + sy as usize * w;
                    let srow = row + y * w;
                    let (x_lo, x_hi) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    for xx in x_lo..x_hi {
                        dst[drow + xx + kx - 1] += cols[srow + xx];
                    }
                }
            }
        }
    }
    out
}

/// Stride-1 convolution with a 1x1 or zero-padded 3x3 kernel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub weight: ParamRef,
    pub bias: ParamRef,
}

pub struct ConvCache {
    cols: Vec<f64>,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new(space: &mut ParamSpace, name: &str, c_in: usize, c_out: usize, kernel: usize, gain: f64) -> Self {
        assert!(kernel == 1 || kernel == 3);
        let fan_in = c_in * kernel * kernel;
        let init = if gain == 0.0 { Init::Zeros } else { Init::Fan { fan_in, gain } };
        let weight = space.alloc(format!("{name}.weight"), c_out * fan_in, init);
        let bias = space.alloc(format!("{name}.bias"), c_out, Init::Zeros);
        Self { c_in, c_out, kernel, weight, bias }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.channels(), self.c_in, "conv input channels");
        let (h, w) = (x.height(), x.width());
        let plane = h * w;
        let cols = if self.kernel == 3 { im2col3(x) } else { x.data().to_vec() };
        let bias = self.bias.slice(params);
        let mut out = vec![0.0; self.c_out * plane];
        for (o, b) in bias.iter().enumerate() {
            out[o * plane..(o + 1) * plane].fill(*b);
        }
        let k = self.c_in * self.kernel * self.kernel;
        gemm(self.c_out, k, plane, self.weight.slice(params), false, &cols, false, &mut out, 1.0);
        (Tensor::from_vec(self.c_out, h, w, out), ConvCache { cols, h, w })
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_input` is set.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ConvCache,
        d_out: &Tensor,
        grads: &mut [f64],
        need_input: bool,
    ) -> Option<Tensor> {
        let plane = cache.h * cache.w;
        let k = self.c_in * self.kernel * self.kernel;
        let dy = d_out.data();
        {
            let db = self.bias.slice_mut(grads);
            for (o, g) in db.iter_mut().enumerate() {
                *g += dy[o * plane..(o + 1) * plane].iter().sum::<f64>();
            }
        }
        gemm(self.c_out, plane, k, dy, false, &cache.cols, true, self.weight.slice_mut(grads), 1.0);
        if !need_input {
            return None;
        }
        let mut dcols = vec![0.0; k * plane];
        gemm(k, self.c_out, plane, self.weight.slice(params), true, dy, false, &mut dcols, 0.0);
        Some(if self.kernel == 3 {
            col2im3(&dcols, self.c_in, cache.h, cache.w)
        } else {
            Tensor::from_vec(self.c_in, cache.h, cache.w, dcols)
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: ParamRef,
    pub beta: ParamRef,
}

pub struct GroupNormCache {
    xhat: Tensor,
    rstd: Vec<f64>,
}

impl GroupNorm {
    pub fn new(space: &mut ParamSpace, name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{channels} channels in {groups} groups");
        let gamma = space.alloc(format!("{name}.gamma"), channels, Init::Ones);
        let beta = space.alloc(format!("{name}.beta"), channels, Init::Zeros);
        Self { channels, groups, gamma, beta }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, GroupNormCache) {
        let plane = x.plane();
        let per = self.channels / self.groups * plane;
        let gamma = self.gamma.slice(params);
        let beta = self.beta.slice(params);
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut rstd = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let range = g * per..(g + 1) * per;
            let seg = &x.data()[range.clone()];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let r = 1.0 / (var + GN_EPS).sqrt();
            rstd.push(r);
            for v in &mut xhat.data_mut()[range] {
                *v = (*v - mean) * r;
            }
        }
        for c in 0..self.channels {
            let s = c * plane..(c + 1) * plane;
            for (o, xh) in out.data_mut()[s.clone()].iter_mut().zip(&xhat.data()[s]) {
                *o = gamma[c] * xh + beta[c];
            }
        }
        (out, GroupNormCache { xhat, rstd })
    }

    pub fn backward(&self, params: &[f64], cache: &GroupNormCache, d_out: &Tensor, grads: &mut [f64]) -> Tensor {
        let plane = d_out.plane();
        let cpg = self.channels / self.groups;
        let per = cpg * plane;
        let gamma = self.gamma.slice(params).to_vec();
        let xhat = cache.xhat.data();
        let dy = d_out.data();
        {
            let dg = self.gamma.slice_mut(grads);
            for c in 0..self.channels {
                let s = c * plane..(c + 1) * plane;
                dg[c] += dy[s.clone()].iter().zip(&xhat[s]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        {
            let db = self.beta.slice_mut(grads);
            for c in 0..self.channels {
                db[c] += dy[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
        }
        let mut dx = Tensor::zeros(d_out.channels(), d_out.height(), d_out.width());
        let out = dx.data_mut();
        for g in 0..self.groups {
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for c in g * cpg..(g + 1) * cpg {
                for k in c * plane..(c + 1) * plane {
                    let dxh = dy[k] * gamma[c];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat[k];
                }
            }
            let r = cache.rstd[g];
            let n = per as f64;
            for c in g * cpg..(g + 1) * cpg {
                for k in c * plane..(c + 1) * plane {
                    let dxh = dy[k] * gamma[c];
                    out[k] = r / n * (n * dxh - sum_dxh - xhat[k] * sum_dxh_xh);
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: ParamRef,
    pub bias: ParamRef,
}

impl Linear {
    pub fn new(space: &mut ParamSpace, name: &str, n_in: usize, n_out: usize, gain: f64) -> Self {
        let init = if gain == 0.0 { Init::Zeros } else { Init::Fan { fan_in: n_in, gain } };
        let weight = space.alloc(format!("{name}.weight"), n_in * n_out, init);
        let bias = space.alloc(format!("{name}.bias"), n_out, Init::Zeros);
        Self { n_in, n_out, weight, bias }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = self.weight.slice(params);
        let mut y = self.bias.slice(params).to_vec();
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += w[o * self.n_in..(o + 1) * self.n_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        y
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        {
            let dw = self.weight.slice_mut(grads);
            for (o, &g) in dy.iter().enumerate() {
                for (d, &xi) in dw[o * self.n_in..(o + 1) * self.n_in].iter_mut().zip(x) {
                    *d += g * xi;
                }
            }
        }
        for (d, &g) in self.bias.slice_mut(grads).iter_mut().zip(dy) {
            *d += g;
        }
        let w = self.weight.slice(params);
        let mut dx = vec![0.0; self.n_in];
        for (o, &g) in dy.iter().enumerate() {
            for (d, &wi) in dx.iter_mut().zip(&w[o * self.n_in..(o + 1) * self.n_in]) {
                *d += g * wi;
            }
        }
        dx
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_tensor(x: &Tensor) -> Tensor {
    x.map(silu)
}

/// `d_out * silu'(pre)`.
pub fn silu_backward(pre: &Tensor, d_out: &Tensor) -> Tensor {
    pre.zip_map(d_out, |x, g| g * silu_grad(x))
}

pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.channels(), x.height() / 2, x.width() / 2);
    let mut out = Tensor::zeros(c, h, w);
    let src = x.data();
    let sw = x.width();
    let splane = x.plane();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let base = ch * splane + 2 * y * sw + 2 * xx;
                dst[(ch * h + y) * w + xx] = 0.25 * (src[base] + src[base + 1] + src[base + sw] + src[base + sw + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(d_out: &Tensor) -> Tensor {
    let (c, h, w) = (d_out.channels(), d_out.height(), d_out.width());
    let mut dx = Tensor::zeros(c, 2 * h, 2 * w);
    let sw = 2 * w;
    let splane = 4 * h * w;
    let g = d_out.data();
    let dst = dx.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = 0.25 * g[(ch * h + y) * w + xx];
                let base = ch * splane + 2 * y * sw + 2 * xx;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + sw] = v;
                dst[base + sw + 1] = v;
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample(x: &Tensor, factor: usize) -> Tensor {
    if factor == 1 {
        return x.clone();
    }
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(c, oh, ow);
    let src = x.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                dst[(ch * oh + y) * ow + xx] = src[(ch * h + y / factor) * w + xx / factor];
            }
        }
    }
    out
}

pub fn upsample_backward(d_out: &Tensor, factor: usize) -> Tensor {
    if factor == 1 {
        return d_out.clone();
    }
    let (c, oh, ow) = (d_out.channels(), d_out.height(), d_out.width());
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = Tensor::zeros(c, h, w);
    let g = d_out.data();
    let dst = dx.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                dst[(ch * h + y / factor) * w + xx / factor] += g[(ch * oh + y) * ow + xx];
            }
        }
    }
    dx
}
