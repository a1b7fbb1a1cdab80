//! Compact multi-scale conditioned denoiser `ε_θ(x_t, z, t)`.
//!
//! An encoder-decoder over three resolutions (`2^L`, `2^(L-1)`, `2^(L-2)`)
//! with skip connections. Each residual block adds a learned per-pixel
//! projection of the text feature map of matching resolution right after
//! its first normalization, then applies a channel-wise scale and shift
//! computed from the timestep and the pooled level-0 sequence. Pyramid
//! levels coarser than `2^(L-2)` are nearest-upsampled to that resolution
//! and stacked. Optional single-head attention over the level-0 sequence
//! runs at the coarsest resolution.

use serde::{Deserialize, Serialize};

use super::ops::{
    avg_pool2, avg_pool2_backward, silu, silu_backward, silu_grad, silu_tensor, upsample, upsample_backward, Conv2d,
    ConvCache, GroupNorm, GroupNormCache, Linear, ParamSpace,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::features::TextFeaturePyramid;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub canvas_exponent: u32,
    pub image_channels: usize,
    /// Channels at resolutions `2^L`, `2^(L-1)` and `2^(L-2)`.
    pub channels: [usize; 3],
    pub embed_dim: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub groups: usize,
    pub attention: bool,
    pub attention_dim: usize,
    /// `T`, used to scale the timestep features.
    pub diffusion_steps: u32,
}

impl ArchSpec {
    /// Default toy network for a `32x32` canvas.
    pub fn toy(canvas_exponent: u32, embed_dim: usize, diffusion_steps: u32) -> Self {
        Self {
            canvas_exponent,
            image_channels: 3,
            channels: [16, 32, 32],
            embed_dim,
            time_dim: 16,
            cond_dim: 64,
            groups: 4,
            attention: true,
            attention_dim: 16,
            diffusion_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas_exponent < 2 {
            return Err(Error::invalid("the denoiser needs a canvas of at least 4x4"));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(Error::invalid("time_dim must be even and positive"));
        }
        for c in self.channels {
            if c == 0 || c % self.groups != 0 {
                return Err(Error::invalid(format!("{c} channels not divisible into {} groups", self.groups)));
            }
        }
        if self.embed_dim == 0 || self.cond_dim == 0 || self.image_channels == 0 || self.diffusion_steps == 0 {
            return Err(Error::invalid("dimensions must be positive"));
        }
        Ok(())
    }

    pub fn side(&self) -> usize {
        1 << self.canvas_exponent
    }

    /// Pyramid levels stacked at the coarsest resolution.
    pub fn coarse_levels(&self) -> std::ops::RangeInclusive<u32> {
        1..=self.canvas_exponent - 2
    }

    fn coarse_channels(&self) -> usize {
        (self.canvas_exponent as usize - 2) * self.embed_dim
    }
}

/// Pyramid rearranged into the network's injection inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    tokens: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    fine: Tensor,
    mid: Tensor,
    coarse: Option<Tensor>,
}

impl Conditioning {
    pub fn from_pyramid(pyramid: &TextFeaturePyramid, arch: &ArchSpec) -> Result<Self> {
        let l = arch.canvas_exponent;
        if pyramid.canvas_exponent() != l || pyramid.dim() != arch.embed_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("pyramid with L = {l} and d = {}", arch.embed_dim),
                actual: format!("L = {} and d = {}", pyramid.canvas_exponent(), pyramid.dim()),
            });
        }
        let d = arch.embed_dim;
        let as_tensor = |level: u32| {
            let m = pyramid.map(level);
            Tensor::from_vec(d, m.side(), m.side(), m.data().to_vec())
        };
        let coarse_side = 1usize << (l - 2);
        let coarse = if l > 2 {
            let mut stacked: Option<Tensor> = None;
            for level in arch.coarse_levels() {
                let t = upsample(&as_tensor(level), coarse_side >> level);
                stacked = Some(match stacked {
                    None => t,
                    Some(s) => s.concat(&t),
                });
            }
            stacked
        } else {
            None
        };
        let tokens: Vec<Vec<f64>> = pyramid.level0().iter().map(|e| e.0.clone()).collect();
        let n = tokens.len() as f64;
        let mut pooled = vec![0.0; d];
        for t in &tokens {
            for (p, v) in pooled.iter_mut().zip(t) {
                *p += v;
            }
        }
        for p in &mut pooled {
            *p /= n;
        }
        Ok(Self { tokens, pooled, fine: as_tensor(l), mid: as_tensor(l - 1), coarse })
    }
}

/// Sinusoidal features of the timestep.
pub fn timestep_features(t: f64, dim: usize, total_steps: u32) -> Vec<f64> {
    let half = dim / 2;
    let scaled = t * 1000.0 / total_steps as f64;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (scaled * freq).sin();
        out[half + k] = (scaled * freq).cos();
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    inject: Option<Conv2d>,
    film: Linear,
    conv2: Conv2d,
    norm2: GroupNorm,
    skip: Option<Conv2d>,
    c_out: usize,
}

struct ResBlockCache {
    conv1: ConvCache,
    norm1: GroupNormCache,
    inject: Option<ConvCache>,
    modulated_in: Tensor,
    scale: Vec<f64>,
    pre_act1: Tensor,
    conv2: ConvCache,
    norm2: GroupNormCache,
    pre_act2: Tensor,
    skip: Option<ConvCache>,
}

impl ResBlock {
    fn new(space: &mut ParamSpace, name: &str, c_in: usize, c_out: usize, inject_channels: Option<usize>, arch: &ArchSpec) -> Self {
        let conv1 = Conv2d::new(space, &format!("{name}.conv1"), c_in, c_out, 3, 2f64.sqrt());
        let norm1 = GroupNorm::new(space, &format!("{name}.norm1"), c_out, arch.groups);
        let inject = inject_channels.map(|c| Conv2d::new(space, &format!("{name}.inject"), c, c_out, 1, 1.0));
        let film = Linear::new(space, &format!("{name}.film"), arch.cond_dim, 2 * c_out, 0.5);
        let conv2 = Conv2d::new(space, &format!("{name}.conv2"), c_out, c_out, 3, 1.0);
        let norm2 = GroupNorm::new(space, &format!("{name}.norm2"), c_out, arch.groups);
        let skip = (c_in != c_out).then(|| Conv2d::new(space, &format!("{name}.skip"), c_in, c_out, 1, 1.0));
        Self { conv1, norm1, inject, film, conv2, norm2, skip, c_out }
    }

    fn forward(&self, p: &[f64], x: &Tensor, inject: Option<&Tensor>, cvec: &[f64]) -> (Tensor, ResBlockCache) {
        let (h1, conv1) = self.conv1.forward(p, x);
        let (mut g1, norm1) = self.norm1.forward(p, &h1);
        let inject_cache = match (&self.inject, inject) {
            (Some(layer), Some(z)) => {
                let (proj, cache) = layer.forward(p, z);
                g1.add_assign(&proj);
                Some(cache)
            }
            (None, None) => None,
            _ => panic!("injection input does not match the block layout"),
        };
        let film = self.film.forward(p, cvec);
        let (scale, shift) = film.split_at(self.c_out);
        let plane = g1.plane();
        let mut pre_act1 = g1.clone();
        for c in 0..self.c_out {
            for v in &mut pre_act1.data_mut()[c * plane..(c + 1) * plane] {
                *v = *v * (1.0 + scale[c]) + shift[c];
            }
        }
        let a1 = silu_tensor(&pre_act1);
        let (h2, conv2) = self.conv2.forward(p, &a1);
        let (pre_act2, norm2) = self.norm2.forward(p, &h2);
        let mut out = silu_tensor(&pre_act2);
        let skip = match &self.skip {
            Some(layer) => {
                let (s, cache) = layer.forward(p, x);
                out.add_assign(&s);
                Some(cache)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        let cache = ResBlockCache {
            conv1,
            norm1,
            inject: inject_cache,
            modulated_in: g1,
            scale: scale.to_vec(),
            pre_act1,
            conv2,
            norm2,
            pre_act2,
            skip,
        };
        (out, cache)
    }

    /// Returns the input gradient and adds into `d_cvec`.
    fn backward(&self, p: &[f64], cache: &ResBlockCache, d_out: &Tensor, cvec: &[f64], grads: &mut [f64], d_cvec: &mut [f64]) -> Tensor {
        let d_pre2 = silu_backward(&cache.pre_act2, d_out);
        let d_h2 = self.norm2.backward(p, &cache.norm2, &d_pre2, grads);
        let d_a1 = self.conv2.backward(p, &cache.conv2, &d_h2, grads, true).unwrap();
        let d_pre1 = silu_backward(&cache.pre_act1, &d_a1);
        let plane = d_pre1.plane();
        let mut d_film = vec![0.0; 2 * self.c_out];
        let mut d_g1 = d_pre1.clone();
        for c in 0..self.c_out {
            let range = c * plane..(c + 1) * plane;
            let dy = &d_pre1.data()[range.clone()];
            let g = &cache.modulated_in.data()[range.clone()];
            d_film[c] = dy.iter().zip(g).map(|(a, b)| a * b).sum();
            d_film[self.c_out + c] = dy.iter().sum();
            for v in &mut d_g1.data_mut()[range] {
                *v *= 1.0 + cache.scale[c];
            }
        }
        let dc = self.film.backward(p, cvec, &d_film, grads);
        for (a, b) in d_cvec.iter_mut().zip(&dc) {
            *a += b;
        }
        if let (Some(layer), Some(ic)) = (&self.inject, &cache.inject) {
            layer.backward(p, ic, &d_g1, grads, false);
        }
        let d_h1 = self.norm1.backward(p, &cache.norm1, &d_g1, grads);
        let mut d_x = self.conv1.backward(p, &cache.conv1, &d_h1, grads, true).unwrap();
        match (&self.skip, &cache.skip) {
            (Some(layer), Some(sc)) => d_x.add_assign(&layer.backward(p, sc, d_out, grads, true).unwrap()),
            _ => d_x.add_assign(d_out),
        }
        d_x
    }
}

/// Single-head attention from image positions to the level-0 tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenAttention {
    query: Conv2d,
    key: Linear,
    value: Linear,
    out: Conv2d,
    dim: usize,
}

struct AttentionCache {
    query: ConvCache,
    q: Tensor,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    weights: Vec<f64>,
    out: ConvCache,
}

impl TokenAttention {
    fn new(space: &mut ParamSpace, channels: usize, arch: &ArchSpec) -> Self {
        let a = arch.attention_dim;
        Self {
            query: Conv2d::new(space, "attn.query", channels, a, 1, 1.0),
            key: Linear::new(space, "attn.key", arch.embed_dim, a, 1.0),
            value: Linear::new(space, "attn.value", arch.embed_dim, a, 1.0),
            out: Conv2d::new(space, "attn.out", a, channels, 1, 1.0),
            dim: a,
        }
    }

    fn forward(&self, p: &[f64], h: &Tensor, tokens: &[Vec<f64>]) -> (Tensor, AttentionCache) {
        let (q, query) = self.query.forward(p, h);
        let keys: Vec<Vec<f64>> = tokens.iter().map(|t| self.key.forward(p, t)).collect();
        let values: Vec<Vec<f64>> = tokens.iter().map(|t| self.value.forward(p, t)).collect();
        let plane = h.plane();
        let n = tokens.len();
        let inv_sqrt = 1.0 / (self.dim as f64).sqrt();
        let mut weights = vec![0.0; plane * n];
        let mut mixed = Tensor::zeros(self.dim, h.height(), h.width());
        for pos in 0..plane {
            let w = &mut weights[pos * n..(pos + 1) * n];
            for (j, k) in keys.iter().enumerate() {
                w[j] = (0..self.dim).map(|a| q.data()[a * plane + pos] * k[a]).sum::<f64>() * inv_sqrt;
            }
            let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in w.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in w.iter_mut() {
                *v /= total;
            }
            for a in 0..self.dim {
                mixed.data_mut()[a * plane + pos] = w.iter().zip(&values).map(|(wj, v)| wj * v[a]).sum();
            }
        }
        let (o, out) = self.out.forward(p, &mixed);
        let mut result = h.clone();
        result.add_assign(&o);
        (result, AttentionCache { query, q, keys, values, weights, out })
    }

    fn backward(&self, p: &[f64], cache: &AttentionCache, tokens: &[Vec<f64>], d_out: &Tensor, grads: &mut [f64]) -> Tensor {
        let d_mixed = self.out.backward(p, &cache.out, d_out, grads, true).unwrap();
        let plane = d_out.plane();
        let n = tokens.len();
        let inv_sqrt = 1.0 / (self.dim as f64).sqrt();
        let mut d_q = Tensor::zeros(self.dim, d_out.height(), d_out.width());
        let mut d_keys = vec![vec![0.0; self.dim]; n];
        let mut d_values = vec![vec![0.0; self.dim]; n];
        let mut d_w = vec![0.0; n];
        for pos in 0..plane {
            let w = &cache.weights[pos * n..(pos + 1) * n];
            for j in 0..n {
                d_w[j] = (0..self.dim).map(|a| d_mixed.data()[a * plane + pos] * cache.values[j][a]).sum();
                for a in 0..self.dim {
                    d_values[j][a] += w[j] * d_mixed.data()[a * plane + pos];
                }
            }
            let dot: f64 = w.iter().zip(&d_w).map(|(a, b)| a * b).sum();
            for j in 0..n {
                let d_score = w[j] * (d_w[j] - dot) * inv_sqrt;
                for a in 0..self.dim {
                    d_q.data_mut()[a * plane + pos] += d_score * cache.keys[j][a];
                    d_keys[j][a] += d_score * cache.q.data()[a * plane + pos];
                }
            }
        }
        for (j, t) in tokens.iter().enumerate() {
            self.key.backward(p, t, &d_keys[j], grads);
            self.value.backward(p, t, &d_values[j], grads);
        }
        let mut d_h = self.query.backward(p, &cache.query, &d_q, grads, true).unwrap();
        d_h.add_assign(d_out);
        d_h
    }
}

/// The denoiser's structure. Parameters live outside, in a flat vector laid
/// out by [`Denoiser::param_space`].
#[derive(Debug, Clone)]
pub struct Denoiser {
    arch: ArchSpec,
    space: ParamSpace,
    cond: Linear,
    stem: Conv2d,
    blocks: [ResBlock; 6],
    attention: Option<TokenAttention>,
    head: Conv2d,
}

pub struct ForwardCache {
    cond_in: Vec<f64>,
    cond_pre: Vec<f64>,
    cvec: Vec<f64>,
    stem: ConvCache,
    blocks: Vec<ResBlockCache>,
    attention: Option<AttentionCache>,
    head: ConvCache,
    /// Channel counts at the two concatenations, for splitting gradients.
    concat_splits: [usize; 2],
}

impl Denoiser {
    pub fn new(arch: ArchSpec) -> Result<Self> {
        arch.validate()?;
        let mut space = ParamSpace::default();
        let [c0, c1, c2] = arch.channels;
        let d = arch.embed_dim;
        let coarse = (arch.canvas_exponent > 2).then(|| arch.coarse_channels());
        let cond = Linear::new(&mut space, "cond", arch.time_dim + d, arch.cond_dim, 1.0);
        let stem = Conv2d::new(&mut space, "stem", arch.image_channels, c0, 3, 1.0);
        let blocks = [
            ResBlock::new(&mut space, "enc0", c0, c0, Some(d), &arch),
            ResBlock::new(&mut space, "enc1", c0, c1, Some(d), &arch),
            ResBlock::new(&mut space, "mid0", c1, c2, coarse, &arch),
            ResBlock::new(&mut space, "mid1", c2, c2, coarse, &arch),
            ResBlock::new(&mut space, "dec1", c2 + c1, c1, Some(d), &arch),
            ResBlock::new(&mut space, "dec0", c1 + c0, c0, Some(d), &arch),
        ];
        let attention = arch.attention.then(|| TokenAttention::new(&mut space, c2, &arch));
        // Zero-initialized output layer: an untrained network predicts zero
        // noise regardless of its conditioning.
        let head = Conv2d::new(&mut space, "head", c0, arch.image_channels, 3, 0.0);
        Ok(Self { arch, space, cond, stem, blocks, attention, head })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn param_space(&self) -> &ParamSpace {
        &self.space
    }

    pub fn num_params(&self) -> usize {
        self.space.len()
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        self.space.initialize(&mut rng)
    }

    /// Like [`Self::init_params`] but with every parameter (including the
    /// zero-initialized output layer) randomized, for gradient checks.
    pub fn random_params(&self, seed: u64, scale: f64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = self.space.initialize(&mut rng);
        for v in &mut p {
            *v += scale * rng.gen_range(-1.0..1.0);
        }
        p
    }

    pub fn conditioning(&self, pyramid: &TextFeaturePyramid) -> Result<Conditioning> {
        Conditioning::from_pyramid(pyramid, &self.arch)
    }

    fn check_input(&self, params: &[f64], x: &Tensor) {
        assert_eq!(params.len(), self.num_params(), "parameter vector length");
        let s = self.arch.side();
        assert_eq!((x.channels(), x.height(), x.width()), (self.arch.image_channels, s, s), "denoiser input shape");
    }

    /// `ε_θ(x_t, z, t)`.
    pub fn predict(&self, params: &[f64], x: &Tensor, t: f64, cond: &Conditioning) -> Tensor {
        self.forward(params, x, t, cond).0
    }

    pub fn forward(&self, params: &[f64], x: &Tensor, t: f64, cond: &Conditioning) -> (Tensor, ForwardCache) {
        self.check_input(params, x);
        let p = params;
        let time = timestep_features(t, self.arch.time_dim, self.arch.diffusion_steps);
        let mut cond_in = time;
        cond_in.extend_from_slice(&cond.pooled);
        let cond_pre = self.cond.forward(p, &cond_in);
        let cvec: Vec<f64> = cond_pre.iter().map(|&v| silu(v)).collect();

        let (h, stem) = self.stem.forward(p, x);
        let coarse = cond.coarse.as_ref();
        let (b0, k0) = self.blocks[0].forward(p, &h, Some(&cond.fine), &cvec);
        let (b1, k1) = self.blocks[1].forward(p, &avg_pool2(&b0), Some(&cond.mid), &cvec);
        let (b2, k2) = self.blocks[2].forward(p, &avg_pool2(&b1), coarse, &cvec);
        let (a2, attention) = match &self.attention {
            Some(att) => {
                let (a, c) = att.forward(p, &b2, &cond.tokens);
                (a, Some(c))
            }
            None => (b2, None),
        };
        let (b3, k3) = self.blocks[3].forward(p, &a2, coarse, &cvec);
        let up3 = upsample(&b3, 2);
        let split4 = up3.channels();
        let (b4, k4) = self.blocks[4].forward(p, &up3.concat(&b1), Some(&cond.mid), &cvec);
        let up4 = upsample(&b4, 2);
        let split5 = up4.channels();
        let (b5, k5) = self.blocks[5].forward(p, &up4.concat(&b0), Some(&cond.fine), &cvec);
        let (y, head) = self.head.forward(p, &b5);
        let cache = ForwardCache {
            cond_in,
            cond_pre,
            cvec,
            stem,
            blocks: vec![k0, k1, k2, k3, k4, k5],
            attention,
            head,
            concat_splits: [split4, split5],
        };
        (y, cache)
    }

    /// Accumulates `∂loss/∂θ` into `grads` given `d_out = ∂loss/∂ε_θ`.
    pub fn backward(&self, params: &[f64], cache: &ForwardCache, cond: &Conditioning, d_out: &Tensor, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.num_params());
        let p = params;
        let cvec = &cache.cvec;
        let mut d_cvec = vec![0.0; cvec.len()];
        let k = &cache.blocks;

        let d_b5 = self.head.backward(p, &cache.head, d_out, grads, true).unwrap();
        let d_c5 = self.blocks[5].backward(p, &k[5], &d_b5, cvec, grads, &mut d_cvec);
        let (d_up4, mut d_b0) = d_c5.split(cache.concat_splits[1]);
        let d_b4 = upsample_backward(&d_up4, 2);
        let d_c4 = self.blocks[4].backward(p, &k[4], &d_b4, cvec, grads, &mut d_cvec);
        let (d_up3, mut d_b1) = d_c4.split(cache.concat_splits[0]);
        let d_b3 = upsample_backward(&d_up3, 2);
        let d_a2 = self.blocks[3].backward(p, &k[3], &d_b3, cvec, grads, &mut d_cvec);
        let d_b2 = match (&self.attention, &cache.attention) {
            (Some(att), Some(ac)) => att.backward(p, ac, &cond.tokens, &d_a2, grads),
            _ => d_a2,
        };
        let d_p1 = self.blocks[2].backward(p, &k[2], &d_b2, cvec, grads, &mut d_cvec);
        d_b1.add_assign(&avg_pool2_backward(&d_p1));
        let d_p0 = self.blocks[1].backward(p, &k[1], &d_b1, cvec, grads, &mut d_cvec);
        d_b0.add_assign(&avg_pool2_backward(&d_p0));
        let d_h = self.blocks[0].backward(p, &k[0], &d_b0, cvec, grads, &mut d_cvec);
        self.stem.backward(p, &cache.stem, &d_h, grads, false);

        let d_pre: Vec<f64> = cache.cond_pre.iter().zip(&d_cvec).map(|(&x, &g)| g * silu_grad(x)).collect();
        self.cond.backward(p, &cache.cond_in, &d_pre, grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{EmbeddingProvider, ToyProvider};
    use crate::layout::{BinaryMask, Layout, Region};

    #[test]
    fn toy_network_size_is_reported() {
        let net = Denoiser::new(ArchSpec::toy(5, 16, 1000)).unwrap();
        let n = net.num_params();
        assert!(n > 10_000 && n < 200_000, "{n}");
        let names: Vec<&str> = net.param_space().entries().map(|(n, _)| n).collect();
        assert!(names.contains(&"enc0.inject.weight"));
        assert!(names.contains(&"attn.key.weight"));
    }

    #[test]
    fn untrained_network_predicts_zero() {
        let arch = ArchSpec::toy(3, 4, 100);
        let net = Denoiser::new(arch).unwrap();
        let p = ToyProvider::new(&["a"], 4, 0).unwrap();
        let pyr = TextFeaturePyramid::empty(3, p.null_embedding());
        let cond = net.conditioning(&pyr).unwrap();
        let x = Tensor::from_vec(3, 8, 8, (0..192).map(|k| (k as f64 * 0.37).sin()).collect());
        let y = net.predict(&net.init_params(0), &x, 50.0, &cond);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_conditioning_sensitive() {
        let arch = ArchSpec::toy(3, 4, 100);
        let net = Denoiser::new(arch).unwrap();
        let params = net.random_params(1, 0.1);
        let p = ToyProvider::new(&["a", "b"], 4, 0).unwrap();
        let l1 = Layout::new(3, vec![Region::new(BinaryMask::rect(8, 0, 0, 4, 8), "a", 3)]);
        let l2 = Layout::new(3, vec![Region::new(BinaryMask::rect(8, 4, 0, 8, 8), "a", 3)]);
        let c1 = net.conditioning(&crate::features::build_feature_pyramid(&l1, &p).unwrap()).unwrap();
        let c2 = net.conditioning(&crate::features::build_feature_pyramid(&l2, &p).unwrap()).unwrap();
        let x = Tensor::from_vec(3, 8, 8, (0..192).map(|k| (k as f64 * 0.11).cos()).collect());
        let y1 = net.predict(&params, &x, 10.0, &c1);
        assert_eq!(y1, net.predict(&params, &x, 10.0, &c1));
        assert_ne!(y1, net.predict(&params, &x, 10.0, &c2));
    }

    #[test]
    fn minimal_canvas_has_no_coarse_injection() {
        let mut arch = ArchSpec::toy(2, 4, 10);
        arch.channels = [4, 4, 4];
        let net = Denoiser::new(arch).unwrap();
        let p = ToyProvider::new(&["a"], 4, 0).unwrap();
        let cond = net.conditioning(&TextFeaturePyramid::empty(2, p.null_embedding())).unwrap();
        assert!(cond.coarse.is_none());
        let x = Tensor::zeros(3, 4, 4);
        assert_eq!(net.predict(&net.random_params(0, 0.1), &x, 1.0, &cond).len(), 48);
    }
}
