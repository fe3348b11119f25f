//! Timestep-conditioned noise predictor `ε_θ(x_t, t)`.
//!
//! A small convolutional encoder-decoder: per level two 3×3 convolutions
//! with SiLU, 2× average pooling between levels, nearest upsampling with
//! skip concatenation on the way back, a sinusoidal timestep embedding
//! projected to a per-channel bias at every block, and a global-average
//! context vector injected at the bottleneck. Forward and backward passes
//! are hand-written and run per image.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, matmul_ab, matmul_abt, matmul_atb};
use crate::parallel;
use crate::scalar::Scalar;
use crate::volume::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub channels: usize,
    /// Feature channels at full resolution; doubled at each coarser level.
    pub base_width: usize,
    /// Number of resolution levels (1 = no pooling).
    pub levels: usize,
    /// Width of the sinusoidal timestep embedding (even).
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            channels: 1,
            base_width: 16,
            levels: 2,
            time_dim: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_width == 0 || self.levels == 0 {
            return Err(Error::Config(format!(
                "denoiser needs nonzero sizes, got {self:?}"
            )));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_dim must be even and >= 2, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }

    /// Image sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Trait for anything that predicts the injected noise of a perturbed image.
pub trait NoisePredictor<F: Scalar>: Sync {
    fn channels(&self) -> usize;

    fn predict(&self, x_t: &Image<F>, t: usize) -> Result<Image<F>>;

    fn predict_batch(&self, xs: &[Image<F>], ts: &[usize]) -> Result<Vec<Image<F>>> {
        if xs.len() != ts.len() {
            return Err(Error::Shape("one timestep per image required".into()));
        }
        let idx: Vec<usize> = (0..xs.len()).collect();
        parallel::map(&idx, |&i| self.predict(&xs[i], ts[i]))
            .into_iter()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinSpec {
    pub fin: usize,
    pub fout: usize,
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub time: LinSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserLayout {
    pub encoder: Vec<BlockSpec>,
    /// `decoder[l]` produces level `l` (for `l < levels - 1`).
    pub decoder: Vec<BlockSpec>,
    pub global: LinSpec,
    pub out: ConvSpec,
    pub total: usize,
}

struct Alloc(usize);

impl Alloc {
    fn conv(&mut self, cin: usize, cout: usize) -> ConvSpec {
        let w = self.0;
        self.0 += cout * cin * 9;
        let b = self.0;
        self.0 += cout;
        ConvSpec { cin, cout, w, b }
    }

    fn lin(&mut self, fin: usize, fout: usize) -> LinSpec {
        let w = self.0;
        self.0 += fout * fin;
        let b = self.0;
        self.0 += fout;
        LinSpec { fin, fout, w, b }
    }
}

fn layout(cfg: &DenoiserConfig) -> DenoiserLayout {
    let mut a = Alloc(0);
    let mut encoder = Vec::new();
    for l in 0..cfg.levels {
        let cin = if l == 0 {
            cfg.channels
        } else {
            cfg.width_at(l - 1)
        };
        let c = cfg.width_at(l);
        encoder.push(BlockSpec {
            conv1: a.conv(cin, c),
            conv2: a.conv(c, c),
            time: a.lin(cfg.time_dim, c),
        });
    }
    let deepest = cfg.width_at(cfg.levels - 1);
    let global = a.lin(deepest, deepest);
    let mut decoder = Vec::new();
    for l in 0..cfg.levels - 1 {
        let c = cfg.width_at(l);
        decoder.push(BlockSpec {
            conv1: a.conv(cfg.width_at(l + 1) + c, c),
            conv2: a.conv(c, c),
            time: a.lin(cfg.time_dim, c),
        });
    }
    let out = a.conv(cfg.width_at(0), cfg.channels);
    DenoiserLayout {
        encoder,
        decoder,
        global,
        out,
        total: a.0,
    }
}

/// Sinusoidal features of a timestep.
pub fn time_embedding<F: Scalar>(t: usize, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let mut out = vec![F::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (t as f64 * freq).sin_cos();
        out[i] = F::of(s);
        out[half + i] = F::of(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<F> {
    pub config: DenoiserConfig,
    pub layout: DenoiserLayout,
    pub params: Vec<F>,
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[inline]
fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

#[inline]
fn silu_grad<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

fn im2col<F: Scalar>(x: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let hw = h * w;
    let mut cols = vec![F::zero(); c * 9 * hw];
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row =
                    &mut cols[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    for xx in x0..x1 {
                        row[y * w + xx] = src[sy * w + xx + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(cols: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let hw = h * w;
    let mut x = vec![F::zero(); c * hw];
    for ci in 0..c {
        let dst = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    for xx in x0..x1 {
                        dst[sy * w + xx + kx - 1] += row[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

fn avg_pool<F: Scalar>(x: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let (h2, w2) = (h / 2, w / 2);
    let q = F::of(0.25);
    let mut out = vec![F::zero(); c * h2 * w2];
    for ci in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                let b = ci * h * w + 2 * y * w + 2 * xx;
                out[(ci * h2 + y) * w2 + xx] = q * (x[b] + x[b + 1] + x[b + w] + x[b + w + 1]);
            }
        }
    }
    out
}

fn avg_pool_back<F: Scalar>(g: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let (h2, w2) = (h / 2, w / 2);
    let q = F::of(0.25);
    let mut out = vec![F::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                let v = q * g[(ci * h2 + y) * w2 + xx];
                let b = ci * h * w + 2 * y * w + 2 * xx;
                out[b] = v;
                out[b + 1] = v;
                out[b + w] = v;
                out[b + w + 1] = v;
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling of a `(c, h, w)` map.
fn upsample<F: Scalar>(x: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); c * h2 * w2];
    for ci in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(ci * h2 + y) * w2 + xx] = x[(ci * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

fn upsample_back<F: Scalar>(g: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(ci * h + y / 2) * w + xx / 2] += g[(ci * h2 + y) * w2 + xx];
            }
        }
    }
    out
}

struct ConvCache<F> {
    cols: Vec<F>,
}

struct BlockCache<F> {
    conv1: ConvCache<F>,
    pre1: Vec<F>,
    conv2: ConvCache<F>,
    pre2: Vec<F>,
    h: usize,
    w: usize,
}

struct ImageCache<F> {
    temb: Vec<F>,
    encoder: Vec<BlockCache<F>>,
    global_mean: Vec<F>,
    /// In execution order (deepest decoder level first).
    decoder: Vec<BlockCache<F>>,
    out_conv: ConvCache<F>,
    h: usize,
    w: usize,
}

impl<F: Scalar> Denoiser<F> {
    pub fn new(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = layout(config);
        let mut params = vec![F::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init_conv = |p: &mut Vec<F>, s: &ConvSpec, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / ((s.cin * 9) as f64).sqrt();
            nn::fill_uniform(rng, &mut p[s.w..s.w + s.cout * s.cin * 9], bound);
            nn::fill_uniform(rng, &mut p[s.b..s.b + s.cout], bound);
        };
        let init_lin = |p: &mut Vec<F>, s: &LinSpec, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (s.fin as f64).sqrt();
            nn::fill_uniform(rng, &mut p[s.w..s.w + s.fout * s.fin], bound);
            nn::fill_uniform(rng, &mut p[s.b..s.b + s.fout], bound);
        };
        for b in layout.encoder.iter().chain(&layout.decoder) {
            init_conv(&mut params, &b.conv1, &mut rng);
            init_conv(&mut params, &b.conv2, &mut rng);
            init_lin(&mut params, &b.time, &mut rng);
        }
        init_lin(&mut params, &layout.global, &mut rng);
        // output convolution starts at zero: the untrained model predicts no noise
        Ok(Denoiser {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub fn from_params(config: &DenoiserConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = layout(config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "denoiser expects {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Denoiser {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn check_input(&self, x: &Image<F>) -> Result<()> {
        let m = self.config.size_multiple();
        if x.channels != self.config.channels {
            return Err(Error::Shape(format!(
                "denoiser has {} channels, image has {}",
                self.config.channels, x.channels
            )));
        }
        if x.rows == 0 || x.cols == 0 || !x.rows.is_multiple_of(m) || !x.cols.is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "image {}x{} must have sides divisible by {m}",
                x.rows, x.cols
            )));
        }
        Ok(())
    }

    fn conv_forward(&self, s: &ConvSpec, x: &[F], h: usize, w: usize) -> (Vec<F>, ConvCache<F>) {
        let hw = h * w;
        let cols = im2col(x, s.cin, h, w);
        let mut out = vec![F::zero(); s.cout * hw];
        for (co, row) in out.chunks_exact_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v = self.params[s.b + co]);
        }
        let wts = &self.params[s.w..s.w + s.cout * s.cin * 9];
        matmul_ab(wts, &cols, &mut out, s.cout, s.cin * 9, hw, F::one());
        (out, ConvCache { cols })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn conv_backward(
        &self,
        s: &ConvSpec,
        cache: &ConvCache<F>,
        g: &[F],
        h: usize,
        w: usize,
        grad: &mut [F],
        need_input: bool,
    ) -> Vec<F> {
        let hw = h * w;
        let k = s.cin * 9;
        matmul_abt(
            g,
            &cache.cols,
            &mut grad[s.w..s.w + s.cout * k],
            s.cout,
            hw,
            k,
            F::one(),
        );
        for co in 0..s.cout {
            grad[s.b + co] += g[co * hw..(co + 1) * hw].iter().copied().sum::<F>();
        }
        if !need_input {
            return Vec::new();
        }
        let wts = &self.params[s.w..s.w + s.cout * k];
        let mut dcols = vec![F::zero(); k * hw];
        matmul_atb(wts, g, &mut dcols, s.cout, k, hw, F::zero());
        col2im(&dcols, s.cin, h, w)
    }

    fn linear(&self, s: &LinSpec, x: &[F]) -> Vec<F> {
        (0..s.fout)
            .map(|o| {
                let row = &self.params[s.w + o * s.fin..s.w + (o + 1) * s.fin];
                row.iter().zip(x).map(|(&a, &b)| a * b).sum::<F>() + self.params[s.b + o]
            })
            .collect()
    }

    fn block_forward(
        &self,
        b: &BlockSpec,
        x: &[F],
        h: usize,
        w: usize,
        temb: &[F],
    ) -> (Vec<F>, BlockCache<F>) {
        let hw = h * w;
        let (mut pre1, conv1) = self.conv_forward(&b.conv1, x, h, w);
        let tb = self.linear(&b.time, temb);
        for (c, row) in pre1.chunks_exact_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v += tb[c]);
        }
        let a1: Vec<F> = pre1.iter().map(|&v| silu(v)).collect();
        let (pre2, conv2) = self.conv_forward(&b.conv2, &a1, h, w);
        let out = pre2.iter().map(|&v| silu(v)).collect();
        (
            out,
            BlockCache {
                conv1,
                pre1,
                conv2,
                pre2,
                h,
                w,
            },
        )
    }

    fn block_backward(
        &self,
        b: &BlockSpec,
        c: &BlockCache<F>,
        g: &[F],
        temb: &[F],
        grad: &mut [F],
        need_input: bool,
    ) -> Vec<F> {
        let hw = c.h * c.w;
        let g2: Vec<F> = g
            .iter()
            .zip(&c.pre2)
            .map(|(&gv, &p)| gv * silu_grad(p))
            .collect();
        let ga1 = self.conv_backward(&b.conv2, &c.conv2, &g2, c.h, c.w, grad, true);
        let g1: Vec<F> = ga1
            .iter()
            .zip(&c.pre1)
            .map(|(&gv, &p)| gv * silu_grad(p))
            .collect();
        for co in 0..b.time.fout {
            let gc: F = g1[co * hw..(co + 1) * hw].iter().copied().sum();
            grad[b.time.b + co] += gc;
            let row = &mut grad[b.time.w + co * b.time.fin..b.time.w + (co + 1) * b.time.fin];
            for (r, &e) in row.iter_mut().zip(temb) {
                *r += gc * e;
            }
        }
        self.conv_backward(&b.conv1, &c.conv1, &g1, c.h, c.w, grad, need_input)
    }

    fn forward_image(&self, x: &Image<F>, t: usize, keep: bool) -> (Vec<F>, Option<ImageCache<F>>) {
        let cfg = &self.config;
        let levels = cfg.levels;
        let temb = time_embedding::<F>(t, cfg.time_dim);
        let (mut h, mut w) = (x.rows, x.cols);
        let mut skips: Vec<Vec<F>> = Vec::with_capacity(levels);
        let mut enc_caches = Vec::new();
        let mut cur = x.data.clone();
        for l in 0..levels {
            if l > 0 {
                cur = avg_pool(&cur, cfg.width_at(l - 1), h, w);
                h /= 2;
                w /= 2;
            }
            let (out, cache) = self.block_forward(&self.layout.encoder[l], &cur, h, w, &temb);
            if keep {
                enc_caches.push(cache);
            }
            skips.push(out.clone());
            cur = out;
        }
        // global context at the bottleneck
        let deepest = cfg.width_at(levels - 1);
        let hw = h * w;
        let inv = F::one() / F::of(hw as f64);
        let mean: Vec<F> = (0..deepest)
            .map(|c| cur[c * hw..(c + 1) * hw].iter().copied().sum::<F>() * inv)
            .collect();
        let gvec = self.linear(&self.layout.global, &mean);
        for (c, row) in cur.chunks_exact_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v += gvec[c]);
        }
        let mut dec_caches = Vec::new();
        for l in (0..levels - 1).rev() {
            let up = upsample(&cur, cfg.width_at(l + 1), h, w);
            h *= 2;
            w *= 2;
            let mut cat = up;
            cat.extend_from_slice(&skips[l]);
            let (out, cache) = self.block_forward(&self.layout.decoder[l], &cat, h, w, &temb);
            if keep {
                dec_caches.push(cache);
            }
            cur = out;
        }
        let (out, out_conv) = self.conv_forward(&self.layout.out, &cur, h, w);
        let cache = keep.then_some(ImageCache {
            temb,
            encoder: enc_caches,
            global_mean: mean,
            decoder: dec_caches,
            out_conv,
            h,
            w,
        });
        (out, cache)
    }

    fn backward_image(&self, c: &ImageCache<F>, d_out: &[F], grad: &mut [F]) {
        let cfg = &self.config;
        let levels = cfg.levels;
        let (mut h, mut w) = (c.h, c.w);
        let mut g = self.conv_backward(&self.layout.out, &c.out_conv, d_out, h, w, grad, true);
        // gradient flowing into each encoder output via skips
        let mut skip_grads: Vec<Option<Vec<F>>> = vec![None; levels];
        for (i, l) in (0..levels - 1).rev().enumerate() {
            let cache = &c.decoder[i];
            let gcat = self.block_backward(&self.layout.decoder[l], cache, &g, &c.temb, grad, true);
            let up_ch = cfg.width_at(l + 1);
            let split = up_ch * h * w;
            skip_grads[l] = Some(gcat[split..].to_vec());
            h /= 2;
            w /= 2;
            g = upsample_back(&gcat[..split], up_ch, h, w);
        }
        // global context: cur = enc_out + W·mean(enc_out) + b
        let deepest = cfg.width_at(levels - 1);
        let hw = h * w;
        let gl = &self.layout.global;
        let gsum: Vec<F> = (0..deepest)
            .map(|ch| g[ch * hw..(ch + 1) * hw].iter().copied().sum())
            .collect();
        let mut dmean = vec![F::zero(); deepest];
        for o in 0..deepest {
            grad[gl.b + o] += gsum[o];
            for i in 0..deepest {
                grad[gl.w + o * deepest + i] += gsum[o] * c.global_mean[i];
                dmean[i] += gsum[o] * self.params[gl.w + o * deepest + i];
            }
        }
        let inv = F::one() / F::of(hw as f64);
        for (ch, row) in g.chunks_exact_mut(hw).enumerate() {
            let add = dmean[ch] * inv;
            row.iter_mut().for_each(|v| *v += add);
        }
        for l in (0..levels).rev() {
            if let Some(sg) = &skip_grads[l] {
                nn::add_into(&mut g, sg);
            }
            let cache = &c.encoder[l];
            let gin = self.block_backward(&self.layout.encoder[l], cache, &g, &c.temb, grad, l > 0);
            if l > 0 {
                g = avg_pool_back(&gin, cfg.width_at(l - 1), cache.h * 2, cache.w * 2);
            }
        }
    }

    /// Noise prediction together with the gradient of `Σ d_out ⊙ ε_θ`
    /// with respect to the parameters, for one image.
    pub fn forward_backward(
        &self,
        x: &Image<F>,
        t: usize,
        d_out: impl FnOnce(&[F]) -> Vec<F>,
    ) -> Result<(Vec<F>, Vec<F>)> {
        self.check_input(x)?;
        let (out, cache) = self.forward_image(x, t, true);
        let g = d_out(&out);
        let mut grad = vec![F::zero(); self.params.len()];
        self.backward_image(&cache.expect("cache kept"), &g, &mut grad);
        Ok((out, grad))
    }
}

impl<F: Scalar> NoisePredictor<F> for Denoiser<F> {
    fn channels(&self) -> usize {
        self.config.channels
    }

    fn predict(&self, x_t: &Image<F>, t: usize) -> Result<Image<F>> {
        self.check_input(x_t)?;
        let (out, _) = self.forward_image(x_t, t, false);
        Image::from_vec(x_t.channels, x_t.rows, x_t.cols, out)
    }
}
