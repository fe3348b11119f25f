//! Coordinate network `f_φ`: a fixed Gaussian Fourier feature embedding
//! followed by a sine-activated MLP with a linear multi-channel head.
//!
//! Forward and backward passes are hand-written over row-major batches.
//! Batches are cut into fixed-size chunks that are processed independently,
//! so a coordinate's output never depends on what else is in the batch.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::nn::{self, matmul_ab, matmul_abt, matmul_atb};
use crate::parallel;
use crate::scalar::Scalar;
use crate::volume::{expand_slice, Image, SlicePlan};

/// Rows per independently processed chunk.
pub const CHUNK_ROWS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InrConfig {
    /// Number of Fourier frequencies `m`; the embedding is `2m` wide.
    pub fourier_features: usize,
    /// Standard deviation of the Gaussian frequency matrix.
    pub fourier_sigma: f64,
    pub width: usize,
    /// Number of sine layers.
    pub depth: usize,
    pub channels: usize,
    pub omega_first: f64,
    pub omega_hidden: f64,
}

impl Default for InrConfig {
    fn default() -> Self {
        Self::desk(1)
    }
}

impl InrConfig {
    /// Small configuration that trains in minutes on a CPU.
    pub fn desk(channels: usize) -> Self {
        InrConfig {
            fourier_features: 128,
            fourier_sigma: 1.0,
            width: 128,
            depth: 4,
            channels,
            omega_first: 30.0,
            omega_hidden: 1.0,
        }
    }

    /// Full-size configuration: width 768, depth 8, 256 features with σ = 16.
    pub fn full(channels: usize) -> Self {
        InrConfig {
            fourier_features: 256,
            fourier_sigma: 16.0,
            width: 768,
            depth: 8,
            channels,
            omega_first: 30.0,
            omega_hidden: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fourier_features == 0 || self.width == 0 || self.depth == 0 || self.channels == 0 {
            return Err(Error::Config(format!(
                "coordinate network needs nonzero widths, got {self:?}"
            )));
        }
        if !(self.fourier_sigma > 0.0 && self.omega_first > 0.0 && self.omega_hidden > 0.0) {
            return Err(Error::Config(
                "fourier sigma and omegas must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed random projection `γ(c) = [sin(2πBc), cos(2πBc)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierEmbedding<F> {
    /// `m × 3`, row-major.
    pub matrix: Vec<F>,
    pub features: usize,
    pub sigma: f64,
}

impl<F: Scalar> FourierEmbedding<F> {
    pub fn sample(features: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        let matrix = (0..features * 3)
            .map(|_| F::of(normal.sample(rng)))
            .collect();
        Ok(FourierEmbedding {
            matrix,
            features,
            sigma,
        })
    }

    pub fn from_matrix(matrix: Vec<F>, sigma: f64) -> Result<Self> {
        if matrix.is_empty() || !matrix.len().is_multiple_of(3) {
            return Err(Error::Shape(format!(
                "embedding matrix length {} is not m x 3",
                matrix.len()
            )));
        }
        Ok(FourierEmbedding {
            features: matrix.len() / 3,
            matrix,
            sigma,
        })
    }

    pub fn width(&self) -> usize {
        2 * self.features
    }

    /// Embed one coordinate into `out` (`2m` values: sines then cosines).
    pub fn embed_into(&self, c: &[f64; 3], out: &mut [F]) {
        let m = self.features;
        let two_pi = F::of(2.0 * PI);
        let c = [F::of(c[0]), F::of(c[1]), F::of(c[2])];
        for k in 0..m {
            let b = &self.matrix[3 * k..3 * k + 3];
            let phase = two_pi * (b[0] * c[0] + b[1] * c[1] + b[2] * c[2]);
            let (s, co) = phase.sin_cos();
            out[k] = s;
            out[m + k] = co;
        }
    }

    pub fn embed(&self, c: &[f64; 3]) -> Vec<F> {
        let mut out = vec![F::zero(); self.width()];
        self.embed_into(c, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
    /// Sine frequency for hidden layers; `None` for the linear head.
    pub omega: Option<f64>,
}

fn layer_layout(cfg: &InrConfig) -> (Vec<LayerSpec>, usize) {
    let mut layers = Vec::with_capacity(cfg.depth + 1);
    let mut off = 0;
    let mut fan_in = 2 * cfg.fourier_features;
    for l in 0..=cfg.depth {
        let last = l == cfg.depth;
        let fan_out = if last { cfg.channels } else { cfg.width };
        let omega = if last {
            None
        } else if l == 0 {
            Some(cfg.omega_first)
        } else {
            Some(cfg.omega_hidden)
        };
        layers.push(LayerSpec {
            fan_in,
            fan_out,
            weight_offset: off,
            bias_offset: off + fan_in * fan_out,
            omega,
        });
        off += fan_in * fan_out + fan_out;
        fan_in = fan_out;
    }
    (layers, off)
}

/// The continuous representation: embedding plus trainable MLP parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct InrModel<F> {
    pub config: InrConfig,
    pub seed: u64,
    pub embedding: FourierEmbedding<F>,
    pub layers: Vec<LayerSpec>,
    /// All trainable weights and biases, flat, in layer order.
    pub params: Vec<F>,
}

/// Activations retained by a forward pass over one chunk.
pub struct ChunkCache<F> {
    rows: usize,
    /// Input to each layer (`inputs[0]` is the embedding).
    inputs: Vec<Vec<F>>,
    /// `ω cos(ω z)` for each sine layer.
    dact: Vec<Vec<F>>,
}

/// Cached forward pass over a whole batch.
pub struct ForwardPass<F> {
    /// `rows × channels`, row-major.
    pub output: Vec<F>,
    chunks: Vec<ChunkCache<F>>,
}

/// Initialize a model: every layer draws weights from
/// `U(±√(6/fan_in)/ω)` with its own `ω`; biases are small; the head starts
/// near mid-gray.
pub fn init_inr<F: Scalar>(config: &InrConfig, seed: u64) -> Result<InrModel<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedding =
        FourierEmbedding::sample(config.fourier_features, config.fourier_sigma, &mut rng)?;
    let (layers, n) = layer_layout(config);
    let mut params = vec![F::zero(); n];
    for l in &layers {
        let fan_in = l.fan_in as f64;
        let (w_bound, b_bound) = match l.omega {
            Some(omega) => ((6.0 / fan_in).sqrt() / omega, 1.0 / fan_in.sqrt() / omega),
            None => (0.1 * (6.0 / fan_in).sqrt() / config.omega_hidden, 0.0),
        };
        let w_end = l.weight_offset + l.fan_in * l.fan_out;
        nn::fill_uniform(&mut rng, &mut params[l.weight_offset..w_end], w_bound);
        let b = &mut params[l.bias_offset..l.bias_offset + l.fan_out];
        if l.omega.is_some() {
            nn::fill_uniform(&mut rng, b, b_bound);
        } else {
            b.iter_mut().for_each(|v| *v = F::of(0.5));
        }
    }
    Ok(InrModel {
        config: config.clone(),
        seed,
        embedding,
        layers,
        params,
    })
}

impl<F: Scalar> InrModel<F> {
    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn forward_chunk(&self, coords: &[[f64; 3]], keep: bool) -> (Vec<F>, Option<ChunkCache<F>>) {
        let rows = coords.len();
        let ew = self.embedding.width();
        let mut h = vec![F::zero(); rows * ew];
        for (r, c) in coords.iter().enumerate() {
            self.embedding.embed_into(c, &mut h[r * ew..(r + 1) * ew]);
        }
        let mut inputs = Vec::new();
        let mut dact = Vec::new();
        for l in &self.layers {
            let w = &self.params[l.weight_offset..l.weight_offset + l.fan_in * l.fan_out];
            let b = &self.params[l.bias_offset..l.bias_offset + l.fan_out];
            let mut z = vec![F::zero(); rows * l.fan_out];
            for row in z.chunks_exact_mut(l.fan_out) {
                row.copy_from_slice(b);
            }
            matmul_abt(&h, w, &mut z, rows, l.fan_in, l.fan_out, F::one());
            if let Some(omega) = l.omega {
                let omega = F::of(omega);
                let mut d = if keep {
                    vec![F::zero(); z.len()]
                } else {
                    Vec::new()
                };
                for (i, v) in z.iter_mut().enumerate() {
                    let (s, c) = (omega * *v).sin_cos();
                    *v = s;
                    if keep {
                        d[i] = omega * c;
                    }
                }
                if keep {
                    dact.push(d);
                }
            }
            let prev = std::mem::replace(&mut h, z);
            if keep {
                inputs.push(prev);
            }
        }
        let cache = keep.then_some(ChunkCache { rows, inputs, dact });
        (h, cache)
    }

    /// Evaluate the network at every coordinate; returns `rows × channels`.
    pub fn forward(&self, coords: &[[f64; 3]]) -> Vec<F> {
        let ranges = parallel::chunk_ranges(coords.len(), CHUNK_ROWS);
        let parts = parallel::map(&ranges, |r| self.forward_chunk(&coords[r.clone()], false).0);
        parts.concat()
    }

    /// Forward pass retaining what [`backward`](Self::backward) needs.
    pub fn forward_cached(&self, coords: &[[f64; 3]]) -> ForwardPass<F> {
        let ranges = parallel::chunk_ranges(coords.len(), CHUNK_ROWS);
        let parts = parallel::map(&ranges, |r| self.forward_chunk(&coords[r.clone()], true));
        let mut output = Vec::with_capacity(coords.len() * self.channels());
        let mut chunks = Vec::with_capacity(parts.len());
        for (o, c) in parts {
            output.extend_from_slice(&o);
            chunks.push(c.expect("cache kept"));
        }
        ForwardPass { output, chunks }
    }

    fn backward_chunk(&self, cache: &ChunkCache<F>, d_out: &[F]) -> Vec<F> {
        let rows = cache.rows;
        let mut grad = vec![F::zero(); self.params.len()];
        let mut g = d_out.to_vec();
        let mut sine_idx = cache.dact.len();
        for (li, l) in self.layers.iter().enumerate().rev() {
            if l.omega.is_some() {
                sine_idx -= 1;
                for (gv, &d) in g.iter_mut().zip(&cache.dact[sine_idx]) {
                    *gv *= d;
                }
            }
            let input = &cache.inputs[li];
            let w_range = l.weight_offset..l.weight_offset + l.fan_in * l.fan_out;
            // dW = gᵀ · input
            matmul_atb(
                &g,
                input,
                &mut grad[w_range.clone()],
                rows,
                l.fan_out,
                l.fan_in,
                F::zero(),
            );
            let gb = &mut grad[l.bias_offset..l.bias_offset + l.fan_out];
            for row in g.chunks_exact(l.fan_out) {
                nn::add_into(gb, row);
            }
            if li > 0 {
                let mut gin = vec![F::zero(); rows * l.fan_in];
                matmul_ab(
                    &g,
                    &self.params[w_range],
                    &mut gin,
                    rows,
                    l.fan_out,
                    l.fan_in,
                    F::zero(),
                );
                g = gin;
            }
        }
        grad
    }

    /// Gradient of `Σ d_out ⊙ output` with respect to `params`.
    pub fn backward(&self, pass: &ForwardPass<F>, d_out: &[F]) -> Vec<F> {
        let c = self.channels();
        let mut offsets = Vec::with_capacity(pass.chunks.len());
        let mut start = 0;
        for ch in &pass.chunks {
            offsets.push(start);
            start += ch.rows;
        }
        let idx: Vec<usize> = (0..pass.chunks.len()).collect();
        let parts = parallel::map(&idx, |&i| {
            let ch = &pass.chunks[i];
            let o = offsets[i] * c;
            self.backward_chunk(ch, &d_out[o..o + ch.rows * c])
        });
        let mut grad = vec![F::zero(); self.params.len()];
        for p in parts {
            nn::add_into(&mut grad, &p);
        }
        grad
    }

    /// Pre-activations `ω₀ (W γ(c) + b)` of the first sine layer.
    pub fn first_layer_preactivations(&self, coords: &[[f64; 3]]) -> Vec<F> {
        let l = self.layers[0];
        let ew = self.embedding.width();
        let mut emb = vec![F::zero(); ew];
        let mut out = Vec::with_capacity(coords.len() * l.fan_out);
        let omega = F::of(l.omega.unwrap_or(1.0));
        for c in coords {
            self.embedding.embed_into(c, &mut emb);
            for j in 0..l.fan_out {
                let w = &self.params
                    [l.weight_offset + j * l.fan_in..l.weight_offset + (j + 1) * l.fan_in];
                let z: F = w.iter().zip(&emb).map(|(&a, &b)| a * b).sum::<F>()
                    + self.params[l.bias_offset + j];
                out.push(omega * z);
            }
        }
        out
    }

    /// Sample the network on a plane; returns a `channels × rows × cols` image.
    pub fn query_slice(&self, plan: &SlicePlan) -> Result<Image<F>> {
        let coords = expand_slice(plan)?;
        let out = self.forward(&coords);
        Ok(rows_to_image(
            &out,
            self.channels(),
            plan.shape.0,
            plan.shape.1,
        ))
    }

    pub fn weight_checksum(&self) -> String {
        io::hash_bytes(&io::encode_f32(self.params.iter().map(|v| v.as_f32())))
    }
}

/// Reorder `(pixel, channel)` rows into a channel-major image.
pub fn rows_to_image<F: Scalar>(
    rows_major: &[F],
    channels: usize,
    rows: usize,
    cols: usize,
) -> Image<F> {
    let n = rows * cols;
    let mut img = Image::zeros(channels, rows, cols);
    for p in 0..n {
        for c in 0..channels {
            img.data[c * n + p] = rows_major[p * channels + c];
        }
    }
    img
}

/// Inverse of [`rows_to_image`] for gradient images.
pub fn image_to_rows<F: Scalar>(img: &Image<F>) -> Vec<F> {
    let n = img.rows * img.cols;
    let mut out = vec![F::zero(); n * img.channels];
    for c in 0..img.channels {
        for p in 0..n {
            out[p * img.channels + c] = img.data[c * n + p];
        }
    }
    out
}

pub const INR_META_FILE: &str = "meta.json";
pub const WEIGHTS_FILE: &str = "weights.f32";
pub const OPTIMIZER_FILE: &str = "optimizer.f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InrCheckpointMeta {
    pub format: String,
    pub version: u32,
    pub config: InrConfig,
    pub seed: u64,
    pub step: u64,
    /// Payload order: embedding matrix (`m × 3`), then each layer's weights
    /// (`fan_out × fan_in`) followed by its biases.
    pub layers: Vec<LayerSpec>,
    pub param_count: usize,
    #[serde(default)]
    pub optimizer_step: Option<u64>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// A loaded checkpoint: the model plus optional optimizer moments.
pub struct InrCheckpoint<F> {
    pub model: InrModel<F>,
    pub step: u64,
    pub adam: Option<nn::Adam<F>>,
    pub extra: serde_json::Value,
}

pub fn save_inr<F: Scalar>(
    model: &InrModel<F>,
    step: u64,
    adam: Option<&nn::Adam<F>>,
    extra: serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let meta = InrCheckpointMeta {
        format: "isorec-inr".into(),
        version: 1,
        config: model.config.clone(),
        seed: model.seed,
        step,
        layers: model.layers.clone(),
        param_count: model.params.len(),
        optimizer_step: adam.map(|a| a.step),
        extra,
    };
    let meta_bytes = serde_json::to_vec_pretty(&meta)?;
    let weights = io::encode_f32(
        model
            .embedding
            .matrix
            .iter()
            .chain(&model.params)
            .map(|v| v.as_f32()),
    );
    let mut files: Vec<(&str, &[u8])> =
        vec![(INR_META_FILE, &meta_bytes), (WEIGHTS_FILE, &weights)];
    let opt_bytes;
    if let Some(a) = adam {
        opt_bytes = io::encode_f32(a.m.iter().chain(&a.v).map(|v| v.as_f32()));
        files.push((OPTIMIZER_FILE, &opt_bytes));
    }
    io::write_dir_atomic(path.as_ref(), &files)
}

pub fn load_inr<F: Scalar>(
    path: impl AsRef<Path>,
    adam_config: Option<nn::AdamConfig>,
) -> Result<InrCheckpoint<F>> {
    let path = path.as_ref();
    let mpath = path.join(INR_META_FILE);
    let meta: InrCheckpointMeta = serde_json::from_slice(&io::read_file(&mpath)?)
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    if meta.format != "isorec-inr" || meta.version != 1 {
        return Err(Error::format(
            &mpath,
            format!("not a v1 inr checkpoint: {} v{}", meta.format, meta.version),
        ));
    }
    meta.config.validate()?;
    let (layers, n) = layer_layout(&meta.config);
    if layers != meta.layers || n != meta.param_count {
        return Err(Error::format(&mpath, "layer layout does not match config"));
    }
    let wpath = path.join(WEIGHTS_FILE);
    let raw = io::decode_f32(&io::read_file(&wpath)?, &wpath)?;
    let emb_len = meta.config.fourier_features * 3;
    if raw.len() != emb_len + n {
        return Err(Error::format(
            &wpath,
            format!("expected {} values, found {}", emb_len + n, raw.len()),
        ));
    }
    let embedding = FourierEmbedding::from_matrix(
        raw[..emb_len].iter().map(|&v| F::of_f32(v)).collect(),
        meta.config.fourier_sigma,
    )?;
    let params = raw[emb_len..].iter().map(|&v| F::of_f32(v)).collect();
    let adam = match (meta.optimizer_step, adam_config) {
        (Some(step), Some(cfg)) => {
            let opath = path.join(OPTIMIZER_FILE);
            let mv = io::decode_f32(&io::read_file(&opath)?, &opath)?;
            if mv.len() != 2 * n {
                return Err(Error::format(&opath, "optimizer state size mismatch"));
            }
            Some(nn::Adam {
                config: cfg,
                step,
                m: mv[..n].iter().map(|&v| F::of_f32(v)).collect(),
                v: mv[n..].iter().map(|&v| F::of_f32(v)).collect(),
            })
        }
        _ => None,
    };
    Ok(InrCheckpoint {
        model: InrModel {
            config: meta.config,
            seed: meta.seed,
            embedding,
            layers,
            params,
        },
        step: meta.step,
        adam,
        extra: meta.extra,
    })
}
