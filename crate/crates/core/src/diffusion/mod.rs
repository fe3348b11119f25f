//! 2D denoising diffusion prior: forward process, noise-prediction training,
//! ancestral sampling and checkpoints.
//!
//! Images enter the prior in `[-1, 1]` (see [`to_prior_range`]).

mod denoiser;
mod schedule;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::nn::{self, Adam, AdamConfig};
use crate::parallel;
use crate::scalar::Scalar;
use crate::volume::Image;

pub use denoiser::{time_embedding, Denoiser, DenoiserConfig, DenoiserLayout, NoisePredictor};
pub use schedule::{build_schedule, perturb, NoiseSchedule, ScheduleConfig};

/// Name recorded in checkpoints for the `[0, 1] → [-1, 1]` mapping.
pub const NORMALIZATION: &str = "unit_to_symmetric";

#[inline]
pub fn to_prior_range<F: Scalar>(v: F) -> F {
    F::of(2.0) * v - F::one()
}

#[inline]
pub fn from_prior_range<F: Scalar>(v: F) -> F {
    (v + F::one()) * F::of(0.5)
}

pub fn gaussian_image<F: Scalar, R: Rng>(
    rng: &mut R,
    channels: usize,
    rows: usize,
    cols: usize,
) -> Image<F> {
    let data = (0..channels * rows * cols)
        .map(|_| F::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Image {
        channels,
        rows,
        cols,
        data,
    }
}

/// One training draw: timestep, injected noise and perturbed image.
pub struct NoisyDraw<F> {
    pub t: usize,
    pub eps: Image<F>,
    pub x_t: Image<F>,
}

/// Draw `t ~ U{1..T}` and `ε ~ N(0, I)` for each clean image, in order.
pub fn draw_noise<F: Scalar, R: Rng>(
    x0: &[Image<F>],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<NoisyDraw<F>>> {
    x0.iter()
        .map(|x| {
            let t = rng.random_range(1..=sched.steps());
            let eps = gaussian_image(rng, x.channels, x.rows, x.cols);
            let data = perturb(&x.data, t, &eps.data, sched)?;
            let x_t = Image::from_vec(x.channels, x.rows, x.cols, data)?;
            Ok(NoisyDraw { t, eps, x_t })
        })
        .collect()
}

/// Mean squared error between injected and predicted noise over a batch.
pub fn denoiser_loss<F: Scalar, P: NoisePredictor<F>, R: Rng>(
    model: &P,
    x0: &[Image<F>],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if x0.is_empty() {
        return Err(Error::Param("empty batch".into()));
    }
    let draws = draw_noise(x0, sched, rng)?;
    let xs: Vec<Image<F>> = draws.iter().map(|d| d.x_t.clone()).collect();
    let ts: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let preds = model.predict_batch(&xs, &ts)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (d, p) in draws.iter().zip(&preds) {
        if !p.same_shape(&d.eps) {
            return Err(Error::Shape("prediction shape differs from input".into()));
        }
        sum += d
            .eps
            .data
            .iter()
            .zip(&p.data)
            .map(|(e, q)| (e.as_f64() - q.as_f64()).powi(2))
            .sum::<f64>();
        n += d.eps.data.len();
    }
    Ok(sum / n as f64)
}

impl<F: Scalar> Denoiser<F> {
    /// Loss of [`denoiser_loss`] and its gradient with respect to θ.
    pub fn loss_and_grad<R: Rng>(
        &self,
        x0: &[Image<F>],
        sched: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<(f64, Vec<F>)> {
        if x0.is_empty() {
            return Err(Error::Param("empty batch".into()));
        }
        let draws = draw_noise(x0, sched, rng)?;
        let total: usize = draws.iter().map(|d| d.eps.data.len()).sum();
        let scale = F::of(2.0 / total as f64);
        let parts = parallel::map(&draws, |d| {
            let mut sq = 0.0;
            let r = self.forward_backward(&d.x_t, d.t, |pred| {
                pred.iter()
                    .zip(&d.eps.data)
                    .map(|(&p, &e)| {
                        sq += (p.as_f64() - e.as_f64()).powi(2);
                        scale * (p - e)
                    })
                    .collect()
            });
            r.map(|(_, g)| (sq, g))
        });
        let mut grad = vec![F::zero(); self.param_count()];
        let mut sum = 0.0;
        for p in parts {
            let (sq, g) = p?;
            sum += sq;
            nn::add_into(&mut grad, &g);
        }
        Ok((sum / total as f64, grad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Steps averaged into each loss-curve entry.
    pub log_every: usize,
    /// Random horizontal/vertical flips of training patches.
    pub flip: bool,
    pub schedule: ScheduleConfig,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        PriorTrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            log_every: 50,
            flip: true,
            schedule: ScheduleConfig::default(),
        }
    }
}

fn flip_image<F: Scalar>(img: &Image<F>, vertical: bool, horizontal: bool) -> Image<F> {
    let mut out = img.clone();
    for c in 0..img.channels {
        for r in 0..img.rows {
            for q in 0..img.cols {
                let sr = if vertical { img.rows - 1 - r } else { r };
                let sq = if horizontal { img.cols - 1 - q } else { q };
                *out.at_mut(c, r, q) = img.at(c, sr, sq);
            }
        }
    }
    out
}

/// Stochastic-gradient training of a denoiser on prior-range patches.
pub struct Trainer<'a, F> {
    pub model: Denoiser<F>,
    pub adam: Adam<F>,
    pub schedule: NoiseSchedule,
    pub config: PriorTrainConfig,
    data: &'a [Image<F>],
    step: usize,
    window: Vec<f64>,
    /// `(step, mean loss over the preceding log window)`.
    pub curve: Vec<(usize, f64)>,
}

impl<'a, F: Scalar> Trainer<'a, F> {
    pub fn new(model: Denoiser<F>, data: &'a [Image<F>], config: PriorTrainConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Param("training set is empty".into()));
        }
        if config.batch_size == 0 || config.log_every == 0 {
            return Err(Error::Config(
                "batch_size and log_every must be positive".into(),
            ));
        }
        if data.iter().any(|p| p.channels != model.config.channels) {
            return Err(Error::Shape(
                "patch channels differ from the denoiser's".into(),
            ));
        }
        let schedule = config.schedule.build()?;
        let adam = Adam::new(AdamConfig::with_lr(config.lr), model.param_count());
        Ok(Trainer {
            model,
            adam,
            schedule,
            config,
            data,
            step: 0,
            window: Vec::new(),
            curve: Vec::new(),
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step as u64 + 1);
        rng
    }

    /// One optimizer step. A non-finite loss or gradient leaves the model
    /// untouched and reports divergence.
    pub fn step(&mut self) -> Result<f64> {
        let mut rng = self.step_rng();
        let batch: Vec<Image<F>> = (0..self.config.batch_size)
            .map(|_| {
                let p = &self.data[rng.random_range(0..self.data.len())];
                if self.config.flip {
                    let (v, h) = (rng.random_bool(0.5), rng.random_bool(0.5));
                    flip_image(p, v, h)
                } else {
                    p.clone()
                }
            })
            .collect();
        let (loss, grad) = self.model.loss_and_grad(&batch, &self.schedule, &mut rng)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step: self.step,
                reason: format!("loss {loss}"),
            });
        }
        self.adam.update(&mut self.model.params, &grad);
        self.step += 1;
        self.window.push(loss);
        if self.window.len() == self.config.log_every || self.step == self.config.steps {
            let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
            self.curve.push((self.step, mean));
            self.window.clear();
        }
        Ok(loss)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.step < self.config.steps {
            self.step()?;
        }
        Ok(())
    }
}

/// Train a freshly initialized denoiser for `config.steps` steps.
pub fn train_denoiser<F: Scalar>(
    patches: &[Image<F>],
    model_config: &DenoiserConfig,
    config: &PriorTrainConfig,
) -> Result<(Denoiser<F>, Vec<(usize, f64)>)> {
    let model = Denoiser::new(model_config, config.seed)?;
    let mut trainer = Trainer::new(model, patches, config.clone())?;
    trainer.run()?;
    Ok((trainer.model, trainer.curve))
}

/// Deterministic held-out estimate of the training loss.
pub fn validation_loss<F: Scalar, P: NoisePredictor<F>>(
    model: &P,
    patches: &[Image<F>],
    sched: &NoiseSchedule,
    seed: u64,
    count: usize,
) -> Result<f64> {
    let n = count.min(patches.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11d);
    denoiser_loss(model, &patches[..n.min(patches.len())], sched, &mut rng)
}

/// Ancestral reverse chain from `x_T ~ N(0, I)` down to `x_0`, for `n`
/// images of shape `(channels, rows, cols)`. Sample `i` uses its own random
/// stream, so it does not depend on `n`.
///
/// With `clip` the implied clean image `x̂₀` is clamped to `[-1, 1]` before
/// forming the posterior mean. Small errors in the predicted noise along
/// the image mean are otherwise amplified by `1/√ᾱ_t` at large `t` and the
/// chain drifts out of the data range.
pub fn ancestral_sample_batch<F: Scalar, P: NoisePredictor<F>>(
    model: &P,
    sched: &NoiseSchedule,
    shape: (usize, usize, usize),
    n: usize,
    seed: u64,
    clip: bool,
) -> Result<Vec<Image<F>>> {
    let (c, h, w) = shape;
    if c != model.channels() {
        return Err(Error::Shape(format!(
            "model has {} channels, requested {c}",
            model.channels()
        )));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let mut xs: Vec<Image<F>> = rngs
        .iter_mut()
        .map(|r| gaussian_image(r, c, h, w))
        .collect();
    for t in (1..=sched.steps()).rev() {
        let ts = vec![t; n];
        let eps = model.predict_batch(&xs, &ts)?;
        let beta = sched.beta(t);
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
        let coef = F::of(beta / (1.0 - ab).sqrt());
        let inv_sqrt_alpha = F::of(1.0 / sched.alpha(t).sqrt());
        let sigma = F::of(beta.sqrt());
        // posterior mean as a blend of x̂₀ and x_t
        let (sqrt_ab, sqrt_1m_ab) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
        let c0 = F::of(ab_prev.sqrt() * beta / (1.0 - ab));
        let ct = F::of(sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab));
        let one = F::one();
        for ((x, e), rng) in xs.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
            for (v, &ev) in x.data.iter_mut().zip(&e.data) {
                if clip {
                    let x0 = ((*v - sqrt_1m_ab * ev) / sqrt_ab).max(-one).min(one);
                    *v = c0 * x0 + ct * *v;
                } else {
                    *v = (*v - coef * ev) * inv_sqrt_alpha;
                }
            }
            if t > 1 {
                for v in x.data.iter_mut() {
                    *v += sigma * F::of(rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
    }
    if xs.iter().any(|x| x.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::Sampling(
            "reverse chain produced non-finite values".into(),
        ));
    }
    Ok(xs)
}

pub fn ancestral_sample<F: Scalar, P: NoisePredictor<F>>(
    model: &P,
    sched: &NoiseSchedule,
    shape: (usize, usize, usize),
    seed: u64,
    clip: bool,
) -> Result<Image<F>> {
    Ok(ancestral_sample_batch(model, sched, shape, 1, seed, clip)?.remove(0))
}

pub const DENOISER_META_FILE: &str = "meta.json";
pub const DENOISER_WEIGHTS_FILE: &str = "weights.f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserCheckpointMeta {
    pub format: String,
    pub version: u32,
    pub config: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub normalization: String,
    pub seed: u64,
    pub steps: usize,
    pub param_count: usize,
    #[serde(default)]
    pub validation_loss: Option<f64>,
}

pub fn save_denoiser<F: Scalar>(
    model: &Denoiser<F>,
    meta: &DenoiserCheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    if meta.config != model.config || meta.param_count != model.param_count() {
        return Err(Error::Config(
            "checkpoint metadata does not describe this model".into(),
        ));
    }
    let m = serde_json::to_vec_pretty(meta)?;
    let w = io::encode_f32(model.params.iter().map(|v| v.as_f32()));
    io::write_dir_atomic(
        path.as_ref(),
        &[(DENOISER_META_FILE, &m), (DENOISER_WEIGHTS_FILE, &w)],
    )
}

pub fn load_denoiser<F: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(Denoiser<F>, DenoiserCheckpointMeta)> {
    let path = path.as_ref();
    let mpath = path.join(DENOISER_META_FILE);
    let meta: DenoiserCheckpointMeta = serde_json::from_slice(&io::read_file(&mpath)?)
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    if meta.format != "isorec-denoiser" || meta.version != 1 {
        return Err(Error::format(
            &mpath,
            format!(
                "not a v1 denoiser checkpoint: {} v{}",
                meta.format, meta.version
            ),
        ));
    }
    if meta.normalization != NORMALIZATION {
        return Err(Error::format(
            &mpath,
            format!("unknown normalization {:?}", meta.normalization),
        ));
    }
    let wpath = path.join(DENOISER_WEIGHTS_FILE);
    let raw = io::decode_f32(&io::read_file(&wpath)?, &wpath)?;
    let model = Denoiser::from_params(&meta.config, raw.into_iter().map(F::of_f32).collect())
        .map_err(|e| Error::format(&wpath, e.to_string()))?;
    Ok((model, meta))
}

impl DenoiserCheckpointMeta {
    pub fn new(
        config: &DenoiserConfig,
        schedule: ScheduleConfig,
        seed: u64,
        steps: usize,
        param_count: usize,
    ) -> Self {
        DenoiserCheckpointMeta {
            format: "isorec-denoiser".into(),
            version: 1,
            config: config.clone(),
            schedule,
            normalization: NORMALIZATION.into(),
            seed,
            steps,
            param_count,
            validation_loss: None,
        }
    }
}
