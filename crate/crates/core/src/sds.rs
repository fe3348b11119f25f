//! Reconstruction loop: fit an INR to the anisotropic measurements with a
//! data-fidelity term plus a score-distillation (or TV) regularizer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::DegradationOp;
use crate::diffusion::{gaussian_image, perturb, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::inr::{image_to_rows, init_inr, load_inr, rows_to_image, save_inr, InrConfig, InrModel};
use crate::io;
use crate::metrics::{evaluate_volumes, format_db, psnr};
use crate::nn::{Optimizer, OptimizerKind};
use crate::parallel;
use crate::scalar::Scalar;
use crate::volume::{expand_slice, Image, Orientation, SlicePlan, VolumeGrid};

pub const TV_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    Sds,
    Tv,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdsConfig {
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub t_start: usize,
    pub t_end: usize,
    pub epochs: usize,
    pub batch_slices: usize,
    pub lr: f64,
    /// Swap between ZX and ZY every iteration; otherwise ZX only.
    pub alternate: bool,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Scale the residual by `√ᾱ_t` before pairing it with the slice.
    pub weight_by_sqrt_alpha_bar: bool,
    /// Evaluate metrics every this many epochs (0 = final only).
    pub metrics_every: usize,
    /// Dump the residual image every this many iterations (0 = never).
    pub residual_every: usize,
    /// Write a resumable checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
}

impl Default for SdsConfig {
    fn default() -> Self {
        SdsConfig {
            lambda: 0.05,
            regularizer: Regularizer::Sds,
            t_start: 250,
            t_end: 1,
            epochs: 70,
            batch_slices: 8,
            lr: 5e-4,
            alternate: true,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            weight_by_sqrt_alpha_bar: false,
            metrics_every: 10,
            residual_every: 0,
            checkpoint_every: 10,
        }
    }
}

impl SdsConfig {
    pub fn validate(&self, max_step: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.t_end < 1 || self.t_end > self.t_start || self.t_start > max_step {
            return Err(Error::Config(format!(
                "need 1 <= t_end <= t_start <= {max_step}, got t_start={} t_end={}",
                self.t_start, self.t_end
            )));
        }
        if self.batch_slices == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_slices and epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn orientation(&self, iter: usize) -> Orientation {
        if self.alternate && iter % 2 == 1 {
            Orientation::ZY
        } else {
            Orientation::ZX
        }
    }

    /// `⌈mean slice count / batch⌉` over the visited orientations.
    pub fn iters_per_epoch(&self, dims: [usize; 3]) -> usize {
        let slices = if self.alternate {
            (dims[1] + dims[2]).div_ceil(2)
        } else {
            dims[1]
        };
        slices.div_ceil(self.batch_slices).max(1)
    }
}

/// Noise level for an iteration: linear from `t_start` to `t_end`,
/// rounded half away from zero.
pub fn t_schedule(iter: usize, total_iters: usize, cfg: &SdsConfig) -> Result<usize> {
    if total_iters < 2 {
        return Ok(cfg.t_start);
    }
    if iter >= total_iters {
        return Err(Error::Bounds {
            index: iter,
            extent: total_iters,
        });
    }
    let (a, b) = (cfg.t_start as f64, cfg.t_end as f64);
    Ok((a + (b - a) * iter as f64 / (total_iters - 1) as f64).round() as usize)
}

/// A scalar term and its gradient with respect to the queried slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Term<F> {
    pub value: f64,
    pub grad: Image<F>,
}

/// `‖A x − y‖² / len(y)`.
pub fn data_fidelity<F: Scalar>(
    queried: &Image<F>,
    measurement: &Image<F>,
    op: &DegradationOp,
) -> Result<Term<F>> {
    let ax = op.degrade(queried)?;
    if !ax.same_shape(measurement) {
        return Err(Error::Shape(format!(
            "degraded slice is {}x{}x{}, measurement is {}x{}x{}",
            ax.channels, ax.rows, ax.cols, measurement.channels, measurement.rows, measurement.cols
        )));
    }
    let n = ax.data.len() as f64;
    let mut value = 0.0;
    let mut diff = Image::zeros(ax.channels, ax.rows, ax.cols);
    for ((d, &a), &y) in diff.data.iter_mut().zip(&ax.data).zip(&measurement.data) {
        let e = a.as_f64() - y.as_f64();
        value += e * e;
        *d = F::of(2.0 * e / n);
    }
    let grad = op.adjoint(&diff, queried.rows)?;
    Ok(Term {
        value: value / n,
        grad,
    })
}

/// Source of the stop-gradient residual `ε_θ(x_t, t) − ε`.
///
/// Descending along this residual moves a slice toward the denoiser's
/// estimate of the clean image.
pub trait Guidance<F: Scalar>: Sync {
    fn channels(&self) -> usize;
    fn max_step(&self) -> usize;
    fn alpha_bar(&self, t: usize) -> f64;
    /// Residual for a prior-range image `x`, its noise `eps`, at step `t`.
    fn residual(&self, x: &Image<F>, t: usize, eps: &Image<F>) -> Result<Image<F>>;
}

/// Guidance from a frozen noise predictor.
pub struct DiffusionGuidance<'a, P> {
    pub predictor: &'a P,
    pub schedule: &'a NoiseSchedule,
}

impl<F: Scalar, P: NoisePredictor<F>> Guidance<F> for DiffusionGuidance<'_, P> {
    fn channels(&self) -> usize {
        self.predictor.channels()
    }

    fn max_step(&self) -> usize {
        self.schedule.steps()
    }

    fn alpha_bar(&self, t: usize) -> f64 {
        self.schedule.alpha_bar(t)
    }

    fn residual(&self, x: &Image<F>, t: usize, eps: &Image<F>) -> Result<Image<F>> {
        if !x.same_shape(eps) {
            return Err(Error::Shape("noise must match the queried slice".into()));
        }
        let xt = Image::from_vec(
            x.channels,
            x.rows,
            x.cols,
            perturb(&x.data, t, &eps.data, self.schedule)?,
        )?;
        let pred = self.predictor.predict(&xt, t)?;
        let data = eps
            .data
            .iter()
            .zip(&pred.data)
            .map(|(&e, &p)| p - e)
            .collect();
        Image::from_vec(x.channels, x.rows, x.cols, data)
    }
}

/// Score-distillation surrogate with its residual kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SdsTerm<F> {
    /// `mean(r ⊙ x)` with `r` held constant.
    pub value: f64,
    pub residual: Image<F>,
    /// `r / len`, the gradient with respect to `x`.
    pub grad: Image<F>,
}

/// Surrogate `⟨stopgrad(w·r), x⟩ / len` for a prior-range slice `x`.
pub fn sds_term_with<F: Scalar, G: Guidance<F> + ?Sized>(
    x: &Image<F>,
    t: usize,
    eps: &Image<F>,
    guidance: &G,
    weight: f64,
) -> Result<SdsTerm<F>> {
    if t < 1 || t > guidance.max_step() {
        return Err(Error::Param(format!(
            "timestep {t} outside [1, {}]",
            guidance.max_step()
        )));
    }
    let mut residual = guidance.residual(x, t, eps)?;
    if weight != 1.0 {
        let w = F::of(weight);
        residual.data.iter_mut().for_each(|v| *v *= w);
    }
    let n = x.data.len() as f64;
    let value = residual
        .data
        .iter()
        .zip(&x.data)
        .map(|(&r, &v)| r.as_f64() * v.as_f64())
        .sum::<f64>()
        / n;
    let inv = F::of(1.0 / n);
    let grad = residual.map(|r| r * inv);
    Ok(SdsTerm {
        value,
        residual,
        grad,
    })
}

pub fn sds_term<F: Scalar, P: NoisePredictor<F>>(
    x: &Image<F>,
    t: usize,
    eps: &Image<F>,
    denoiser: &P,
    schedule: &NoiseSchedule,
) -> Result<SdsTerm<F>> {
    let g = DiffusionGuidance {
        predictor: denoiser,
        schedule,
    };
    sds_term_with(x, t, eps, &g, 1.0)
}

/// Mean isotropic TV over the `(rows−1)×(cols−1)` forward-difference grid,
/// averaged over channels.
pub fn tv_term<F: Scalar>(img: &Image<F>) -> Result<Term<F>> {
    let (h, w) = (img.rows, img.cols);
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("tv needs at least 2x2, got {h}x{w}")));
    }
    let n = (img.channels * (h - 1) * (w - 1)) as f64;
    let mut grad = vec![0.0f64; img.data.len()];
    let mut value = 0.0;
    for c in 0..img.channels {
        let base = c * h * w;
        let v = |r: usize, q: usize| img.data[base + r * w + q].as_f64();
        for r in 0..h - 1 {
            for q in 0..w - 1 {
                let dr = v(r + 1, q) - v(r, q);
                let dc = v(r, q + 1) - v(r, q);
                let m = (dr * dr + dc * dc + TV_EPS).sqrt();
                value += m;
                let (gr, gc) = (dr / (m * n), dc / (m * n));
                grad[base + (r + 1) * w + q] += gr;
                grad[base + r * w + q + 1] += gc;
                grad[base + r * w + q] -= gr + gc;
            }
        }
    }
    Ok(Term {
        value: value / n,
        grad: Image::from_vec(img.channels, h, w, grad.into_iter().map(F::of).collect())?,
    })
}

/// Densely query every XY slice, clamp to `[0, 1]`.
pub fn export_volume<F: Scalar>(
    model: &InrModel<F>,
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<VolumeGrid> {
    let c = model.channels();
    let plane = dims[1] * dims[2];
    let mut data = vec![0f32; c * dims[0] * plane];
    for z in 0..dims[0] {
        let img = model.query_slice(&SlicePlan::full(Orientation::XY, z, dims)?)?;
        for ch in 0..c {
            let dst = &mut data[(ch * dims[0] + z) * plane..(ch * dims[0] + z + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(img.channel(ch)) {
                *d = v.as_f32().clamp(0.0, 1.0);
            }
        }
    }
    VolumeGrid::new(dims, c, data, spacing)
}

fn to_scalar_image<F: Scalar>(img: &Image<f32>) -> Image<F> {
    img.map(F::of_f32)
}

/// Mean data fidelity of the unclamped model over every ZX slice.
pub fn volume_data_fidelity<F: Scalar>(
    model: &InrModel<F>,
    aniso: &VolumeGrid,
    op: &DegradationOp,
    dims: [usize; 3],
) -> Result<f64> {
    let mut total = 0.0;
    for y in 0..dims[1] {
        let q = model.query_slice(&SlicePlan::full(Orientation::ZX, y, dims)?)?;
        let m = to_scalar_image::<F>(&aniso.slice(Orientation::ZX, y)?);
        total += data_fidelity(&q, &m, op)?.value;
    }
    Ok(total / dims[1] as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRow {
    pub iter: usize,
    pub data_fidelity: f64,
    pub sds: f64,
    pub total: f64,
    pub t: usize,
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iter: usize,
    pub psnr_measurement: f64,
    pub psnr_zx: Option<f64>,
    pub psnr_zy: Option<f64>,
    pub ssim_zx: Option<f64>,
    pub ssim_zy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDump {
    pub iter: usize,
    pub t: usize,
    pub orientation: Orientation,
    pub index: usize,
    pub image: Image<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub loss: Vec<LossRow>,
    pub metrics: Vec<MetricsRow>,
    pub residuals: Vec<ResidualDump>,
    pub total_iters: usize,
    pub iters_per_epoch: usize,
    pub initial_data_fidelity: f64,
    pub final_data_fidelity: f64,
}

fn opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_default()
}

impl RunReport {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iter,data_fidelity,sds,total,t,orientation\n");
        for r in &self.loss {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.iter,
                r.data_fidelity,
                r.sds,
                r.total,
                r.t,
                r.orientation.name()
            );
        }
        s
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,iter,psnr_measurement,psnr_zx,psnr_zy,ssim_zx,ssim_zy\n");
        for m in &self.metrics {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                m.epoch,
                m.iter,
                format_db(m.psnr_measurement),
                opt(m.psnr_zx, format_db),
                opt(m.psnr_zy, format_db),
                opt(m.ssim_zx, |v| format!("{v:.6}")),
                opt(m.ssim_zy, |v| format!("{v:.6}")),
            );
        }
        s
    }

    /// Parse rows previously written by [`loss_csv`](Self::loss_csv).
    pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRow>> {
        let bad = |l: &str| Error::Config(format!("malformed loss row: {l}"));
        text.lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 6 {
                    return Err(bad(l));
                }
                Ok(LossRow {
                    iter: f[0].parse().map_err(|_| bad(l))?,
                    data_fidelity: f[1].parse().map_err(|_| bad(l))?,
                    sds: f[2].parse().map_err(|_| bad(l))?,
                    total: f[3].parse().map_err(|_| bad(l))?,
                    t: f[4].parse().map_err(|_| bad(l))?,
                    orientation: Orientation::parse(f[5])?,
                })
            })
            .collect()
    }

    pub fn orientation_counts(&self) -> (usize, usize) {
        let zx = self
            .loss
            .iter()
            .filter(|r| r.orientation == Orientation::ZX)
            .count();
        (zx, self.loss.len() - zx)
    }
}

/// Summary of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult<F> {
    pub row: LossRow,
    pub indices: Vec<usize>,
    pub grad: Vec<F>,
    pub residual: Option<Image<F>>,
}

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESIDUAL_DIR: &str = "residuals";
pub const RESOLVED_CONFIG_FILE: &str = "config.json";

/// Owns the INR and its optimizer; borrows measurements and the prior.
pub struct Reconstruction<'a, F: Scalar> {
    pub model: InrModel<F>,
    pub optimizer: Optimizer<F>,
    pub iter: usize,
    pub config: SdsConfig,
    pub op: DegradationOp,
    pub dims: [usize; 3],
    pub report: RunReport,
    measurements: &'a VolumeGrid,
    guidance: Option<&'a dyn Guidance<F>>,
    ground_truth: Option<&'a VolumeGrid>,
}

impl<'a, F: Scalar> Reconstruction<'a, F> {
    pub fn new(
        measurements: &'a VolumeGrid,
        guidance: Option<&'a dyn Guidance<F>>,
        inr_config: &InrConfig,
        config: SdsConfig,
        op: DegradationOp,
    ) -> Result<Self> {
        let model = init_inr::<F>(inr_config, config.seed)?;
        Self::with_model(measurements, guidance, model, config, op)
    }

    pub fn with_model(
        measurements: &'a VolumeGrid,
        guidance: Option<&'a dyn Guidance<F>>,
        model: InrModel<F>,
        config: SdsConfig,
        op: DegradationOp,
    ) -> Result<Self> {
        op.validate()?;
        let [dz, dy, dx] = measurements.dims();
        let dims = [dz * op.factor, dy, dx];
        if model.channels() != measurements.channels() {
            return Err(Error::Config(format!(
                "INR has {} output channels, measurements have {}",
                model.channels(),
                measurements.channels()
            )));
        }
        let max_step = match (config.regularizer, guidance) {
            (Regularizer::Sds, None) => {
                return Err(Error::Config(
                    "score distillation requires a diffusion prior".into(),
                ));
            }
            (_, Some(g)) => {
                if g.channels() != measurements.channels() {
                    return Err(Error::Config(format!(
                        "prior has {} channels, measurements have {}",
                        g.channels(),
                        measurements.channels()
                    )));
                }
                g.max_step()
            }
            (_, None) => config.t_start.max(1),
        };
        config.validate(max_step)?;
        let optimizer = Optimizer::new(config.optimizer, config.lr, model.param_count());
        let ipe = config.iters_per_epoch(dims);
        let report = RunReport {
            total_iters: config.epochs * ipe,
            iters_per_epoch: ipe,
            ..RunReport::default()
        };
        Ok(Reconstruction {
            model,
            optimizer,
            iter: 0,
            config,
            op,
            dims,
            report,
            measurements,
            guidance,
            ground_truth: None,
        })
    }

    pub fn with_ground_truth(mut self, gt: &'a VolumeGrid) -> Result<Self> {
        if gt.dims() != self.dims || gt.channels() != self.measurements.channels() {
            return Err(Error::Config(format!(
                "ground truth {:?}x{} does not match target {:?}x{}",
                gt.dims(),
                gt.channels(),
                self.dims,
                self.measurements.channels()
            )));
        }
        self.ground_truth = Some(gt);
        Ok(self)
    }

    pub fn total_iters(&self) -> usize {
        self.report.total_iters
    }

    fn iter_rng(&self, iter: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iter as u64 + 1);
        rng
    }

    /// Loss and parameter gradient for iteration `iter` at the current
    /// parameters; does not update anything.
    pub fn gradient_at(&self, iter: usize) -> Result<StepResult<F>> {
        let cfg = &self.config;
        let o = cfg.orientation(iter);
        let fixed = self.dims[o.fixed_axis()];
        let mut rng = self.iter_rng(iter);
        let b = cfg.batch_slices.min(fixed);
        let indices: Vec<usize> = index::sample(&mut rng, fixed, b).into_vec();
        let t = t_schedule(iter, self.total_iters(), cfg)?;
        let (rows, cols) = o.plane_shape(self.dims);
        let c = self.model.channels();
        let use_sds = cfg.regularizer == Regularizer::Sds && cfg.lambda > 0.0;
        let eps: Vec<Image<F>> = if use_sds {
            (0..b)
                .map(|_| gaussian_image(&mut rng, c, rows, cols))
                .collect()
        } else {
            Vec::new()
        };

        let mut coords = Vec::with_capacity(b * rows * cols);
        for &i in &indices {
            coords.extend(expand_slice(&SlicePlan::full(o, i, self.dims)?)?);
        }
        let pass = self.model.forward_cached(&coords);
        let per = rows * cols * c;
        let slots: Vec<usize> = (0..b).collect();
        let weight = match (cfg.weight_by_sqrt_alpha_bar, self.guidance) {
            (true, Some(g)) => g.alpha_bar(t).sqrt(),
            _ => 1.0,
        };
        let parts = parallel::map(
            &slots,
            |&k| -> Result<(f64, f64, Image<F>, Option<Image<F>>)> {
                let f = rows_to_image(&pass.output[k * per..(k + 1) * per], c, rows, cols);
                let y = to_scalar_image::<F>(&self.measurements.slice(o, indices[k])?);
                let df = data_fidelity(&f, &y, &self.op)?;
                let mut grad = df.grad;
                let lam = cfg.lambda;
                let (reg, residual) = match cfg.regularizer {
                    _ if lam == 0.0 => (0.0, None),
                    Regularizer::None => (0.0, None),
                    Regularizer::Tv => {
                        let tv = tv_term(&f)?;
                        let l = F::of(lam);
                        for (g, &d) in grad.data.iter_mut().zip(&tv.grad.data) {
                            *g += l * d;
                        }
                        (tv.value, None)
                    }
                    Regularizer::Sds => {
                        let g = self.guidance.expect("checked at construction");
                        let x = f.map(crate::diffusion::to_prior_range);
                        let s = sds_term_with(&x, t, &eps[k], g, weight)?;
                        // x = 2f − 1
                        let l = F::of(2.0 * lam);
                        for (gv, &d) in grad.data.iter_mut().zip(&s.grad.data) {
                            *gv += l * d;
                        }
                        (s.value, Some(s.residual))
                    }
                };
                Ok((df.value, reg, grad, residual))
            },
        );
        let inv_b = F::of(1.0 / b as f64);
        let (mut dfv, mut regv) = (0.0, 0.0);
        let mut d_out = Vec::with_capacity(pass.output.len());
        let mut residual = None;
        for (k, p) in parts.into_iter().enumerate() {
            let (d, r, g, res) = p?;
            dfv += d;
            regv += r;
            d_out.extend(image_to_rows(&g).into_iter().map(|v| v * inv_b));
            if k == 0 {
                residual = res;
            }
        }
        let (dfv, regv) = (dfv / b as f64, regv / b as f64);
        let grad = self.model.backward(&pass, &d_out);
        Ok(StepResult {
            row: LossRow {
                iter,
                data_fidelity: dfv,
                sds: regv,
                total: dfv + cfg.lambda * regv,
                t,
                orientation: o,
            },
            indices,
            grad,
            residual,
        })
    }

    /// One optimization step. Non-finite losses or gradients abort without
    /// touching the parameters.
    pub fn step(&mut self) -> Result<StepResult<F>> {
        let res = self.gradient_at(self.iter)?;
        if !res.row.total.is_finite() || res.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step: self.iter,
                reason: format!("non-finite loss {} at t={}", res.row.total, res.row.t),
            });
        }
        self.optimizer.update(&mut self.model.params, &res.grad);
        if self.config.residual_every > 0 && self.iter.is_multiple_of(self.config.residual_every) {
            if let Some(r) = &res.residual {
                self.report.residuals.push(ResidualDump {
                    iter: self.iter,
                    t: res.row.t,
                    orientation: res.row.orientation,
                    index: res.indices[0],
                    image: r.map(|v| v.as_f32()),
                });
            }
        }
        self.report.loss.push(res.row.clone());
        self.iter += 1;
        Ok(res)
    }

    pub fn data_fidelity(&self) -> Result<f64> {
        volume_data_fidelity(&self.model, self.measurements, &self.op, self.dims)
    }

    pub fn export(&self) -> Result<VolumeGrid> {
        let sp = self.measurements.spacing();
        export_volume(
            &self.model,
            self.dims,
            [sp[0] / self.op.factor as f64, sp[1], sp[2]],
        )
    }

    /// Metrics of the current model: measurement PSNR, and axial-plane
    /// PSNR/SSIM when ground truth is attached.
    pub fn evaluate(&self, epoch: usize) -> Result<MetricsRow> {
        let vol = self.export()?;
        let lr = self.op.degrade_volume(&vol)?;
        let psnr_measurement = psnr(lr.data(), self.measurements.data(), 1.0)?;
        let mut row = MetricsRow {
            epoch,
            iter: self.iter,
            psnr_measurement,
            psnr_zx: None,
            psnr_zy: None,
            ssim_zx: None,
            ssim_zy: None,
        };
        if let Some(gt) = self.ground_truth {
            let m = evaluate_volumes(&vol, gt)?;
            row.psnr_zx = Some(m.family(Orientation::ZX).mean_psnr);
            row.psnr_zy = Some(m.family(Orientation::ZY).mean_psnr);
            row.ssim_zx = Some(m.family(Orientation::ZX).mean_ssim);
            row.ssim_zy = Some(m.family(Orientation::ZY).mean_ssim);
        }
        Ok(row)
    }

    /// Continue from a checkpoint written by [`run`](Self::run).
    pub fn resume_from(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let ck = load_inr::<F>(path, Some(crate::nn::AdamConfig::with_lr(self.config.lr)))?;
        if ck.model.config != self.model.config {
            return Err(Error::Config(
                "checkpoint INR config differs from the requested one".into(),
            ));
        }
        self.model = ck.model;
        if let Some(a) = ck.adam {
            self.optimizer = Optimizer::Adam(a);
        }
        self.iter = ck.step as usize;
        Ok(())
    }

    fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let adam = match &self.optimizer {
            Optimizer::Adam(a) => Some(a),
            Optimizer::Sgd { .. } => None,
        };
        let extra = serde_json::json!({ "sds": self.config, "dims": self.dims });
        save_inr(&self.model, self.iter as u64, adam, extra, path)
    }

    /// Run to completion. With `out`, writes the run directory: loss and
    /// metrics CSVs, residual dumps, periodic and final checkpoints, and a
    /// diagnostic checkpoint if the loss diverges.
    pub fn run(&mut self, out: Option<&Path>) -> Result<()> {
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let prior = dir.join(LOSS_FILE);
            if self.iter > 0 && prior.exists() {
                let text = std::fs::read_to_string(&prior).map_err(|e| Error::io(&prior, e))?;
                let mut rows = RunReport::parse_loss_csv(&text)?;
                rows.retain(|r| r.iter < self.iter);
                self.report.loss = rows;
            }
        }
        self.report.initial_data_fidelity = self.data_fidelity()?;
        let total = self.total_iters();
        let ipe = self.report.iters_per_epoch;
        while self.iter < total {
            if let Err(e) = self.step() {
                if let (Some(dir), Error::Diverged { .. }) = (out, &e) {
                    self.save_checkpoint(&dir.join(DIAGNOSTIC_CHECKPOINT))?;
                    self.write_logs(dir)?;
                }
                return Err(e);
            }
            if self.iter.is_multiple_of(ipe) {
                let epoch = self.iter / ipe;
                let last = self.iter == total;
                let me = self.config.metrics_every;
                if last || (me > 0 && epoch.is_multiple_of(me)) {
                    let row = self.evaluate(epoch)?;
                    self.report.metrics.push(row);
                }
                let ce = self.config.checkpoint_every;
                if let Some(dir) = out {
                    if ce > 0 && epoch.is_multiple_of(ce) && !last {
                        self.save_checkpoint(&dir.join(LATEST_CHECKPOINT))?;
                        self.write_logs(dir)?;
                    }
                }
            }
        }
        self.report.final_data_fidelity = self.data_fidelity()?;
        if let Some(dir) = out {
            self.write_logs(dir)?;
            self.save_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(())
    }

    fn write_logs(&self, dir: &Path) -> Result<()> {
        io::write_file_atomic(&dir.join(LOSS_FILE), self.report.loss_csv().as_bytes())?;
        io::write_file_atomic(
            &dir.join(METRICS_FILE),
            self.report.metrics_csv().as_bytes(),
        )?;
        let rdir = dir.join(RESIDUAL_DIR);
        for r in &self.report.residuals {
            let path = residual_path(&rdir, r);
            if path.exists() {
                continue;
            }
            std::fs::create_dir_all(&rdir).map_err(|e| Error::io(&rdir, e))?;
            let img = &r.image;
            let g = VolumeGrid::from_raw(
                [1, img.rows, img.cols],
                img.channels,
                img.data.clone(),
                [1.0; 3],
            )?;
            io::save_volume(&g, &path)?;
        }
        Ok(())
    }
}

pub fn residual_path(dir: &Path, r: &ResidualDump) -> PathBuf {
    dir.join(format!(
        "iter{:06}_t{:04}_{}{:04}.volume",
        r.iter,
        r.t,
        r.orientation.name().to_lowercase(),
        r.index
    ))
}

/// Fit a fresh INR to `measurements`; see [`Reconstruction::run`].
pub fn reconstruct<F: Scalar>(
    measurements: &VolumeGrid,
    guidance: Option<&dyn Guidance<F>>,
    inr_config: &InrConfig,
    config: &SdsConfig,
    op: &DegradationOp,
    out: Option<&Path>,
) -> Result<(InrModel<F>, RunReport)> {
    let mut r = Reconstruction::new(measurements, guidance, inr_config, config.clone(), *op)?;
    r.run(out)?;
    Ok((r.model, r.report))
}
