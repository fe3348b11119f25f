//! Procedural phantoms, anisotropic acquisition simulation and lateral patch
//! datasets.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::degradation::{gaussian_kernel_1d, DegradationMode, DegradationOp};
use crate::error::{Error, Result};
use crate::io;
use crate::parallel;
use crate::volume::{Image, VolumeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShellSpec {
    pub count: usize,
    /// Semi-axis range as a fraction of the smallest dimension.
    pub radius: [f64; 2],
    /// Shell wall thickness (Gaussian FWHM-ish width) in voxels.
    pub thickness: f64,
    /// Place every shell at the volume center.
    pub centered: bool,
}

impl Default for ShellSpec {
    fn default() -> Self {
        ShellSpec {
            count: 6,
            radius: [0.12, 0.3],
            thickness: 3.0,
            centered: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilamentSpec {
    pub count: usize,
    pub segments: usize,
    /// Tube radius range in voxels.
    pub radius: [f64; 2],
    /// Segment length as a fraction of the smallest dimension.
    pub length: f64,
    /// Largest |dz| of a unit segment direction; small values keep
    /// filaments close to horizontal.
    pub max_slope: f64,
}

impl Default for FilamentSpec {
    fn default() -> Self {
        FilamentSpec {
            count: 12,
            segments: 4,
            radius: [1.5, 3.0],
            length: 0.3,
            max_slope: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureSpec {
    /// Standard deviation of the texture around `midpoint`.
    pub amplitude: f64,
    /// Correlation length (Gaussian σ) in voxels.
    pub correlation: f64,
    pub midpoint: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec {
            amplitude: 0.05,
            correlation: 4.0,
            midpoint: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub channels: usize,
    pub seed: u64,
    pub shells: ShellSpec,
    pub filaments: FilamentSpec,
    pub texture: TextureSpec,
    /// Peak intensity range of structures.
    pub contrast: [f64; 2],
    /// Lateral blur σ in voxels (0 disables).
    pub blur_xy: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64; 3],
            channels: 1,
            seed: 0,
            shells: ShellSpec::default(),
            filaments: FilamentSpec::default(),
            texture: TextureSpec::default(),
            contrast: [0.6, 1.0],
            blur_xy: 0.5,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::Config(format!(
                "phantom dims must be >= 16, got {:?}",
                self.dims
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("phantom needs at least one channel".into()));
        }
        if self.shells.count == 0 && self.filaments.count == 0 && self.texture.amplitude == 0.0 {
            return Err(Error::Config(
                "phantom has no structures and no texture".into(),
            ));
        }
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !ordered(self.shells.radius)
            || !ordered(self.filaments.radius)
            || !ordered(self.contrast)
        {
            return Err(Error::Config(
                "radius and contrast ranges must be positive and ordered".into(),
            ));
        }
        if self.contrast[1] > 1.0 {
            return Err(Error::Config("contrast must lie in (0, 1]".into()));
        }
        if self.texture.amplitude < 0.0
            || self.texture.correlation <= 0.0
            || !(0.0..=1.0).contains(&self.texture.midpoint)
        {
            return Err(Error::Config(
                "texture needs amplitude >= 0, correlation > 0, midpoint in [0, 1]".into(),
            ));
        }
        if self.shells.thickness <= 0.0 || self.filaments.length <= 0.0 || self.blur_xy < 0.0 {
            return Err(Error::Config(
                "thickness, length and blur must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Structure {
    Shell {
        center: [f64; 3],
        axes: [f64; 3],
        thickness: f64,
        peak: f64,
    },
    Filament {
        points: Vec<[f64; 3]>,
        radius: f64,
        peak: f64,
    },
}

impl Structure {
    /// Inclusive voxel bounding box along z.
    fn z_range(&self, nz: usize) -> (usize, usize) {
        let (lo, hi) = match self {
            Structure::Shell {
                center,
                axes,
                thickness,
                ..
            } => (
                center[0] - axes[0] - 3.0 * thickness,
                center[0] + axes[0] + 3.0 * thickness,
            ),
            Structure::Filament { points, radius, .. } => {
                let lo = points.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
                let hi = points
                    .iter()
                    .map(|p| p[0])
                    .fold(f64::NEG_INFINITY, f64::max);
                (lo - 3.0 * radius, hi + 3.0 * radius)
            }
        };
        (
            lo.floor().max(0.0) as usize,
            (hi.ceil().max(0.0) as usize).min(nz - 1),
        )
    }

    fn value(&self, p: [f64; 3]) -> f64 {
        match self {
            Structure::Shell {
                center,
                axes,
                thickness,
                peak,
            } => {
                let rho = (0..3)
                    .map(|i| ((p[i] - center[i]) / axes[i]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let mean_axis = (axes[0] + axes[1] + axes[2]) / 3.0;
                let d = (rho - 1.0) * mean_axis;
                let s = thickness / 2.0;
                peak * (-d * d / (2.0 * s * s)).exp()
            }
            Structure::Filament {
                points,
                radius,
                peak,
            } => {
                let d2 = points
                    .windows(2)
                    .map(|w| segment_dist2(p, w[0], w[1]))
                    .fold(f64::INFINITY, f64::min);
                peak * (-d2 / (2.0 * radius * radius)).exp()
            }
        }
    }
}

fn segment_dist2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
    let u = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ap[i] - u * ab[i]).powi(2)).sum()
}

fn structure_rng(seed: u64, channel: usize, kind: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((channel as u64) << 40) | (kind << 32) | index as u64);
    rng
}

fn sample_structures(spec: &PhantomSpec, channel: usize) -> Vec<Structure> {
    let d = spec.dims.map(|v| v as f64);
    let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut out = Vec::new();
    let sh = &spec.shells;
    for i in 0..sh.count {
        let mut rng = structure_rng(spec.seed, channel, 1, i);
        let axes = [0, 1, 2].map(|_| rng.random_range(sh.radius[0]..=sh.radius[1]) * dmin);
        let center = if sh.centered {
            d.map(|v| (v - 1.0) / 2.0)
        } else {
            [0, 1, 2].map(|k| rng.random_range(0.2 * d[k]..0.8 * d[k]))
        };
        out.push(Structure::Shell {
            center,
            axes,
            thickness: sh.thickness,
            peak: rng.random_range(spec.contrast[0]..=spec.contrast[1]),
        });
    }
    let fl = &spec.filaments;
    for i in 0..fl.count {
        let mut rng = structure_rng(spec.seed, channel, 2, i);
        let mut p = [0, 1, 2].map(|k| rng.random_range(0.1 * d[k]..0.9 * d[k]));
        let mut points = vec![p];
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 0..fl.segments.max(1) {
            let th = theta + rng.random_range(-0.6..0.6);
            let dz: f64 = rng.random_range(-fl.max_slope..=fl.max_slope);
            let h = (1.0 - dz * dz).max(0.0).sqrt();
            let step = fl.length * dmin;
            p = [
                p[0] + dz * step,
                p[1] + h * th.sin() * step,
                p[2] + h * th.cos() * step,
            ];
            points.push(p);
        }
        out.push(Structure::Filament {
            points,
            radius: rng.random_range(fl.radius[0]..=fl.radius[1]),
            peak: rng.random_range(spec.contrast[0]..=spec.contrast[1]),
        });
    }
    out
}

/// Separable Gaussian blur along one axis of a `[z, y, x]` field with
/// replicate padding.
fn blur_axis(data: &mut [f64], dims: [usize; 3], axis: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let k = gaussian_kernel_1d(sigma, radius).expect("positive sigma");
    let n = dims[axis];
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let src = data.to_vec();
    let lines: Vec<usize> = (0..dims.iter().product::<usize>())
        .filter(|&i| (i / stride) % n == 0)
        .collect();
    let out = parallel::map(&lines, |&base| {
        (0..n)
            .map(|i| {
                k.iter()
                    .enumerate()
                    .map(|(j, &w)| {
                        let q =
                            (i as i64 + j as i64 - radius as i64).clamp(0, n as i64 - 1) as usize;
                        w * src[base + q * stride]
                    })
                    .sum::<f64>()
            })
            .collect::<Vec<f64>>()
    });
    for (&base, line) in lines.iter().zip(out) {
        for (i, v) in line.into_iter().enumerate() {
            data[base + i * stride] = v;
        }
    }
}

fn texture_field(spec: &PhantomSpec, channel: usize) -> Vec<f64> {
    let n: usize = spec.dims.iter().product();
    let tx = &spec.texture;
    if tx.amplitude == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = structure_rng(spec.seed, channel, 3, 0);
    let mut f: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    for axis in 0..3 {
        blur_axis(&mut f, spec.dims, axis, tx.correlation);
    }
    let mean = f.iter().sum::<f64>() / n as f64;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64)
        .sqrt()
        .max(1e-12);
    f.iter()
        .map(|v| tx.midpoint + tx.amplitude * (v - mean) / sd)
        .collect()
}

fn phantom_channel(spec: &PhantomSpec, channel: usize) -> Vec<f32> {
    let dims = spec.dims;
    let plane = dims[1] * dims[2];
    let structures = sample_structures(spec, channel);
    let ranges: Vec<(usize, usize)> = structures.iter().map(|s| s.z_range(dims[0])).collect();
    let mut field = texture_field(spec, channel);
    let planes = parallel::map_range(dims[0], |z| {
        let active: Vec<&Structure> = structures
            .iter()
            .zip(&ranges)
            .filter(|(_, r)| r.0 <= z && z <= r.1)
            .map(|(s, _)| s)
            .collect();
        let mut out = vec![0.0f64; plane];
        if active.is_empty() {
            return out;
        }
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                out[y * dims[2] + x] = active.iter().map(|s| s.value(p)).fold(0.0, f64::max);
            }
        }
        out
    });
    for (z, p) in planes.into_iter().enumerate() {
        for (f, v) in field[z * plane..(z + 1) * plane].iter_mut().zip(p) {
            *f = f.max(v);
        }
    }
    blur_axis(&mut field, dims, 1, spec.blur_xy);
    blur_axis(&mut field, dims, 2, spec.blur_xy);
    field
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0) as f32)
        .collect()
}

/// Rasterize shells, filaments and texture (max-composited), blur
/// laterally and clamp to `[0, 1]`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<VolumeGrid> {
    spec.validate()?;
    let mut data = Vec::with_capacity(spec.channels * spec.dims.iter().product::<usize>());
    for c in 0..spec.channels {
        data.extend(phantom_channel(spec, c));
    }
    VolumeGrid::new(spec.dims, spec.channels, data, [1.0; 3])
}

/// Gaussian z-blur with σ = `sigma_z` followed by keeping every `factor`-th
/// slice.
pub fn simulate_anisotropic(gt: &VolumeGrid, sigma_z: f64, factor: usize) -> Result<VolumeGrid> {
    DegradationOp::gaussian(factor, sigma_z).degrade_volume(gt)
}

/// Add i.i.d. Gaussian noise and clamp to `[0, 1]`.
pub fn add_noise(volume: &VolumeGrid, std: f64, seed: u64) -> Result<VolumeGrid> {
    if std < 0.0 {
        return Err(Error::Param(format!("noise std must be >= 0, got {std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = volume
        .data()
        .iter()
        .map(|&v| {
            let e: f64 = rng.sample(StandardNormal);
            (v as f64 + std * e).clamp(0.0, 1.0) as f32
        })
        .collect();
    VolumeGrid::new(volume.dims(), volume.channels(), data, volume.spacing())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub z: usize,
    pub y: usize,
    pub x: usize,
    pub image: Image<f32>,
}

/// `count` random `patch × patch` crops of XY slices.
pub fn extract_lateral_patches(
    aniso: &VolumeGrid,
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Patch>> {
    let [dz, dy, dx] = aniso.dims();
    if patch == 0 || patch > dy.min(dx) {
        return Err(Error::Config(format!(
            "patch {patch} does not fit a {dy}x{dx} lateral slice"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = aniso.channels();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let z = rng.random_range(0..dz);
        let y = rng.random_range(0..=dy - patch);
        let x = rng.random_range(0..=dx - patch);
        let mut img = Image::zeros(c, patch, patch);
        for ch in 0..c {
            for r in 0..patch {
                for q in 0..patch {
                    *img.at_mut(ch, r, q) = aniso.get(ch, z, y + r, x + q);
                }
            }
        }
        out.push(Patch {
            z,
            y,
            x,
            image: img,
        });
    }
    Ok(out)
}

/// Stack equally sized images along z.
pub fn stack_images(images: &[Image<f32>]) -> Result<VolumeGrid> {
    let first = images
        .first()
        .ok_or_else(|| Error::Param("cannot stack zero images".into()))?;
    if images.iter().any(|i| !i.same_shape(first)) {
        return Err(Error::Shape("stacked images must share a shape".into()));
    }
    let (c, h, w) = (first.channels, first.rows, first.cols);
    let plane = h * w;
    let mut data = vec![0f32; c * images.len() * plane];
    for (z, img) in images.iter().enumerate() {
        for ch in 0..c {
            data[(ch * images.len() + z) * plane..(ch * images.len() + z + 1) * plane]
                .copy_from_slice(img.channel(ch));
        }
    }
    VolumeGrid::new([images.len(), h, w], c, data, [1.0; 3])
}

/// Split a z-stack back into images.
pub fn unstack_images(stack: &VolumeGrid) -> Vec<Image<f32>> {
    (0..stack.dims()[0])
        .map(|z| {
            stack
                .slice(crate::volume::Orientation::XY, z)
                .expect("index in range")
        })
        .collect()
}

/// Two-mode toy dataset: each patch is uniformly black or uniformly white.
pub fn two_mode_patches(count: usize, size: usize, seed: u64) -> Vec<Image<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            Image::from_vec(1, size, size, vec![v; size * size]).expect("consistent shape")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleConfig {
    pub phantom: PhantomSpec,
    pub sigma_z: f64,
    pub factor: usize,
    pub noise_std: f64,
    pub patch: usize,
    pub patch_count: usize,
    pub patch_seed: u64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        BundleConfig {
            phantom: PhantomSpec::default(),
            sigma_z: 2.0,
            factor: 4,
            noise_std: 0.0,
            patch: 32,
            patch_count: 2000,
            patch_seed: 1,
        }
    }
}

impl BundleConfig {
    /// Stronger blur and a larger subsampling factor.
    pub fn full_scale() -> Self {
        BundleConfig {
            sigma_z: 4.0,
            factor: 8,
            ..BundleConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub format: String,
    pub version: u32,
    pub config: BundleConfig,
    pub degradation: DegradationOp,
    pub gt_dims: [usize; 3],
    pub aniso_dims: [usize; 3],
    pub patch_origins: Vec<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

pub const GT_FILE: &str = "gt.volume";
pub const ANISO_FILE: &str = "aniso.volume";
pub const PATCHES_FILE: &str = "patches.volume";
pub const BUNDLE_FILE: &str = "bundle.json";

pub struct Bundle {
    pub gt: VolumeGrid,
    pub aniso: VolumeGrid,
    pub patches: Vec<Patch>,
    pub meta: BundleMeta,
}

pub fn make_bundle(cfg: &BundleConfig) -> Result<Bundle> {
    let gt = make_phantom(&cfg.phantom)?;
    let op = DegradationOp::gaussian(cfg.factor, cfg.sigma_z);
    op.validate()?;
    debug_assert_eq!(op.mode, DegradationMode::GaussianSubsample);
    let mut aniso = op.degrade_volume(&gt)?;
    if cfg.noise_std > 0.0 {
        aniso = add_noise(&aniso, cfg.noise_std, cfg.phantom.seed ^ 0x6e6f697365)?;
    }
    let patches = extract_lateral_patches(&aniso, cfg.patch, cfg.patch_count, cfg.patch_seed)?;
    let meta = BundleMeta {
        format: "isorec-bundle".into(),
        version: 1,
        config: cfg.clone(),
        degradation: op,
        gt_dims: gt.dims(),
        aniso_dims: aniso.dims(),
        patch_origins: patches.iter().map(|p| [p.z, p.y, p.x]).collect(),
        manifest: None,
    };
    Ok(Bundle {
        gt,
        aniso,
        patches,
        meta,
    })
}

/// Write the three volumes of a bundle.
pub fn write_bundle_volumes(bundle: &Bundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::save_volume(&bundle.gt, dir.join(GT_FILE))?;
    io::save_volume(&bundle.aniso, dir.join(ANISO_FILE))?;
    let imgs: Vec<Image<f32>> = bundle.patches.iter().map(|p| p.image.clone()).collect();
    io::save_volume(&stack_images(&imgs)?, dir.join(PATCHES_FILE))
}

pub fn write_bundle_meta(meta: &BundleMeta, dir: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(meta)?;
    io::write_file_atomic(&dir.join(BUNDLE_FILE), &json)
}

/// Write the bundle; `bundle.json` goes last so its presence marks a
/// complete bundle.
pub fn write_bundle(bundle: &Bundle, dir: &Path) -> Result<()> {
    write_bundle_volumes(bundle, dir)?;
    write_bundle_meta(&bundle.meta, dir)
}

pub fn read_bundle_meta(dir: &Path) -> Result<BundleMeta> {
    let p = dir.join(BUNDLE_FILE);
    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
