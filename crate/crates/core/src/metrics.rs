//! Linear-interpolation baseline and image-quality metrics (PSNR, SSIM)
//! evaluated over the ZX, ZY and XY plane families of a volume.

use std::fmt::Write as _;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::parallel;
use crate::volume::{Orientation, VolumeGrid};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Upsample along z by `factor` with linear interpolation. Low-resolution
/// slice `k` sits at high-resolution position `k·factor + center_offset`;
/// positions outside the first/last sample replicate the end slices.
pub fn linear_interp_volume(
    aniso: &VolumeGrid,
    factor: usize,
    center_offset: f64,
) -> Result<VolumeGrid> {
    if factor < 2 {
        return Err(Error::Param(format!(
            "upsampling factor must be >= 2, got {factor}"
        )));
    }
    let [dz, dy, dx] = aniso.dims();
    let nz = dz * factor;
    let plane = dy * dx;
    let mut out = vec![0f32; aniso.channels() * nz * plane];
    for c in 0..aniso.channels() {
        let src = aniso.channel(c);
        for z in 0..nz {
            let u = ((z as f64 - center_offset) / factor as f64).clamp(0.0, (dz - 1) as f64);
            let k0 = (u.floor() as usize).min(dz - 1);
            let k1 = (k0 + 1).min(dz - 1);
            let frac = u - k0 as f64;
            let dst = &mut out[(c * nz + z) * plane..(c * nz + z + 1) * plane];
            let (a, b) = (
                &src[k0 * plane..(k0 + 1) * plane],
                &src[k1 * plane..(k1 + 1) * plane],
            );
            for i in 0..plane {
                let v = if frac == 0.0 {
                    a[i] as f64
                } else {
                    (1.0 - frac) * a[i] as f64 + frac * b[i] as f64
                };
                dst[i] = v as f32;
            }
        }
    }
    let mut spacing = aniso.spacing();
    spacing[0] /= factor as f64;
    VolumeGrid::new([nz, dy, dx], aniso.channels(), out, spacing)
}

/// `10·log10(peak² / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "psnr inputs have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::Param(format!(
            "psnr peak must be positive, got {peak}"
        )));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as i64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let k = i as i64 - r;
        *v = (-((k * k) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of a `rows × cols` image.
fn filter_valid(img: &[f64], rows: usize, cols: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (or, oc) = (rows - k + 1, cols - k + 1);
    let mut tmp = vec![0.0; rows * oc];
    for r in 0..rows {
        for c in 0..oc {
            tmp[r * oc + c] = (0..k).map(|j| taps[j] * img[r * cols + c + j]).sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for r in 0..or {
        for c in 0..oc {
            out[r * oc + c] = (0..k).map(|j| taps[j] * tmp[(r + j) * oc + c]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, averaged over valid window positions.
pub fn ssim(a: &[f32], b: &[f32], rows: usize, cols: usize) -> Result<f64> {
    if a.len() != rows * cols || b.len() != rows * cols {
        return Err(Error::Shape(format!(
            "ssim inputs do not match {rows}x{cols}"
        )));
    }
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::Param(format!(
            "image {rows}x{cols} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let taps = ssim_taps();
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(&x, rows, cols, &taps);
    let my = filter_valid(&y, rows, cols, &taps);
    let mxx = filter_valid(&xx, rows, cols, &taps);
    let myy = filter_valid(&yy, rows, cols, &taps);
    let mxy = filter_valid(&xy, rows, cols, &taps);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

pub fn format_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "inf".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceMetric {
    pub family: Orientation,
    pub index: usize,
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyMetrics {
    pub family: Orientation,
    pub count: usize,
    #[serde(serialize_with = "serialize_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub peak: f64,
    pub dims: [usize; 3],
    pub channels: usize,
    pub families: Vec<FamilyMetrics>,
    pub slices: Vec<SliceMetric>,
}

impl MetricsReport {
    pub fn family(&self, f: Orientation) -> &FamilyMetrics {
        self.families
            .iter()
            .find(|m| m.family == f)
            .expect("every family is evaluated")
    }

    /// Mean over the two axial families.
    pub fn axial_psnr(&self) -> f64 {
        0.5 * (self.family(Orientation::ZX).mean_psnr + self.family(Orientation::ZY).mean_psnr)
    }

    pub fn axial_ssim(&self) -> f64 {
        0.5 * (self.family(Orientation::ZX).mean_ssim + self.family(Orientation::ZY).mean_ssim)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("family,index,psnr,ssim\n");
        for m in &self.slices {
            let _ = writeln!(
                s,
                "{},{},{},{:.9}",
                m.family.name(),
                m.index,
                format_db(m.psnr),
                m.ssim
            );
        }
        s
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::from("family  slices  mean_psnr_db  mean_ssim\n");
        for f in &self.families {
            let _ = writeln!(
                s,
                "{:<6}  {:>6}  {:>12}  {:>9.6}",
                f.family.name(),
                f.count,
                format_db(f.mean_psnr),
                f.mean_ssim
            );
        }
        s
    }
}

/// Slice-wise PSNR/SSIM of every ZX, ZY and XY plane, averaged over channels.
pub fn evaluate_volumes(recon: &VolumeGrid, gt: &VolumeGrid) -> Result<MetricsReport> {
    if recon.dims() != gt.dims() || recon.channels() != gt.channels() {
        return Err(Error::Shape(format!(
            "cannot compare {:?}x{} with {:?}x{}",
            recon.dims(),
            recon.channels(),
            gt.dims(),
            gt.channels()
        )));
    }
    let dims = gt.dims();
    let jobs: Vec<(Orientation, usize)> = Orientation::ALL
        .iter()
        .flat_map(|&o| (0..dims[o.fixed_axis()]).map(move |i| (o, i)))
        .collect();
    let results = parallel::map(&jobs, |&(o, i)| -> Result<SliceMetric> {
        let a = recon.slice(o, i)?;
        let b = gt.slice(o, i)?;
        let (mut p, mut q) = (0.0, 0.0);
        for c in 0..gt.channels() {
            p += psnr(a.channel(c), b.channel(c), 1.0)?;
            q += ssim(a.channel(c), b.channel(c), a.rows, a.cols)?;
        }
        let n = gt.channels() as f64;
        Ok(SliceMetric {
            family: o,
            index: i,
            psnr: p / n,
            ssim: q / n,
        })
    });
    let slices: Vec<SliceMetric> = results.into_iter().collect::<Result<_>>()?;
    let families = Orientation::ALL
        .iter()
        .map(|&o| {
            let fam: Vec<&SliceMetric> = slices.iter().filter(|m| m.family == o).collect();
            let n = fam.len() as f64;
            FamilyMetrics {
                family: o,
                count: fam.len(),
                mean_psnr: fam.iter().map(|m| m.psnr).sum::<f64>() / n,
                mean_ssim: fam.iter().map(|m| m.ssim).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(MetricsReport {
        peak: 1.0,
        dims,
        channels: gt.channels(),
        families,
        slices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = vec![0.25f32; 16];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let z = vec![0.0f32; 16];
        let h = vec![0.5f32; 16];
        assert!((psnr(&z, &h, 1.0).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert!((psnr(&z, &h, 1.0).unwrap() - 6.021).abs() < 1e-3);
        assert!(psnr(&z, &h[..3], 1.0).is_err());
        assert!(psnr(&z, &h, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_errors() {
        let a: Vec<f32> = (0..400).map(|i| ((i * 37 % 101) as f32) / 100.0).collect();
        let b: Vec<f32> = (0..400).map(|i| ((i * 53 % 97) as f32) / 96.0).collect();
        assert!((ssim(&a, &a, 20, 20).unwrap() - 1.0).abs() < 1e-9);
        let ab = ssim(&a, &b, 20, 20).unwrap();
        assert!((ab - ssim(&b, &a, 20, 20).unwrap()).abs() < 1e-9);
        assert!(ab < 1.0 && ab > -1.0);
        assert!(ssim(&a[..100], &b[..100], 10, 10).is_err());
    }

    #[test]
    fn linear_interp_hits_sample_centers_and_lines() {
        let g = VolumeGrid::new([2, 1, 1], 1, vec![0.0, 1.0], [4.0, 1.0, 1.0]).unwrap();
        let up = linear_interp_volume(&g, 4, 2.0).unwrap();
        assert_eq!(up.dims(), [8, 1, 1]);
        assert_eq!(up.spacing(), [1.0, 1.0, 1.0]);
        let d = up.data();
        assert_eq!(d[2], 0.0);
        assert_eq!(d[6], 1.0);
        for z in 2..=6 {
            assert!((d[z] as f64 - (z as f64 - 2.0) / 4.0).abs() < 1e-7);
        }
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert_eq!(d[7], 1.0);
        for w in d.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn evaluate_counts_and_identity() {
        let data: Vec<f32> = (0..12 * 13 * 14)
            .map(|i| ((i * 7919) % 1009) as f32 / 1008.0)
            .collect();
        let g = VolumeGrid::new([12, 13, 14], 1, data, [1.0; 3]).unwrap();
        let r = evaluate_volumes(&g, &g).unwrap();
        assert_eq!(r.family(Orientation::ZX).count, 13);
        assert_eq!(r.family(Orientation::ZY).count, 14);
        assert_eq!(r.family(Orientation::XY).count, 12);
        assert!(r
            .slices
            .iter()
            .all(|m| m.psnr == f64::INFINITY && (m.ssim - 1.0).abs() < 1e-9));
        assert_eq!(r.to_csv().lines().count(), 1 + 13 + 14 + 12);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"inf\""));
    }
}
