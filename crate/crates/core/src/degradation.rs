//! Axial degradation operator: z-directed Gaussian blur followed by stride
//! subsampling, or block averaging.
//!
//! The operator acts on the row axis of an axial image (rows = z). It is
//! linear, so alongside [`DegradationOp::degrade`] it exposes the adjoint,
//! which the reconstruction loop uses to pull gradients back through it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Image, VolumeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationMode {
    GaussianSubsample,
    LinearAverage,
}

/// Normalized, symmetric Gaussian taps `w_k ∝ exp(-k² / 2σ²)`, `k ∈ [-radius, radius]`.
pub fn gaussian_kernel_1d(sigma: f64, radius: usize) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Param(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    if radius == 0 {
        return Err(Error::Param(
            "gaussian kernel radius must be at least 1".into(),
        ));
    }
    let r = radius as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationOp {
    pub mode: DegradationMode,
    pub factor: usize,
    /// Blur standard deviation in high-resolution voxels (gaussian mode only).
    #[serde(default)]
    pub sigma_z: f64,
    /// Kernel half-width (gaussian mode only).
    #[serde(default)]
    pub kernel_radius: usize,
    /// High-resolution row kept from each block of `factor` rows (gaussian mode only).
    #[serde(default)]
    pub phase: usize,
}

impl DegradationOp {
    /// Gaussian blur + subsample with radius `⌈3σ⌉` and phase `⌊s/2⌋`.
    pub fn gaussian(factor: usize, sigma_z: f64) -> Self {
        DegradationOp {
            mode: DegradationMode::GaussianSubsample,
            factor,
            sigma_z,
            kernel_radius: ((3.0 * sigma_z).ceil() as usize).max(1),
            phase: factor / 2,
        }
    }

    pub fn linear(factor: usize) -> Self {
        DegradationOp {
            mode: DegradationMode::LinearAverage,
            factor,
            sigma_z: 0.0,
            kernel_radius: 0,
            phase: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor < 2 {
            return Err(Error::Param(format!(
                "downsampling factor must be >= 2, got {}",
                self.factor
            )));
        }
        if self.mode == DegradationMode::GaussianSubsample {
            gaussian_kernel_1d(self.sigma_z, self.kernel_radius)?;
            if self.phase >= self.factor {
                return Err(Error::Param(format!(
                    "phase {} must be below factor {}",
                    self.phase, self.factor
                )));
            }
        }
        Ok(())
    }

    /// High-resolution position (in voxels) that low-resolution row `k` represents.
    pub fn sample_center(&self, k: usize) -> f64 {
        let base = (k * self.factor) as f64;
        match self.mode {
            DegradationMode::GaussianSubsample => base + self.phase as f64,
            DegradationMode::LinearAverage => base + (self.factor as f64 - 1.0) / 2.0,
        }
    }

    pub fn output_len(&self, rows: usize) -> Result<usize> {
        self.validate()?;
        if rows == 0 || !rows.is_multiple_of(self.factor) {
            return Err(Error::Shape(format!(
                "row count {rows} is not a positive multiple of factor {}",
                self.factor
            )));
        }
        Ok(rows / self.factor)
    }

    /// Sparse rows of the operator matrix for an axis of `rows` samples:
    /// output row `k` is `Σ w · x[src]` over its taps.
    pub fn taps(&self, rows: usize) -> Result<Vec<Vec<(usize, f64)>>> {
        let m = self.output_len(rows)?;
        let s = self.factor;
        Ok(match self.mode {
            DegradationMode::GaussianSubsample => {
                let w = gaussian_kernel_1d(self.sigma_z, self.kernel_radius)?;
                let r = self.kernel_radius as i64;
                (0..m)
                    .map(|k| {
                        let center = (k * s + self.phase) as i64;
                        let mut taps: Vec<(usize, f64)> = Vec::new();
                        for (j, &wj) in w.iter().enumerate() {
                            // replicate padding at both ends
                            let src = (center + j as i64 - r).clamp(0, rows as i64 - 1) as usize;
                            match taps.iter_mut().find(|(i, _)| *i == src) {
                                Some(t) => t.1 += wj,
                                None => taps.push((src, wj)),
                            }
                        }
                        taps
                    })
                    .collect()
            }
            DegradationMode::LinearAverage => (0..m)
                .map(|k| (k * s..(k + 1) * s).map(|i| (i, 1.0 / s as f64)).collect())
                .collect(),
        })
    }

    /// Degrade along rows: `(s·m × w)` → `(m × w)` per channel.
    pub fn degrade<F: Scalar>(&self, hr: &Image<F>) -> Result<Image<F>> {
        let taps = self.taps(hr.rows)?;
        Ok(apply_taps(&taps, hr))
    }

    /// Adjoint of [`degrade`](Self::degrade): `(m × w)` → `(s·m × w)`.
    pub fn adjoint<F: Scalar>(&self, lr: &Image<F>, hr_rows: usize) -> Result<Image<F>> {
        let taps = self.taps(hr_rows)?;
        if taps.len() != lr.rows {
            return Err(Error::Shape(format!(
                "adjoint input has {} rows, operator produces {}",
                lr.rows,
                taps.len()
            )));
        }
        Ok(apply_taps_adjoint(&taps, lr, hr_rows))
    }

    /// Apply the operator to every z-column of a volume.
    pub fn degrade_volume(&self, volume: &VolumeGrid) -> Result<VolumeGrid> {
        let [dz, dy, dx] = volume.dims();
        let taps = self.taps(dz)?;
        let m = taps.len();
        let plane = dy * dx;
        let mut out = vec![0f32; volume.channels() * m * plane];
        for c in 0..volume.channels() {
            let src = volume.channel(c);
            for (k, row_taps) in taps.iter().enumerate() {
                let dst = &mut out[(c * m + k) * plane..(c * m + k + 1) * plane];
                let mut acc = vec![0f64; plane];
                for &(z, w) in row_taps {
                    for (a, &v) in acc.iter_mut().zip(&src[z * plane..(z + 1) * plane]) {
                        *a += w * v as f64;
                    }
                }
                for (d, a) in dst.iter_mut().zip(acc) {
                    *d = a.clamp(0.0, 1.0) as f32;
                }
            }
        }
        let mut spacing = volume.spacing();
        spacing[0] *= self.factor as f64;
        VolumeGrid::new([m, dy, dx], volume.channels(), out, spacing)?
            .with_transform(volume.scale().to_vec(), volume.offset().to_vec())
    }
}

fn apply_taps<F: Scalar>(taps: &[Vec<(usize, f64)>], hr: &Image<F>) -> Image<F> {
    let m = taps.len();
    let mut out = Image::zeros(hr.channels, m, hr.cols);
    for c in 0..hr.channels {
        for (k, row_taps) in taps.iter().enumerate() {
            let base = (c * m + k) * hr.cols;
            for &(src, w) in row_taps {
                let w = F::of(w);
                let s0 = (c * hr.rows + src) * hr.cols;
                for q in 0..hr.cols {
                    out.data[base + q] += w * hr.data[s0 + q];
                }
            }
        }
    }
    out
}

fn apply_taps_adjoint<F: Scalar>(
    taps: &[Vec<(usize, f64)>],
    lr: &Image<F>,
    hr_rows: usize,
) -> Image<F> {
    let mut out = Image::zeros(lr.channels, hr_rows, lr.cols);
    for c in 0..lr.channels {
        for (k, row_taps) in taps.iter().enumerate() {
            let l0 = (c * lr.rows + k) * lr.cols;
            for &(dst, w) in row_taps {
                let w = F::of(w);
                let d0 = (c * hr_rows + dst) * lr.cols;
                for q in 0..lr.cols {
                    out.data[d0 + q] += w * lr.data[l0 + q];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> Image<f64> {
        Image::from_vec(1, values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let w = gaussian_kernel_1d(0.5, 1).unwrap();
        let center = 1.0 / (1.0 + 2.0 * (-2.0f64).exp());
        assert!((w[1] - center).abs() < 1e-15);
        assert!((w[1] - 0.7870).abs() < 1e-4);
        for (s, r) in [(0.3, 1), (2.0, 6), (4.0, 12), (7.5, 3)] {
            let w = gaussian_kernel_1d(s, r).unwrap();
            assert_eq!(w.len(), 2 * r + 1);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for k in 0..r {
                assert_eq!(w[k], w[2 * r - k]);
            }
            assert!(w.iter().all(|&x| x >= 0.0));
        }
        assert!(gaussian_kernel_1d(0.0, 2).is_err());
        assert!(gaussian_kernel_1d(-1.0, 2).is_err());
        assert!(gaussian_kernel_1d(1.0, 0).is_err());
    }

    #[test]
    fn three_sigma_radius_keeps_mass() {
        for sigma in [0.7, 1.0, 2.0, 4.0] {
            let op = DegradationOp::gaussian(8, sigma);
            let r = op.kernel_radius as i64;
            let full: f64 = (-20 * r..=20 * r)
                .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
                .sum();
            let kept: f64 = (-r..=r)
                .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
                .sum();
            assert!(1.0 - kept / full < 3e-3, "sigma {sigma}");
        }
    }

    #[test]
    fn linear_average_example() {
        let op = DegradationOp::linear(2);
        let y = op.degrade(&column(&[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(y.data, vec![0.5, 0.5]);
    }

    #[test]
    fn delta_kernel_is_pure_subsampling() {
        let op = DegradationOp {
            mode: DegradationMode::GaussianSubsample,
            factor: 2,
            sigma_z: 1e-3,
            kernel_radius: 1,
            phase: 1,
        };
        let y = op.degrade(&column(&[0.1, 0.2, 0.3, 0.4])).unwrap();
        assert_eq!(y.data, vec![0.2, 0.4]);
    }

    #[test]
    fn constants_pass_through_both_modes() {
        let img = Image::from_vec(2, 8, 3, vec![0.625f64; 48]).unwrap();
        for op in [DegradationOp::gaussian(4, 2.0), DegradationOp::linear(4)] {
            let y = op.degrade(&img).unwrap();
            assert_eq!((y.channels, y.rows, y.cols), (2, 2, 3));
            assert!(y.data.iter().all(|v| (v - 0.625).abs() < 1e-12));
        }
    }

    #[test]
    fn shape_errors() {
        let op = DegradationOp::gaussian(4, 2.0);
        assert!(matches!(
            op.degrade(&column(&[0.0; 6])),
            Err(Error::Shape(_))
        ));
        assert!(DegradationOp::linear(1).validate().is_err());
        let mut bad = DegradationOp::gaussian(4, 1.0);
        bad.phase = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adjoint_identity() {
        let op = DegradationOp::gaussian(4, 1.5);
        let x: Vec<f64> = (0..32 * 3).map(|i| ((i * 37 % 11) as f64) / 11.0).collect();
        let y: Vec<f64> = (0..8 * 3)
            .map(|i| ((i * 13 % 7) as f64) / 7.0 - 0.5)
            .collect();
        let xi = Image::from_vec(1, 32, 3, x.clone()).unwrap();
        let yi = Image::from_vec(1, 8, 3, y.clone()).unwrap();
        let ax = op.degrade(&xi).unwrap();
        let aty = op.adjoint(&yi, 32).unwrap();
        let lhs: f64 = ax.data.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn volume_shape_and_spacing() {
        let g = VolumeGrid::filled([16, 8, 8], 1, 0.3, [1.0, 1.0, 1.0]).unwrap();
        let d = DegradationOp::gaussian(8, 4.0).degrade_volume(&g).unwrap();
        assert_eq!(d.dims(), [2, 8, 8]);
        assert_eq!(d.spacing(), [8.0, 1.0, 1.0]);
        assert!(d.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }
}
