use isorec::metrics::{evaluate_volumes, linear_interp_volume, psnr, ssim};
use isorec::simulate::{add_noise, make_phantom, simulate_anisotropic, PhantomSpec};
use isorec::{Orientation, VolumeGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct per-window SSIM with a full 2D Gaussian weight table.
fn brute_ssim(a: &[f32], b: &[f32], rows: usize, cols: usize) -> f64 {
    let k = 11usize;
    let sigma = 1.5f64;
    let mut w = vec![0.0f64; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            w[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for r0 in 0..=rows - k {
        for q0 in 0..=cols - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (r0 + i) * cols + q0 + j;
                    mx += w[i * k + j] * a[p] as f64;
                    my += w[i * k + j] * b[p] as f64;
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (r0 + i) * cols + q0 + j;
                    let (dx, dy) = (a[p] as f64 - mx, b[p] as f64 - my);
                    vx += w[i * k + j] * dx * dx;
                    vy += w[i * k + j] * dy * dy;
                    cxy += w[i * k + j] * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn random_pair(seed: u64, rows: usize, cols: usize) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f32> = (0..rows * cols).map(|_| rng.random()).collect();
    let b: Vec<f32> = a
        .iter()
        .map(|&v| (0.6 * v + 0.4 * rng.random::<f32>()).clamp(0.0, 1.0))
        .collect();
    (a, b)
}

#[test]
fn ssim_matches_brute_force() {
    for seed in 0..20 {
        let (a, b) = random_pair(seed, 16, 16);
        let fast = ssim(&a, &b, 16, 16).unwrap();
        let slow = brute_ssim(&a, &b, 16, 16);
        assert!((fast - slow).abs() < 1e-6, "seed {seed}: {fast} vs {slow}");
    }
    let (a, b) = random_pair(99, 23, 17);
    assert!((ssim(&a, &b, 23, 17).unwrap() - brute_ssim(&a, &b, 23, 17)).abs() < 1e-6);
}

#[test]
fn ssim_identity_and_symmetry() {
    let (a, b) = random_pair(4, 16, 16);
    assert!((ssim(&a, &a, 16, 16).unwrap() - 1.0).abs() < 1e-12);
    assert!((ssim(&a, &b, 16, 16).unwrap() - ssim(&b, &a, 16, 16).unwrap()).abs() < 1e-12);
    assert!(ssim(&a, &b, 10, 10).is_err());
    assert!(ssim(&a[..100], &b[..100], 10, 10).is_err());
}

#[test]
fn psnr_closed_form() {
    let a = vec![0.0f32; 64];
    let b = vec![0.5f32; 64];
    let v = psnr(&a, &b, 1.0).unwrap();
    assert!((v - 6.021).abs() < 1e-3, "{v}");
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    assert!(psnr(&a, &b[..10], 1.0).is_err());
    assert!(psnr(&a, &b, 0.0).is_err());
}

#[test]
fn evaluation_reports_every_slice() {
    let gt = make_phantom(&PhantomSpec {
        dims: [16, 20, 24],
        ..PhantomSpec::default()
    })
    .unwrap();
    let report = evaluate_volumes(&gt, &gt).unwrap();
    assert_eq!(report.slices.len(), 16 + 20 + 24);
    assert_eq!(report.to_csv().lines().count(), 1 + 16 + 20 + 24);
    assert!(report
        .slices
        .iter()
        .all(|s| (s.ssim - 1.0).abs() < 1e-12 && s.psnr.is_infinite()));
    let table = report.summary_table();
    for o in Orientation::ALL {
        assert!(table.contains(o.name()));
    }
    let other = VolumeGrid::filled([16, 20, 23], 1, 0.0, [1.0; 3]).unwrap();
    assert!(evaluate_volumes(&gt, &other).is_err());
}

#[test]
fn psnr_falls_as_noise_grows() {
    let gt = make_phantom(&PhantomSpec {
        dims: [16, 16, 16],
        ..PhantomSpec::default()
    })
    .unwrap();
    let mut last = f64::INFINITY;
    for (i, std) in [0.01, 0.03, 0.1, 0.3].into_iter().enumerate() {
        let noisy = add_noise(&gt, std, i as u64).unwrap();
        let p = evaluate_volumes(&noisy, &gt).unwrap().axial_psnr();
        assert!(p < last, "{std}: {p} !< {last}");
        last = p;
    }
}

#[test]
fn linear_interpolation_recovers_linear_ramps() {
    let dims = [32, 4, 4];
    let data: Vec<f32> = (0..32 * 16).map(|i| (i / 16) as f32 / 31.0).collect();
    let gt = VolumeGrid::new(dims, 1, data, [1.0; 3]).unwrap();
    let aniso = simulate_anisotropic(&gt, 1.0, 4).unwrap();
    let up = linear_interp_volume(&aniso, 4, 2.0).unwrap();
    assert_eq!(up.dims(), dims);
    for z in 6..=26 {
        assert!(
            (up.get(0, z, 1, 1) - gt.get(0, z, 1, 1)).abs() < 1e-4,
            "z={z}"
        );
    }
}

proptest! {
    #[test]
    fn ssim_bounded_and_symmetric(seed in 0u64..10_000) {
        let (a, b) = random_pair(seed, 12, 14);
        let s = ssim(&a, &b, 12, 14).unwrap();
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
        prop_assert!((s - ssim(&b, &a, 12, 14).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn psnr_shift_invariant_in_error(shift in -0.5f32..0.5, d in 0.01f32..0.4) {
        let a: Vec<f32> = (0..50).map(|i| i as f32 / 50.0 + shift).collect();
        let b: Vec<f32> = a.iter().map(|v| v + d).collect();
        let expect = 10.0 * (1.0 / (d as f64 * d as f64)).log10();
        prop_assert!((psnr(&a, &b, 1.0).unwrap() - expect).abs() < 1e-3);
    }
}
