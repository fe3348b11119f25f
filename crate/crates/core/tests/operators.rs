use isorec::sds::data_fidelity;
use isorec::simulate::simulate_anisotropic;
use isorec::{DegradationOp, Image, VolumeGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense `m × n` matrix built by pushing unit vectors through the operator.
fn dense_matrix(op: &DegradationOp, n: usize) -> Vec<Vec<f64>> {
    let m = n / op.factor;
    let mut a = vec![vec![0.0; n]; m];
    for j in 0..n {
        let mut e = vec![0.0f64; n];
        e[j] = 1.0;
        let col = op.degrade(&Image::from_vec(1, n, 1, e).unwrap()).unwrap();
        for i in 0..m {
            a[i][j] = col.data[i];
        }
    }
    a
}

/// Matrix written out from the definition: replicate-padded Gaussian taps at
/// `k·s + phase`, or block means.
fn reference_matrix(op: &DegradationOp, n: usize) -> Vec<Vec<f64>> {
    let m = n / op.factor;
    let mut a = vec![vec![0.0; n]; m];
    match op.mode {
        isorec::DegradationMode::GaussianSubsample => {
            let r = op.kernel_radius as i64;
            let w: Vec<f64> = (-r..=r)
                .map(|k| (-(k * k) as f64 / (2.0 * op.sigma_z * op.sigma_z)).exp())
                .collect();
            let total: f64 = w.iter().sum();
            for (k, row) in a.iter_mut().enumerate() {
                let c = (k * op.factor + op.phase) as i64;
                for (j, wj) in (-r..=r).zip(&w) {
                    let src = (c + j).clamp(0, n as i64 - 1) as usize;
                    row[src] += wj / total;
                }
            }
        }
        isorec::DegradationMode::LinearAverage => {
            for (k, row) in a.iter_mut().enumerate() {
                for v in &mut row[k * op.factor..(k + 1) * op.factor] {
                    *v = 1.0 / op.factor as f64;
                }
            }
        }
    }
    a
}

fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Image<f64> {
    Image::from_vec(
        1,
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap()
}

fn ops() -> Vec<DegradationOp> {
    vec![
        DegradationOp::gaussian(4, 2.0),
        DegradationOp::gaussian(2, 0.7),
        DegradationOp::gaussian(8, 3.5),
        DegradationOp::linear(4),
        DegradationOp::linear(2),
    ]
}

#[test]
fn degrade_matches_explicit_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for op in ops() {
        for n in [8usize, 16, 32, 64] {
            if n % op.factor != 0 {
                continue;
            }
            let a = reference_matrix(&op, n);
            let dense = dense_matrix(&op, n);
            for (ra, rd) in a.iter().zip(&dense) {
                for (x, y) in ra.iter().zip(rd) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
            let cols = 5;
            let x = random_image(&mut rng, n, cols);
            let y = op.degrade(&x).unwrap();
            for k in 0..n / op.factor {
                for c in 0..cols {
                    let expect: f64 = (0..n).map(|j| a[k][j] * x.at(0, j, c)).sum();
                    assert!((y.at(0, k, c) - expect).abs() < 1e-6, "{op:?} n={n}");
                }
            }
        }
    }
}

#[test]
fn data_fidelity_is_mean_squared_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for op in ops() {
        let n = 64;
        let a = reference_matrix(&op, n);
        let x = random_image(&mut rng, n, 7);
        let y = random_image(&mut rng, n / op.factor, 7);
        let term = data_fidelity(&x, &y, &op).unwrap();
        let mut sum = 0.0;
        for k in 0..n / op.factor {
            for c in 0..7 {
                let ax: f64 = (0..n).map(|j| a[k][j] * x.at(0, j, c)).sum();
                sum += (ax - y.at(0, k, c)).powi(2);
            }
        }
        let expect = sum / y.data.len() as f64;
        assert!(
            (term.value - expect).abs() < 1e-6,
            "{op:?}: {} vs {expect}",
            term.value
        );
    }
}

#[test]
fn adjoint_is_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for op in ops() {
        let n = 32;
        let x = random_image(&mut rng, n, 3);
        let y = random_image(&mut rng, n / op.factor, 3);
        let ax = op.degrade(&x).unwrap();
        let aty = op.adjoint(&y, n).unwrap();
        let lhs: f64 = ax.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&aty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

#[test]
fn anisotropic_volume_applies_matrix_per_column() {
    let dims = [16, 3, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f32> = (0..dims.iter().product::<usize>())
        .map(|_| rng.random())
        .collect();
    let gt = VolumeGrid::new(dims, 1, data, [1.0; 3]).unwrap();
    let aniso = simulate_anisotropic(&gt, 2.0, 4).unwrap();
    assert_eq!(aniso.dims(), [4, 3, 4]);
    assert_eq!(aniso.spacing()[0], 4.0);
    let a = reference_matrix(&DegradationOp::gaussian(4, 2.0), 16);
    for k in 0..4 {
        for y in 0..3 {
            for x in 0..4 {
                let expect: f64 = (0..16).map(|z| a[k][z] * gt.get(0, z, y, x) as f64).sum();
                assert!((aniso.get(0, k, y, x) as f64 - expect).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn degrade_rejects_bad_lengths() {
    let op = DegradationOp::gaussian(4, 2.0);
    let x = Image::<f64>::zeros(1, 10, 2);
    assert!(op.degrade(&x).is_err());
    assert!(DegradationOp::linear(1).validate().is_err());
}

proptest! {
    #[test]
    fn degrade_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0, factor in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = DegradationOp::gaussian(factor, 1.5);
        let n = factor * 6;
        let x = random_image(&mut rng, n, 2);
        let z = random_image(&mut rng, n, 2);
        let mix = Image::from_vec(1, n, 2, x.data.iter().zip(&z.data).map(|(a, b)| alpha * a + b).collect()).unwrap();
        let lhs = op.degrade(&mix).unwrap();
        let (dx, dz) = (op.degrade(&x).unwrap(), op.degrade(&z).unwrap());
        for i in 0..lhs.data.len() {
            prop_assert!((lhs.data[i] - (alpha * dx.data[i] + dz.data[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn degrade_preserves_constants(v in -5.0f64..5.0, factor in 2usize..6, sigma in 0.3f64..4.0) {
        let op = DegradationOp::gaussian(factor, sigma);
        let n = factor * 4;
        let x = Image::from_vec(1, n, 3, vec![v; n * 3]).unwrap();
        for y in op.degrade(&x).unwrap().data {
            prop_assert!((y - v).abs() < 1e-10);
        }
    }

    #[test]
    fn data_fidelity_zero_iff_consistent(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = DegradationOp::linear(2);
        let x = random_image(&mut rng, 8, 3);
        let y = op.degrade(&x).unwrap();
        let t = data_fidelity(&x, &y, &op).unwrap();
        prop_assert!(t.value.abs() < 1e-20);
        prop_assert!(t.grad.data.iter().all(|g| g.abs() < 1e-12));
    }
}
