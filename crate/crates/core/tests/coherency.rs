use isorec::nn::{Adam, AdamConfig};
use isorec::{export_volume, init_inr, InrConfig, InrModel, Orientation, SlicePlan};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// An INR pushed away from its initialization by a few random Adam steps.
fn trained(seed: u64, channels: usize) -> InrModel<f32> {
    let cfg = InrConfig {
        fourier_features: 16,
        width: 24,
        depth: 3,
        ..InrConfig::desk(channels)
    };
    let mut m = init_inr::<f32>(&cfg, seed).unwrap();
    let mut adam = Adam::new(AdamConfig::with_lr(1e-2), m.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..5 {
        let g: Vec<f32> = (0..m.param_count())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        adam.update(&mut m.params, &g);
    }
    m
}

fn slice(m: &InrModel<f32>, o: Orientation, i: usize, dims: [usize; 3]) -> isorec::Image<f32> {
    m.query_slice(&SlicePlan::full(o, i, dims).unwrap())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn orthogonal_slices_agree_on_intersections(
        seed in 0u64..1000,
        dz in 3usize..20,
        dy in 3usize..20,
        dx in 3usize..20,
        channels in 1usize..3,
    ) {
        let m = trained(seed, channels);
        let dims = [dz, dy, dx];
        let (z, y, x) = (dz / 2, dy / 3, dx - 1);
        let zx = slice(&m, Orientation::ZX, y, dims);
        let zy = slice(&m, Orientation::ZY, x, dims);
        let xy = slice(&m, Orientation::XY, z, dims);
        for c in 0..channels {
            for r in 0..dz {
                prop_assert_eq!(zx.at(c, r, x).to_bits(), zy.at(c, r, y).to_bits());
            }
            for q in 0..dx {
                prop_assert_eq!(zx.at(c, z, q).to_bits(), xy.at(c, y, q).to_bits());
            }
            for q in 0..dy {
                prop_assert_eq!(zy.at(c, z, q).to_bits(), xy.at(c, q, x).to_bits());
            }
        }
    }
}

#[test]
fn export_is_deterministic_and_matches_slices() {
    let m = trained(7, 1);
    let dims = [12, 9, 10];
    let a = export_volume(&m, dims, [0.25, 1.0, 1.0]).unwrap();
    let b = export_volume(&m, dims, [0.25, 1.0, 1.0]).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.spacing(), [0.25, 1.0, 1.0]);
    for y in [0, 4, 8] {
        let s = slice(&m, Orientation::ZX, y, dims);
        for z in 0..12 {
            for x in 0..10 {
                assert_eq!(a.get(0, z, y, x), s.at(0, z, x).clamp(0.0, 1.0));
            }
        }
    }
}

#[test]
fn sequential_and_parallel_queries_agree() {
    let m = trained(3, 2);
    let dims = [16, 16, 16];
    let par = export_volume(&m, dims, [1.0; 3]).unwrap();
    let seq = isorec::parallel::with_mode(isorec::parallel::Mode::Sequential, || {
        export_volume(&m, dims, [1.0; 3]).unwrap()
    });
    assert_eq!(par.data(), seq.data());
}
