use isorec::diffusion::{
    ancestral_sample_batch, build_schedule, gaussian_image, perturb, NoisePredictor,
};
use isorec::{Image, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Zero;

impl NoisePredictor<f64> for Zero {
    fn channels(&self) -> usize {
        1
    }

    fn predict(&self, x_t: &Image<f64>, _t: usize) -> Result<Image<f64>> {
        Ok(Image::zeros(x_t.channels, x_t.rows, x_t.cols))
    }
}

/// Exact noise for a known constant clean image.
struct Knows {
    x0: f64,
    sched: isorec::diffusion::NoiseSchedule,
}

impl NoisePredictor<f64> for Knows {
    fn channels(&self) -> usize {
        1
    }

    fn predict(&self, x_t: &Image<f64>, t: usize) -> Result<Image<f64>> {
        let ab = self.sched.alpha_bar(t);
        Ok(x_t.map(|v| (v - ab.sqrt() * self.x0) / (1.0 - ab).sqrt()))
    }
}

#[test]
fn alpha_bar_matches_loop_product() {
    let s = build_schedule(1000, 1e-4, 0.02).unwrap();
    let mut prod = 1.0f64;
    for i in 0..1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
        prod *= 1.0 - beta;
        assert!((s.alpha_bar(i + 1) - prod).abs() <= 1e-10 * prod);
    }
    assert!((s.alpha_bar(1000) - prod).abs() / prod < 1e-10);
    assert_eq!(s.alpha_bar(0), 1.0);
    assert!(s.check_step(0).is_err() && s.check_step(1001).is_err());
}

#[test]
fn forward_marginal_statistics() {
    let s = build_schedule(1000, 1e-4, 0.02).unwrap();
    let n = 10_000;
    let x0 = 0.6f64;
    for t in [50usize, 250, 500] {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let xs = perturb(&vec![x0; n], t, &eps, &s).unwrap();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        let se = ((1.0 - ab) / n as f64).sqrt();
        assert!(
            (mean - ab.sqrt() * x0).abs() < 4.0 * se,
            "t={t}: mean {mean}"
        );
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.05, "t={t}: var {var}");
    }
}

#[test]
fn perturb_rejects_bad_inputs() {
    let s = build_schedule(10, 1e-4, 0.02).unwrap();
    assert!(perturb(&[0.0f64; 3], 0, &[0.0; 3], &s).is_err());
    assert!(perturb(&[0.0f64; 3], 11, &[0.0; 3], &s).is_err());
    assert!(perturb(&[0.0f64; 3], 5, &[0.0; 2], &s).is_err());
    assert!(build_schedule(0, 1e-4, 0.02).is_err());
    assert!(build_schedule(10, 0.02, 1e-4).is_err());
}

#[test]
fn zero_predictor_follows_reverse_recurrence() {
    let s = build_schedule(50, 1e-4, 0.05).unwrap();
    let seed = 11;
    let got = ancestral_sample_batch(&Zero, &s, (1, 4, 5), 3, seed, false).unwrap();
    for (i, g) in got.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut x: Image<f64> = gaussian_image(&mut rng, 1, 4, 5);
        for t in (1..=50).rev() {
            for v in x.data.iter_mut() {
                *v /= s.alpha(t).sqrt();
            }
            if t > 1 {
                for v in x.data.iter_mut() {
                    *v += s.beta(t).sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        for (a, b) in g.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
    }
    let single = ancestral_sample_batch(&Zero, &s, (1, 4, 5), 1, seed, false).unwrap();
    assert_eq!(single[0], got[0]);
    assert!(ancestral_sample_batch(&Zero, &s, (2, 4, 5), 1, seed, false).is_err());
}

#[test]
fn clipped_chain_lands_on_known_clean_image() {
    let s = build_schedule(50, 1e-4, 0.05).unwrap();
    for (x0, expect) in [(0.3, 0.3), (-0.7, -0.7), (2.5, 1.0)] {
        let p = Knows {
            x0,
            sched: s.clone(),
        };
        let got = ancestral_sample_batch(&p, &s, (1, 4, 4), 2, 3, true).unwrap();
        for g in &got {
            assert!(
                g.data.iter().all(|v| (v - expect).abs() < 1e-9),
                "{x0}: {:?}",
                g.data
            );
        }
    }
    let p = Knows {
        x0: 0.3,
        sched: s.clone(),
    };
    let plain = ancestral_sample_batch(&p, &s, (1, 4, 4), 1, 3, false).unwrap();
    assert!(plain[0].data.iter().all(|v| (v - 0.3).abs() < 1e-6));
}
