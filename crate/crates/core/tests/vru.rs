use edr_core::shading::{vru_accumulate, PixelAccumulator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Step {
    sigma: f64,
    rgb: [f64; 3],
    delta: f64,
}

/// Closed-form colour and transmittance of a front-to-back sequence.
fn direct(steps: &[Step]) -> ([f64; 3], f64) {
    let mut color = [0.0; 3];
    for (i, s) in steps.iter().enumerate() {
        let optical: f64 = steps[..i].iter().map(|p| p.sigma * p.delta).sum();
        let w = (-optical).exp() * (1.0 - (-s.sigma * s.delta).exp());
        for c in 0..3 {
            color[c] += w * s.rgb[c];
        }
    }
    let total: f64 = steps.iter().map(|p| p.sigma * p.delta).sum();
    (color, (-total).exp())
}

fn incremental(steps: &[Step]) -> ([f64; 3], f64) {
    let mut acc = PixelAccumulator::default();
    for (i, s) in steps.iter().enumerate() {
        vru_accumulate(&mut acc, s.sigma, s.rgb, s.delta, i as f64, 0.0).unwrap();
    }
    (acc.color, acc.transmittance)
}

#[test]
fn incremental_matches_closed_form_on_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=64);
        let steps: Vec<Step> = (0..n)
            .map(|_| Step {
                sigma: rng.random_range(0.0..50.0),
                rgb: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                delta: rng.random_range(1e-4..0.05),
            })
            .collect();
        let (c0, t0) = direct(&steps);
        let (c1, t1) = incremental(&steps);
        worst = worst.max((t0 - t1).abs());
        for c in 0..3 {
            worst = worst.max((c0[c] - c1[c]).abs());
        }
    }
    assert!(worst <= 1e-6, "max deviation {worst}");
}

#[test]
fn ln2_optical_depth_halves_transmittance() {
    let s = || Step { sigma: std::f64::consts::LN_2 / 0.25, rgb: [1.0; 3], delta: 0.25 };
    let (c, t) = incremental(&[s()]);
    assert!((c[0] - 0.5).abs() < 1e-9 && (t - 0.5).abs() < 1e-9);
    let (c, t) = incremental(&[s(), s()]);
    assert!((c[0] - 0.75).abs() < 1e-9 && (t - 0.25).abs() < 1e-9);
}

#[test]
fn termination_stops_accumulation() {
    let mut acc = PixelAccumulator::default();
    vru_accumulate(&mut acc, 100.0, [1.0; 3], 1.0, 0.0, 1e-4).unwrap();
    assert!(acc.terminated);
    assert!(vru_accumulate(&mut acc, 1.0, [1.0; 3], 1.0, 1.0, 1e-4).is_err());
}
