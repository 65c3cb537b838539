mod common;

use edr_core::pipeline::SampleRecord;
use edr_core::reference::reference_render;
use edr_core::{render, Camera, PipelineConfig, Scene};

type Key = ([u32; 2], [u32; 3]);

fn sorted(mut s: Vec<SampleRecord>) -> Vec<SampleRecord> {
    s.sort_by_key(|r| -> Key { (r.pixel, r.micro) });
    s
}

fn assert_same_samples(a: Vec<SampleRecord>, b: Vec<SampleRecord>, what: &str) {
    let (a, b) = (sorted(a), sorted(b));
    assert_eq!(a.len(), b.len(), "{what}: sample counts differ");
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.pixel, x.micro), (y.pixel, y.micro), "{what}");
        assert!((x.t - y.t).abs() <= 1e-9 && (x.delta - y.delta).abs() <= 1e-9, "{what}: {x:?} vs {y:?}");
    }
}

// No early termination, so every generated sample is shaded and recorded.
fn all_samples() -> PipelineConfig {
    PipelineConfig { t_threshold: 0.0, record_samples: true, ..PipelineConfig::default() }
}

fn pipeline_samples(scene: &Scene, cam: &Camera, cfg: &PipelineConfig) -> Vec<SampleRecord> {
    render(scene, cam, cfg).unwrap().samples
}

#[test]
fn skipping_matches_flat_micro_walk() {
    let cfg = all_samples();
    for (name, scene) in common::scenes() {
        assert!(scene.geometry().coarse_dim() <= 16);
        for (k, cam) in common::cameras(48).iter().enumerate() {
            let flat = reference_render(&scene, cam, &cfg).samples;
            assert!(!flat.is_empty() || name == "sparse_noise");
            assert_same_samples(pipeline_samples(&scene, cam, &cfg), flat, &format!("{name} camera {k}"));
        }
    }
}

#[test]
fn aabb_changes_no_sample() {
    let on = all_samples();
    let off = PipelineConfig { aabb_enabled: false, ..on };
    for (name, scene) in common::scenes() {
        let cam = &common::cameras(48)[1];
        assert_same_samples(pipeline_samples(&scene, cam, &on), pipeline_samples(&scene, cam, &off), name);
    }
}

#[test]
fn segment_lengths_add_up_per_pixel() {
    // Σδ along a ray equals its path length through occupied micro voxels,
    // measured here by dense point sampling.
    let scene = common::scenes().swap_remove(1).1;
    let cam = Camera::orbit(10.0, 5.0, 2.0, 16, 16).unwrap();
    let samples = pipeline_samples(&scene, &cam, &all_samples());
    let md = scene.geometry().micro_dim() as f64;
    for (x, y) in [(8, 8), (5, 9), (11, 6)] {
        let sum: f64 = samples.iter().filter(|s| s.pixel == [x, y]).map(|s| s.delta).sum();
        let ray = cam.ray(x, y);
        let n = 400_000;
        let (t0, t1) = (0.5, 3.5);
        let dt = (t1 - t0) / n as f64;
        let mut len = 0.0;
        for i in 0..n {
            let p = ray.at(t0 + (i as f64 + 0.5) * dt);
            if (0..3).all(|a| (0.0..1.0).contains(&p[a])) {
                let m = [0, 1, 2].map(|a| (p[a] * md) as usize);
                if scene.hierarchy.micro_occupied(m) {
                    len += dt;
                }
            }
        }
        assert!((sum - len).abs() < 1e-3, "pixel ({x},{y}): {sum} vs {len}");
    }
}
