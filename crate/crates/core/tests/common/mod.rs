#![allow(dead_code)]

use edr_core::ray::ScanMode;
use edr_core::scene::{generate_procedural_scene, BoxPrimitive, SpherePrimitive};
use edr_core::{Camera, PipelineConfig, Scene, SceneSpec};

fn sphere(center: [f64; 3], radius: f64, shell: Option<f64>) -> SpherePrimitive {
    SpherePrimitive { center, radius, shell }
}

fn cuboid(min: [f64; 3], max: [f64; 3], shell: Option<f64>) -> BoxPrimitive {
    BoxPrimitive { min, max, shell }
}

/// Five recipes covering solid and hollow shapes, noise, and grid sizes.
pub fn scene_specs() -> Vec<(&'static str, SceneSpec)> {
    vec![
        ("default", SceneSpec::default_scene()),
        (
            "solid_sphere",
            SceneSpec { coarse_dim: 2, spheres: vec![sphere([0.5, 0.5, 0.5], 0.3, None)], ..SceneSpec::default() },
        ),
        (
            "two_boxes",
            SceneSpec {
                coarse_dim: 4,
                noise_rate: 0.01,
                boxes: vec![
                    cuboid([0.1, 0.1, 0.1], [0.4, 0.35, 0.45], None),
                    cuboid([0.55, 0.5, 0.5], [0.9, 0.85, 0.8], Some(0.05)),
                ],
                ..SceneSpec::default()
            },
        ),
        (
            "thin_shells",
            SceneSpec {
                coarse_dim: 3,
                sigma_scale: 40.0,
                spheres: vec![sphere([0.3, 0.6, 0.4], 0.22, Some(0.02)), sphere([0.7, 0.35, 0.6], 0.18, Some(0.04))],
                ..SceneSpec::default()
            },
        ),
        (
            "sparse_noise",
            SceneSpec {
                coarse_dim: 4,
                noise_rate: 0.05,
                noise_margin: 0.1,
                sigma_scale: 500.0,
                spheres: vec![sphere([0.5, 0.5, 0.5], 0.08, None)],
                boxes: vec![cuboid([0.2, 0.7, 0.2], [0.3, 0.8, 0.3], None)],
                ..SceneSpec::default()
            },
        ),
    ]
}

pub fn scenes() -> Vec<(&'static str, Scene)> {
    scene_specs().into_iter().map(|(n, s)| (n, generate_procedural_scene(&s, 7).unwrap())).collect()
}

pub fn default_scene(seed: u64) -> Scene {
    generate_procedural_scene(&SceneSpec::default_scene(), seed).unwrap()
}

pub fn cameras(res: u32) -> Vec<Camera> {
    [(30.0, 20.0, 2.0), (-115.0, 35.0, 1.8), (200.0, -25.0, 2.4)]
        .into_iter()
        .map(|(az, el, d)| Camera::orbit(az, el, d, res, res).unwrap())
        .collect()
}

pub fn row_order(cfg: &PipelineConfig) -> PipelineConfig {
    PipelineConfig { scan_mode: ScanMode::RowOrder, ..*cfg }
}
