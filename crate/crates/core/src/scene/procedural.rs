use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Uniform};
use serde::{Deserialize, Serialize};

use super::mlp::{derive_activation_scales, LAYERS};
use super::{
    build_occupancy_hierarchy, pow2_scale, BitGrid, FeatureStore, GridGeometry, MlpLayout, MlpSet,
    QuantScales, Scene, SceneError, MAX_COARSE_DIM, VERTICES_PER_FINE,
};

/// Features are drawn from U(-1, 1) and stored with this INT4 step.
const FEATURE_SCALE: f32 = 0.125;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpherePrimitive {
    pub center: [f64; 3],
    pub radius: f64,
    /// When set, only the outer layer of this thickness is occupied.
    #[serde(default)]
    pub shell: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxPrimitive {
    pub min: [f64; 3],
    pub max: [f64; 3],
    #[serde(default)]
    pub shell: Option<f64>,
}

/// Recipe for a synthetic scene. Deserializes from TOML; omitted keys take
/// the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub coarse_dim: usize,
    pub feature_dim: usize,
    pub freq_bands: usize,
    pub hidden: usize,
    /// Probability that a micro voxel near a primitive is spuriously occupied.
    pub noise_rate: f64,
    /// Noise is confined to primitive bounding boxes grown by this margin.
    pub noise_margin: f64,
    pub sigma_scale: f32,
    pub spheres: Vec<SpherePrimitive>,
    pub boxes: Vec<BoxPrimitive>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            coarse_dim: 16,
            feature_dim: 8,
            freq_bands: 4,
            hidden: 32,
            noise_rate: 0.0,
            noise_margin: 0.05,
            sigma_scale: 200.0,
            spheres: Vec::new(),
            boxes: Vec::new(),
        }
    }
}

impl SceneSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, SceneError> {
        toml::from_str(text).map_err(|e| SceneError::Validation(e.to_string()))
    }

    /// The benchmark scene: a hollow sphere resting beside a hollow box,
    /// with light occupancy noise around both. The coarse grid is 4 so that a
    /// 256x256 view covers each fine voxel with several pixels.
    pub fn default_scene() -> Self {
        Self {
            coarse_dim: 4,
            noise_rate: 0.002,
            spheres: vec![SpherePrimitive { center: [0.42, 0.45, 0.5], radius: 0.2, shell: Some(0.03) }],
            boxes: vec![BoxPrimitive {
                min: [0.58, 0.3, 0.35],
                max: [0.78, 0.62, 0.65],
                shell: Some(0.03),
            }],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Validation(m));
        if self.coarse_dim == 0 || self.coarse_dim > MAX_COARSE_DIM {
            return bad(format!("coarse_dim must be in 1..={MAX_COARSE_DIM}"));
        }
        if !(1..=64).contains(&self.feature_dim) {
            return bad("feature_dim must be in 1..=64".into());
        }
        if !(1..=16).contains(&self.freq_bands) {
            return bad("freq_bands must be in 1..=16".into());
        }
        if !(1..=256).contains(&self.hidden) {
            return bad("hidden must be in 1..=256".into());
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1]", self.noise_rate));
        }
        if !(self.noise_margin >= 0.0) {
            return bad("noise_margin must be >= 0".into());
        }
        if !(self.sigma_scale > 0.0 && self.sigma_scale.is_finite()) {
            return bad("sigma_scale must be positive".into());
        }
        let in_cube = |v: f64| (0.0..=1.0).contains(&v);
        for (i, s) in self.spheres.iter().enumerate() {
            if !(s.radius > 0.0) || (0..3).any(|a| !in_cube(s.center[a] - s.radius) || !in_cube(s.center[a] + s.radius)) {
                return bad(format!("sphere {i} does not lie inside the unit cube"));
            }
            if s.shell.is_some_and(|t| !(t > 0.0)) {
                return bad(format!("sphere {i} has a non-positive shell"));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if (0..3).any(|a| !in_cube(b.min[a]) || !in_cube(b.max[a]) || b.min[a] >= b.max[a]) {
                return bad(format!("box {i} does not lie inside the unit cube"));
            }
            if b.shell.is_some_and(|t| !(t > 0.0)) {
                return bad(format!("box {i} has a non-positive shell"));
            }
        }
        Ok(())
    }

    fn primitive_bounds(&self) -> Vec<([f64; 3], [f64; 3])> {
        let spheres = self.spheres.iter().map(|s| {
            (s.center.map(|c| c - s.radius), s.center.map(|c| c + s.radius))
        });
        spheres.chain(self.boxes.iter().map(|b| (b.min, b.max))).collect()
    }
}

fn inside_sphere(s: &SpherePrimitive, p: [f64; 3]) -> bool {
    let d2: f64 = (0..3).map(|a| (p[a] - s.center[a]).powi(2)).sum();
    let r2 = s.radius * s.radius;
    match s.shell {
        None => d2 <= r2,
        Some(t) => d2 <= r2 && d2 >= (s.radius - t).max(0.0).powi(2),
    }
}

fn inside_box(b: &BoxPrimitive, p: [f64; 3]) -> bool {
    let inside = (0..3).all(|a| p[a] >= b.min[a] && p[a] <= b.max[a]);
    match b.shell {
        None => inside,
        Some(t) => inside && (0..3).any(|a| p[a] < b.min[a] + t || p[a] > b.max[a] - t),
    }
}

/// Micro-index range covering world interval `[lo, hi]`, clamped to the grid.
fn index_range(lo: f64, hi: f64, dim: usize) -> (usize, usize) {
    let d = dim as f64;
    let a = ((lo * d).floor().max(0.0) as usize).min(dim - 1);
    let b = ((hi * d).ceil().max(0.0) as usize).min(dim);
    (a, b.max(a + 1))
}

/// Builds a scene deterministically from `(spec, seed)`. Random draws happen
/// in a fixed order: occupancy noise, then features, then network weights.
pub fn generate_procedural_scene(spec: &SceneSpec, seed: u64) -> Result<Scene, SceneError> {
    spec.validate()?;
    let g = GridGeometry::new(spec.coarse_dim)?;
    let md = g.micro_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut micro = BitGrid::new(md);

    // Primitive interiors, sampled at micro-voxel centres.
    for (lo, hi) in spec.primitive_bounds() {
        let r: Vec<_> = (0..3).map(|a| index_range(lo[a], hi[a], md)).collect();
        for z in r[2].0..r[2].1 {
            for y in r[1].0..r[1].1 {
                for x in r[0].0..r[0].1 {
                    let p = [x, y, z].map(|v| (v as f64 + 0.5) / md as f64);
                    if spec.spheres.iter().any(|s| inside_sphere(s, p))
                        || spec.boxes.iter().any(|b| inside_box(b, p))
                    {
                        micro.set([x, y, z], true);
                    }
                }
            }
        }
    }

    if spec.noise_rate > 0.0 {
        let gap = Geometric::new(spec.noise_rate)
            .map_err(|e| SceneError::Validation(format!("noise_rate: {e}")))?;
        for (lo, hi) in spec.primitive_bounds() {
            let m = spec.noise_margin;
            let r: Vec<_> = (0..3).map(|a| index_range(lo[a] - m, hi[a] + m, md)).collect();
            let ext = [r[0].1 - r[0].0, r[1].1 - r[1].0, r[2].1 - r[2].0];
            let total = (ext[0] * ext[1] * ext[2]) as u64;
            let mut i = gap.sample(&mut rng);
            while i < total {
                let (x, y, z) = (i % ext[0] as u64, (i / ext[0] as u64) % ext[1] as u64, i / (ext[0] * ext[1]) as u64);
                micro.set([r[0].0 + x as usize, r[1].0 + y as usize, r[2].0 + z as usize], true);
                i = i.saturating_add(1 + gap.sample(&mut rng));
            }
        }
    }

    let hierarchy = build_occupancy_hierarchy(&micro, g)?;

    let slots = hierarchy.fine().count_ones();
    let unit = Uniform::new_inclusive(-1.0f64, 1.0).expect("valid range");
    let mut nibbles = Vec::with_capacity(slots * VERTICES_PER_FINE * spec.feature_dim);
    for _ in 0..slots * VERTICES_PER_FINE * spec.feature_dim {
        let v = unit.sample(&mut rng) / FEATURE_SCALE as f64;
        nibbles.push(v.round().clamp(-8.0, 7.0) as i8);
    }
    let features = FeatureStore::from_quantized(&hierarchy, spec.feature_dim, FEATURE_SCALE, &nibbles)?;

    let layout = MlpLayout::new(spec.feature_dim, spec.freq_bands, spec.hidden);
    let mut weight = [0f32; LAYERS];
    let mut bias = [0f32; LAYERS];
    let mut w_bound = [0f64; LAYERS];
    for l in 0..LAYERS {
        let fan_in = layout.shape(l).1 as f64;
        w_bound[l] = (3.0 / fan_in).sqrt();
        weight[l] = pow2_scale(w_bound[l], 127.0);
    }
    let b_bound = [0.1, 0.1, 1.5];
    for l in 0..LAYERS {
        bias[l] = pow2_scale(b_bound[l], 127.0);
    }
    let q = |v: f64, s: f32| (v / s as f64).round().clamp(-128.0, 127.0) as i8;
    let networks = hierarchy.coarse().count_ones();
    let mut blocks = Vec::with_capacity(networks * layout.block_len());
    for _ in 0..networks {
        for l in 0..LAYERS {
            let (rows, cols) = layout.shape(l);
            for _ in 0..rows * cols {
                let v = rng.random_range(-w_bound[l]..=w_bound[l]);
                blocks.push(q(v, weight[l]));
            }
            for r in 0..rows {
                let v = if l == LAYERS - 1 && r == 0 {
                    rng.random_range(0.5..=1.5)
                } else if l == LAYERS - 1 {
                    rng.random_range(-1.0..=1.0)
                } else {
                    rng.random_range(-b_bound[l]..=b_bound[l])
                };
                blocks.push(q(v, bias[l]));
            }
        }
    }
    let act = derive_activation_scales(layout, weight, bias, &blocks, FEATURE_SCALE);
    let mlps = MlpSet::from_quantized(&hierarchy, layout, QuantScales { weight, bias, act }, blocks)?;
    Scene::new(hierarchy, features, mlps, spec.sigma_scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec { coarse_dim: 4, ..SceneSpec::default() }
    }

    #[test]
    fn solid_sphere_volume_matches_analytic() {
        let spec = SceneSpec {
            coarse_dim: 8,
            spheres: vec![SpherePrimitive { center: [0.5; 3], radius: 0.25, shell: None }],
            ..SceneSpec::default()
        };
        let scene = generate_procedural_scene(&spec, 1).unwrap();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 0.25f64.powi(3);
        // Surface voxels are the only discretization error: area * half a voxel.
        let md = scene.geometry().micro_dim() as f64;
        let tol = 4.0 * std::f64::consts::PI * 0.0625 * 0.5 / md;
        assert!((scene.occupied_micro_fraction() - analytic).abs() < tol);
    }

    #[test]
    fn empty_spec_is_empty() {
        let scene = generate_procedural_scene(&small(), 3).unwrap();
        assert_eq!(scene.hierarchy.micro_count_ones(), 0);
        assert_eq!(scene.mlps.network_count(), 0);
        assert!(scene.aabb().is_none());
    }

    #[test]
    fn primitive_outside_cube_is_rejected() {
        let spec = SceneSpec {
            spheres: vec![SpherePrimitive { center: [0.9, 0.5, 0.5], radius: 0.2, shell: None }],
            ..small()
        };
        assert!(matches!(generate_procedural_scene(&spec, 0), Err(SceneError::Validation(_))));
    }

    #[test]
    fn noise_stays_near_primitives() {
        let spec = SceneSpec {
            noise_rate: 0.01,
            noise_margin: 0.0,
            boxes: vec![BoxPrimitive { min: [0.0; 3], max: [0.25; 3], shell: Some(0.01) }],
            ..small()
        };
        let scene = generate_procedural_scene(&spec, 9).unwrap();
        let g = scene.geometry();
        for fl in scene.hierarchy.fine().iter_ones() {
            assert!(g.fine_coords(fl).iter().all(|&v| v < 8));
        }
    }

    #[test]
    fn toml_rejects_unknown_keys() {
        assert!(SceneSpec::from_toml_str("coarse_dim = 4\nbogus = 1\n").is_err());
        let s = SceneSpec::from_toml_str("coarse_dim = 4\n[[spheres]]\ncenter = [0.5, 0.5, 0.5]\nradius = 0.1\n").unwrap();
        assert_eq!(s.spheres.len(), 1);
        assert_eq!(s.feature_dim, 8);
    }
}
