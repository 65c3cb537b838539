//! Naive per-pixel renderer used as the correctness oracle, plus image
//! comparison and ablation reports.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::hrm::generate_samples;
use crate::image::RgbImage;
use crate::pipeline::{MetricsRecord, PipelineConfig, SampleRecord};
use crate::ray::{Camera, Ray};
use crate::scene::Scene;
use crate::shading::{frequency_encode, shade_sample, to_u8, vru_accumulate, Gather, PixelAccumulator, ShadeScratch};

#[derive(Clone, Debug)]
pub struct ReferenceResult {
    pub image: RgbImage,
    pub radiance: Vec<[f64; 3]>,
    pub samples: Vec<SampleRecord>,
}

/// Entry and exit of a ray through the unit cube.
fn unit_cube_span(ray: &Ray) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.dir[a]);
        if d == 0.0 {
            if !(0.0..=1.0).contains(&o) {
                return None;
            }
            continue;
        }
        let (u, v) = ((0.0 - o) / d, (1.0 - o) / d);
        t0 = t0.max(u.min(v));
        t1 = t1.min(u.max(v));
    }
    (t0 < t1).then_some((t0, t1))
}

/// Occupied micro voxels along `ray`, front to back, walked cell by cell
/// over the full micro grid.
fn march_micro(ray: &Ray, md: usize, mut visit: impl FnMut([usize; 3]) -> bool) {
    let Some((t_in, _)) = unit_cube_span(ray) else { return };
    let n = md as i64;
    let p = ray.at(t_in);
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let plane = |i: i64| i as f64 / md as f64;
    for a in 0..3 {
        cell[a] = ((p[a] * md as f64).floor() as i64).clamp(0, n - 1);
        if ray.dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (plane(cell[a] + 1) - ray.origin[a]) / ray.dir[a];
        } else if ray.dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (plane(cell[a]) - ray.origin[a]) / ray.dir[a];
        }
    }
    loop {
        if !visit(cell.map(|v| v as usize)) {
            return;
        }
        let mut a = 0;
        for b in 1..3 {
            if t_max[b] < t_max[a] {
                a = b;
            }
        }
        if t_max[a].is_infinite() {
            return;
        }
        cell[a] += step[a];
        if cell[a] < 0 || cell[a] >= n {
            return;
        }
        let far = if step[a] > 0 { cell[a] + 1 } else { cell[a] };
        t_max[a] = (plane(far) - ray.origin[a]) / ray.dir[a];
    }
}

/// Renders every pixel independently: walk all micro voxels along the ray,
/// shade each occupied one, accumulate front to back until transmittance
/// falls below the threshold. Only `shading`, `t_threshold`, `background`
/// and `record_samples` are read from `cfg`.
pub fn reference_render(scene: &Scene, camera: &Camera, cfg: &PipelineConfig) -> ReferenceResult {
    let g = scene.geometry();
    let md = g.micro_dim();
    let bands = scene.freq_bands();
    let (w, h) = (camera.width, camera.height);
    let mut image = RgbImage::new(w, h);
    let mut radiance = Vec::with_capacity((w * h) as usize);
    let mut samples = Vec::new();
    let mut scratch = ShadeScratch::default();
    let mut encoded = Vec::with_capacity(6 * bands);
    for y in 0..h {
        for x in 0..w {
            let ray = camera.ray(x, y);
            encoded.clear();
            frequency_encode(ray.dir, bands, &mut encoded);
            let mut acc = PixelAccumulator::default();
            march_micro(&ray, md, |m| {
                if !scene.hierarchy.micro_occupied(m) {
                    return true;
                }
                let Some(s) = generate_samples(&ray, m, g) else { return true };
                let (sigma, rgb) = shade_sample(scene, &s, &encoded, cfg.shading, Gather::Direct, &mut scratch);
                vru_accumulate(&mut acc, sigma, rgb, s.delta, s.t, cfg.t_threshold)
                    .expect("a single front-to-back walk keeps samples ordered");
                if cfg.record_samples {
                    samples.push(SampleRecord { pixel: [x, y], micro: s.micro, t: s.t, delta: s.delta });
                }
                !acc.terminated
            });
            let c = acc.resolve(cfg.background);
            image.set(x, y, c.map(to_u8));
            radiance.push(c);
        }
    }
    ReferenceResult { image, radiance, samples }
}

#[derive(Debug, Error, PartialEq)]
pub enum CompareError {
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(u32, u32, u32, u32),
    #[error("a report needs at least two rows, got {0}")]
    TooFewRows(usize),
    #[error("rows come from different scenes: {0} and {1}")]
    SceneMismatch(String, String),
}

/// Peak signal-to-noise ratio in dB over all channels with peak 255.
/// Identical images give `f64::INFINITY`.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, CompareError> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(CompareError::SizeMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    let n = a.data().len();
    if n == 0 {
        return Ok(f64::INFINITY);
    }
    let sse: u64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    if sse == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse as f64 / n as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// `psnr` formatted for humans.
pub fn format_psnr(db: f64) -> String {
    if db.is_infinite() { "identical".to_string() } else { format!("{db:.2} dB") }
}

/// Percentage by which `new` undercuts `base`.
pub fn reduction_pct(base: f64, new: f64) -> f64 {
    if base == 0.0 { 0.0 } else { (base - new) / base * 100.0 }
}

/// `base / new`; above 1 means `new` is faster.
pub fn speedup(base_cycles: u64, new_cycles: u64) -> f64 {
    if new_cycles == 0 { 0.0 } else { base_cycles as f64 / new_cycles as f64 }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 { 0.0 } else { a / b }
}

/// A metrics row tagged with the scene it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub scene_id: String,
    pub image_checksum: String,
    pub metrics: MetricsRecord,
}

/// One report line: the raw row plus its deltas against the first row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub scene_id: String,
    pub image_checksum: String,
    pub scan_mode: String,
    pub aabb: bool,
    pub rprob: bool,
    pub ooo: bool,
    pub ema_bytes: u64,
    pub energy: f64,
    pub cycles: u64,
    pub coarse_queries: u64,
    pub rps_per_tag_switch: f64,
    pub micro_hit_rate: f64,
    pub feature_hit_rate: f64,
    pub mlp_hit_rate: f64,
    pub avg_active_rays_coarse: f64,
    pub avg_active_rays_fine: f64,
    pub ema_reduction_pct: f64,
    pub cycle_speedup: f64,
    pub rps_per_switch_ratio: f64,
    pub coarse_query_ratio: f64,
}

/// Effect of flipping one toggle with the other three held fixed, averaged
/// over the pairs present.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToggleEffect {
    pub toggle: String,
    pub pairs: usize,
    /// Mean of on/off ratios.
    pub ema_ratio: f64,
    pub cycle_ratio: f64,
    pub coarse_query_ratio: f64,
    pub rps_per_switch_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
    pub effects: Vec<ToggleEffect>,
}

fn toggles(m: &MetricsRecord) -> [bool; 4] {
    [m.scan_mode == "z_order", m.aabb, m.rprob, m.ooo]
}

const TOGGLE_NAMES: [&str; 4] = ["z_order", "aabb", "rprob", "ooo"];

pub fn compare_report(runs: &[RunRow]) -> Result<ComparisonReport, CompareError> {
    if runs.len() < 2 {
        return Err(CompareError::TooFewRows(runs.len()));
    }
    let base = &runs[0];
    if let Some(r) = runs.iter().find(|r| r.scene_id != base.scene_id) {
        return Err(CompareError::SceneMismatch(base.scene_id.clone(), r.scene_id.clone()));
    }
    let b = &base.metrics;
    let rows = runs
        .iter()
        .map(|r| {
            let m = &r.metrics;
            ReportRow {
                scene_id: r.scene_id.clone(),
                image_checksum: r.image_checksum.clone(),
                scan_mode: m.scan_mode.clone(),
                aabb: m.aabb,
                rprob: m.rprob,
                ooo: m.ooo,
                ema_bytes: m.ema_bytes,
                energy: m.energy,
                cycles: m.cycles,
                coarse_queries: m.coarse_queries,
                rps_per_tag_switch: m.rps_per_tag_switch,
                micro_hit_rate: m.micro_hit_rate,
                feature_hit_rate: m.feature_hit_rate,
                mlp_hit_rate: m.mlp_hit_rate,
                avg_active_rays_coarse: m.avg_active_rays_coarse,
                avg_active_rays_fine: m.avg_active_rays_fine,
                ema_reduction_pct: reduction_pct(b.ema_bytes as f64, m.ema_bytes as f64),
                cycle_speedup: speedup(b.cycles, m.cycles),
                rps_per_switch_ratio: ratio(m.rps_per_tag_switch, b.rps_per_tag_switch),
                coarse_query_ratio: ratio(m.coarse_queries as f64, b.coarse_queries as f64),
            }
        })
        .collect();

    let mut effects = Vec::new();
    for (k, name) in TOGGLE_NAMES.iter().enumerate() {
        let mut sums = [0.0; 4];
        let mut pairs = 0;
        for on in runs.iter().filter(|r| toggles(&r.metrics)[k]) {
            let mut want = toggles(&on.metrics);
            want[k] = false;
            let Some(off) = runs.iter().find(|r| toggles(&r.metrics) == want) else { continue };
            let (a, z) = (&on.metrics, &off.metrics);
            sums[0] += ratio(a.ema_bytes as f64, z.ema_bytes as f64);
            sums[1] += ratio(a.cycles as f64, z.cycles as f64);
            sums[2] += ratio(a.coarse_queries as f64, z.coarse_queries as f64);
            sums[3] += ratio(a.rps_per_tag_switch, z.rps_per_tag_switch);
            pairs += 1;
        }
        if pairs > 0 {
            let p = pairs as f64;
            effects.push(ToggleEffect {
                toggle: name.to_string(),
                pairs,
                ema_ratio: sums[0] / p,
                cycle_ratio: sums[1] / p,
                coarse_query_ratio: sums[2] / p,
                rps_per_switch_ratio: sums[3] / p,
            });
        }
    }
    Ok(ComparisonReport { rows, effects })
}

impl ComparisonReport {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<9} {:<5} {:<5} {:<5} {:>10} {:>7} {:>10} {:>7} {:>9} {:>8} {:>6} {:>6} {:>6}",
            "scan", "aabb", "rprob", "ooo", "ema_bytes", "ema%", "cycles", "speed", "coarse_q", "rps/sw", "micro", "feat", "mlp"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<9} {:<5} {:<5} {:<5} {:>10} {:>7.1} {:>10} {:>7.3} {:>9} {:>8.2} {:>6.3} {:>6.3} {:>6.3}",
                r.scan_mode,
                r.aabb,
                r.rprob,
                r.ooo,
                r.ema_bytes,
                r.ema_reduction_pct,
                r.cycles,
                r.cycle_speedup,
                r.coarse_queries,
                r.rps_per_tag_switch,
                r.micro_hit_rate,
                r.feature_hit_rate,
                r.mlp_hit_rate
            );
        }
        if !self.effects.is_empty() {
            let _ = writeln!(s, "\ntoggle on/off ratios (mean over {} pairs each)", self.effects[0].pairs);
            for e in &self.effects {
                let _ = writeln!(
                    s,
                    "{:<8} ema {:.3}  cycles {:.3}  coarse queries {:.3}  rps/switch {:.2}",
                    e.toggle, e.ema_ratio, e.cycle_ratio, e.coarse_query_ratio, e.rps_per_switch_ratio
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;

    #[test]
    fn psnr_closed_forms() {
        let a = RgbImage::filled(4, 2, [10, 20, 30]);
        let b = RgbImage::filled(4, 2, [11, 21, 31]);
        assert!((psnr(&a, &b).unwrap() - 48.1308).abs() < 1e-3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &a).unwrap().is_infinite());
        let black = RgbImage::filled(2, 2, [0; 3]);
        let white = RgbImage::filled(2, 2, [255; 3]);
        assert!(psnr(&black, &white).unwrap().abs() < 1e-12);
        assert!(psnr(&a, &black).is_err());
    }

    #[test]
    fn report_arithmetic() {
        assert!((reduction_pct(1000.0, 346.0) - 65.4).abs() < 1e-9);
        assert!((speedup(107, 100) - 1.07).abs() < 1e-12);
    }

    #[test]
    fn unit_cube_span_axis_ray() {
        let r = Ray::new(Vec3::new(-1.0, 0.5, 0.5), Vec3::new(1.0, 0.0, 0.0), [0, 0]);
        assert_eq!(unit_cube_span(&r), Some((1.0, 2.0)));
        let miss = Ray::new(Vec3::new(-1.0, 1.5, 0.5), Vec3::new(1.0, 0.0, 0.0), [0, 0]);
        assert_eq!(unit_cube_span(&miss), None);
    }

    #[test]
    fn flat_walk_visits_a_diagonal_in_order() {
        let r = Ray::new(Vec3::new(-0.1, 0.05, 0.05), Vec3::new(1.0, 0.0, 0.0), [0, 0]);
        let mut cells = Vec::new();
        march_micro(&r, 4, |c| {
            cells.push(c);
            true
        });
        assert_eq!(cells, (0..4).map(|x| [x, 0, 0]).collect::<Vec<_>>());
    }
}
