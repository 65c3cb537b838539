//! Per-sample shading: banked trilinear feature interpolation, direction
//! encoding, per-coarse-voxel MLP inference and volume accumulation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hrm::Sample;
use crate::math::Vec3;
use crate::scene::{vertex_class, vertex_index, CvMlp, Scene, MICRO_PER_FINE};

/// Trilinear weights indexed by corner offset `dx | dy << 1 | dz << 2`.
pub fn trilinear_weights(frac: [f64; 3]) -> [f64; 8] {
    std::array::from_fn(|d| {
        let w = |a: usize| if d >> a & 1 == 1 { frac[a] } else { 1.0 - frac[a] };
        w(0) * w(1) * w(2)
    })
}

/// `corners` holds eight feature vectors of length `out.len()`, ordered by
/// corner offset. Accumulation runs in corner order.
pub fn trilinear_interpolate(corners: &[f64], frac: [f64; 3], out: &mut [f64]) {
    let f = out.len();
    let w = trilinear_weights(frac);
    out.fill(0.0);
    for d in 0..8 {
        for k in 0..f {
            out[k] += w[d] * corners[d * f + k];
        }
    }
}

/// Interpolation from bank-ordered features. Bank `b` holds the vertex of
/// class `(b - rotation) mod 8`; the coefficient for each bank is looked up
/// through the corner whose parity gives that class, and accumulation runs
/// in corner order so the result is bitwise equal to
/// [`trilinear_interpolate`] on the same vertices.
pub fn trilinear_banked(banks: &[f64], frac: [f64; 3], micro_parity: usize, rotation: usize, out: &mut [f64]) {
    let f = out.len();
    let w = trilinear_weights(frac);
    out.fill(0.0);
    for d in 0..8 {
        let bank = ((d ^ micro_parity) + rotation) % 8;
        for k in 0..f {
            out[k] += w[d] * banks[bank * f + k];
        }
    }
}

/// Per axis, per band `l`: `sin(2^l pi d), cos(2^l pi d)`.
pub fn frequency_encode(d: Vec3, bands: usize, out: &mut Vec<f64>) {
    out.clear();
    for a in 0..3 {
        for l in 0..bands {
            let x = (1u64 << l) as f64 * std::f64::consts::PI * d[a];
            out.push(x.sin());
            out.push(x.cos());
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadingMode {
    /// Dequantized weights, f64 arithmetic.
    #[default]
    Float,
    /// INT8 weights, INT4 activations, i32 accumulation.
    Quantized,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Runs a coarse voxel's network on `input` (feature then encoded
/// direction). Returns density and colour.
pub fn tme_forward(net: &CvMlp, sigma_scale: f32, input: &[f64], mode: ShadingMode) -> (f64, [f64; 3]) {
    let out = match mode {
        ShadingMode::Float => forward_float(net, input),
        ShadingMode::Quantized => forward_quantized(net, input),
    };
    let sigma = sigma_scale as f64 * relu(out[0]);
    (sigma, [sigmoid(out[1]), sigmoid(out[2]), sigmoid(out[3])])
}

fn forward_float(net: &CvMlp, input: &[f64]) -> [f64; 4] {
    let mut x = input.to_vec();
    let mut out = [0.0; 4];
    for l in 0..3 {
        let (rows, cols) = net.layout.shape(l);
        assert_eq!(x.len(), cols, "network input width");
        let (w, b) = (net.weights(l), net.bias(l));
        let y: Vec<f64> = (0..rows)
            .map(|r| {
                let dot: f64 = (0..cols).map(|c| w[r * cols + c] * x[c]).sum();
                dot + b[r]
            })
            .collect();
        if l == 2 {
            out.copy_from_slice(&y);
        } else {
            x = y.into_iter().map(relu).collect();
        }
    }
    out
}

fn forward_quantized(net: &CvMlp, input: &[f64]) -> [f64; 4] {
    let s = net.scales;
    let a0 = s.act[0] as f64;
    let mut xq: Vec<i32> = input.iter().map(|&v| (v / a0).round().clamp(-8.0, 7.0) as i32).collect();
    let mut out = [0.0; 4];
    for l in 0..3 {
        let (rows, cols) = net.layout.shape(l);
        assert_eq!(xq.len(), cols, "network input width");
        let (w, b) = (net.weights_q(l), net.bias_q(l));
        let acc_scale = s.weight[l] as f64 * s.act[l] as f64;
        let y: Vec<f64> = (0..rows)
            .map(|r| {
                let acc: i32 = (0..cols).map(|c| w[r * cols + c] as i32 * xq[c]).sum();
                acc as f64 * acc_scale + b[r] as f64 * s.bias[l] as f64
            })
            .collect();
        if l == 2 {
            out.copy_from_slice(&y);
        } else {
            let next = s.act[l + 1] as f64;
            xq = y.iter().map(|&v| (relu(v) / next).round().clamp(0.0, 7.0) as i32).collect();
        }
    }
    out
}

/// Worst-case density difference between quantized and float inference,
/// from activation rounding propagated through the layers' infinity norms.
pub fn quantization_sigma_bound(net: &CvMlp, sigma_scale: f32) -> f64 {
    let s = net.scales;
    let inf_norm = |l: usize| {
        let (rows, cols) = net.layout.shape(l);
        let w = net.weights(l);
        (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    };
    let e0 = s.act[0] as f64 / 2.0;
    let e1 = inf_norm(0) * e0 + s.act[1] as f64 / 2.0;
    let e2 = inf_norm(1) * e1 + s.act[2] as f64 / 2.0;
    let cols = net.layout.shape(2).1;
    let head: f64 = net.weights(2)[..cols].iter().map(|v| v.abs()).sum();
    sigma_scale as f64 * head * e2
}

#[derive(Debug, Error, PartialEq)]
pub enum VruError {
    #[error("sample for a terminated ray")]
    Terminated,
    #[error("sample at t={got} arrived after t={last}")]
    OutOfOrder { last: f64, got: f64 },
    #[error("segment length must be positive, got {0}")]
    BadDelta(f64),
}

/// Running transmittance and colour of one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelAccumulator {
    pub transmittance: f64,
    pub color: [f64; 3],
    pub terminated: bool,
    last_t: f64,
}

impl Default for PixelAccumulator {
    fn default() -> Self {
        Self { transmittance: 1.0, color: [0.0; 3], terminated: false, last_t: f64::NEG_INFINITY }
    }
}

impl PixelAccumulator {
    /// Final radiance over a constant background.
    pub fn resolve(&self, background: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|c| self.color[c] + self.transmittance * background[c])
    }
}

pub const DEFAULT_T_THRESHOLD: f64 = 1e-4;

/// Adds one sample at parameter `t`. Samples of a ray must arrive in
/// increasing `t`; the ray terminates once transmittance drops below
/// `t_threshold`.
pub fn vru_accumulate(
    acc: &mut PixelAccumulator,
    sigma: f64,
    rgb: [f64; 3],
    delta: f64,
    t: f64,
    t_threshold: f64,
) -> Result<(), VruError> {
    if acc.terminated {
        return Err(VruError::Terminated);
    }
    if t <= acc.last_t {
        return Err(VruError::OutOfOrder { last: acc.last_t, got: t });
    }
    if !(delta > 0.0) {
        return Err(VruError::BadDelta(delta));
    }
    let survive = (-sigma * delta).exp();
    let alpha = 1.0 - survive;
    for c in 0..3 {
        acc.color[c] += acc.transmittance * alpha * rgb[c];
    }
    acc.transmittance *= survive;
    acc.last_t = t;
    if acc.transmittance < t_threshold {
        acc.terminated = true;
    }
    Ok(())
}

/// Reusable buffers for [`shade_sample`].
#[derive(Clone, Debug, Default)]
pub struct ShadeScratch {
    gathered: Vec<f64>,
    vertex: Vec<f64>,
    input: Vec<f64>,
}

/// Vertex index and class of each corner of micro voxel `local` (0..4 per
/// axis inside its fine voxel), by corner offset.
pub fn micro_corners(local: [usize; 3]) -> [(usize, usize); 8] {
    std::array::from_fn(|d| {
        let v = [local[0] + (d & 1), local[1] + (d >> 1 & 1), local[2] + (d >> 2 & 1)];
        (vertex_index(v), vertex_class(v))
    })
}

/// How the eight corner features reach the interpolator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gather {
    /// Corner order, no banking.
    Direct,
    /// Through the eight rotated banks, with coefficient reordering.
    Banked,
}

/// Density and colour of one sample. The encoded view direction is passed
/// in so callers can reuse it across a ray's samples.
pub fn shade_sample(
    scene: &Scene,
    sample: &Sample,
    encoded_dir: &[f64],
    mode: ShadingMode,
    gather: Gather,
    scratch: &mut ShadeScratch,
) -> (f64, [f64; 3]) {
    let f = scene.features.dim();
    let fine = sample.fine_linear as usize;
    let slot = scene.features.slot(fine).expect("sample lies in an occupied fine voxel");
    let local = sample.micro.map(|v| v as usize % MICRO_PER_FINE);
    scratch.gathered.resize(8 * f, 0.0);
    scratch.vertex.resize(f, 0.0);
    let mut interp = std::mem::take(&mut scratch.input);
    interp.resize(f, 0.0);
    let corners = micro_corners(local);
    match gather {
        Gather::Direct => {
            for (d, &(v, _)) in corners.iter().enumerate() {
                scene.features.vertex_feature(slot, v, &mut scratch.gathered[d * f..(d + 1) * f]);
            }
            trilinear_interpolate(&scratch.gathered, sample.frac, &mut interp);
        }
        Gather::Banked => {
            let rotation = slot % 8;
            for &(v, class) in &corners {
                let bank = crate::memory::bank_of(class, slot);
                scene.features.vertex_feature(slot, v, &mut scratch.gathered[bank * f..(bank + 1) * f]);
            }
            let parity = (local[0] & 1) | (local[1] & 1) << 1 | (local[2] & 1) << 2;
            trilinear_banked(&scratch.gathered, sample.frac, parity, rotation, &mut interp);
        }
    }
    interp.extend_from_slice(encoded_dir);
    let net = scene.mlps.network(sample.coarse_linear as usize).expect("occupied coarse voxel has a network");
    let result = tme_forward(&net, scene.sigma_scale, &interp, mode);
    scratch.input = interp;
    result
}

/// Converts linear radiance to an 8-bit channel.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_and_centre() {
        let corners: Vec<f64> = (0..8).map(|d| d as f64 * 10.0).collect();
        let mut out = [0.0];
        trilinear_interpolate(&corners, [0.0; 3], &mut out);
        assert_eq!(out[0], 0.0);
        trilinear_interpolate(&corners, [0.5; 3], &mut out);
        assert!((out[0] - 35.0).abs() < 1e-12);
    }

    #[test]
    fn encode_unit_x() {
        let mut e = Vec::new();
        frequency_encode(Vec3::new(1.0, 0.0, 0.0), 1, &mut e);
        let want = [0.0, -1.0, 0.0, 1.0, 0.0, 1.0];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn vru_ln2_cases() {
        let ln2 = std::f64::consts::LN_2;
        let mut acc = PixelAccumulator::default();
        vru_accumulate(&mut acc, ln2, [1.0, 0.0, 0.0], 1.0, 1.0, 1e-4).unwrap();
        assert!((acc.color[0] - 0.5).abs() < 1e-9 && (acc.transmittance - 0.5).abs() < 1e-9);
        vru_accumulate(&mut acc, ln2, [1.0, 0.0, 0.0], 1.0, 2.0, 1e-4).unwrap();
        assert!((acc.color[0] - 0.75).abs() < 1e-9 && (acc.transmittance - 0.25).abs() < 1e-9);
    }

    #[test]
    fn vru_rejects_protocol_faults() {
        let mut acc = PixelAccumulator::default();
        vru_accumulate(&mut acc, 1.0, [1.0; 3], 0.1, 2.0, 0.0).unwrap();
        assert!(matches!(vru_accumulate(&mut acc, 1.0, [1.0; 3], 0.1, 1.0, 0.0), Err(VruError::OutOfOrder { .. })));
        vru_accumulate(&mut acc, 1e3, [1.0; 3], 1.0, 3.0, 1e-4).unwrap();
        assert!(acc.terminated);
        assert_eq!(vru_accumulate(&mut acc, 1.0, [1.0; 3], 0.1, 4.0, 1e-4), Err(VruError::Terminated));
    }

    #[test]
    fn transparent_sample_changes_nothing() {
        let mut acc = PixelAccumulator::default();
        vru_accumulate(&mut acc, 0.0, [1.0; 3], 0.5, 1.0, 1e-4).unwrap();
        assert_eq!(acc.color, [0.0; 3]);
        assert_eq!(acc.transmittance, 1.0);
    }
}
