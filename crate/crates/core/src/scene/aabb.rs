use super::{BitGrid, OccupancyHierarchy, SceneError};
use crate::math::Vec3;

pub const DEFAULT_AABB_SIGMA: f64 = 1.0;
pub const DEFAULT_AABB_THRESHOLD: f64 = 0.05;

/// Axis-aligned bounds of occupied space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    /// Inclusive coarse-voxel bounds that survived filtering.
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// The whole scene extent for a grid of `coarse_dim` voxels per axis.
    pub fn unit(coarse_dim: usize) -> Self {
        Self {
            lo: [0; 3],
            hi: [coarse_dim - 1; 3],
            min: Vec3::ZERO,
            max: Vec3::splat(1.0),
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Shrinks the world box to the extent of occupied fine voxels. Every
    /// occupied fine voxel lies in an occupied coarse voxel, so the result
    /// still contains all occupancy.
    pub fn tightened(&self, hierarchy: &OccupancyHierarchy) -> Aabb {
        let g = hierarchy.geometry();
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for fl in hierarchy.fine().iter_ones() {
            let f = g.fine_coords(fl);
            for a in 0..3 {
                lo[a] = lo[a].min(f[a]);
                hi[a] = hi[a].max(f[a]);
            }
        }
        if lo[0] == usize::MAX {
            return *self;
        }
        let fd = g.fine_dim() as f64;
        let fmin = Vec3::new(lo[0] as f64 / fd, lo[1] as f64 / fd, lo[2] as f64 / fd);
        let fmax = Vec3::new(
            (hi[0] + 1) as f64 / fd,
            (hi[1] + 1) as f64 / fd,
            (hi[2] + 1) as f64 / fd,
        );
        Aabb {
            lo: self.lo,
            hi: self.hi,
            min: self.min.max(fmin),
            max: self.max.min(fmax),
        }
    }
}

/// Normalized 3-tap Gaussian weights for offsets -1, 0, 1.
pub(crate) fn gaussian_taps(sigma: f64) -> [f64; 3] {
    if sigma == 0.0 {
        return [0.0, 1.0, 0.0];
    }
    let side = (-1.0 / (2.0 * sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * side;
    [side / norm, 1.0 / norm, side / norm]
}

/// Blurs the 0/1 coarse occupancy with a separable 3x3x3 Gaussian (zero
/// padded), keeps voxels at or above `threshold` and returns their bounds.
/// `None` means nothing survived.
pub fn compute_aabb(coarse: &BitGrid, sigma: f64, threshold: f64) -> Result<Option<Aabb>, SceneError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(SceneError::Parameter(format!("sigma must be >= 0, got {sigma}")));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(SceneError::Parameter(format!("threshold must be in (0,1], got {threshold}")));
    }
    let n = coarse.dim();
    let taps = gaussian_taps(sigma);
    let mut field: Vec<f64> = (0..coarse.len())
        .map(|i| if coarse.get_linear(i) { 1.0 } else { 0.0 })
        .collect();
    let stride = [1, n, n * n];
    let mut next = vec![0.0; field.len()];
    for axis in 0..3 {
        for (i, out) in next.iter_mut().enumerate() {
            let coord = (i / stride[axis]) % n;
            let mut acc = taps[1] * field[i];
            if coord > 0 {
                acc += taps[0] * field[i - stride[axis]];
            }
            if coord + 1 < n {
                acc += taps[2] * field[i + stride[axis]];
            }
            *out = acc;
        }
        std::mem::swap(&mut field, &mut next);
    }

    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for (i, &v) in field.iter().enumerate() {
        if v >= threshold {
            let c = super::delinear(i, n);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if lo[0] == usize::MAX {
        return Ok(None);
    }
    let nd = n as f64;
    Ok(Some(Aabb {
        lo,
        hi,
        min: Vec3::new(lo[0] as f64 / nd, lo[1] as f64 / nd, lo[2] as f64 / nd),
        max: Vec3::new(
            (hi[0] + 1) as f64 / nd,
            (hi[1] + 1) as f64 / nd,
            (hi[2] + 1) as f64 / nd,
        ),
    }))
}
