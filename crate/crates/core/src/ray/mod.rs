//! Ray front end: Z-order pixel generation, four-ray packets, the AABB
//! test and start-point refinement.

mod morton;

pub use morton::{morton_decode, morton_encode, next_inbounds_code, MortonScan, MAX_SIDE, MORTON_BITS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::Vec3;
use crate::scene::Aabb;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("image must be at least 2x2 with even sides no larger than {MAX_SIDE}, got {0}x{1}")]
    BadImage(u32, u32),
    #[error("camera basis is not orthonormal")]
    NotOrthonormal,
    #[error("focal length must be positive")]
    BadFocal,
    #[error("degenerate look-at: eye, target and up are collinear")]
    Degenerate,
}

/// Pinhole camera. Image x grows along `right`, image y grows against `up`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
    /// Focal length in pixels.
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        position: Vec3,
        right: Vec3,
        up: Vec3,
        forward: Vec3,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        if width < 2 || height < 2 || width % 2 == 1 || height % 2 == 1 || width > MAX_SIDE || height > MAX_SIDE {
            return Err(CameraError::BadImage(width, height));
        }
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(CameraError::BadFocal);
        }
        let basis = [right, up, forward];
        for (i, a) in basis.iter().enumerate() {
            for (j, b) in basis.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (a.dot(*b) - want).abs() > 1e-6 {
                    return Err(CameraError::NotOrthonormal);
                }
            }
        }
        Ok(Self { position, right, up, forward, focal, width, height })
    }

    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up_hint: Vec3,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        let fwd = target - position;
        let right = fwd.cross(up_hint);
        if fwd.length() < 1e-12 || right.length() < 1e-12 * fwd.length() * up_hint.length() {
            return Err(CameraError::Degenerate);
        }
        let forward = fwd.normalized();
        let right = right.normalized();
        let up = right.cross(forward);
        Self::new(position, right, up, forward, focal, width, height)
    }

    /// Looks at the centre of the unit cube from `distance` away, at the
    /// given azimuth (about +y, 0 = from -z) and elevation, in degrees. The
    /// focal length frames the whole cube.
    pub fn orbit(azimuth: f64, elevation: f64, distance: f64, width: u32, height: u32) -> Result<Self, CameraError> {
        let (az, el) = (azimuth.to_radians(), elevation.to_radians());
        let centre = Vec3::splat(0.5);
        let offset = Vec3::new(az.sin() * el.cos(), el.sin(), -az.cos() * el.cos()) * distance;
        let focal = width.min(height) as f64 * distance / 1.2;
        Self::look_at(centre + offset, centre, Vec3::new(0.0, 1.0, 0.0), focal, width, height)
    }

    /// Unit direction through image-plane point `(u, v)`, measured in
    /// pixels from the top-left corner; pixel `(x, y)` has its centre at
    /// `(x + 0.5, y + 0.5)`.
    pub fn direction_at(&self, u: f64, v: f64) -> Vec3 {
        let du = u - self.width as f64 / 2.0;
        let dv = self.height as f64 / 2.0 - v;
        (self.forward * self.focal + self.right * du + self.up * dv).normalized()
    }

    pub fn ray(&self, x: u32, y: u32) -> Ray {
        Ray::new(self.position, self.direction_at(x as f64 + 0.5, y as f64 + 0.5), [x, y])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub pixel: [u32; 2],
    pub t: f64,
    pub alive: bool,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, pixel: [u32; 2]) -> Self {
        Self { origin, dir, pixel, t: 0.0, alive: true }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Four rays covering one 2x2 quad, in Morton order within the quad.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayPacket {
    pub quad_code: u32,
    pub rays: [Ray; 4],
    /// Global-buffer slot; assigned when the packet is admitted.
    pub rp_pointer: Option<u32>,
    /// Coarse voxel currently being processed, once known.
    pub cv_tag: Option<usize>,
}

impl RayPacket {
    pub fn pixels(&self) -> [[u32; 2]; 4] {
        self.rays.map(|r| r.pixel)
    }
}

/// `quad_code` must be a multiple of four naming an in-bounds quad.
pub fn generate_rp(camera: &Camera, quad_code: u32) -> RayPacket {
    assert_eq!(quad_code % 4, 0, "quad codes are multiples of four");
    let rays = std::array::from_fn(|k| {
        let (x, y) = morton_decode(quad_code + k as u32);
        debug_assert!(x < camera.width && y < camera.height);
        camera.ray(x, y)
    });
    RayPacket { quad_code, rays, rp_pointer: None, cv_tag: None }
}

/// Order in which 2x2 quads are issued.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    #[default]
    ZOrder,
    RowOrder,
}

impl ScanMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScanMode::ZOrder => "z_order",
            ScanMode::RowOrder => "row_order",
        }
    }
}

/// Quad codes (multiples of four) of an even-sided image in scan order.
/// Z-order walks the half-resolution quad grid in Morton order, so the
/// concatenated pixel stream is the image's own Morton order.
pub fn quad_codes(mode: ScanMode, width: u32, height: u32) -> Vec<u32> {
    let (qw, qh) = (width / 2, height / 2);
    match mode {
        ScanMode::ZOrder => MortonScan::new(qw, qh).map(|q| q * 4).collect(),
        ScanMode::RowOrder => (0..qh)
            .flat_map(|qy| (0..qw).map(move |qx| morton_encode(2 * qx, 2 * qy)))
            .collect(),
    }
}

/// Slab intersection of a ray with a box, clipped to `t >= 0`.
pub fn aabb_test(ray: &Ray, aabb: &Aabb) -> Option<(f64, f64)> {
    slab(ray, aabb.min, aabb.max)
}

pub(crate) fn slab(ray: &Ray, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.dir[a];
        if d == 0.0 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
            continue;
        }
        let (mut near, mut far) = ((lo[a] - o) / d, (hi[a] - o) / d);
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        t0 = t0.max(near);
        t1 = t1.min(far);
    }
    (t0 <= t1).then_some((t0, t1))
}

pub const DEFAULT_TSPS_TOL: f64 = 1e-6;

/// Refines the entry parameter by bisection so that `point(t0 - tol)` is
/// outside the box and `point(t0)` inside. Returns `None` when the box is
/// missed or the bracket collapses.
pub fn tsps_refine(ray: &Ray, aabb: &Aabb, tol: f64) -> Option<f64> {
    let (t_enter, t_exit) = aabb_test(ray, aabb)?;
    let inside = |t: f64| aabb.contains(ray.at(t));
    if t_enter == 0.0 && inside(0.0) {
        return Some(0.0);
    }
    let mut hi = 0.5 * (t_enter + t_exit);
    if !inside(hi) {
        hi = t_enter;
        if !inside(hi) {
            return None;
        }
    }
    let mut lo = (t_enter - (t_exit - t_enter).max(tol)).max(0.0);
    if inside(lo) {
        return Some(lo);
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if inside(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> Aabb {
        Aabb::unit(4)
    }

    #[test]
    fn slab_examples() {
        let r = Ray::new(Vec3::new(-1.0, 0.5, 0.5), Vec3::new(1.0, 0.0, 0.0), [0, 0]);
        assert_eq!(aabb_test(&r, &unit_box()), Some((1.0, 2.0)));
        let miss = Ray::new(Vec3::new(-1.0, 2.0, 0.5), Vec3::new(1.0, 0.0, 0.0), [0, 0]);
        assert_eq!(aabb_test(&miss, &unit_box()), None);
        let inside = Ray::new(Vec3::splat(0.3), Vec3::new(0.0, 0.6, 0.8), [0, 0]);
        assert_eq!(aabb_test(&inside, &unit_box()).unwrap().0, 0.0);
        assert_eq!(tsps_refine(&inside, &unit_box(), 1e-6), Some(0.0));
    }

    #[test]
    fn tsps_brackets_analytic_hit() {
        let r = Ray::new(Vec3::new(-1.0, 0.5, 0.5), Vec3::new(1.0, 0.0, 0.0), [0, 0]);
        let t0 = tsps_refine(&r, &unit_box(), 1e-6).unwrap();
        assert!((t0 - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn principal_point_looks_forward() {
        let cam = Camera::look_at(Vec3::new(0.5, 0.5, -2.0), Vec3::splat(0.5), Vec3::new(0.0, 1.0, 0.0), 100.0, 64, 48)
            .unwrap();
        let d = cam.direction_at(32.0, 24.0);
        assert!((d - cam.forward).length() < 1e-12);
    }

    #[test]
    fn odd_images_are_rejected() {
        let e = Camera::look_at(Vec3::ZERO, Vec3::splat(1.0), Vec3::new(0.0, 1.0, 0.0), 10.0, 3, 4);
        assert_eq!(e, Err(CameraError::BadImage(3, 4)));
    }
}
