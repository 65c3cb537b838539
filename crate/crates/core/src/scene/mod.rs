//! Scene representation: occupancy hierarchy, direct-indexed INT4 feature
//! store and per-coarse-voxel INT8 networks, all over the unit cube.

mod aabb;
mod features;
mod io;
mod mlp;
mod occupancy;
mod procedural;

pub use aabb::{compute_aabb, Aabb, DEFAULT_AABB_SIGMA, DEFAULT_AABB_THRESHOLD};
pub use features::{
    class_census, vertex_class, vertex_index, vertex_rank_in_class, FeatureStore, CLASS_COUNTS,
};
pub use io::{load_scene, read_scene, save_scene, write_scene, LoadError, Section, MAGIC, VERSION};
pub use mlp::{pow2_scale, CvMlp, MlpLayout, MlpSet, QuantScales};
pub use occupancy::{build_occupancy_hierarchy, leaf_occupied, BitGrid, MicroBitmap, OccupancyHierarchy};
pub use procedural::{generate_procedural_scene, BoxPrimitive, SceneSpec, SpherePrimitive};

use thiserror::Error;

/// Fine voxels per coarse voxel, per axis.
pub const FINE_PER_COARSE: usize = 8;
/// Leaf voxels per fine voxel, per axis.
pub const LEAF_PER_FINE: usize = 2;
/// Micro voxels per leaf voxel, per axis.
pub const MICRO_PER_LEAF: usize = 2;
/// Micro voxels per fine voxel, per axis.
pub const MICRO_PER_FINE: usize = LEAF_PER_FINE * MICRO_PER_LEAF;
/// Micro voxels per fine voxel.
pub const MICROS_IN_FINE: usize = MICRO_PER_FINE * MICRO_PER_FINE * MICRO_PER_FINE;
/// Grid vertices per fine voxel, per axis.
pub const VERTS_PER_AXIS: usize = MICRO_PER_FINE + 1;
/// Grid vertices (feature vectors) stored per fine voxel.
pub const VERTICES_PER_FINE: usize = VERTS_PER_AXIS * VERTS_PER_AXIS * VERTS_PER_AXIS;

pub const MAX_COARSE_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid grid geometry: {0}")]
    Geometry(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("scene spec rejected: {0}")]
    Validation(String),
}

/// Resolution of every tier. The world extent is always the unit cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridGeometry {
    coarse_dim: usize,
}

impl GridGeometry {
    pub fn new(coarse_dim: usize) -> Result<Self, SceneError> {
        if coarse_dim == 0 || coarse_dim > MAX_COARSE_DIM {
            return Err(SceneError::Geometry(format!(
                "coarse_dim must be in 1..={MAX_COARSE_DIM}, got {coarse_dim}"
            )));
        }
        Ok(Self { coarse_dim })
    }

    pub fn coarse_dim(&self) -> usize {
        self.coarse_dim
    }

    pub fn fine_dim(&self) -> usize {
        self.coarse_dim * FINE_PER_COARSE
    }

    pub fn micro_dim(&self) -> usize {
        self.fine_dim() * MICRO_PER_FINE
    }

    pub fn coarse_count(&self) -> usize {
        self.coarse_dim.pow(3)
    }

    pub fn fine_count(&self) -> usize {
        self.fine_dim().pow(3)
    }

    pub fn micro_count(&self) -> usize {
        self.micro_dim().pow(3)
    }

    pub fn coarse_linear(&self, c: [usize; 3]) -> usize {
        linear(c, self.coarse_dim)
    }

    pub fn fine_linear(&self, f: [usize; 3]) -> usize {
        linear(f, self.fine_dim())
    }

    pub fn micro_linear(&self, m: [usize; 3]) -> usize {
        linear(m, self.micro_dim())
    }

    pub fn fine_coords(&self, index: usize) -> [usize; 3] {
        delinear(index, self.fine_dim())
    }

    pub fn coarse_coords(&self, index: usize) -> [usize; 3] {
        delinear(index, self.coarse_dim)
    }

    pub fn coarse_of_fine(&self, f: [usize; 3]) -> [usize; 3] {
        f.map(|v| v / FINE_PER_COARSE)
    }
}

pub(crate) fn linear(c: [usize; 3], dim: usize) -> usize {
    c[0] + dim * (c[1] + dim * c[2])
}

pub(crate) fn delinear(index: usize, dim: usize) -> [usize; 3] {
    [index % dim, (index / dim) % dim, index / (dim * dim)]
}

/// A complete, immutable scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub hierarchy: OccupancyHierarchy,
    pub features: FeatureStore,
    pub mlps: MlpSet,
    /// Multiplier applied to the network's non-negative density output.
    pub sigma_scale: f32,
    aabb: Option<Aabb>,
}

impl Scene {
    pub fn new(
        hierarchy: OccupancyHierarchy,
        features: FeatureStore,
        mlps: MlpSet,
        sigma_scale: f32,
    ) -> Result<Self, SceneError> {
        let occupied_fine = hierarchy.fine().count_ones();
        if features.slot_count() != occupied_fine {
            return Err(SceneError::DimensionMismatch {
                expected: occupied_fine,
                got: features.slot_count(),
            });
        }
        let occupied_coarse = hierarchy.coarse().count_ones();
        if mlps.network_count() != occupied_coarse {
            return Err(SceneError::DimensionMismatch {
                expected: occupied_coarse,
                got: mlps.network_count(),
            });
        }
        let aabb = compute_aabb(hierarchy.coarse(), DEFAULT_AABB_SIGMA, DEFAULT_AABB_THRESHOLD)?
            .map(|a| a.tightened(&hierarchy));
        Ok(Self { hierarchy, features, mlps, sigma_scale, aabb })
    }

    pub fn geometry(&self) -> GridGeometry {
        self.hierarchy.geometry()
    }

    /// Filtered bounding box of occupied space, tightened to fine-voxel
    /// extent; `None` for an empty scene.
    pub fn aabb(&self) -> Option<Aabb> {
        self.aabb
    }

    /// Frequency bands of the view-direction encoding the networks expect.
    pub fn freq_bands(&self) -> usize {
        (self.mlps.layout().input - self.features.dim()) / 6
    }

    pub fn occupied_micro_fraction(&self) -> f64 {
        self.hierarchy.micro_count_ones() as f64 / self.geometry().micro_count() as f64
    }
}
