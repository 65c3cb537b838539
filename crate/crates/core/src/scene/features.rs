use super::{GridGeometry, OccupancyHierarchy, SceneError, VERTICES_PER_FINE, VERTS_PER_AXIS};

/// Feature vectors per vertex class (parity triple) within one fine voxel,
/// indexed by `px | py << 1 | pz << 2`.
pub const CLASS_COUNTS: [usize; 8] = [27, 18, 18, 12, 18, 12, 12, 8];

/// Vertex index within a fine voxel's 5x5x5 vertex lattice.
#[inline]
pub fn vertex_index(v: [usize; 3]) -> usize {
    v[0] + VERTS_PER_AXIS * (v[1] + VERTS_PER_AXIS * v[2])
}

/// Parity class of a vertex's micro-grid coordinates.
#[inline]
pub fn vertex_class(v: [usize; 3]) -> usize {
    (v[0] & 1) | (v[1] & 1) << 1 | (v[2] & 1) << 2
}

/// Count of vertices of each class in one fine voxel, by enumeration.
pub fn class_census() -> [usize; 8] {
    let mut counts = [0; 8];
    for z in 0..VERTS_PER_AXIS {
        for y in 0..VERTS_PER_AXIS {
            for x in 0..VERTS_PER_AXIS {
                counts[vertex_class([x, y, z])] += 1;
            }
        }
    }
    counts
}

const fn build_rank_table() -> [u8; VERTICES_PER_FINE] {
    let mut table = [0u8; VERTICES_PER_FINE];
    let mut seen = [0u8; 8];
    let mut i = 0;
    while i < VERTICES_PER_FINE {
        let x = i % VERTS_PER_AXIS;
        let y = (i / VERTS_PER_AXIS) % VERTS_PER_AXIS;
        let z = i / (VERTS_PER_AXIS * VERTS_PER_AXIS);
        let class = (x & 1) | (y & 1) << 1 | (z & 1) << 2;
        table[i] = seen[class];
        seen[class] += 1;
        i += 1;
    }
    table
}

static RANK_TABLE: [u8; VERTICES_PER_FINE] = build_rank_table();

/// Position of a vertex among same-class vertices of its fine voxel, in
/// vertex-index order.
#[inline]
pub fn vertex_rank_in_class(vertex: usize) -> usize {
    RANK_TABLE[vertex] as usize
}

const NO_SLOT: u32 = u32::MAX;

/// INT4 feature vectors for every occupied fine voxel, addressed directly
/// by (fine voxel, vertex) with no hashing. Slots are assigned to occupied
/// fine voxels in ascending linear order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    scale: f32,
    slot_of_fine: Vec<u32>,
    fine_of_slot: Vec<u32>,
    /// Per slot: `125 * dim` nibbles, vertex-major, low nibble first.
    data: Vec<u8>,
}

impl FeatureStore {
    /// `nibbles` holds one signed 4-bit value (-8..=7) per component, slot
    /// by slot, vertex-major.
    pub fn from_quantized(
        hierarchy: &OccupancyHierarchy,
        dim: usize,
        scale: f32,
        nibbles: &[i8],
    ) -> Result<Self, SceneError> {
        let g = hierarchy.geometry();
        let slots = hierarchy.fine().count_ones();
        let per_slot = VERTICES_PER_FINE * dim;
        if nibbles.len() != slots * per_slot {
            return Err(SceneError::DimensionMismatch { expected: slots * per_slot, got: nibbles.len() });
        }
        let block = Self::block_bytes_for(dim);
        let mut data = vec![0u8; slots * block];
        for (s, chunk) in nibbles.chunks(per_slot).enumerate() {
            let out = &mut data[s * block..(s + 1) * block];
            for (i, &v) in chunk.iter().enumerate() {
                if !(-8..=7).contains(&v) {
                    return Err(SceneError::Parameter(format!("feature value {v} outside INT4")));
                }
                let nib = (v as u8) & 0xF;
                out[i / 2] |= if i % 2 == 0 { nib } else { nib << 4 };
            }
        }
        Self::from_packed(g, hierarchy, dim, scale, data)
    }

    pub(crate) fn from_packed(
        g: GridGeometry,
        hierarchy: &OccupancyHierarchy,
        dim: usize,
        scale: f32,
        data: Vec<u8>,
    ) -> Result<Self, SceneError> {
        if dim == 0 {
            return Err(SceneError::Parameter("feature dimension must be >= 1".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(SceneError::Parameter(format!("feature scale must be positive, got {scale}")));
        }
        let mut slot_of_fine = vec![NO_SLOT; g.fine_count()];
        let mut fine_of_slot = Vec::new();
        for fl in hierarchy.fine().iter_ones() {
            slot_of_fine[fl] = fine_of_slot.len() as u32;
            fine_of_slot.push(fl as u32);
        }
        let expected = fine_of_slot.len() * Self::block_bytes_for(dim);
        if data.len() != expected {
            return Err(SceneError::DimensionMismatch { expected, got: data.len() });
        }
        Ok(Self { dim, scale, slot_of_fine, fine_of_slot, data })
    }

    pub fn block_bytes_for(dim: usize) -> usize {
        (VERTICES_PER_FINE * dim).div_ceil(2)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn slot_count(&self) -> usize {
        self.fine_of_slot.len()
    }

    pub fn slot(&self, fine_linear: usize) -> Option<usize> {
        match self.slot_of_fine[fine_linear] {
            NO_SLOT => None,
            s => Some(s as usize),
        }
    }

    pub fn fine_of_slot(&self, slot: usize) -> usize {
        self.fine_of_slot[slot] as usize
    }

    pub(crate) fn packed(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn raw(&self, slot: usize, vertex: usize, component: usize) -> i8 {
        let i = vertex * self.dim + component;
        let byte = self.data[slot * Self::block_bytes_for(self.dim) + i / 2];
        let nib = if i % 2 == 0 { byte & 0xF } else { byte >> 4 };
        ((nib << 4) as i8) >> 4
    }

    /// Dequantized feature vector of one vertex.
    pub fn vertex_feature(&self, slot: usize, vertex: usize, out: &mut [f64]) {
        let s = self.scale as f64;
        for (k, o) in out.iter_mut().enumerate().take(self.dim) {
            *o = self.raw(slot, vertex, k) as f64 * s;
        }
    }
}
