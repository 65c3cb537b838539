use super::{delinear, linear, GridGeometry, SceneError, FINE_PER_COARSE, MICRO_PER_FINE};

/// Dense cubic bitset, x-fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitGrid {
    dim: usize,
    words: Vec<u64>,
}

impl BitGrid {
    pub fn new(dim: usize) -> Self {
        let len = dim * dim * dim;
        Self { dim, words: vec![0; len.div_ceil(64)] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.dim * self.dim * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get_linear(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set_linear(&mut self, i: usize, v: bool) {
        let bit = 1u64 << (i % 64);
        if v {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    #[inline]
    pub fn get(&self, c: [usize; 3]) -> bool {
        self.get_linear(linear(c, self.dim))
    }

    pub fn set(&mut self, c: [usize; 3], v: bool) {
        self.set_linear(linear(c, self.dim), v)
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Packed bytes, LSB-first within each byte, `ceil(len / 8)` long.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.len().div_ceil(8));
        out
    }

    /// Inverse of [`BitGrid::to_bytes`]; `None` if `bytes` has the wrong length.
    pub fn from_bytes(dim: usize, bytes: &[u8]) -> Option<Self> {
        let mut grid = Self::new(dim);
        if bytes.len() != grid.len().div_ceil(8) {
            return None;
        }
        for (w, chunk) in grid.words.iter_mut().zip(bytes.chunks(8)) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            *w = u64::from_le_bytes(buf);
        }
        let len = grid.len();
        if len % 64 != 0 {
            if let Some(last) = grid.words.last_mut() {
                *last &= (1u64 << (len % 64)) - 1;
            }
        }
        Some(grid)
    }

    /// Linear indices of set bits, ascending.
    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + b)
            })
        })
    }
}

/// Micro-resolution occupancy in x-fastest linear order; the input to
/// [`build_occupancy_hierarchy`] and the on-disk layout.
pub type MicroBitmap = BitGrid;

/// Bit-packed coarse/fine/micro occupancy. Micro occupancy is stored as one
/// 64-bit word per fine voxel (bit `x + 4y + 16z` of the local micro
/// coordinates) so a single fetch serves leaf and micro traversal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyHierarchy {
    geometry: GridGeometry,
    micro: Vec<u64>,
    fine: BitGrid,
    coarse: BitGrid,
}

pub fn build_occupancy_hierarchy(
    micro_bitmap: &MicroBitmap,
    geometry: GridGeometry,
) -> Result<OccupancyHierarchy, SceneError> {
    if micro_bitmap.dim() != geometry.micro_dim() {
        return Err(SceneError::DimensionMismatch {
            expected: geometry.micro_dim(),
            got: micro_bitmap.dim(),
        });
    }
    let md = geometry.micro_dim();
    let mut micro = vec![0u64; geometry.fine_count()];
    let mut fine = BitGrid::new(geometry.fine_dim());
    let mut coarse = BitGrid::new(geometry.coarse_dim());
    for i in micro_bitmap.iter_ones() {
        let m = delinear(i, md);
        let f = m.map(|v| v / MICRO_PER_FINE);
        let fl = geometry.fine_linear(f);
        micro[fl] |= 1u64 << local_micro_bit(m.map(|v| v % MICRO_PER_FINE));
        fine.set_linear(fl, true);
        coarse.set(f.map(|v| v / FINE_PER_COARSE), true);
    }
    Ok(OccupancyHierarchy { geometry, micro, fine, coarse })
}

#[inline]
pub(crate) fn local_micro_bit(l: [usize; 3]) -> usize {
    l[0] + MICRO_PER_FINE * (l[1] + MICRO_PER_FINE * l[2])
}

/// Leaf occupancy: OR over the leaf's 2x2x2 micro voxels in a fine voxel's
/// micro word. `leaf` is the leaf's local coordinate in 0..2 per axis.
#[inline]
pub fn leaf_occupied(word: u64, leaf: [usize; 3]) -> bool {
    let base = leaf.map(|v| v * 2);
    let mut mask = 0u64;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                mask |= 1 << local_micro_bit([base[0] + dx, base[1] + dy, base[2] + dz]);
            }
        }
    }
    word & mask != 0
}

impl OccupancyHierarchy {
    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn coarse(&self) -> &BitGrid {
        &self.coarse
    }

    pub fn fine(&self) -> &BitGrid {
        &self.fine
    }

    #[inline]
    pub fn micro_word(&self, fine_linear: usize) -> u64 {
        self.micro[fine_linear]
    }

    #[inline]
    pub fn micro_occupied(&self, m: [usize; 3]) -> bool {
        let f = m.map(|v| v / MICRO_PER_FINE);
        let word = self.micro[self.geometry.fine_linear(f)];
        word >> local_micro_bit(m.map(|v| v % MICRO_PER_FINE)) & 1 == 1
    }

    pub fn micro_count_ones(&self) -> usize {
        self.micro.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Re-flattens the micro tier into x-fastest order.
    pub fn to_micro_bitmap(&self) -> MicroBitmap {
        let g = self.geometry;
        let mut out = BitGrid::new(g.micro_dim());
        for fl in self.fine.iter_ones() {
            let f = g.fine_coords(fl);
            let mut w = self.micro[fl];
            while w != 0 {
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                let l = [b % 4, (b / 4) % 4, b / 16];
                out.set(
                    [
                        f[0] * MICRO_PER_FINE + l[0],
                        f[1] * MICRO_PER_FINE + l[1],
                        f[2] * MICRO_PER_FINE + l[2],
                    ],
                    true,
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geometry(c: usize) -> GridGeometry {
        GridGeometry::new(c).unwrap()
    }

    #[test]
    fn empty_bitmap_builds_empty_hierarchy() {
        let g = geometry(2);
        let h = build_occupancy_hierarchy(&BitGrid::new(g.micro_dim()), g).unwrap();
        assert_eq!(h.fine().count_ones(), 0);
        assert_eq!(h.coarse().count_ones(), 0);
    }

    #[test]
    fn single_micro_propagates_to_enclosing_voxels() {
        let g = geometry(2);
        let mut m = BitGrid::new(g.micro_dim());
        m.set([37, 5, 62], true);
        let h = build_occupancy_hierarchy(&m, g).unwrap();
        assert_eq!(h.fine().count_ones(), 1);
        assert!(h.fine().get([9, 1, 15]));
        assert_eq!(h.coarse().count_ones(), 1);
        assert!(h.coarse().get([1, 0, 1]));
        assert!(h.micro_occupied([37, 5, 62]));
        assert_eq!(h.to_micro_bitmap(), m);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let g = geometry(2);
        let err = build_occupancy_hierarchy(&BitGrid::new(32), g).unwrap_err();
        assert!(matches!(err, SceneError::DimensionMismatch { expected: 64, got: 32 }));
    }

    /// Triple-loop OR over children, independent of the bit-walking build.
    fn brute_force(m: &MicroBitmap, g: GridGeometry) -> (BitGrid, BitGrid) {
        let mut fine = BitGrid::new(g.fine_dim());
        for fz in 0..g.fine_dim() {
            for fy in 0..g.fine_dim() {
                for fx in 0..g.fine_dim() {
                    let mut any = false;
                    for z in 0..4 {
                        for y in 0..4 {
                            for x in 0..4 {
                                any |= m.get([fx * 4 + x, fy * 4 + y, fz * 4 + z]);
                            }
                        }
                    }
                    fine.set([fx, fy, fz], any);
                }
            }
        }
        let mut coarse = BitGrid::new(g.coarse_dim());
        for cz in 0..g.coarse_dim() {
            for cy in 0..g.coarse_dim() {
                for cx in 0..g.coarse_dim() {
                    let mut any = false;
                    for z in 0..8 {
                        for y in 0..8 {
                            for x in 0..8 {
                                any |= fine.get([cx * 8 + x, cy * 8 + y, cz * 8 + z]);
                            }
                        }
                    }
                    coarse.set([cx, cy, cz], any);
                }
            }
        }
        (fine, coarse)
    }

    #[test]
    fn random_sparse_bitmap_matches_brute_force_or() {
        let g = geometry(1); // 32^3 micro
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let mut m = BitGrid::new(g.micro_dim());
            for i in 0..m.len() {
                if rng.random_bool(0.01) {
                    m.set_linear(i, true);
                }
            }
            let h = build_occupancy_hierarchy(&m, g).unwrap();
            let (fine, coarse) = brute_force(&m, g);
            assert_eq!(h.fine(), &fine);
            assert_eq!(h.coarse(), &coarse);
        }
        let g = geometry(2);
        let mut m = BitGrid::new(g.micro_dim());
        for i in 0..m.len() {
            if rng.random_bool(0.0005) {
                m.set_linear(i, true);
            }
        }
        let h = build_occupancy_hierarchy(&m, g).unwrap();
        let (fine, coarse) = brute_force(&m, g);
        assert_eq!(h.fine(), &fine);
        assert_eq!(h.coarse(), &coarse);
    }

    #[test]
    fn leaf_occupancy_is_or_of_its_micros() {
        let mut word = 0u64;
        word |= 1 << local_micro_bit([3, 2, 1]);
        assert!(leaf_occupied(word, [1, 1, 0]));
        for leaf in [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]] {
            assert!(!leaf_occupied(word, leaf));
        }
    }
}
