use super::{OccupancyHierarchy, SceneError};

/// Network outputs: raw density followed by three raw color channels.
pub const OUTPUTS: usize = 4;
pub const LAYERS: usize = 3;

/// Shape of every per-coarse-voxel network: `input -> hidden -> hidden -> 4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpLayout {
    pub input: usize,
    pub hidden: usize,
}

impl MlpLayout {
    pub fn new(feature_dim: usize, freq_bands: usize, hidden: usize) -> Self {
        Self { input: feature_dim + 6 * freq_bands, hidden }
    }

    /// (rows, cols) of layer `l`'s weight matrix.
    pub fn shape(&self, l: usize) -> (usize, usize) {
        match l {
            0 => (self.hidden, self.input),
            1 => (self.hidden, self.hidden),
            2 => (OUTPUTS, self.hidden),
            _ => panic!("layer {l} out of range"),
        }
    }

    /// Offsets of (weights, bias) for layer `l` within a block.
    pub fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for k in 0..l {
            let (r, c) = self.shape(k);
            off += r * c + r;
        }
        let (r, c) = self.shape(l);
        (off, off + r * c)
    }

    /// Bytes per network: row-major INT8 weights then INT8 biases, per layer.
    pub fn block_len(&self) -> usize {
        (0..LAYERS).map(|l| {
            let (r, c) = self.shape(l);
            r * c + r
        }).sum()
    }
}

/// Power-of-two quantization scales. `act[l]` is the INT4 step of layer
/// `l`'s input activations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantScales {
    pub weight: [f32; LAYERS],
    pub bias: [f32; LAYERS],
    pub act: [f32; LAYERS],
}

/// Smallest power of two `s` with `max_abs / s <= qmax`.
pub fn pow2_scale(max_abs: f64, qmax: f64) -> f32 {
    if max_abs <= 0.0 {
        return 1.0;
    }
    2f64.powi((max_abs / qmax).log2().ceil() as i32) as f32
}

const NO_SLOT: u32 = u32::MAX;

/// One INT8 network per occupied coarse voxel, slots in ascending linear
/// coarse order, plus a dequantized copy for float-mode inference.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSet {
    layout: MlpLayout,
    scales: QuantScales,
    cv_slot: Vec<u32>,
    blocks: Vec<i8>,
    dequant: Vec<f64>,
}

/// Borrowed view of one coarse voxel's network.
#[derive(Clone, Copy, Debug)]
pub struct CvMlp<'a> {
    pub layout: MlpLayout,
    pub scales: &'a QuantScales,
    pub slot: usize,
    quantized: &'a [i8],
    real: &'a [f64],
}

impl<'a> CvMlp<'a> {
    pub fn weights_q(&self, l: usize) -> &'a [i8] {
        let (w, b) = self.layout.offsets(l);
        &self.quantized[w..b]
    }

    pub fn bias_q(&self, l: usize) -> &'a [i8] {
        let (_, b) = self.layout.offsets(l);
        &self.quantized[b..b + self.layout.shape(l).0]
    }

    pub fn weights(&self, l: usize) -> &'a [f64] {
        let (w, b) = self.layout.offsets(l);
        &self.real[w..b]
    }

    pub fn bias(&self, l: usize) -> &'a [f64] {
        let (_, b) = self.layout.offsets(l);
        &self.real[b..b + self.layout.shape(l).0]
    }
}

impl MlpSet {
    pub fn from_quantized(
        hierarchy: &OccupancyHierarchy,
        layout: MlpLayout,
        scales: QuantScales,
        blocks: Vec<i8>,
    ) -> Result<Self, SceneError> {
        let g = hierarchy.geometry();
        let mut cv_slot = vec![NO_SLOT; g.coarse_count()];
        let mut n = 0u32;
        for c in hierarchy.coarse().iter_ones() {
            cv_slot[c] = n;
            n += 1;
        }
        let expected = n as usize * layout.block_len();
        if blocks.len() != expected {
            return Err(SceneError::DimensionMismatch { expected, got: blocks.len() });
        }
        for s in scales.weight.iter().chain(&scales.bias).chain(&scales.act) {
            if !(*s > 0.0 && s.is_finite()) {
                return Err(SceneError::Parameter(format!("non-positive quantization scale {s}")));
            }
        }
        let block = layout.block_len();
        let mut dequant = Vec::with_capacity(blocks.len());
        for chunk in blocks.chunks(block.max(1)) {
            for l in 0..LAYERS {
                let (w, b) = layout.offsets(l);
                let rows = layout.shape(l).0;
                dequant.extend(chunk[w..b].iter().map(|&q| q as f64 * scales.weight[l] as f64));
                dequant.extend(chunk[b..b + rows].iter().map(|&q| q as f64 * scales.bias[l] as f64));
            }
        }
        Ok(Self { layout, scales, cv_slot, blocks, dequant })
    }

    pub fn layout(&self) -> MlpLayout {
        self.layout
    }

    pub fn scales(&self) -> &QuantScales {
        &self.scales
    }

    pub fn network_count(&self) -> usize {
        self.blocks.len() / self.layout.block_len().max(1)
    }

    pub fn slot(&self, cv_linear: usize) -> Option<usize> {
        match self.cv_slot.get(cv_linear).copied() {
            None | Some(NO_SLOT) => None,
            Some(s) => Some(s as usize),
        }
    }

    pub fn network(&self, cv_linear: usize) -> Option<CvMlp<'_>> {
        let slot = self.slot(cv_linear)?;
        let block = self.layout.block_len();
        Some(CvMlp {
            layout: self.layout,
            scales: &self.scales,
            slot,
            quantized: &self.blocks[slot * block..(slot + 1) * block],
            real: &self.dequant[slot * block..(slot + 1) * block],
        })
    }

    pub(crate) fn blocks(&self) -> &[i8] {
        &self.blocks
    }
}

/// Activation scales that make INT4 activations saturation-free for every
/// network in `blocks`, given dequantized weights and the feature scale.
pub(crate) fn derive_activation_scales(
    layout: MlpLayout,
    weight: [f32; LAYERS],
    bias: [f32; LAYERS],
    blocks: &[i8],
    feature_scale: f32,
) -> [f32; LAYERS] {
    let fs = feature_scale as f64;
    let act0 = pow2_scale((7.0 * fs).max(1.0), 7.0);
    let mut act = [act0, 1.0, 1.0];
    // Layer inputs are bounded by 8*act0 (signed) and then 7*act (post-ReLU).
    let mut in_bound = 8.0 * act0 as f64;
    for l in 0..2 {
        let (rows, cols) = layout.shape(l);
        let (w, b) = layout.offsets(l);
        let mut worst: f64 = 0.0;
        for chunk in blocks.chunks(layout.block_len().max(1)) {
            for r in 0..rows {
                let row_sum: f64 = chunk[w + r * cols..w + (r + 1) * cols]
                    .iter()
                    .map(|&q| (q as f64 * weight[l] as f64).abs())
                    .sum();
                worst = worst.max(row_sum * in_bound + (chunk[b + r] as f64 * bias[l] as f64).abs());
            }
        }
        act[l + 1] = pow2_scale(worst, 7.0);
        in_bound = 7.0 * act[l + 1] as f64;
    }
    act
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_sizes() {
        let l = MlpLayout::new(8, 4, 32);
        assert_eq!(l.input, 32);
        assert_eq!(l.block_len(), 32 * 32 + 32 + 32 * 32 + 32 + 4 * 32 + 4);
        assert_eq!(l.offsets(1), (32 * 32 + 32, 32 * 32 + 32 + 32 * 32));
    }

    #[test]
    fn pow2_scale_covers_range() {
        for &m in &[0.3, 1.0, 7.0, 100.0, 1e-3] {
            let s = pow2_scale(m, 127.0) as f64;
            assert!(m / s <= 127.0);
            assert!(m / (s / 2.0) > 127.0);
            assert_eq!(s.log2().fract(), 0.0);
        }
        assert_eq!(pow2_scale(0.0, 7.0), 1.0);
    }
}
