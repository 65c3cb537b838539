//! 22-bit Morton codes over image pixels: even bits carry x, odd bits y.

pub const MORTON_BITS: u32 = 22;
pub const MAX_SIDE: u32 = 1 << (MORTON_BITS / 2);

fn spread(v: u32) -> u32 {
    let mut v = v & 0x7FF;
    v = (v | (v << 8)) & 0x00FF_00FF;
    v = (v | (v << 4)) & 0x0F0F_0F0F;
    v = (v | (v << 2)) & 0x3333_3333;
    (v | (v << 1)) & 0x5555_5555
}

fn compact(v: u32) -> u32 {
    let mut v = v & 0x5555_5555;
    v = (v | (v >> 1)) & 0x3333_3333;
    v = (v | (v >> 2)) & 0x0F0F_0F0F;
    v = (v | (v >> 4)) & 0x00FF_00FF;
    (v | (v >> 8)) & 0x0000_FFFF
}

pub fn morton_encode(x: u32, y: u32) -> u32 {
    spread(x) | spread(y) << 1
}

pub fn morton_decode(code: u32) -> (u32, u32) {
    (compact(code), compact(code >> 1))
}

/// Bits below `i` that belong to the same coordinate as bit `i`.
fn same_dim_below(i: u32) -> u32 {
    let dim_bits = if i % 2 == 0 { 0x5555_5555u32 } else { 0xAAAA_AAAA };
    dim_bits & ((1u32 << i) - 1)
}

/// Smallest code inside the box `[zmin, zmax]` that is greater than `zval`,
/// for `zval` outside the box (Tropf-Herzog BIGMIN).
fn bigmin(zval: u32, mut zmin: u32, mut zmax: u32) -> Option<u32> {
    let mut best = None;
    for i in (0..MORTON_BITS).rev() {
        let bit = 1u32 << i;
        let below = same_dim_below(i);
        match (zval & bit != 0, zmin & bit != 0, zmax & bit != 0) {
            (false, false, false) | (true, true, true) => {}
            (false, false, true) => {
                best = Some((zmin | bit) & !below);
                zmax = (zmax & !bit) | below;
            }
            (false, true, true) => return Some(zmin),
            (true, false, false) => return best,
            (true, false, true) => zmin = (zmin | bit) & !below,
            _ => unreachable!("BIGMIN bounds inverted at bit {i}"),
        }
    }
    best
}

/// Next code after `code` whose pixel lies inside a `width` x `height`
/// image, or `None` at end of frame. Out-of-bounds runs are skipped
/// analytically rather than by testing each intermediate code.
pub fn next_inbounds_code(code: u32, width: u32, height: u32) -> Option<u32> {
    assert!(width <= MAX_SIDE && height <= MAX_SIDE, "image side above 2^11");
    if width == 0 || height == 0 {
        return None;
    }
    let c = code.checked_add(1).filter(|&c| c < 1 << MORTON_BITS)?;
    let (x, y) = morton_decode(c);
    if x < width && y < height {
        return Some(c);
    }
    bigmin(c, 0, morton_encode(width - 1, height - 1))
}

/// In-bounds Morton codes of an image in ascending order.
#[derive(Clone, Debug)]
pub struct MortonScan {
    next: Option<u32>,
    width: u32,
    height: u32,
}

impl MortonScan {
    pub fn new(width: u32, height: u32) -> Self {
        let next = (width > 0 && height > 0).then_some(0);
        Self { next, width, height }
    }
}

impl Iterator for MortonScan {
    type Item = u32;

    fn next(&mut self) -> Option<u32> {
        let cur = self.next?;
        self.next = next_inbounds_code(cur, self.width, self.height);
        Some(cur)
    }
}
