//! Z-order (Morton) keys for 16-bit 2D coordinates.

/// Spreads the low 16 bits of `v` into the even bits of a `u32`.
#[inline]
fn part1by1(v: u16) -> u32 {
    let mut x = v as u32;
    x = (x | (x << 8)) & 0x00FF_00FF;
    x = (x | (x << 4)) & 0x0F0F_0F0F;
    x = (x | (x << 2)) & 0x3333_3333;
    x = (x | (x << 1)) & 0x5555_5555;
    x
}

#[inline]
fn compact1by1(v: u32) -> u16 {
    let mut x = v & 0x5555_5555;
    x = (x | (x >> 1)) & 0x3333_3333;
    x = (x | (x >> 2)) & 0x0F0F_0F0F;
    x = (x | (x >> 4)) & 0x00FF_00FF;
    x = (x | (x >> 8)) & 0x0000_FFFF;
    x as u16
}

/// Interleaves `x` (even bits) and `y` (odd bits).
pub fn encode(x: u16, y: u16) -> u32 {
    part1by1(x) | (part1by1(y) << 1)
}

pub fn decode(code: u32) -> (u16, u16) {
    (compact1by1(code), compact1by1(code >> 1))
}

/// Stable permutation that sorts points by Morton key.
pub fn sort_order(points: impl Iterator<Item = (u16, u16)>) -> Vec<usize> {
    let keys: Vec<u32> = points.map(|(x, y)| encode(x, y)).collect();
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&i| keys[i]);
    order
}
