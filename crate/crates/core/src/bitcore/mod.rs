//! Packed bit storage and the primitives every kernel builds on.
//!
//! Bit order is fixed once for the whole crate: logical bit `b` lives in
//! word `b / 64` at position `b % 64`, least-significant bit first. Bits
//! past the logical length are always zero.

mod buffer;
mod matrix;
pub(crate) mod popcnt;

pub use buffer::{dot_pm1, pack_signs, words_for, BitBuffer, WORD_BITS};
pub use matrix::{from_fsb, to_fsb, BitMatrix, FsbGeometry, Layout, Major};

/// Inner dimensions of packed operands are padded to this many bits.
pub const PACK_ALIGN: usize = 128;

/// Default FSB tile height (rows per tile).
pub const DEFAULT_TILE_ROWS: usize = 8;

/// Default FSB tile width (bits per tile row).
pub const DEFAULT_TILE_COLS: usize = 128;

#[inline]
pub(crate) fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

/// Sign binarization: +1 (bit set) for `x >= 0`, including `-0.0`.
#[inline]
pub fn sign_bit(x: f64) -> bool {
    x >= 0.0
}
