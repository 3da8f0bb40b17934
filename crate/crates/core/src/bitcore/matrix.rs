use crate::error::{invalid, Result};

use super::{round_up, sign_bit, BitBuffer, DEFAULT_TILE_COLS, DEFAULT_TILE_ROWS, PACK_ALIGN, WORD_BITS};

/// Which axis is the packed (inner) one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Major {
    /// Rows are contiguous bit vectors (operand A of a multiply).
    Row,
    /// Columns are contiguous bit vectors (operand B of a multiply).
    Col,
}

/// Fixed-stride-bit tiling.
///
/// Dimensions are expressed in the matrix's major-order view: `padded_rows`
/// counts outer vectors (rows for [`Major::Row`], columns for [`Major::Col`])
/// and `padded_cols` counts bits along each vector. A tile holds
/// `tile_rows` outer vectors of `tile_cols` bits each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FsbGeometry {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub padded_rows: usize,
    pub padded_cols: usize,
}

impl FsbGeometry {
    pub fn new(tile_rows: usize, tile_cols: usize, padded_rows: usize, padded_cols: usize) -> Result<Self> {
        let g = Self { tile_rows, tile_cols, padded_rows, padded_cols };
        g.validate()?;
        Ok(g)
    }

    /// Smallest geometry with the given tile shape that covers `outer × inner`.
    pub fn covering(outer: usize, inner: usize, tile_rows: usize, tile_cols: usize) -> Result<Self> {
        if tile_rows == 0 || tile_cols == 0 {
            return Err(invalid("FSB tile dimensions must be positive"));
        }
        Self::new(tile_rows, tile_cols, round_up(outer, tile_rows), round_up(inner, tile_cols))
    }

    /// Covering geometry with the default 8 × 128 tile.
    pub fn default_for(outer: usize, inner: usize) -> Self {
        Self::covering(outer, inner, DEFAULT_TILE_ROWS, DEFAULT_TILE_COLS).expect("default tile is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_rows == 0 || self.tile_cols == 0 {
            return Err(invalid("FSB tile dimensions must be positive"));
        }
        if (self.tile_rows * self.tile_cols) % WORD_BITS != 0 {
            return Err(invalid(format!(
                "FSB tile {}x{} is not a whole number of 64-bit words",
                self.tile_rows, self.tile_cols
            )));
        }
        if self.padded_rows % self.tile_rows != 0 || self.padded_cols % self.tile_cols != 0 {
            return Err(invalid(format!(
                "padded dims {}x{} are not multiples of the {}x{} tile",
                self.padded_rows, self.padded_cols, self.tile_rows, self.tile_cols
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn tile_bits(&self) -> usize {
        self.tile_rows * self.tile_cols
    }

    #[inline]
    pub fn tiles_per_row(&self) -> usize {
        self.padded_cols / self.tile_cols
    }

    pub fn total_bits(&self) -> usize {
        self.padded_rows * self.padded_cols
    }

    /// Global bit index of outer vector `outer`, bit `inner`.
    #[inline]
    pub fn index(&self, outer: usize, inner: usize) -> usize {
        let tile = (outer / self.tile_rows) * self.tiles_per_row() + inner / self.tile_cols;
        tile * self.tile_bits() + (outer % self.tile_rows) * self.tile_cols + inner % self.tile_cols
    }
}

/// Storage layout of a [`BitMatrix`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layout {
    /// Row `r` starts at bit `r * padded_cols`; `padded_cols` is a multiple of 128.
    RowPacked,
    /// Column `c` starts at bit `c * padded_rows`; `padded_rows` is a multiple of 128.
    ColPacked,
    Fsb {
        geometry: FsbGeometry,
        major: Major,
    },
}

impl Layout {
    pub fn major(&self) -> Major {
        match self {
            Layout::RowPacked => Major::Row,
            Layout::ColPacked => Major::Col,
            Layout::Fsb { major, .. } => *major,
        }
    }
}

/// A two-dimensional bit matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    padded_rows: usize,
    padded_cols: usize,
    layout: Layout,
    bits: BitBuffer,
}

fn padded_dims(rows: usize, cols: usize, layout: &Layout) -> (usize, usize) {
    match layout {
        Layout::RowPacked => (rows, round_up(cols, PACK_ALIGN)),
        Layout::ColPacked => (round_up(rows, PACK_ALIGN), cols),
        Layout::Fsb { geometry, major: Major::Row } => (geometry.padded_rows, geometry.padded_cols),
        Layout::Fsb { geometry, major: Major::Col } => (geometry.padded_cols, geometry.padded_rows),
    }
}

impl BitMatrix {
    /// All-zero matrix in a packed (non-FSB) layout.
    pub fn zeros(rows: usize, cols: usize, major: Major) -> Self {
        let layout = match major {
            Major::Row => Layout::RowPacked,
            Major::Col => Layout::ColPacked,
        };
        let (padded_rows, padded_cols) = padded_dims(rows, cols, &layout);
        Self { rows, cols, padded_rows, padded_cols, layout, bits: BitBuffer::zeros(padded_rows * padded_cols) }
    }

    pub fn from_fn(rows: usize, cols: usize, major: Major, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(rows, cols, major);
        for r in 0..rows {
            for c in 0..cols {
                if f(r, c) {
                    m.set(r, c, true);
                }
            }
        }
        m
    }

    /// Binarizes a row-major `rows × cols` real matrix with `sign`.
    pub fn from_signs<T: Copy + Into<f64>>(rows: usize, cols: usize, values: &[T], major: Major) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(invalid(format!("{} values do not fill a {rows}x{cols} matrix", values.len())));
        }
        if let Some(v) = values.iter().map(|&v| v.into()).find(|v: &f64| !v.is_finite()) {
            return Err(invalid(format!("non-finite value {v} cannot be binarized")));
        }
        let mut m = Self::zeros(rows, cols, major);
        match major {
            Major::Row => {
                let pc = m.padded_cols;
                let words = m.bits.words_mut();
                for r in 0..rows {
                    let row = &values[r * cols..(r + 1) * cols];
                    let base = r * pc / WORD_BITS;
                    for (w, chunk) in row.chunks(WORD_BITS).enumerate() {
                        let mut acc = 0u64;
                        for (i, &v) in chunk.iter().enumerate() {
                            acc |= (sign_bit(v.into()) as u64) << i;
                        }
                        words[base + w] = acc;
                    }
                }
            }
            Major::Col => {
                for r in 0..rows {
                    for c in 0..cols {
                        if sign_bit(values[r * cols + c].into()) {
                            m.set(r, c, true);
                        }
                    }
                }
            }
        }
        Ok(m)
    }

    /// Reassembles a matrix from stored parts, checking every invariant.
    pub fn from_raw_parts(rows: usize, cols: usize, layout: Layout, bits: BitBuffer) -> Result<Self> {
        if let Layout::Fsb { geometry, .. } = &layout {
            geometry.validate()?;
        }
        let (padded_rows, padded_cols) = padded_dims(rows, cols, &layout);
        if padded_rows < rows || padded_cols < cols {
            return Err(invalid(format!("layout covers {padded_rows}x{padded_cols} but the matrix is {rows}x{cols}")));
        }
        if bits.len() != padded_rows * padded_cols {
            return Err(invalid(format!(
                "storage holds {} bits, layout needs {}",
                bits.len(),
                padded_rows * padded_cols
            )));
        }
        let m = Self { rows, cols, padded_rows, padded_cols, layout, bits };
        if !m.pad_is_zero() {
            return Err(invalid("bits set outside the logical matrix region"));
        }
        Ok(m)
    }

    fn pad_is_zero(&self) -> bool {
        let (outer, inner) = self.major_dims();
        let mut ones = 0usize;
        for o in 0..outer {
            match &self.layout {
                Layout::Fsb { geometry, .. } => {
                    let tc = geometry.tile_cols;
                    let mut i = 0;
                    while i < inner {
                        let len = (tc - i % tc).min(inner - i);
                        ones += count_range(&self.bits, geometry.index(o, i), len);
                        i += len;
                    }
                }
                _ => ones += count_range(&self.bits, self.index_major(o, 0), inner),
            }
        }
        ones == self.bits.count_ones()
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn padded_rows(&self) -> usize {
        self.padded_rows
    }

    #[inline]
    pub fn padded_cols(&self) -> usize {
        self.padded_cols
    }

    #[inline]
    pub fn layout(&self) -> Layout {
        self.layout
    }

    #[inline]
    pub fn major(&self) -> Major {
        self.layout.major()
    }

    #[inline]
    pub fn bits(&self) -> &BitBuffer {
        &self.bits
    }

    #[inline]
    pub(crate) fn words_mut(&mut self) -> &mut [u64] {
        self.bits.words_mut()
    }

    /// (outer, inner) logical dims in major order.
    fn major_dims(&self) -> (usize, usize) {
        match self.major() {
            Major::Row => (self.rows, self.cols),
            Major::Col => (self.cols, self.rows),
        }
    }

    fn padded_major_dims(&self) -> (usize, usize) {
        match self.major() {
            Major::Row => (self.padded_rows, self.padded_cols),
            Major::Col => (self.padded_cols, self.padded_rows),
        }
    }

    #[inline]
    fn index_major(&self, outer: usize, inner: usize) -> usize {
        match &self.layout {
            Layout::RowPacked => outer * self.padded_cols + inner,
            Layout::ColPacked => outer * self.padded_rows + inner,
            Layout::Fsb { geometry, .. } => geometry.index(outer, inner),
        }
    }

    /// Storage bit index of logical element `(r, c)`.
    #[inline]
    pub fn bit_index(&self, r: usize, c: usize) -> usize {
        match self.major() {
            Major::Row => self.index_major(r, c),
            Major::Col => self.index_major(c, r),
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        assert!(r < self.rows && c < self.cols, "({r},{c}) outside {}x{}", self.rows, self.cols);
        self.bits.get(self.bit_index(r, c))
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        assert!(r < self.rows && c < self.cols, "({r},{c}) outside {}x{}", self.rows, self.cols);
        let i = self.bit_index(r, c);
        self.bits.set(i, value);
    }

    /// Words of one packed vector: row `i` of a RowPacked matrix or column `i`
    /// of a ColPacked one. Panics for FSB layouts.
    #[inline]
    pub fn vector_words(&self, i: usize) -> &[u64] {
        let (start, len) = match self.layout {
            Layout::RowPacked => (i * self.padded_cols, self.padded_cols),
            Layout::ColPacked => (i * self.padded_rows, self.padded_rows),
            Layout::Fsb { .. } => panic!("vector_words on an FSB matrix"),
        };
        &self.bits.words()[start / WORD_BITS..(start + len) / WORD_BITS]
    }

    /// Decodes to a row-major ±1 matrix.
    pub fn to_pm1(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(if self.get(r, c) { 1.0 } else { -1.0 });
            }
        }
        out
    }

    /// Re-encodes into the packed layout of `major`.
    pub fn to_packed(&self, major: Major) -> Self {
        if matches!((self.layout, major), (Layout::RowPacked, Major::Row) | (Layout::ColPacked, Major::Col)) {
            return self.clone();
        }
        if let Layout::Fsb { major: m, .. } = self.layout {
            if m == major {
                return from_fsb(self).expect("validated at construction");
            }
        }
        Self::from_fn(self.rows, self.cols, major, |r, c| self.get(r, c))
    }
}

/// Number of set bits in `[start, start + len)`.
fn count_range(bits: &BitBuffer, start: usize, len: usize) -> usize {
    let words = bits.words();
    let end = start + len;
    let mut ones = 0usize;
    let mut b = start;
    while b < end {
        let w = b / WORD_BITS;
        let lo = b % WORD_BITS;
        let hi = (end - w * WORD_BITS).min(WORD_BITS);
        let mask = if hi - lo == WORD_BITS { !0 } else { ((1u64 << (hi - lo)) - 1) << lo };
        ones += (words[w] & mask).count_ones() as usize;
        b = w * WORD_BITS + hi;
    }
    ones
}

/// Copies `len` bits starting at `src_bit` of `src` into `dst` at `dst_bit`.
/// Both offsets are multiples of 64 on the fast path.
fn copy_bits(src: &BitBuffer, src_bit: usize, dst: &mut [u64], dst_bit: usize, len: usize) {
    if src_bit % WORD_BITS == 0 && dst_bit % WORD_BITS == 0 && len % WORD_BITS == 0 {
        let s = src_bit / WORD_BITS;
        let d = dst_bit / WORD_BITS;
        let n = len / WORD_BITS;
        dst[d..d + n].copy_from_slice(&src.words()[s..s + n]);
        return;
    }
    for i in 0..len {
        if src.get(src_bit + i) {
            let b = dst_bit + i;
            dst[b / WORD_BITS] |= 1 << (b % WORD_BITS);
        }
    }
}

/// Converts a RowPacked or ColPacked matrix into FSB tiles.
///
/// Tiles and in-tile vectors keep the source's major order; for a ColPacked
/// source each tile holds `tile_rows` columns of `tile_cols` bits. Padding
/// bits are zero.
pub fn to_fsb(src: &BitMatrix, geometry: FsbGeometry) -> Result<BitMatrix> {
    geometry.validate()?;
    let major = match src.layout {
        Layout::RowPacked => Major::Row,
        Layout::ColPacked => Major::Col,
        Layout::Fsb { .. } => return Err(invalid("source is already in FSB layout")),
    };
    let (outer, inner) = src.major_dims();
    if geometry.padded_rows < outer || geometry.padded_cols < inner {
        return Err(invalid(format!(
            "FSB geometry {}x{} does not cover a {outer}x{inner} matrix",
            geometry.padded_rows, geometry.padded_cols
        )));
    }
    let stride = src.padded_major_dims().1;
    let mut words = vec![0u64; geometry.total_bits() / WORD_BITS];
    let tc = geometry.tile_cols;
    for o in 0..outer {
        let mut i = 0;
        while i < inner {
            // one in-tile row segment at a time; source padding past `inner` is zero
            let seg = tc - i % tc;
            copy_bits(&src.bits, o * stride + i, &mut words, geometry.index(o, i), seg.min(stride - i));
            i += seg;
        }
    }
    let bits = BitBuffer::from_words(geometry.total_bits(), words)?;
    BitMatrix::from_raw_parts(src.rows, src.cols, Layout::Fsb { geometry, major }, bits)
}

/// Inverse of [`to_fsb`]: back to RowPacked (row-major tiles) or ColPacked.
pub fn from_fsb(src: &BitMatrix) -> Result<BitMatrix> {
    let Layout::Fsb { geometry, major } = src.layout else {
        return Err(invalid("source is not in FSB layout"));
    };
    geometry.validate()?;
    let (outer, inner) = src.major_dims();
    if geometry.padded_rows < outer || geometry.padded_cols < inner || src.bits.len() != geometry.total_bits() {
        return Err(invalid("FSB geometry metadata does not match the matrix"));
    }
    let mut out = BitMatrix::zeros(src.rows, src.cols, major);
    let stride = out.padded_major_dims().1;
    let tc = geometry.tile_cols;
    let words = out.bits.words_mut();
    for o in 0..outer {
        let mut i = 0;
        while i < inner {
            let seg = tc - i % tc;
            copy_bits(&src.bits, geometry.index(o, i), words, o * stride + i, seg.min(stride - i));
            i += seg;
        }
    }
    Ok(out)
}
