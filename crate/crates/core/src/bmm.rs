//! Bit matrix multiplication.
//!
//! `A` (m × n) is row-packed and `B` (n × k) column-packed, so each output
//! entry is the ±1 dot product of a row of `A` with a column of `B`. Three
//! traversal strategies produce bit-identical results:
//!
//! - [`Variant::Naive`] walks words serially for every output entry.
//! - [`Variant::Blocked`] stages `8 × 1024`-bit panels of both operands into
//!   small scratch buffers and reuses them across an `8 × 8` output block.
//! - [`Variant::Fsb`] reads operands stored in FSB tiles, so every tile it
//!   touches is a contiguous run of words.
//!
//! Work is split over bands of output rows; every output entry is written by
//! exactly one band, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::bitcore::popcnt::{with_popcnt, xor_popcount};
use crate::bitcore::{BitMatrix, Layout, Major, PACK_ALIGN, WORD_BITS};
use crate::error::{invalid, unsupported, Result};
use crate::nn::ThresholdSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Naive,
    Blocked,
    Fsb,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Naive, Variant::Blocked, Variant::Fsb];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::Blocked => "blocked",
            Variant::Fsb => "fsb",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Variant::Naive),
            "blocked" => Ok(Variant::Blocked),
            "fsb" => Ok(Variant::Fsb),
            _ => Err(invalid(format!("unknown bmm variant `{s}`"))),
        }
    }
}

/// Panel shape of the blocked kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub row_block: usize,
    pub col_block: usize,
    pub k_bits: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { row_block: 8, col_block: 8, k_bits: 1024 }
    }
}

impl BlockConfig {
    fn validate(&self) -> Result<()> {
        if self.row_block == 0 || self.col_block == 0 || self.k_bits == 0 || self.k_bits % WORD_BITS != 0 {
            return Err(invalid(format!("bad block configuration {self:?}")));
        }
        Ok(())
    }
}

/// Row-major 32-bit integer matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl IntMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0; rows * cols] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }
}

/// Checks operand shapes and layouts for `variant`. With `strict`, the inner
/// dimension must equal `n` exactly and be a multiple of 128; otherwise `n`
/// may be smaller than the (zero-padded) operand width.
fn check_operands(a: &BitMatrix, b: &BitMatrix, n: usize, variant: Variant, strict: bool) -> Result<()> {
    if a.cols() != b.rows() {
        return Err(invalid(format!(
            "inner dimensions differ: A is {}x{}, B is {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if strict {
        if a.cols() != n {
            return Err(invalid(format!("n = {n} but operands have inner dimension {}", a.cols())));
        }
        if n % PACK_ALIGN != 0 {
            return Err(unsupported(format!("inner dimension {n} is not a multiple of {PACK_ALIGN}")));
        }
    } else if n > a.cols() {
        return Err(invalid(format!("n = {n} exceeds inner dimension {}", a.cols())));
    }
    match variant {
        Variant::Naive | Variant::Blocked => {
            if a.layout() != Layout::RowPacked || b.layout() != Layout::ColPacked {
                return Err(invalid(format!("{} variant needs row-packed A and column-packed B", variant.name())));
            }
        }
        Variant::Fsb => {
            let (Layout::Fsb { geometry: ga, major: Major::Row }, Layout::Fsb { geometry: gb, major: Major::Col }) =
                (a.layout(), b.layout())
            else {
                return Err(invalid("fsb variant needs row-major FSB A and column-major FSB B"));
            };
            if ga.tile_rows != gb.tile_rows || ga.tile_cols != gb.tile_cols || ga.padded_cols != gb.padded_cols {
                return Err(invalid("FSB operands use different tile geometries"));
            }
            if ga.tile_cols % WORD_BITS != 0 {
                return Err(unsupported(format!("FSB tile width {} is not a multiple of {WORD_BITS}", ga.tile_cols)));
            }
        }
    }
    Ok(())
}

/// Rows of output computed per work item.
fn band_height(a: &BitMatrix, variant: Variant, cfg: &BlockConfig) -> usize {
    match (variant, a.layout()) {
        (Variant::Fsb, Layout::Fsb { geometry, .. }) => geometry.tile_rows,
        (Variant::Blocked, _) => cfg.row_block,
        _ => 8,
    }
}

#[inline(always)]
fn naive_band_body(a: &BitMatrix, b: &BitMatrix, i0: usize, acc: &mut [u32]) {
    let k = b.cols();
    for (di, out) in acc.chunks_mut(k).enumerate() {
        let i = i0 + di;
        if i >= a.rows() {
            break;
        }
        let row = a.vector_words(i);
        for (j, v) in out.iter_mut().enumerate() {
            *v = xor_popcount(row, b.vector_words(j));
        }
    }
}

with_popcnt!(fn naive_band(a: &BitMatrix, b: &BitMatrix, i0: usize, acc: &mut [u32]) => naive_band_body);

#[inline(always)]
fn blocked_band_body(a: &BitMatrix, b: &BitMatrix, i0: usize, cfg: &BlockConfig, acc: &mut [u32]) {
    let k = b.cols();
    let words = a.padded_cols() / WORD_BITS;
    let kw = cfg.k_bits / WORD_BITS;
    let rows = acc.len() / k.max(1);
    let mut sa = vec![0u64; rows * kw];
    let mut sb = vec![0u64; cfg.col_block * kw];
    let mut kp = 0;
    while kp < words {
        let len = kw.min(words - kp);
        // stage the A panel once per k-step
        for di in 0..rows {
            let dst = &mut sa[di * kw..di * kw + len];
            if i0 + di < a.rows() {
                dst.copy_from_slice(&a.vector_words(i0 + di)[kp..kp + len]);
            } else {
                dst.fill(0);
            }
        }
        let mut j0 = 0;
        while j0 < k {
            let cols = cfg.col_block.min(k - j0);
            for dj in 0..cols {
                sb[dj * kw..dj * kw + len].copy_from_slice(&b.vector_words(j0 + dj)[kp..kp + len]);
            }
            for di in 0..rows {
                let ra = &sa[di * kw..di * kw + len];
                let out = &mut acc[di * k + j0..di * k + j0 + cols];
                for (dj, v) in out.iter_mut().enumerate() {
                    *v += xor_popcount(ra, &sb[dj * kw..dj * kw + len]);
                }
            }
            j0 += cols;
        }
        kp += len;
    }
}

with_popcnt!(fn blocked_band(a: &BitMatrix, b: &BitMatrix, i0: usize, cfg: &BlockConfig, acc: &mut [u32]) => blocked_band_body);

#[inline(always)]
fn fsb_band_body(a: &BitMatrix, b: &BitMatrix, band: usize, acc: &mut [u32]) {
    let (Layout::Fsb { geometry: ga, .. }, Layout::Fsb { geometry: gb, .. }) = (a.layout(), b.layout()) else {
        unreachable!("checked by check_operands");
    };
    let k = b.cols();
    let bh = ga.tile_rows;
    let rw = ga.tile_cols / WORD_BITS;
    let tw = bh * rw;
    let tiles = ga.tiles_per_row();
    let wa = a.bits().words();
    let wb = b.bits().words();
    let rows = (a.rows() - band * bh).min(bh);
    let mut tile_acc = vec![0u32; bh * bh];
    for jt in 0..gb.padded_rows / bh {
        tile_acc.fill(0);
        let a_row = &wa[band * tiles * tw..(band + 1) * tiles * tw];
        let b_row = &wb[jt * tiles * tw..(jt + 1) * tiles * tw];
        for (ta, tb) in a_row.chunks_exact(tw).zip(b_row.chunks_exact(tw)) {
            for (i, ra) in ta.chunks_exact(rw).enumerate() {
                let out = &mut tile_acc[i * bh..(i + 1) * bh];
                for (v, rb) in out.iter_mut().zip(tb.chunks_exact(rw)) {
                    *v += xor_popcount(ra, rb);
                }
            }
        }
        let j0 = jt * bh;
        let cols = bh.min(k.saturating_sub(j0));
        for i in 0..rows {
            acc[i * k + j0..i * k + j0 + cols].copy_from_slice(&tile_acc[i * bh..i * bh + cols]);
        }
    }
}

with_popcnt!(fn fsb_band(a: &BitMatrix, b: &BitMatrix, band: usize, acc: &mut [u32]) => fsb_band_body);

/// Raw XOR-popcount accumulators for one band of output rows.
fn band_popcounts(a: &BitMatrix, b: &BitMatrix, variant: Variant, cfg: &BlockConfig, band: usize, acc: &mut [u32]) {
    let bh = band_height(a, variant, cfg);
    match variant {
        Variant::Naive => naive_band(a, b, band * bh, acc),
        Variant::Blocked => blocked_band(a, b, band * bh, cfg, acc),
        Variant::Fsb => fsb_band(a, b, band, acc),
    }
}

/// Drives the band kernel over the output, handing each band's
/// accumulators (rows × k, row-major) to `emit` together with the band's
/// output chunk.
fn for_each_band<T: Send>(
    a: &BitMatrix,
    b: &BitMatrix,
    variant: Variant,
    cfg: &BlockConfig,
    out: &mut [T],
    out_per_row: usize,
    emit: impl Fn(usize, &[u32], &mut [T]) + Sync,
) {
    let k = b.cols();
    let bh = band_height(a, variant, cfg);
    if out_per_row == 0 || a.rows() == 0 {
        return;
    }
    out.par_chunks_mut(bh * out_per_row).enumerate().for_each(|(band, chunk)| {
        let rows = chunk.len() / out_per_row;
        let mut acc = vec![0u32; rows * k];
        band_popcounts(a, b, variant, cfg, band, &mut acc);
        emit(band * bh, &acc, chunk);
    });
}

/// Un-amended accumulator: `popcount(row_i(A) ^ col_j(B))`.
pub fn bmm_raw(a: &BitMatrix, b: &BitMatrix, n: usize) -> Result<IntMatrix> {
    check_operands(a, b, n, Variant::Naive, true)?;
    let cfg = BlockConfig::default();
    let mut out = IntMatrix::zeros(a.rows(), b.cols());
    for_each_band(a, b, Variant::Naive, &cfg, &mut out.data, b.cols(), |_, acc, chunk| {
        for (o, &v) in chunk.iter_mut().zip(acc) {
            *o = v as i32;
        }
    });
    Ok(out)
}

/// ±1 matrix product: `n - 2 * popcount(row_i(A) ^ col_j(B))` per entry.
pub fn bmm_pm1(a: &BitMatrix, b: &BitMatrix, n: usize, variant: Variant) -> Result<IntMatrix> {
    bmm_pm1_with(a, b, n, variant, &BlockConfig::default())
}

pub fn bmm_pm1_with(a: &BitMatrix, b: &BitMatrix, n: usize, variant: Variant, cfg: &BlockConfig) -> Result<IntMatrix> {
    cfg.validate()?;
    check_operands(a, b, n, variant, true)?;
    Ok(amended(a, b, n, variant, cfg))
}

/// Like [`bmm_pm1`] but `n` may be smaller than the operand width; the
/// extra columns must be zero in both operands.
pub(crate) fn bmm_pm1_logical(a: &BitMatrix, b: &BitMatrix, n: usize, variant: Variant) -> Result<IntMatrix> {
    check_operands(a, b, n, variant, false)?;
    Ok(amended(a, b, n, variant, &BlockConfig::default()))
}

fn amended(a: &BitMatrix, b: &BitMatrix, n: usize, variant: Variant, cfg: &BlockConfig) -> IntMatrix {
    let mut out = IntMatrix::zeros(a.rows(), b.cols());
    let n = n as i32;
    for_each_band(a, b, variant, cfg, &mut out.data, b.cols(), |_, acc, chunk| {
        for (o, &v) in chunk.iter_mut().zip(acc) {
            *o = n - 2 * v as i32;
        }
    });
    out
}

/// ±1 product binarized per output column with `thresholds`; the integer
/// matrix only ever exists band by band in scratch.
pub fn bmm_pm1_bin(
    a: &BitMatrix,
    b: &BitMatrix,
    n: usize,
    thresholds: &[ThresholdSpec],
    variant: Variant,
) -> Result<BitMatrix> {
    check_operands(a, b, n, variant, true)?;
    bin_impl(a, b, n, thresholds, variant)
}

pub(crate) fn bmm_pm1_bin_logical(
    a: &BitMatrix,
    b: &BitMatrix,
    n: usize,
    thresholds: &[ThresholdSpec],
    variant: Variant,
) -> Result<BitMatrix> {
    check_operands(a, b, n, variant, false)?;
    bin_impl(a, b, n, thresholds, variant)
}

fn bin_impl(
    a: &BitMatrix,
    b: &BitMatrix,
    n: usize,
    thresholds: &[ThresholdSpec],
    variant: Variant,
) -> Result<BitMatrix> {
    let k = b.cols();
    if thresholds.len() != k {
        return Err(invalid(format!("{} thresholds for {k} output columns", thresholds.len())));
    }
    let cfg = BlockConfig::default();
    let mut out = BitMatrix::zeros(a.rows(), k, Major::Row);
    let row_words = out.padded_cols() / WORD_BITS;
    let n = n as i32;
    for_each_band(a, b, variant, &cfg, out.words_mut(), row_words, |_, acc, chunk| {
        for (acc_row, words) in acc.chunks(k.max(1)).zip(chunk.chunks_mut(row_words)) {
            for (j, (&v, t)) in acc_row.iter().zip(thresholds).enumerate() {
                if t.test((n - 2 * v as i32) as f64) {
                    words[j / WORD_BITS] |= 1 << (j % WORD_BITS);
                }
            }
        }
    });
    Ok(out)
}
