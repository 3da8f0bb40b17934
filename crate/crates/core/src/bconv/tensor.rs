use crate::bitcore::{round_up, sign_bit, BitBuffer, BitMatrix, Layout, Major, WORD_BITS};
use crate::error::{invalid, unsupported, Result};

/// Batch rows per tile / padding unit.
pub const ROW_ALIGN: usize = 8;
/// Channel bits per tile / padding unit.
pub const CHANNEL_ALIGN: usize = 128;

const CHUNK_WORDS: usize = CHANNEL_ALIGN / WORD_BITS;
const TILE_WORDS: usize = ROW_ALIGN * CHUNK_WORDS;

/// Storage of the per-site `(rows, channels)` bit plane of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ActLayout {
    /// Each row's padded channel vector is contiguous.
    #[default]
    Plain,
    /// The plane is tiled into 8 × 128-bit FSB tiles, row-major.
    Fsb,
}

impl ActLayout {
    pub fn name(self) -> &'static str {
        match self {
            ActLayout::Plain => "plain",
            ActLayout::Fsb => "fsb",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            ActLayout::Plain => 0,
            ActLayout::Fsb => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ActLayout::Plain),
            1 => Some(ActLayout::Fsb),
            _ => None,
        }
    }
}

impl std::fmt::Display for ActLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ActLayout {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ActLayout::Plain),
            "fsb" => Ok(ActLayout::Fsb),
            _ => Err(invalid(format!("unknown layout `{s}` (expected plain or fsb)"))),
        }
    }
}

/// Word offset, inside one plane, of the 128-bit channel chunk `chunk` of `row`.
#[inline(always)]
pub(crate) fn chunk_offset(layout: ActLayout, row: usize, chunk: usize, c_pad: usize) -> usize {
    match layout {
        ActLayout::Plain => row * (c_pad / WORD_BITS) + chunk * CHUNK_WORDS,
        ActLayout::Fsb => {
            ((row / ROW_ALIGN) * (c_pad / CHANNEL_ALIGN) + chunk) * TILE_WORDS + (row % ROW_ALIGN) * CHUNK_WORDS
        }
    }
}

#[inline(always)]
pub(crate) fn plane_bit(layout: ActLayout, row: usize, col: usize, c_pad: usize) -> usize {
    chunk_offset(layout, row, col / CHANNEL_ALIGN, c_pad) * WORD_BITS + col % CHANNEL_ALIGN
}

/// Re-encodes a sequence of planes from one layout to another.
fn convert_planes(words: &[u64], rows_pad: usize, c_pad: usize, from: ActLayout, to: ActLayout) -> Vec<u64> {
    if from == to {
        return words.to_vec();
    }
    let plane = rows_pad * c_pad / WORD_BITS;
    let mut out = vec![0u64; words.len()];
    if plane == 0 {
        return out;
    }
    for (src, dst) in words.chunks(plane).zip(out.chunks_mut(plane)) {
        for row in 0..rows_pad {
            for chunk in 0..c_pad / CHANNEL_ALIGN {
                let s = chunk_offset(from, row, chunk, c_pad);
                let d = chunk_offset(to, row, chunk, c_pad);
                dst[d..d + CHUNK_WORDS].copy_from_slice(&src[s..s + CHUNK_WORDS]);
            }
        }
    }
    out
}

/// Real-valued 4-D tensor with index `((h * W + w) * N + n) * C + c`.
///
/// Used for HWNC activations, PQNO conv outputs and residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct RealTensor {
    pub h: usize,
    pub w: usize,
    pub n: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl RealTensor {
    pub fn zeros(h: usize, w: usize, n: usize, c: usize) -> Self {
        Self { h, w, n, c, data: vec![0.0; h * w * n * c] }
    }

    pub fn from_vec(h: usize, w: usize, n: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * n * c {
            return Err(invalid(format!("{} values for a {h}x{w}x{n}x{c} tensor", data.len())));
        }
        Ok(Self { h, w, n, c, data })
    }

    /// Builds an HWNC tensor from NHWC-ordered values.
    pub fn from_nhwc<T: Copy + Into<f64>>(n: usize, h: usize, w: usize, c: usize, values: &[T]) -> Result<Self> {
        if values.len() != n * h * w * c {
            return Err(invalid(format!("{} values for an NHWC batch of {n}x{h}x{w}x{c}", values.len())));
        }
        let mut t = Self::zeros(h, w, n, c);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let src = ((b * h + y) * w + x) * c;
                    let dst = t.index(y, x, b, 0);
                    for k in 0..c {
                        t.data[dst + k] = values[src + k].into();
                    }
                }
            }
        }
        Ok(t)
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, n: usize, c: usize) -> usize {
        ((h * self.w + w) * self.n + n) * self.c + c
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, n: usize, c: usize) -> f64 {
        self.data[self.index(h, w, n, c)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, n: usize, c: usize, v: f64) {
        let i = self.index(h, w, n, c);
        self.data[i] = v;
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.h, self.w, self.n, self.c)
    }
}

/// Bit activations in HWNC order, packed along channels per `(h, w, n)`.
///
/// Each spatial site holds an `n_pad × c_pad` plane (`n_pad` a multiple of 8,
/// `c_pad` of 128). Bits outside `n < N`, `c < C` are zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensorHWNC {
    h: usize,
    w: usize,
    n: usize,
    c: usize,
    n_pad: usize,
    c_pad: usize,
    layout: ActLayout,
    bits: BitBuffer,
}

impl BitTensorHWNC {
    pub fn zeros(h: usize, w: usize, n: usize, c: usize, layout: ActLayout) -> Self {
        let n_pad = round_up(n, ROW_ALIGN);
        let c_pad = round_up(c, CHANNEL_ALIGN);
        Self { h, w, n, c, n_pad, c_pad, layout, bits: BitBuffer::zeros(h * w * n_pad * c_pad) }
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        n: usize,
        c: usize,
        layout: ActLayout,
        mut f: impl FnMut(usize, usize, usize, usize) -> bool,
    ) -> Self {
        let mut t = Self::zeros(h, w, n, c, layout);
        for y in 0..h {
            for x in 0..w {
                for b in 0..n {
                    for k in 0..c {
                        if f(y, x, b, k) {
                            t.set(y, x, b, k, true);
                        }
                    }
                }
            }
        }
        t
    }

    /// Sign-binarizes a real tensor.
    pub fn from_real(x: &RealTensor, layout: ActLayout) -> Result<Self> {
        if let Some(v) = x.data.iter().find(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value {v} cannot be binarized")));
        }
        Ok(Self::from_fn(x.h, x.w, x.n, x.c, layout, |h, w, n, c| sign_bit(x.get(h, w, n, c))))
    }

    /// Reassembles a tensor from stored words.
    pub fn from_words(h: usize, w: usize, n: usize, c: usize, layout: ActLayout, words: Vec<u64>) -> Result<Self> {
        let mut t = Self::zeros(h, w, n, c, layout);
        let bits = BitBuffer::from_words(t.bits.len(), words)?;
        t.bits = bits;
        let live = (0..h * w)
            .flat_map(|s| (0..n).map(move |r| (s, r)))
            .map(|(s, r)| (0..c).filter(|&k| t.bits.get(s * t.plane_bits() + plane_bit(layout, r, k, t.c_pad))).count())
            .sum::<usize>();
        if live != t.bits.count_ones() {
            return Err(invalid("tensor bits set in the padding region"));
        }
        Ok(t)
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn n_pad(&self) -> usize {
        self.n_pad
    }
    #[inline]
    pub fn c_pad(&self) -> usize {
        self.c_pad
    }
    #[inline]
    pub fn layout(&self) -> ActLayout {
        self.layout
    }
    #[inline]
    pub fn bits(&self) -> &BitBuffer {
        &self.bits
    }
    #[inline]
    pub(crate) fn words_mut(&mut self) -> &mut [u64] {
        self.bits.words_mut()
    }

    #[inline]
    pub fn plane_bits(&self) -> usize {
        self.n_pad * self.c_pad
    }

    #[inline]
    pub fn plane_words(&self) -> usize {
        self.plane_bits() / WORD_BITS
    }

    /// Words of the plane at spatial site `(h, w)`.
    #[inline]
    pub fn site_words(&self, h: usize, w: usize) -> &[u64] {
        let pw = self.plane_words();
        let s = (h * self.w + w) * pw;
        &self.bits.words()[s..s + pw]
    }

    #[inline]
    pub fn bit_index(&self, h: usize, w: usize, n: usize, c: usize) -> usize {
        (h * self.w + w) * self.plane_bits() + plane_bit(self.layout, n, c, self.c_pad)
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, n: usize, c: usize) -> bool {
        assert!(h < self.h && w < self.w && n < self.n && c < self.c, "index outside tensor");
        self.bits.get(self.bit_index(h, w, n, c))
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, n: usize, c: usize, v: bool) {
        assert!(h < self.h && w < self.w && n < self.n && c < self.c, "index outside tensor");
        let i = self.bit_index(h, w, n, c);
        self.bits.set(i, v);
    }

    pub fn to_layout(&self, layout: ActLayout) -> Self {
        let words = convert_planes(self.bits.words(), self.n_pad, self.c_pad, self.layout, layout);
        Self { layout, bits: BitBuffer::from_words(self.bits.len(), words).expect("same length"), ..*self }
    }

    /// Decodes to a ±1 real tensor over the logical region.
    pub fn to_pm1(&self) -> RealTensor {
        let mut t = RealTensor::zeros(self.h, self.w, self.n, self.c);
        for y in 0..self.h {
            for x in 0..self.w {
                for b in 0..self.n {
                    for k in 0..self.c {
                        t.set(y, x, b, k, if self.get(y, x, b, k) { 1.0 } else { -1.0 });
                    }
                }
            }
        }
        t
    }

    /// Flattens each batch row into one bit vector, site-major then channel:
    /// feature `(h * W + w) * c_pad + c`. Padding channels stay zero.
    pub fn flatten_rows(&self) -> BitMatrix {
        let sites = self.h * self.w;
        let mut m = BitMatrix::zeros(self.n, sites * self.c_pad, Major::Row);
        let row_words = m.padded_cols() / WORD_BITS;
        let chunks = self.c_pad / CHANNEL_ALIGN;
        let pw = self.plane_words();
        let src = self.bits.words();
        let dst = m.words_mut();
        for b in 0..self.n {
            for s in 0..sites {
                for k in 0..chunks {
                    let from = s * pw + chunk_offset(self.layout, b, k, self.c_pad);
                    let to = b * row_words + (s * chunks + k) * CHUNK_WORDS;
                    dst[to..to + CHUNK_WORDS].copy_from_slice(&src[from..from + CHUNK_WORDS]);
                }
            }
        }
        m
    }

    /// Wraps a row-packed `N × C` matrix as a `1 × 1 × N × C` tensor.
    pub fn from_rows(m: &BitMatrix, layout: ActLayout) -> Result<Self> {
        if m.layout() != Layout::RowPacked {
            return Err(invalid("expected a row-packed matrix"));
        }
        let mut t = Self::zeros(1, 1, m.rows(), m.cols(), ActLayout::Plain);
        let n = m.rows() * m.padded_cols() / WORD_BITS;
        t.words_mut()[..n].copy_from_slice(m.bits().words());
        Ok(if layout == ActLayout::Plain { t } else { t.to_layout(layout) })
    }
}

/// Bit filters in `[KH, KW, O, C]` order, packed along `C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitFilterKKOC {
    kh: usize,
    kw: usize,
    o: usize,
    c: usize,
    o_pad: usize,
    c_pad: usize,
    layout: ActLayout,
    bits: BitBuffer,
}

impl BitFilterKKOC {
    pub fn zeros(kh: usize, kw: usize, o: usize, c: usize, layout: ActLayout) -> Self {
        let o_pad = round_up(o, ROW_ALIGN);
        let c_pad = round_up(c, CHANNEL_ALIGN);
        Self { kh, kw, o, c, o_pad, c_pad, layout, bits: BitBuffer::zeros(kh * kw * o_pad * c_pad) }
    }

    pub fn from_fn(
        kh: usize,
        kw: usize,
        o: usize,
        c: usize,
        layout: ActLayout,
        mut f: impl FnMut(usize, usize, usize, usize) -> bool,
    ) -> Self {
        let mut t = Self::zeros(kh, kw, o, c, layout);
        for r in 0..kh {
            for s in 0..kw {
                for oo in 0..o {
                    for k in 0..c {
                        if f(r, s, oo, k) {
                            t.set(r, s, oo, k, true);
                        }
                    }
                }
            }
        }
        t
    }

    /// Sign-binarizes real weights given in `[KH][KW][O][C]` order.
    pub fn from_signs<T: Copy + Into<f64>>(
        kh: usize,
        kw: usize,
        o: usize,
        c: usize,
        weights: &[T],
        layout: ActLayout,
    ) -> Result<Self> {
        if weights.len() != kh * kw * o * c {
            return Err(invalid(format!("{} weights for a {kh}x{kw}x{o}x{c} filter", weights.len())));
        }
        if let Some(v) = weights.iter().map(|&v| v.into()).find(|v: &f64| !v.is_finite()) {
            return Err(invalid(format!("non-finite weight {v}")));
        }
        Ok(Self::from_fn(kh, kw, o, c, layout, |r, s, oo, k| sign_bit(weights[((r * kw + s) * o + oo) * c + k].into())))
    }

    pub fn from_words(kh: usize, kw: usize, o: usize, c: usize, layout: ActLayout, words: Vec<u64>) -> Result<Self> {
        if kh == 0 || kw == 0 {
            return Err(unsupported("filter dims must be positive"));
        }
        let mut f = Self::zeros(kh, kw, o, c, layout);
        f.bits = BitBuffer::from_words(f.bits.len(), words)?;
        let mut live = 0;
        for r in 0..kh {
            for s in 0..kw {
                for oo in 0..o {
                    for k in 0..c {
                        live += f.get(r, s, oo, k) as usize;
                    }
                }
            }
        }
        if live != f.bits.count_ones() {
            return Err(invalid("filter bits set in the padding region"));
        }
        Ok(f)
    }

    #[inline]
    pub fn kh(&self) -> usize {
        self.kh
    }
    #[inline]
    pub fn kw(&self) -> usize {
        self.kw
    }
    #[inline]
    pub fn o(&self) -> usize {
        self.o
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn o_pad(&self) -> usize {
        self.o_pad
    }
    #[inline]
    pub fn c_pad(&self) -> usize {
        self.c_pad
    }
    #[inline]
    pub fn layout(&self) -> ActLayout {
        self.layout
    }
    #[inline]
    pub fn bits(&self) -> &BitBuffer {
        &self.bits
    }

    #[inline]
    pub fn plane_words(&self) -> usize {
        self.o_pad * self.c_pad / WORD_BITS
    }

    /// Words of the `(O_pad, C_pad)` plane at filter tap `(r, s)`.
    #[inline]
    pub fn tap_words(&self, r: usize, s: usize) -> &[u64] {
        let pw = self.plane_words();
        let st = (r * self.kw + s) * pw;
        &self.bits.words()[st..st + pw]
    }

    #[inline]
    fn bit_index(&self, r: usize, s: usize, o: usize, c: usize) -> usize {
        (r * self.kw + s) * self.o_pad * self.c_pad + plane_bit(self.layout, o, c, self.c_pad)
    }

    #[inline]
    pub fn get(&self, r: usize, s: usize, o: usize, c: usize) -> bool {
        assert!(r < self.kh && s < self.kw && o < self.o && c < self.c, "index outside filter");
        self.bits.get(self.bit_index(r, s, o, c))
    }

    #[inline]
    pub fn set(&mut self, r: usize, s: usize, o: usize, c: usize, v: bool) {
        assert!(r < self.kh && s < self.kw && o < self.o && c < self.c, "index outside filter");
        let i = self.bit_index(r, s, o, c);
        self.bits.set(i, v);
    }

    pub fn to_layout(&self, layout: ActLayout) -> Self {
        let words = convert_planes(self.bits.words(), self.o_pad, self.c_pad, self.layout, layout);
        Self { layout, bits: BitBuffer::from_words(self.bits.len(), words).expect("same length"), ..*self }
    }

    /// Decodes to ±1 values in `[KH][KW][O][C]` order.
    pub fn to_pm1(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.kh * self.kw * self.o * self.c);
        for r in 0..self.kh {
            for s in 0..self.kw {
                for o in 0..self.o {
                    for c in 0..self.c {
                        out.push(if self.get(r, s, o, c) { 1.0 } else { -1.0 });
                    }
                }
            }
        }
        out
    }
}

/// 32-bit convolution output at `((p * Q + q) * N + n) * O + o`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensorPQNO {
    pub p: usize,
    pub q: usize,
    pub n: usize,
    pub o: usize,
    pub data: Vec<i32>,
}

impl IntTensorPQNO {
    pub fn zeros(p: usize, q: usize, n: usize, o: usize) -> Self {
        Self { p, q, n, o, data: vec![0; p * q * n * o] }
    }

    #[inline]
    pub fn index(&self, p: usize, q: usize, n: usize, o: usize) -> usize {
        ((p * self.q + q) * self.n + n) * self.o + o
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize, n: usize, o: usize) -> i32 {
        self.data[self.index(p, q, n, o)]
    }
}

/// Stride and zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride_h: stride, stride_w: stride, pad_h: pad, pad_w: pad }
    }

    /// Output spatial dims `(P, Q)` for an `h × w` input and `kh × kw` filter.
    pub fn output_dims(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(invalid("convolution stride must be positive"));
        }
        if kh == 0 || kw == 0 || h + 2 * self.pad_h < kh || w + 2 * self.pad_w < kw {
            return Err(unsupported(format!(
                "{kh}x{kw} filter does not fit a {h}x{w} input with padding {}x{}",
                self.pad_h, self.pad_w
            )));
        }
        Ok(((h + 2 * self.pad_h - kh) / self.stride_h + 1, (w + 2 * self.pad_w - kw) / self.stride_w + 1))
    }
}
