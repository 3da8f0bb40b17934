//! Bit convolution over HWNC activations and KKOC filters.
//!
//! Out-of-frame filter taps are skipped and counted; the ±1 value at an
//! output site is `C * (taps in frame) - 2 * popcount`, which is exactly a
//! zero-padded ±1 cross-correlation.

mod tensor;

use rayon::prelude::*;

pub(crate) use tensor::plane_bit;
pub use tensor::{
    ActLayout, BitFilterKKOC, BitTensorHWNC, ConvGeometry, IntTensorPQNO, RealTensor, CHANNEL_ALIGN, ROW_ALIGN,
};

use crate::bitcore::popcnt::{with_popcnt, xor_popcount};
use crate::bitcore::{sign_bit, WORD_BITS};
use crate::error::{invalid, unsupported, Result};
use crate::nn::{BnParams, ThresholdSpec};

const CHUNK_WORDS: usize = CHANNEL_ALIGN / WORD_BITS;
const TILE_WORDS: usize = ROW_ALIGN * CHUNK_WORDS;

/// Pooling window and stride (square).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn new(window: usize, stride: usize) -> Self {
        Self { window, stride }
    }

    /// Output extent along one axis, rejecting uneven coverage.
    pub fn output_len(&self, len: usize) -> Result<usize> {
        if self.window == 0 || self.stride == 0 {
            return Err(invalid("pool window and stride must be positive"));
        }
        if len < self.window || (len - self.window) % self.stride != 0 {
            return Err(unsupported(format!(
                "pool window {} / stride {} does not cover extent {len} evenly",
                self.window, self.stride
            )));
        }
        Ok((len - self.window) / self.stride + 1)
    }
}

/// What happens to each real/integer output value before it is packed.
#[derive(Clone, Copy, Debug)]
pub enum Activation<'a> {
    /// Folded per-output-channel comparisons.
    Threshold(&'a [ThresholdSpec]),
    /// Explicit batch norm, optional residual add, then sign.
    BatchNorm { params: &'a [BnParams], residual_in: Option<&'a RealTensor>, emit_residual: bool },
}

/// Packed output of a fused layer, plus the pre-sign real tensor if asked.
#[derive(Clone, Debug)]
pub struct FusedOutput {
    pub bits: BitTensorHWNC,
    pub residual: Option<RealTensor>,
}

#[inline(always)]
fn in_frame(p: usize, stride: usize, r: usize, pad: usize, len: usize) -> Option<usize> {
    let y = (p * stride + r).checked_sub(pad)?;
    (y < len).then_some(y)
}

fn check_pair(input: &BitTensorHWNC, filter: &BitFilterKKOC, geom: &ConvGeometry) -> Result<(usize, usize)> {
    if input.c() != filter.c() {
        return Err(invalid(format!("input has {} channels, filter expects {}", input.c(), filter.c())));
    }
    if input.layout() != filter.layout() {
        return Err(invalid("input and filter use different bit layouts"));
    }
    geom.output_dims(input.h(), input.w(), filter.kh(), filter.kw())
}

/// Popcounts for one output site into `acc` (`N × O`, row per sample);
/// returns the number of in-frame filter taps.
#[inline(always)]
fn site_popcounts_body(
    input: &BitTensorHWNC,
    filter: &BitFilterKKOC,
    geom: &ConvGeometry,
    p: usize,
    q: usize,
    acc: &mut [u32],
) -> usize {
    let (n, o) = (input.n(), filter.o());
    acc.fill(0);
    let mut taps = 0;
    match input.layout() {
        ActLayout::Plain => {
            let cw = input.c_pad() / WORD_BITS;
            for r in 0..filter.kh() {
                let Some(y) = in_frame(p, geom.stride_h, r, geom.pad_h, input.h()) else {
                    continue;
                };
                for s in 0..filter.kw() {
                    let Some(x) = in_frame(q, geom.stride_w, s, geom.pad_w, input.w()) else {
                        continue;
                    };
                    taps += 1;
                    let plane = input.site_words(y, x);
                    let fplane = filter.tap_words(r, s);
                    for (row, a) in acc.chunks_mut(o.max(1)).zip(plane.chunks(cw)).take(n) {
                        for (v, f) in row.iter_mut().zip(fplane.chunks(cw)) {
                            *v += xor_popcount(a, f);
                        }
                    }
                }
            }
        }
        ActLayout::Fsb => {
            // 8 × 8 accumulator tiles; each (n-block, o-block) walks all taps
            // and channel tiles, reading one contiguous tile row per step.
            let chunks = input.c_pad() / CHANNEL_ALIGN;
            let block_words = chunks * TILE_WORDS;
            let frame: Vec<(usize, usize, usize, usize)> = (0..filter.kh())
                .filter_map(|r| in_frame(p, geom.stride_h, r, geom.pad_h, input.h()).map(|y| (r, y)))
                .flat_map(|(r, y)| {
                    (0..filter.kw())
                        .filter_map(move |s| in_frame(q, geom.stride_w, s, geom.pad_w, input.w()).map(|x| (r, y, s, x)))
                })
                .collect();
            taps = frame.len();
            for nb in 0..input.n_pad() / ROW_ALIGN {
                for ob in 0..filter.o_pad() / ROW_ALIGN {
                    let mut tile = [[0u32; ROW_ALIGN]; ROW_ALIGN];
                    for &(r, y, s, x) in &frame {
                        let ablock = &input.site_words(y, x)[nb * block_words..][..block_words];
                        let bblock = &filter.tap_words(r, s)[ob * block_words..][..block_words];
                        for (at, bt) in ablock.chunks_exact(TILE_WORDS).zip(bblock.chunks_exact(TILE_WORDS)) {
                            for (ti, arow) in tile.iter_mut().zip(at.chunks_exact(CHUNK_WORDS)) {
                                for (v, brow) in ti.iter_mut().zip(bt.chunks_exact(CHUNK_WORDS)) {
                                    *v += ((arow[0] ^ brow[0]).count_ones()) + ((arow[1] ^ brow[1]).count_ones());
                                }
                            }
                        }
                    }
                    for (i, ti) in tile.iter().enumerate() {
                        let ni = nb * ROW_ALIGN + i;
                        if ni >= n {
                            break;
                        }
                        for (j, &v) in ti.iter().enumerate() {
                            let oj = ob * ROW_ALIGN + j;
                            if oj >= o {
                                break;
                            }
                            acc[ni * o + oj] = v;
                        }
                    }
                }
            }
        }
    }
    taps
}

with_popcnt!(fn site_popcounts(
    input: &BitTensorHWNC,
    filter: &BitFilterKKOC,
    geom: &ConvGeometry,
    p: usize,
    q: usize,
    acc: &mut [u32]
) -> usize => site_popcounts_body);

/// ±1 convolution values with zero-padding semantics.
pub fn bconv_pm1(input: &BitTensorHWNC, filter: &BitFilterKKOC, geom: &ConvGeometry) -> Result<IntTensorPQNO> {
    let (p, q) = check_pair(input, filter, geom)?;
    let (n, o, c) = (input.n(), filter.o(), filter.c() as i32);
    let mut out = IntTensorPQNO::zeros(p, q, n, o);
    if n * o == 0 {
        return Ok(out);
    }
    out.data.par_chunks_mut(n * o).enumerate().for_each_init(
        || vec![0u32; n * o],
        |acc, (site, dst)| {
            let taps = site_popcounts(input, filter, geom, site / q, site % q, acc) as i32;
            for (d, &v) in dst.iter_mut().zip(acc.iter()) {
                *d = c * taps - 2 * v as i32;
            }
        },
    );
    Ok(out)
}

impl IntTensorPQNO {
    /// Widens to a real tensor with the same dims.
    pub fn to_real(&self) -> RealTensor {
        RealTensor { h: self.p, w: self.q, n: self.n, c: self.o, data: self.data.iter().map(|&v| v as f64).collect() }
    }
}

fn check_activation(act: &Activation, p: usize, q: usize, n: usize, o: usize) -> Result<()> {
    match act {
        Activation::Threshold(t) if t.len() != o => {
            Err(invalid(format!("{} thresholds for {o} output channels", t.len())))
        }
        Activation::BatchNorm { params, .. } if params.len() != o => {
            Err(invalid(format!("{} batch-norm channels for {o} output channels", params.len())))
        }
        Activation::BatchNorm { residual_in: Some(r), .. } if r.dims() != (p, q, n, o) => {
            Err(invalid(format!("residual of shape {:?} injected into a {p}x{q}x{n}x{o} output", r.dims())))
        }
        _ => Ok(()),
    }
}

/// Binarizes one site's `N × O` values into its output plane.
#[allow(clippy::too_many_arguments)]
fn pack_site(
    vals: &[f64],
    act: &Activation,
    site: usize,
    n: usize,
    o: usize,
    layout: ActLayout,
    c_pad: usize,
    plane: &mut [u64],
    mut res_out: Option<&mut [f64]>,
) {
    let res_in = match act {
        Activation::BatchNorm { residual_in: Some(r), .. } => Some(&r.data[site * n * o..(site + 1) * n * o]),
        _ => None,
    };
    for ni in 0..n {
        for oi in 0..o {
            let i = ni * o + oi;
            let bit = match act {
                Activation::Threshold(t) => t[oi].test(vals[i]),
                Activation::BatchNorm { params, .. } => {
                    let mut y = params[oi].apply(vals[i]);
                    if let Some(r) = res_in {
                        y += r[i];
                    }
                    if let Some(out) = res_out.as_deref_mut() {
                        out[i] = y;
                    }
                    sign_bit(y)
                }
            };
            if bit {
                let b = plane_bit(layout, ni, oi, c_pad);
                plane[b / WORD_BITS] |= 1 << (b % WORD_BITS);
            }
        }
    }
}

/// Runs `values` per output site and packs the result.
#[allow(clippy::too_many_arguments)]
fn fused_driver<S: Send>(
    p: usize,
    q: usize,
    n: usize,
    o: usize,
    layout: ActLayout,
    act: &Activation,
    pool: Option<PoolSpec>,
    init: impl Fn() -> S + Send + Sync,
    values: impl Fn(&mut S, usize, &mut [f64]) + Send + Sync,
) -> Result<FusedOutput> {
    check_activation(act, p, q, n, o)?;
    if let Some(pool) = pool {
        pool.output_len(p)?;
        pool.output_len(q)?;
    }
    let emit = matches!(act, Activation::BatchNorm { emit_residual: true, .. });
    let mut bits = BitTensorHWNC::zeros(p, q, n, o, layout);
    let mut residual = emit.then(|| RealTensor::zeros(p, q, n, o));
    let pw = bits.plane_words();
    let c_pad = bits.c_pad();
    if n * o > 0 {
        let init = || (init(), vec![0.0f64; n * o]);
        let words = bits.words_mut();
        match residual.as_mut() {
            Some(res) => words.par_chunks_mut(pw).zip(res.data.par_chunks_mut(n * o)).enumerate().for_each_init(
                init,
                |(s, vals), (site, (plane, r))| {
                    values(s, site, vals);
                    pack_site(vals, act, site, n, o, layout, c_pad, plane, Some(r));
                },
            ),
            None => words.par_chunks_mut(pw).enumerate().for_each_init(init, |(s, vals), (site, plane)| {
                values(s, site, vals);
                pack_site(vals, act, site, n, o, layout, c_pad, plane, None);
            }),
        }
    }
    let bits = match pool {
        Some(pool) => or_pool(&bits, pool)?,
        None => bits,
    };
    Ok(FusedOutput { bits, residual })
}

/// Convolution, activation and optional OR-pool in one pass; the integer
/// output only exists one site at a time.
pub fn bconv_fused(
    input: &BitTensorHWNC,
    filter: &BitFilterKKOC,
    geom: &ConvGeometry,
    act: &Activation,
    pool: Option<PoolSpec>,
) -> Result<FusedOutput> {
    let (p, q) = check_pair(input, filter, geom)?;
    let (n, o, c) = (input.n(), filter.o(), filter.c() as i32);
    fused_driver(
        p,
        q,
        n,
        o,
        input.layout(),
        act,
        pool,
        || vec![0u32; n * o],
        |acc, site, vals| {
            let taps = site_popcounts(input, filter, geom, site / q, site % q, acc) as i32;
            for (v, &a) in vals.iter_mut().zip(acc.iter()) {
                *v = (c * taps - 2 * a as i32) as f64;
            }
        },
    )
}

fn check_first(input: &RealTensor, filter: &BitFilterKKOC, geom: &ConvGeometry) -> Result<(usize, usize)> {
    if input.c != filter.c() {
        return Err(invalid(format!("input has {} channels, filter expects {}", input.c, filter.c())));
    }
    if let Some(v) = input.data.iter().find(|v| !v.is_finite()) {
        return Err(invalid(format!("non-finite input value {v}")));
    }
    geom.output_dims(input.h, input.w, filter.kh(), filter.kw())
}

/// Filter bits unpacked to `[KH][KW][O][C]` booleans for the real kernel.
fn unpack_filter(filter: &BitFilterKKOC) -> Vec<bool> {
    let mut out = Vec::with_capacity(filter.kh() * filter.kw() * filter.o() * filter.c());
    for r in 0..filter.kh() {
        for s in 0..filter.kw() {
            for o in 0..filter.o() {
                for c in 0..filter.c() {
                    out.push(filter.get(r, s, o, c));
                }
            }
        }
    }
    out
}

/// Real sums for one site: each in-frame term is added or subtracted in
/// `(r, s, c)` order.
#[allow(clippy::too_many_arguments)]
fn first_site(
    input: &RealTensor,
    w: &[bool],
    kh: usize,
    kw: usize,
    o: usize,
    geom: &ConvGeometry,
    site_pq: (usize, usize),
    vals: &mut [f64],
) {
    let (p, q) = site_pq;
    let (n, c) = (input.n, input.c);
    vals.fill(0.0);
    for r in 0..kh {
        let Some(y) = in_frame(p, geom.stride_h, r, geom.pad_h, input.h) else {
            continue;
        };
        for s in 0..kw {
            let Some(x) = in_frame(q, geom.stride_w, s, geom.pad_w, input.w) else {
                continue;
            };
            let base = input.index(y, x, 0, 0);
            for ni in 0..n {
                let xs = &input.data[base + ni * c..base + (ni + 1) * c];
                for oi in 0..o {
                    let ws = &w[((r * kw + s) * o + oi) * c..][..c];
                    let mut acc = vals[ni * o + oi];
                    for (&bit, &xv) in ws.iter().zip(xs) {
                        if bit {
                            acc += xv;
                        } else {
                            acc -= xv;
                        }
                    }
                    vals[ni * o + oi] = acc;
                }
            }
        }
    }
}

/// Pre-activation output of the binary-weight first layer.
pub fn first_layer_real(input: &RealTensor, filter: &BitFilterKKOC, geom: &ConvGeometry) -> Result<RealTensor> {
    let (p, q) = check_first(input, filter, geom)?;
    let (n, o) = (input.n, filter.o());
    let w = unpack_filter(filter);
    let mut out = RealTensor::zeros(p, q, n, o);
    if n * o > 0 {
        out.data.par_chunks_mut(n * o).enumerate().for_each(|(site, vals)| {
            first_site(input, &w, filter.kh(), filter.kw(), o, geom, (site / q, site % q), vals)
        });
    }
    Ok(out)
}

/// Binary-weight first layer with an arbitrary activation and pool.
pub fn first_layer_fused(
    input: &RealTensor,
    filter: &BitFilterKKOC,
    geom: &ConvGeometry,
    act: &Activation,
    pool: Option<PoolSpec>,
    layout: ActLayout,
) -> Result<FusedOutput> {
    let (p, q) = check_first(input, filter, geom)?;
    let (n, o) = (input.n, filter.o());
    let w = unpack_filter(filter);
    fused_driver(
        p,
        q,
        n,
        o,
        layout,
        act,
        pool,
        || (),
        |_, site, vals| first_site(input, &w, filter.kh(), filter.kw(), o, geom, (site / q, site % q), vals),
    )
}

/// Binary-weight first layer: real input, ±1 weights, batch norm, sign.
pub fn first_layer_bwn(
    input: &RealTensor,
    filter: &BitFilterKKOC,
    geom: &ConvGeometry,
    bn: &[BnParams],
    layout: ActLayout,
) -> Result<BitTensorHWNC> {
    let act = Activation::BatchNorm { params: bn, residual_in: None, emit_residual: false };
    Ok(first_layer_fused(input, filter, geom, &act, None, layout)?.bits)
}

/// Max-pool on ±1 values, i.e. OR over the window of bit encodings.
pub fn or_pool(bits: &BitTensorHWNC, pool: PoolSpec) -> Result<BitTensorHWNC> {
    let oh = pool.output_len(bits.h())?;
    let ow = pool.output_len(bits.w())?;
    let mut out = BitTensorHWNC::zeros(oh, ow, bits.n(), bits.c(), bits.layout());
    let pw = out.plane_words();
    if pw == 0 {
        return Ok(out);
    }
    out.words_mut().par_chunks_mut(pw).enumerate().for_each(|(site, dst)| {
        let (y0, x0) = ((site / ow) * pool.stride, (site % ow) * pool.stride);
        for y in y0..y0 + pool.window {
            for x in x0..x0 + pool.window {
                for (d, s) in dst.iter_mut().zip(bits.site_words(y, x)) {
                    *d |= s;
                }
            }
        }
    });
    Ok(out)
}
