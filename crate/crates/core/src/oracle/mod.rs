//! Unpacked floating-point reference implementations.
//!
//! Everything here works on `f64` arrays holding ±1 (or real) values and
//! never reads packed bits, so agreement with the bit kernels is an
//! independent check. ±1 sums are integers well inside the exact `f64`
//! range, so comparisons against the kernels use no tolerance. Sums over
//! real inputs add terms strictly in `(r, s, c)` order.

mod fixtures;

pub use fixtures::{emit_fixtures, BmmFixture, ConvFixture, FixtureSet, ModelFixture};

use crate::bconv::{IntTensorPQNO, RealTensor};
use crate::bmm::IntMatrix;
use crate::error::{invalid, Result};
use crate::nn::{Batch, FloatWeights, LayerKind, LayerSpec, ModelPlan};

/// Row-major real matrix, normally holding ±1 entries.
#[derive(Clone, Debug, PartialEq)]
pub struct PmMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl PmMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// `sign` of each real value: +1 for `x >= 0`, else -1.
    pub fn signs(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Self::new(rows, cols, values.iter().map(|&v| sign(v)).collect())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }
}

/// ±1 activations are real tensors whose entries are all ±1.
pub type PmTensor = RealTensor;

/// Real filter in `[KH][KW][O][C]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct PmFilter {
    pub kh: usize,
    pub kw: usize,
    pub o: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl PmFilter {
    pub fn new(kh: usize, kw: usize, o: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != kh * kw * o * c {
            return Err(invalid(format!("{} values for a {kh}x{kw}x{o}x{c} filter", data.len())));
        }
        Ok(Self { kh, kw, o, c, data })
    }

    #[inline]
    fn tap(&self, r: usize, s: usize, o: usize) -> &[f64] {
        let st = ((r * self.kw + s) * self.o + o) * self.c;
        &self.data[st..st + self.c]
    }
}

#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Clip to `[-1, 1]`.
#[inline]
pub fn hard_tanh(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Eight-lane dot product. Only for integer-valued terms, where the
/// summation order cannot change the result.
#[inline]
fn dot_exact(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut s = lanes.iter().sum::<f64>();
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// Left-to-right accumulation onto `acc`.
#[inline]
fn dot_sequential(mut acc: f64, w: &[f64], x: &[f64]) -> f64 {
    for (a, b) in w.iter().zip(x) {
        acc += a * b;
    }
    acc
}

/// Triple-loop ±1 matrix product `a (m × n) · b (n × k)`.
pub fn ref_bmm(a: &PmMatrix, b: &PmMatrix) -> Result<IntMatrix> {
    if a.cols != b.rows {
        return Err(invalid(format!("inner dims {} and {} differ", a.cols, b.rows)));
    }
    let mut out = IntMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for k in 0..a.cols {
                s += a.get(i, k) * b.get(k, j);
            }
            out.data[i * b.cols + j] = s as i32;
        }
    }
    Ok(out)
}

/// Product with `b` given transposed (`k × n`), using the fast exact dot.
pub fn ref_bmm_bt(a: &PmMatrix, bt: &PmMatrix) -> Result<IntMatrix> {
    if a.cols != bt.cols {
        return Err(invalid(format!("inner dims {} and {} differ", a.cols, bt.cols)));
    }
    let mut out = IntMatrix::zeros(a.rows, bt.rows);
    for i in 0..a.rows {
        let ar = &a.data[i * a.cols..(i + 1) * a.cols];
        for j in 0..bt.rows {
            out.data[i * bt.rows + j] = dot_exact(ar, &bt.data[j * bt.cols..(j + 1) * bt.cols]) as i32;
        }
    }
    Ok(out)
}

/// One entry of a ±1 product over `n` terms; `a` and `b` return raw values
/// that are sign-binarized here.
pub fn ref_bmm_entry(n: usize, a: impl Fn(usize) -> f64, b: impl Fn(usize) -> f64) -> f64 {
    (0..n).map(|l| sign(a(l)) * sign(b(l))).sum()
}

/// Geometry of a single probed convolution output.
#[derive(Clone, Copy, Debug)]
pub struct ConvWindow {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Output `(p, q)` of a zero-padded ±1 convolution for one image and one
/// filter, given as raw-value accessors `x(y, x, c)` and `wt(r, s, c)`.
pub fn ref_conv_entry(
    g: ConvWindow,
    p: usize,
    q: usize,
    x: impl Fn(usize, usize, usize) -> f64,
    wt: impl Fn(usize, usize, usize) -> f64,
) -> f64 {
    let mut s = 0.0;
    for r in 0..g.kh {
        for t in 0..g.kw {
            let (y, xx) = ((p * g.stride + r) as isize - g.pad as isize, (q * g.stride + t) as isize - g.pad as isize);
            for c in 0..g.c {
                let v = if y < 0 || xx < 0 || y as usize >= g.h || xx as usize >= g.w {
                    0.0
                } else {
                    sign(x(y as usize, xx as usize, c))
                };
                s += v * sign(wt(r, t, c));
            }
        }
    }
    s
}

/// Copy of `x` surrounded by `pad` rows and columns of literal zeros.
fn zero_pad(x: &RealTensor, pad_h: usize, pad_w: usize) -> RealTensor {
    let mut out = RealTensor::zeros(x.h + 2 * pad_h, x.w + 2 * pad_w, x.n, x.c);
    for y in 0..x.h {
        for xx in 0..x.w {
            let src = x.index(y, xx, 0, 0);
            let dst = out.index(y + pad_h, xx + pad_w, 0, 0);
            out.data[dst..dst + x.n * x.c].copy_from_slice(&x.data[src..src + x.n * x.c]);
        }
    }
    out
}

fn conv_dims(x: &RealTensor, f: &PmFilter, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if x.c != f.c {
        return Err(invalid(format!("input has {} channels, filter {}", x.c, f.c)));
    }
    if stride == 0 || x.h + 2 * pad < f.kh || x.w + 2 * pad < f.kw {
        return Err(invalid("degenerate convolution geometry"));
    }
    Ok(((x.h + 2 * pad - f.kh) / stride + 1, (x.w + 2 * pad - f.kw) / stride + 1))
}

/// Cross-correlation over an explicitly zero-padded input. With
/// `sequential`, each output is accumulated term by term in `(r, s, c)`
/// order; otherwise an exact integer dot is used per tap.
pub fn conv_real(x: &RealTensor, f: &PmFilter, stride: usize, pad: usize, sequential: bool) -> Result<RealTensor> {
    let (p, q) = conv_dims(x, f, stride, pad)?;
    let xp = zero_pad(x, pad, pad);
    let mut out = RealTensor::zeros(p, q, x.n, f.o);
    let mut acc = vec![0.0f64; x.n * f.o];
    for pp in 0..p {
        for qq in 0..q {
            acc.fill(0.0);
            for r in 0..f.kh {
                for s in 0..f.kw {
                    let base = xp.index(pp * stride + r, qq * stride + s, 0, 0);
                    for n in 0..x.n {
                        let xs = &xp.data[base + n * x.c..base + (n + 1) * x.c];
                        for o in 0..f.o {
                            let a = &mut acc[n * f.o + o];
                            if sequential {
                                *a = dot_sequential(*a, f.tap(r, s, o), xs);
                            } else {
                                *a += dot_exact(f.tap(r, s, o), xs);
                            }
                        }
                    }
                }
            }
            let dst = out.index(pp, qq, 0, 0);
            out.data[dst..dst + acc.len()].copy_from_slice(&acc);
        }
    }
    Ok(out)
}

/// ±1 convolution where padded positions contribute exactly 0.
pub fn ref_conv_zero_pad(input: &PmTensor, filter: &PmFilter, stride: usize, pad: usize) -> Result<IntTensorPQNO> {
    let v = conv_real(input, filter, stride, pad, false)?;
    Ok(IntTensorPQNO { p: v.h, q: v.w, n: v.n, o: v.c, data: v.data.iter().map(|&x| x as i32).collect() })
}

/// Max-pool over ±1 values.
pub fn ref_max_pool(x: &PmTensor, window: usize, stride: usize) -> Result<PmTensor> {
    if window == 0 || stride == 0 || x.h < window || x.w < window {
        return Err(invalid("bad pool geometry"));
    }
    let (p, q) = ((x.h - window) / stride + 1, (x.w - window) / stride + 1);
    let mut out = RealTensor::zeros(p, q, x.n, x.c);
    for y in 0..p {
        for xx in 0..q {
            for n in 0..x.n {
                for c in 0..x.c {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..window {
                        for dx in 0..window {
                            m = m.max(x.get(y * stride + dy, xx * stride + dx, n, c));
                        }
                    }
                    out.set(y, xx, n, c, m);
                }
            }
        }
    }
    Ok(out)
}

/// Residual mapping: identity, or 2×2 means when the dims halve, with
/// zero-filled extra channels.
fn ref_shortcut(src: &RealTensor, h: usize, w: usize, c: usize) -> RealTensor {
    let mut out = RealTensor::zeros(h, w, src.n, c);
    let halve = src.h != h;
    for y in 0..h {
        for x in 0..w {
            for n in 0..src.n {
                for k in 0..src.c {
                    let v = if halve {
                        (src.get(2 * y, 2 * x, n, k)
                            + src.get(2 * y, 2 * x + 1, n, k)
                            + src.get(2 * y + 1, 2 * x, n, k)
                            + src.get(2 * y + 1, 2 * x + 1, n, k))
                            / 4.0
                    } else {
                        src.get(y, x, n, k)
                    };
                    out.set(y, x, n, k, v);
                }
            }
        }
    }
    out
}

/// `((x - mean) / sqrt(var + eps)) * gamma + beta`.
#[inline]
pub fn ref_bn(x: f64, gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> f64 {
    ((x - mean) / (var + eps).sqrt()) * gamma + beta
}

/// Result of a reference forward pass.
#[derive(Clone, Debug)]
pub struct OracleOutput {
    /// `n × classes`.
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    /// ±1 output of every layer except the last, indexed like the plan.
    pub activations: Vec<PmTensor>,
}

fn first_max(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Flattens per image in `(h, w, c)` order into rows.
fn flatten(x: &RealTensor) -> Vec<Vec<f64>> {
    (0..x.n)
        .map(|n| {
            let mut row = Vec::with_capacity(x.h * x.w * x.c);
            for y in 0..x.h {
                for xx in 0..x.w {
                    for c in 0..x.c {
                        row.push(x.get(y, xx, n, c));
                    }
                }
            }
            row
        })
        .collect()
}

/// Full forward pass from float weights: sign-binarized weights, real batch
/// norm, hard tanh, sign, max-pool and residual adds on unpacked values.
pub fn ref_pipeline(plan: &ModelPlan, weights: &FloatWeights, batch: &Batch) -> Result<OracleOutput> {
    let specs: Vec<(usize, &LayerSpec)> = plan.weighted_layers().collect();
    if specs.len() != weights.layers.len() {
        return Err(invalid("weight layer count does not match the model"));
    }
    let (h, w, c) = (plan.input.h, plan.input.w, plan.input.c);
    if (batch.h, batch.w, batch.c) != (h, w, c) {
        return Err(invalid("batch images do not match the model input"));
    }
    let n = batch.n;
    // own NHWC -> HWNC reorder
    let mut x = RealTensor::zeros(h, w, n, c);
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for k in 0..c {
                    x.set(y, xx, b, k, batch.data[((b * h + y) * w + xx) * c + k] as f64);
                }
            }
        }
    }
    let eps = plan.epsilon;
    let mut wl = weights.layers.iter();
    let mut pre: Vec<Option<RealTensor>> = vec![None; plan.layers.len()];
    let mut acts: Vec<PmTensor> = Vec::new();
    let mut cur = x;
    let mut scores = Vec::new();
    for (i, l) in plan.layers.iter().enumerate() {
        if l.kind == LayerKind::OrPool {
            cur = ref_max_pool(&cur, l.kernel_h, l.stride)?;
            acts.push(cur.clone());
            continue;
        }
        let fl = wl.next().expect("counts checked");
        let signs: Vec<f64> = fl.weights.iter().map(|&v| sign(v as f64)).collect();
        let o = l.out_channels;
        let first = l.kind == LayerKind::FirstConvBwn;
        // pre-activation values as an (h, w, n, o) tensor
        let v = if l.kind.is_conv() && !(first && l.source.ends_with("FC")) {
            let f = PmFilter::new(l.kernel_h, l.kernel_w, o, l.input.c, signs)?;
            conv_real(&cur, &f, l.stride, l.pad, first)?
        } else {
            let rows = flatten(&cur);
            let fan = l.fan_in();
            let mut out = RealTensor::zeros(1, 1, n, o);
            for (b, row) in rows.iter().enumerate() {
                for k in 0..o {
                    let wk = &signs[k * fan..(k + 1) * fan];
                    let s = if first { dot_sequential(0.0, wk, row) } else { dot_exact(wk, row) };
                    out.set(0, 0, b, k, s);
                }
            }
            out
        };
        let mut y = v;
        for (idx, val) in y.data.iter_mut().enumerate() {
            let p = &fl.bn[idx % o];
            *val = ref_bn(*val, p.gamma, p.beta, p.mean, p.var, eps);
        }
        if let Some(from) = l.residual_from {
            let src = pre[from].as_ref().expect("tap precedes its consumer");
            let r = ref_shortcut(src, y.h, y.w, y.c);
            for (a, b) in y.data.iter_mut().zip(&r.data) {
                *a += b;
            }
        }
        if l.kind == LayerKind::LastFc {
            scores = y.data.clone();
            break;
        }
        if l.residual_tap {
            pre[i] = Some(y.clone());
        }
        for val in &mut y.data {
            *val = sign(hard_tanh(*val));
        }
        cur = y;
        acts.push(cur.clone());
    }
    let k = plan.classes;
    let labels = scores.chunks(k).map(first_max).collect();
    Ok(OracleOutput { scores, labels, activations: acts })
}
