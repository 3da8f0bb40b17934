//! Benchmark harness.
//!
//! Every shape is checked against the oracle on the operands about to be
//! timed before any timing starts. General suites time operand
//! binarization plus the kernel with integer output; `-bin` suites take
//! packed operands and time the kernel with binarized output. The model
//! suite doubles the batch size and can record per-layer latency.
//!
//! CSV layout: a `# btnn bench ...` header line, the column row
//! `suite,variant,layout,shape,reps,median_ns,min_ns,mean_ns,throughput,unit,check`,
//! one row per case, then optional `# breakdown` and `# layout comparison`
//! sections, each with its own column row. Only timing-derived columns
//! change between runs with the same seed.

use std::fmt::{self, Write as _};
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bconv::{bconv_fused, bconv_pm1, ActLayout, Activation, BitFilterKKOC, BitTensorHWNC, ConvGeometry};
use crate::bitcore::{sign_bit, BitMatrix, Major};
use crate::bmm::{bmm_pm1, bmm_pm1_bin, Variant};
use crate::error::{invalid, Error, Result};
use crate::nn::{
    convert_weights, fsb_cols, fsb_rows, preset, preset_with_input, Batch, Engine, FloatWeights, RunOptions,
    ThresholdSpec,
};
use crate::oracle::{ref_bmm_entry, ref_conv_entry, ref_pipeline, ConvWindow};

/// Entries probed per shape by the pre-timing check.
const PROBES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Bmm,
    BmmBin,
    Bconv,
    BconvBin,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Bmm, Suite::BmmBin, Suite::Bconv, Suite::BconvBin, Suite::Model];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Bmm => "bmm",
            Suite::BmmBin => "bmm-bin",
            Suite::Bconv => "bconv",
            Suite::BconvBin => "bconv-bin",
            Suite::Model => "model",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| invalid(format!("unknown suite '{s}'")))
    }
}

/// Powers of two from `lo` to `hi` inclusive.
pub fn pow2_range(lo: usize, hi: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut x = lo.max(1).next_power_of_two();
    while x <= hi {
        v.push(x);
        x *= 2;
    }
    v
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub suite: Suite,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    pub threads: usize,
    /// bmm suites.
    pub variants: Vec<Variant>,
    /// bconv and model suites.
    pub layouts: Vec<ActLayout>,
    /// bmm: square size n; bconv: C = O.
    pub sizes: Vec<usize>,
    /// bconv batch.
    pub batch: usize,
    /// bconv input height and width.
    pub input: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Preset name for the model suite.
    pub model: String,
    /// Overrides the preset's input height and width.
    pub model_input: Option<usize>,
    /// Model suite batch sizes.
    pub batches: Vec<usize>,
    pub breakdown: bool,
}

impl BenchConfig {
    /// Defaults: 10 repetitions after 3 warm-ups, bmm sizes 128 to 4096,
    /// bconv C = O from 128 to 2048 on 16 images of 64×64 with 3×3 filters,
    /// model batches 8 to 64.
    pub fn new(suite: Suite) -> Self {
        let sizes = match suite {
            Suite::Bmm | Suite::BmmBin => pow2_range(128, 4096),
            Suite::Bconv | Suite::BconvBin => pow2_range(128, 2048),
            Suite::Model => Vec::new(),
        };
        Self {
            suite,
            reps: 10,
            warmup: 3,
            seed: 1,
            threads: 1,
            variants: Variant::ALL.to_vec(),
            layouts: vec![ActLayout::Plain, ActLayout::Fsb],
            sizes,
            batch: 16,
            input: 64,
            kernel: 3,
            stride: 1,
            model: "resnet14".into(),
            model_input: None,
            batches: pow2_range(8, 64),
            breakdown: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub suite: Suite,
    pub variant: String,
    pub layout: ActLayout,
    pub shape: String,
    pub reps: usize,
    pub median_ns: u128,
    pub min_ns: u128,
    pub mean_ns: u128,
    pub throughput: f64,
    pub unit: &'static str,
    pub check: &'static str,
}

/// Median latency of one stage for one model batch size.
#[derive(Clone, Debug, PartialEq)]
pub struct BreakdownRow {
    pub layout: ActLayout,
    pub batch: usize,
    pub layer: String,
    pub nanos: u128,
    pub percent: f64,
}

/// Plain against FSB timing for one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutComparison {
    pub suite: Suite,
    pub variant: String,
    pub shape: String,
    pub plain_ns: u128,
    pub fsb_ns: u128,
}

impl LayoutComparison {
    /// Plain median over FSB median.
    pub fn fsb_speedup(&self) -> f64 {
        self.plain_ns as f64 / self.fsb_ns.max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub suite: Suite,
    pub seed: u64,
    pub threads: usize,
    pub reps: usize,
    pub warmup: usize,
    pub rows: Vec<BenchRow>,
    pub breakdown: Vec<BreakdownRow>,
}

pub const CSV_COLUMNS: &str = "suite,variant,layout,shape,reps,median_ns,min_ns,mean_ns,throughput,unit,check";

impl BenchReport {
    /// Pairs rows that differ only in activation layout.
    pub fn layout_comparison(&self) -> Vec<LayoutComparison> {
        let mut out = Vec::new();
        for p in self.rows.iter().filter(|r| r.layout == ActLayout::Plain) {
            let twin = self.rows.iter().find(|r| {
                r.layout == ActLayout::Fsb && r.suite == p.suite && r.variant == p.variant && r.shape == p.shape
            });
            if let Some(f) = twin {
                out.push(LayoutComparison {
                    suite: p.suite,
                    variant: p.variant.clone(),
                    shape: p.shape.clone(),
                    plain_ns: p.median_ns,
                    fsb_ns: f.median_ns,
                });
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# btnn bench suite={} seed={} threads={} reps={} warmup={}",
            self.suite, self.seed, self.threads, self.reps, self.warmup
        );
        let _ = writeln!(s, "{CSV_COLUMNS}");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{:.4},{},{}",
                r.suite,
                r.variant,
                r.layout,
                r.shape,
                r.reps,
                r.median_ns,
                r.min_ns,
                r.mean_ns,
                r.throughput,
                r.unit,
                r.check
            );
        }
        if !self.breakdown.is_empty() {
            let _ = writeln!(s, "# breakdown");
            let _ = writeln!(s, "layout,batch,layer,latency_ns,percent");
            for b in &self.breakdown {
                let _ = writeln!(s, "{},{},{},{},{:.3}", b.layout, b.batch, b.layer, b.nanos, b.percent);
            }
        }
        let cmp = self.layout_comparison();
        if !cmp.is_empty() {
            let _ = writeln!(s, "# layout comparison");
            let _ = writeln!(s, "suite,variant,shape,plain_median_ns,fsb_median_ns,fsb_speedup");
            for c in &cmp {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{:.3}",
                    c.suite,
                    c.variant,
                    c.shape,
                    c.plain_ns,
                    c.fsb_ns,
                    c.fsb_speedup()
                );
            }
        }
        s
    }
}

struct Stats {
    median: u128,
    min: u128,
    mean: u128,
}

fn stats(mut t: Vec<u128>) -> Stats {
    t.sort_unstable();
    let n = t.len();
    let median = if n % 2 == 1 { t[n / 2] } else { (t[n / 2 - 1] + t[n / 2]) / 2 };
    Stats { median, min: t[0], mean: t.iter().sum::<u128>() / n as u128 }
}

fn time_reps(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<u128>> {
    for _ in 0..warmup {
        f()?;
    }
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f()?;
            Ok(t.elapsed().as_nanos())
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

fn probes(rng: &mut ChaCha8Rng, total: usize) -> Vec<usize> {
    if total <= PROBES {
        (0..total).collect()
    } else {
        (0..PROBES).map(|_| rng.gen_range(0..total)).collect()
    }
}

fn fail(what: String) -> Error {
    Error::Check(what)
}

/// Runs one suite inside a pool of `cfg.threads` workers.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps == 0 {
        return Err(invalid("at least one repetition is required"));
    }
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(cfg.threads.max(1)).build().map_err(|e| invalid(e.to_string()))?;
    pool.install(|| {
        let mut report = BenchReport {
            suite: cfg.suite,
            seed: cfg.seed,
            threads: cfg.threads.max(1),
            reps: cfg.reps,
            warmup: cfg.warmup,
            rows: Vec::new(),
            breakdown: Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        match cfg.suite {
            Suite::Bmm | Suite::BmmBin => bench_bmm(cfg, &mut rng, &mut report)?,
            Suite::Bconv | Suite::BconvBin => bench_bconv(cfg, &mut rng, &mut report)?,
            Suite::Model => bench_model(cfg, &mut rng, &mut report)?,
        }
        Ok(report)
    })
}

fn operands(a: BitMatrix, b: BitMatrix, v: Variant) -> (BitMatrix, BitMatrix) {
    match v {
        Variant::Fsb => (fsb_rows(&a), fsb_cols(&b)),
        _ => (a, b),
    }
}

fn bench_bmm(cfg: &BenchConfig, rng: &mut ChaCha8Rng, report: &mut BenchReport) -> Result<()> {
    let bin = cfg.suite == Suite::BmmBin;
    for &n in &cfg.sizes {
        // a is n×n row-major; b is n×n row-major (b[l][j] at l·n + j)
        let (af, bf) = (uniform(rng, n * n), uniform(rng, n * n));
        let thr: Vec<ThresholdSpec> = (0..n).map(|_| ThresholdSpec::geq(rng.gen_range(-16i32..16) as f64)).collect();
        let picks = probes(rng, n * n);
        for &v in &cfg.variants {
            let pack = || -> Result<(BitMatrix, BitMatrix)> {
                let a = BitMatrix::from_signs(n, n, &af, Major::Row)?;
                let b = BitMatrix::from_signs(n, n, &bf, Major::Col)?;
                Ok(operands(a, b, v))
            };
            let (a, b) = pack()?;
            // check
            let expect = |idx: usize| {
                let (i, j) = (idx / n, idx % n);
                ref_bmm_entry(n, |l| af[i * n + l] as f64, |l| bf[l * n + j] as f64)
            };
            if bin {
                let out = bmm_pm1_bin(&a, &b, n, &thr, v)?;
                for &idx in &picks {
                    let (i, j) = (idx / n, idx % n);
                    if out.get(i, j) != thr[j].test(expect(idx)) {
                        return Err(fail(format!("{} {v} n={n} at ({i},{j})", cfg.suite)));
                    }
                }
            } else {
                let out = bmm_pm1(&a, &b, n, v)?;
                for &idx in &picks {
                    if out.data[idx] as f64 != expect(idx) {
                        return Err(fail(format!("{} {v} n={n} at {idx}", cfg.suite)));
                    }
                }
            }
            let times = if bin {
                time_reps(cfg.reps, cfg.warmup, || {
                    black_box(bmm_pm1_bin(&a, &b, n, &thr, v)?);
                    Ok(())
                })?
            } else {
                time_reps(cfg.reps, cfg.warmup, || {
                    let (a, b) = pack()?;
                    black_box(bmm_pm1(&a, &b, n, v)?);
                    Ok(())
                })?
            };
            let st = stats(times);
            let ops = 2.0 * (n as f64).powi(3);
            report.rows.push(BenchRow {
                suite: cfg.suite,
                variant: v.name().into(),
                layout: if v == Variant::Fsb { ActLayout::Fsb } else { ActLayout::Plain },
                shape: format!("{n}x{n}x{n}"),
                reps: cfg.reps,
                median_ns: st.median,
                min_ns: st.min,
                mean_ns: st.mean,
                throughput: ops / st.median.max(1) as f64,
                unit: "Gop/s",
                check: "ok",
            });
        }
    }
    Ok(())
}

fn bench_bconv(cfg: &BenchConfig, rng: &mut ChaCha8Rng, report: &mut BenchReport) -> Result<()> {
    let bin = cfg.suite == Suite::BconvBin;
    let (h, n, k) = (cfg.input, cfg.batch, cfg.kernel);
    let geom = ConvGeometry::new(cfg.stride, k / 2);
    for &c in &cfg.sizes {
        let o = c;
        let (p, q) = geom.output_dims(h, h, k, k)?;
        let win = ConvWindow { h, w: h, c, kh: k, kw: k, stride: cfg.stride, pad: k / 2 };
        let seed: u64 = rng.gen();
        // raw values are a pure function of the index so probes can re-derive them
        let xval = |y: usize, x: usize, b: usize, ch: usize| hash_unit(seed, (((y * h + x) * n + b) * c + ch) as u64);
        let wval =
            |r: usize, s: usize, oo: usize, ch: usize| hash_unit(!seed, (((r * k + s) * o + oo) * c + ch) as u64);
        let thr: Vec<ThresholdSpec> = (0..o).map(|_| ThresholdSpec::geq(rng.gen_range(-16i32..16) as f64)).collect();
        let picks = probes(rng, p * q * n * o);
        for &layout in &cfg.layouts {
            let filter = BitFilterKKOC::from_fn(k, k, o, c, layout, |r, s, oo, ch| sign_bit(wval(r, s, oo, ch)));
            let input = BitTensorHWNC::from_fn(h, h, n, c, layout, |y, x, b, ch| sign_bit(xval(y, x, b, ch)));
            let expect = |idx: usize| {
                let (pp, rest) = (idx / (q * n * o), idx % (q * n * o));
                let (qq, rest) = (rest / (n * o), rest % (n * o));
                let (b, oo) = (rest / o, rest % o);
                let v = ref_conv_entry(win, pp, qq, |y, x, ch| xval(y, x, b, ch), |r, s, ch| wval(r, s, oo, ch));
                (pp, qq, b, oo, v)
            };
            let act = Activation::Threshold(&thr);
            if bin {
                let out = bconv_fused(&input, &filter, &geom, &act, None)?.bits;
                for &idx in &picks {
                    let (pp, qq, b, oo, v) = expect(idx);
                    if out.get(pp, qq, b, oo) != thr[oo].test(v) {
                        return Err(fail(format!("{} {layout} C={c} at ({pp},{qq},{b},{oo})", cfg.suite)));
                    }
                }
            } else {
                let out = bconv_pm1(&input, &filter, &geom)?;
                for &idx in &picks {
                    let (pp, qq, b, oo, v) = expect(idx);
                    if out.get(pp, qq, b, oo) as f64 != v {
                        return Err(fail(format!("{} {layout} C={c} at ({pp},{qq},{b},{oo})", cfg.suite)));
                    }
                }
            }
            let times = if bin {
                time_reps(cfg.reps, cfg.warmup, || {
                    black_box(bconv_fused(&input, &filter, &geom, &act, None)?);
                    Ok(())
                })?
            } else {
                time_reps(cfg.reps, cfg.warmup, || {
                    let x = BitTensorHWNC::from_fn(h, h, n, c, layout, |y, x, b, ch| sign_bit(xval(y, x, b, ch)));
                    black_box(bconv_pm1(&x, &filter, &geom)?);
                    Ok(())
                })?
            };
            let st = stats(times);
            let ops = 2.0 * (p * q * n * o * k * k * c) as f64;
            report.rows.push(BenchRow {
                suite: cfg.suite,
                variant: "direct".into(),
                layout,
                shape: format!("N{n}-H{h}-W{h}-C{c}-O{o}-K{k}-S{}", cfg.stride),
                reps: cfg.reps,
                median_ns: st.median,
                min_ns: st.min,
                mean_ns: st.mean,
                throughput: ops / st.median.max(1) as f64,
                unit: "Gop/s",
                check: "ok",
            });
        }
    }
    Ok(())
}

/// Deterministic value in `[-1, 1)` for `(seed, i)` (splitmix64 finalizer).
fn hash_unit(seed: u64, i: u64) -> f64 {
    let mut z = seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

fn bench_model(cfg: &BenchConfig, rng: &mut ChaCha8Rng, report: &mut BenchReport) -> Result<()> {
    let spec = match cfg.model_input {
        Some(s) => preset_with_input(&cfg.model, s, s)?,
        None => preset(&cfg.model)?,
    };
    let plan = spec.plan()?;
    let fw = FloatWeights::random(&plan, rng.gen());
    let (h, w, c) = (plan.input.h, plan.input.w, plan.input.c);
    let probe = Batch::random(1, h, w, c, rng.gen());
    let expect = ref_pipeline(&plan, &fw, &probe)?;
    for &layout in &cfg.layouts {
        let store = convert_weights(&plan, &fw, layout)?;
        let engine = Engine::new(plan.clone(), &store, layout)?;
        let got = engine.run(&probe.to_tensor()?, RunOptions::default())?;
        if got.labels != expect.labels {
            return Err(fail(format!("model {} {layout}: labels differ from the reference", cfg.model)));
        }
        for &b in &cfg.batches {
            let x = Batch::random(b, h, w, c, rng.gen()).to_tensor()?;
            let opts = RunOptions { timings: cfg.breakdown, capture: false };
            let mut per_layer: Vec<Vec<u128>> = Vec::new();
            let mut names = Vec::new();
            let times = time_reps(cfg.reps, cfg.warmup, || {
                let out = engine.run(&x, opts)?;
                if cfg.breakdown {
                    per_layer.resize(out.timings.len(), Vec::new());
                    for (slot, t) in per_layer.iter_mut().zip(&out.timings) {
                        slot.push(t.nanos);
                    }
                    names = out.timings.iter().map(|t| t.name.clone()).collect();
                }
                black_box(out);
                Ok(())
            })?;
            let st = stats(times);
            report.rows.push(BenchRow {
                suite: Suite::Model,
                variant: cfg.model.clone(),
                layout,
                shape: format!("{}x{}x{}-b{b}", h, w, c),
                reps: cfg.reps,
                median_ns: st.median,
                min_ns: st.min,
                mean_ns: st.mean,
                throughput: b as f64 * 1e9 / st.median.max(1) as f64,
                unit: "img/s",
                check: "ok",
            });
            if cfg.breakdown {
                // warm-up runs also pushed timings; keep the timed ones
                let medians: Vec<u128> =
                    per_layer.into_iter().map(|v| stats(v[v.len() - cfg.reps..].to_vec()).median).collect();
                let total = medians.iter().sum::<u128>().max(1) as f64;
                for (name, ns) in names.into_iter().zip(medians) {
                    report.breakdown.push(BreakdownRow {
                        layout,
                        batch: b,
                        layer: name,
                        nanos: ns,
                        percent: ns as f64 * 100.0 / total,
                    });
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(suite: Suite) -> BenchConfig {
        let mut c = BenchConfig::new(suite);
        c.reps = 3;
        c.warmup = 1;
        c.sizes = vec![128, 256];
        c.batch = 8;
        c.input = 6;
        c
    }

    #[test]
    fn kernel_suites_emit_one_row_per_case() {
        for suite in [Suite::Bmm, Suite::BmmBin] {
            let r = run_bench(&small(suite)).unwrap();
            assert_eq!(r.rows.len(), 2 * Variant::ALL.len());
            assert!(r.rows.iter().all(|row| row.check == "ok" && row.reps == 3));
        }
        for suite in [Suite::Bconv, Suite::BconvBin] {
            let r = run_bench(&small(suite)).unwrap();
            assert_eq!(r.rows.len(), 4);
            assert_eq!(r.layout_comparison().len(), 2);
        }
    }

    #[test]
    fn csv_is_stable_apart_from_timings() {
        let strip = |s: String| -> Vec<String> {
            s.lines()
                .filter(|l| !l.starts_with('#') && l.contains(','))
                .map(|l| l.split(',').take(5).collect::<Vec<_>>().join(","))
                .collect()
        };
        let a = run_bench(&small(Suite::BmmBin)).unwrap().to_csv();
        let b = run_bench(&small(Suite::BmmBin)).unwrap().to_csv();
        assert_eq!(a.lines().next(), b.lines().next());
        assert_eq!(strip(a.clone()), strip(b));
        assert!(a.starts_with("# btnn bench suite=bmm-bin seed=1"));
        assert_eq!(a.lines().nth(1), Some(CSV_COLUMNS));
    }

    #[test]
    fn breakdown_percents_sum_to_100() {
        let mut c = BenchConfig::new(Suite::Model);
        c.model = "cifar-vgg".into();
        c.model_input = Some(8);
        c.reps = 2;
        c.warmup = 1;
        c.batches = vec![8, 16];
        c.breakdown = true;
        let r = run_bench(&c).unwrap();
        assert_eq!(r.rows.len(), 4);
        for layout in [ActLayout::Plain, ActLayout::Fsb] {
            for b in [8, 16] {
                let s: f64 = r.breakdown.iter().filter(|x| x.layout == layout && x.batch == b).map(|x| x.percent).sum();
                assert!((s - 100.0).abs() < 0.1, "{s}");
            }
        }
    }

    #[test]
    fn pow2_ranges() {
        assert_eq!(pow2_range(128, 1024), vec![128, 256, 512, 1024]);
        assert_eq!(pow2_range(100, 100), Vec::<usize>::new());
    }
}
