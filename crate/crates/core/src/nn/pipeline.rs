//! Layer-by-layer execution of a packed model.
//!
//! Thresholded layers run fused (conv or FC, comparison and any following
//! OR-pool in one pass). Layers on a residual path keep an explicit batch
//! norm: the tap is the real value before sign, and the receiving layer
//! adds the mapped residual to its batch-norm output before sign.

use std::time::Instant;

use crate::bconv::{
    bconv_fused, first_layer_fused, or_pool, ActLayout, Activation, BitFilterKKOC, BitTensorHWNC, PoolSpec, RealTensor,
    CHANNEL_ALIGN,
};
use crate::bitcore::{from_fsb, round_up, sign_bit, BitBuffer, BitMatrix, FsbGeometry, Layout, Major};
use crate::bmm::{bmm_pm1_bin_logical, bmm_pm1_logical, Variant};
use crate::error::{invalid, Error, Result};
use crate::nn::weights::fc_padded_in;
use crate::nn::{
    fsb_cols, fsb_rows, shortcut_type_a, BnParams, Direction, LayerKind, ModelPlan, PackedLayer, ThresholdSpec,
    WeightStore,
};

#[derive(Clone, Debug)]
enum Act {
    Threshold(Vec<ThresholdSpec>),
    Bn(Vec<BnParams>),
}

#[derive(Clone, Debug)]
enum Op {
    First(BitFilterKKOC),
    Conv(BitFilterKKOC),
    Pool(PoolSpec),
    Fc(BitMatrix),
    Last(BitMatrix),
}

#[derive(Clone, Debug)]
struct Stage {
    layer: usize,
    pool: Option<(usize, PoolSpec)>,
    op: Op,
    act: Act,
    name: String,
}

impl Stage {
    fn last_layer(&self) -> usize {
        self.pool.map_or(self.layer, |(i, _)| i)
    }
}

/// Per-run switches.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Record wall time per executed stage.
    pub timings: bool,
    /// Keep every stage's output bits.
    pub capture: bool,
}

/// Wall time of one executed stage (a layer plus any fused pool).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTiming {
    pub name: String,
    pub nanos: u128,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// `n × classes`, row per image.
    pub scores: Vec<f64>,
    pub classes: usize,
    pub labels: Vec<usize>,
    pub timings: Vec<LayerTiming>,
    /// `(layer index, output bits)` for each stage, with `capture`.
    pub activations: Vec<(usize, BitTensorHWNC)>,
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A model with weights unpacked into the run layout. Immutable after
/// construction and safe to share between threads.
#[derive(Clone, Debug)]
pub struct Engine {
    plan: ModelPlan,
    layout: ActLayout,
    stages: Vec<Stage>,
}

fn load_err(layer: usize, e: impl std::fmt::Display) -> Error {
    Error::Load(format!("layer {layer}: {e}"))
}

fn fc_weights(l: &crate::nn::LayerSpec, p: &PackedLayer, i: usize, layout: ActLayout) -> Result<BitMatrix> {
    let rows = fc_padded_in(l);
    let cols = l.out_channels;
    let stored = match p.layout {
        ActLayout::Plain => Layout::ColPacked,
        ActLayout::Fsb => Layout::Fsb { geometry: FsbGeometry::default_for(cols, rows), major: Major::Col },
    };
    let n_bits = match stored {
        Layout::Fsb { geometry, .. } => geometry.total_bits(),
        _ => rows * cols,
    };
    let bits = BitBuffer::from_words(n_bits, p.words.clone()).map_err(|e| load_err(i, e))?;
    let m = BitMatrix::from_raw_parts(rows, cols, stored, bits).map_err(|e| load_err(i, e))?;
    let plain = match p.layout {
        ActLayout::Plain => m,
        ActLayout::Fsb => from_fsb(&m).map_err(|e| load_err(i, e))?,
    };
    // channel padding rows must be zero or they would count against every input
    let (c, c_pad) = (l.input.c, round_up(l.input.c, CHANNEL_ALIGN));
    if c != c_pad {
        for site in 0..l.input.h * l.input.w {
            for k in c..c_pad {
                if (0..cols).any(|o| plain.get(site * c_pad + k, o)) {
                    return Err(load_err(i, "weights set in channel padding"));
                }
            }
        }
    }
    Ok(match layout {
        ActLayout::Plain => plain,
        ActLayout::Fsb => fsb_cols(&plain),
    })
}

impl Engine {
    pub fn new(plan: ModelPlan, store: &WeightStore, layout: ActLayout) -> Result<Self> {
        store.check(&plan)?;
        let mut packed = store.layers.iter();
        let mut stages: Vec<Stage> = Vec::new();
        for (i, l) in plan.layers.iter().enumerate() {
            if l.kind == LayerKind::OrPool {
                let pool = l.pool();
                match stages.last_mut() {
                    Some(s) if s.pool.is_none() && matches!(s.op, Op::First(_) | Op::Conv(_)) => {
                        s.pool = Some((i, pool));
                        s.name = format!("{} +{}", s.name, l.source);
                    }
                    _ => stages.push(Stage {
                        layer: i,
                        pool: None,
                        op: Op::Pool(pool),
                        act: Act::Threshold(vec![]),
                        name: l.label(i),
                    }),
                }
                continue;
            }
            let p = packed.next().expect("checked layer count");
            let act = if l.fused {
                for t in &p.thresholds {
                    if matches!(t.direction, Direction::Geq | Direction::Leq) && !t.tau.is_finite() {
                        return Err(load_err(i, format!("non-finite threshold {}", t.tau)));
                    }
                }
                Act::Threshold(p.thresholds.clone())
            } else {
                let mut bn = p.bn.clone();
                for b in &mut bn {
                    b.eps = plan.epsilon;
                    b.validate().map_err(|e| load_err(i, e))?;
                }
                Act::Bn(bn)
            };
            let op = match l.kind {
                LayerKind::FirstConvBwn | LayerKind::BitConv => {
                    let f = BitFilterKKOC::from_words(
                        l.kernel_h,
                        l.kernel_w,
                        l.out_channels,
                        l.input.c,
                        p.layout,
                        p.words.clone(),
                    )
                    .map_err(|e| load_err(i, e))?
                    .to_layout(layout);
                    if l.kind == LayerKind::FirstConvBwn {
                        Op::First(f)
                    } else {
                        Op::Conv(f)
                    }
                }
                LayerKind::BitFc => Op::Fc(fc_weights(l, p, i, layout)?),
                LayerKind::LastFc => Op::Last(fc_weights(l, p, i, layout)?),
                LayerKind::OrPool => unreachable!(),
            };
            stages.push(Stage { layer: i, pool: None, op, act, name: l.label(i) });
        }
        Ok(Self { plan, layout, stages })
    }

    pub fn plan(&self) -> &ModelPlan {
        &self.plan
    }

    pub fn layout(&self) -> ActLayout {
        self.layout
    }

    /// Names of the executed stages, in order.
    pub fn stage_names(&self) -> Vec<String> {
        self.stages.iter().map(|s| s.name.clone()).collect()
    }

    fn variant(&self) -> Variant {
        match self.layout {
            ActLayout::Plain => Variant::Blocked,
            ActLayout::Fsb => Variant::Fsb,
        }
    }

    fn fc_input(&self, x: &BitTensorHWNC) -> BitMatrix {
        let a = x.flatten_rows();
        match self.layout {
            ActLayout::Plain => a,
            ActLayout::Fsb => fsb_rows(&a),
        }
    }

    /// Runs a batch given as an HWNC tensor of real pixels.
    pub fn run(&self, input: &RealTensor, opts: RunOptions) -> Result<RunOutput> {
        let want = self.plan.input;
        if (input.h, input.w, input.c) != (want.h, want.w, want.c) {
            return Err(invalid(format!("input images are {}x{}x{}, model expects {want}", input.h, input.w, input.c)));
        }
        let n = input.n;
        let mut taps: Vec<Option<RealTensor>> = vec![None; self.plan.layers.len()];
        let mut cur: Option<BitTensorHWNC> = None;
        let mut out = RunOutput {
            scores: vec![],
            classes: self.plan.classes,
            labels: vec![],
            timings: vec![],
            activations: vec![],
        };
        for stage in &self.stages {
            let start = Instant::now();
            let spec = &self.plan.layers[stage.layer];
            let residual = match spec.residual_from {
                Some(from) => {
                    let tap = taps[from].as_ref().expect("tap runs before its consumer");
                    Some(shortcut_type_a(tap, spec.output)?)
                }
                None => None,
            };
            let act = match &stage.act {
                Act::Threshold(t) => Activation::Threshold(t),
                Act::Bn(b) => Activation::BatchNorm {
                    params: b,
                    residual_in: residual.as_ref(),
                    emit_residual: spec.residual_tap,
                },
            };
            let pool = stage.pool.map(|(_, p)| p);
            let next = match &stage.op {
                Op::First(f) => {
                    let r = first_layer_fused(input, f, &spec.geometry(), &act, pool, self.layout)?;
                    taps[stage.layer] = r.residual;
                    r.bits
                }
                Op::Conv(f) => {
                    let x = cur.as_ref().expect("first stage is a conv");
                    let r = bconv_fused(x, f, &spec.geometry(), &act, pool)?;
                    taps[stage.layer] = r.residual;
                    r.bits
                }
                Op::Pool(p) => or_pool(cur.as_ref().expect("pool follows a layer"), *p)?,
                Op::Fc(w) => {
                    let a = self.fc_input(cur.as_ref().expect("fc follows a layer"));
                    let bits = match &stage.act {
                        Act::Threshold(t) => bmm_pm1_bin_logical(&a, w, spec.fan_in(), t, self.variant())?,
                        Act::Bn(bn) => {
                            let v = bmm_pm1_logical(&a, w, spec.fan_in(), self.variant())?;
                            BitMatrix::from_fn(n, bn.len(), Major::Row, |r, k| {
                                sign_bit(bn[k].apply(v.get(r, k) as f64))
                            })
                        }
                    };
                    BitTensorHWNC::from_rows(&bits, self.layout)?
                }
                Op::Last(w) => {
                    let a = self.fc_input(cur.as_ref().expect("last layer follows a layer"));
                    let v = bmm_pm1_logical(&a, w, spec.fan_in(), self.variant())?;
                    let Act::Bn(bn) = &stage.act else { unreachable!("last layer keeps batch norm") };
                    let k = bn.len();
                    out.scores = (0..n * k).map(|i| bn[i % k].apply(v.get(i / k, i % k) as f64)).collect();
                    out.labels = out.scores.chunks(k.max(1)).map(argmax).collect();
                    if opts.timings {
                        out.timings.push(LayerTiming { name: stage.name.clone(), nanos: start.elapsed().as_nanos() });
                    }
                    continue;
                }
            };
            if opts.timings {
                out.timings.push(LayerTiming { name: stage.name.clone(), nanos: start.elapsed().as_nanos() });
            }
            if opts.capture {
                out.activations.push((stage.last_layer(), next.clone()));
            }
            cur = Some(next);
        }
        if n == 0 {
            out.labels.clear();
        }
        Ok(out)
    }
}
