//! Float weights, their conversion to packed bits, and the weight files.
//!
//! Float weight order per layer: convolutions `[KH][KW][O][C]`; fully
//! connected layers (including a leading one) `[out][in]` with inputs
//! flattened in `(h, w, c)` order.
//!
//! `BTNN` packed weight file, little-endian:
//!
//! ```text
//! "BTNN" u32 version=1 u32 layer_count
//! per weighted layer:
//!   u8  kind tag            (0 first conv, 1 conv, 3 FC, 4 last FC)
//!   u32 dims                (conv: KH KW O C; FC: in out)
//!   u8  layout tag          (0 plain, 1 FSB)
//!   u64 word count, then the words
//!   u32 threshold count, f64 tau values, u8 direction tags
//!   u32 batch-norm count, (gamma, beta, mean, var) f64 quadruples
//! ```
//!
//! Batch-norm epsilon is not stored; it comes from the model at load time.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bconv::{ActLayout, BitFilterKKOC, CHANNEL_ALIGN};
use crate::bitcore::{round_up, to_fsb, BitMatrix, FsbGeometry, Major};
use crate::error::{Error, Result};
use crate::nn::io::Reader;
use crate::nn::{fold_bn_sign, BnParams, Direction, LayerKind, LayerSpec, ModelPlan, ThresholdSpec, DEFAULT_EPSILON};

const VERSION: u32 = 1;

/// Real weights and batch-norm statistics of one weighted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatLayer {
    pub kind: LayerKind,
    pub weights: Vec<f32>,
    pub bn: Vec<BnParams>,
}

/// Real weights for every weighted layer of a model, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatWeights {
    pub layers: Vec<FloatLayer>,
}

fn load_err(layer: usize, msg: impl std::fmt::Display) -> Error {
    Error::Load(format!("layer {layer}: {msg}"))
}

/// Weight index of fully connected input `(h, w, c)` for output `o`.
#[inline]
fn fc_index(l: &LayerSpec, o: usize, h: usize, w: usize, c: usize) -> usize {
    o * l.fan_in() + (h * l.input.w + w) * l.input.c + c
}

impl FloatWeights {
    /// Random weights with batch-norm statistics scaled to each layer's
    /// fan-in, so activations stay mixed in sign.
    pub fn random(plan: &ModelPlan, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = plan
            .weighted_layers()
            .map(|(_, l)| {
                let weights = (0..l.weight_count()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                // ±1 sums have spread sqrt(fan_in); uniform real input has a third of that variance
                let var0 = match l.kind {
                    LayerKind::FirstConvBwn => l.fan_in() as f64 / 3.0,
                    _ => l.fan_in() as f64,
                };
                let sd = var0.sqrt();
                let bn = (0..l.out_channels)
                    .map(|_| BnParams {
                        gamma: if rng.gen_bool(0.05) { 0.0 } else { rng.gen_range(-1.5..1.5) },
                        beta: rng.gen_range(-0.3..0.3),
                        mean: rng.gen_range(-0.3..0.3) * sd,
                        var: var0 * rng.gen_range(0.5..1.5),
                        eps: plan.epsilon,
                    })
                    .collect();
                FloatLayer { kind: l.kind, weights, bn }
            })
            .collect();
        Self { layers }
    }

    /// Checks counts against a model and applies its epsilon to every
    /// batch-norm entry.
    pub fn validate(&mut self, plan: &ModelPlan) -> Result<()> {
        let specs: Vec<(usize, &LayerSpec)> = plan.weighted_layers().collect();
        if specs.len() != self.layers.len() {
            return Err(Error::Validation {
                layer: specs.len().min(self.layers.len()),
                reason: format!("model has {} weighted layers, weights have {}", specs.len(), self.layers.len()),
            });
        }
        for ((i, spec), layer) in specs.into_iter().zip(&mut self.layers) {
            let fail = |reason: String| Error::Validation { layer: i, reason };
            if layer.kind != spec.kind {
                return Err(fail(format!("weights are for a {:?} layer, model has {:?}", layer.kind, spec.kind)));
            }
            if layer.weights.len() != spec.weight_count() {
                return Err(fail(format!("{} weights, expected {}", layer.weights.len(), spec.weight_count())));
            }
            if layer.bn.len() != spec.out_channels {
                return Err(fail(format!("{} batch-norm entries, expected {}", layer.bn.len(), spec.out_channels)));
            }
            if let Some(v) = layer.weights.iter().find(|v| !v.is_finite()) {
                return Err(fail(format!("non-finite weight {v}")));
            }
            for p in &mut layer.bn {
                p.eps = plan.epsilon;
                p.validate().map_err(|e| fail(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// `BTFW` float weight file: `"BTFW" u32 version u32 count`, then per
    /// layer `u8 kind, u32 n, n × f32, u32 m, m × 4 × f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"BTFW");
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.push(l.kind.tag());
            out.extend_from_slice(&(l.weights.len() as u32).to_le_bytes());
            for w in &l.weights {
                out.extend_from_slice(&w.to_le_bytes());
            }
            write_bn(&mut out, &l.bn);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "float weight file");
        r.magic(b"BTFW")?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let count = r.count(count as u64, 9)?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let tag = r.u8()?;
            let kind = LayerKind::from_tag(tag)
                .filter(|k| k.weighted())
                .ok_or_else(|| r.corrupt(format!("bad layer kind {tag}")))?;
            let n = r.u32()?;
            let n = r.count(n as u64, 4)?;
            let weights = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            let bn = read_bn(&mut r)?;
            layers.push(FloatLayer { kind, weights, bn });
        }
        r.finish()?;
        Ok(Self { layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_bn(out: &mut Vec<u8>, bn: &[BnParams]) {
    out.extend_from_slice(&(bn.len() as u32).to_le_bytes());
    for p in bn {
        for v in [p.gamma, p.beta, p.mean, p.var] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_bn(r: &mut Reader) -> Result<Vec<BnParams>> {
    let m = r.u32()?;
    let m = r.count(m as u64, 32)?;
    (0..m)
        .map(|_| Ok(BnParams { gamma: r.f64()?, beta: r.f64()?, mean: r.f64()?, var: r.f64()?, eps: DEFAULT_EPSILON }))
        .collect()
}

/// One weighted layer as stored in a `BTNN` file.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedLayer {
    pub kind: LayerKind,
    /// `[KH, KW, O, C]` for convolutions, `[in, out]` for FC layers.
    pub dims: Vec<u32>,
    pub layout: ActLayout,
    pub words: Vec<u64>,
    pub thresholds: Vec<ThresholdSpec>,
    pub bn: Vec<BnParams>,
}

/// Packed weights of a whole model.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    pub layers: Vec<PackedLayer>,
}

/// Bits-per-row of the flattened input of an FC layer: each site's
/// channels are padded to a multiple of 128.
pub(crate) fn fc_padded_in(l: &LayerSpec) -> usize {
    l.input.h * l.input.w * round_up(l.input.c, CHANNEL_ALIGN)
}

/// FC weights as a column-packed `padded_in × out` matrix, or its FSB form.
pub(crate) fn fc_matrix(
    l: &LayerSpec,
    signs: impl Fn(usize, usize, usize, usize) -> bool,
    layout: ActLayout,
) -> BitMatrix {
    let c_pad = round_up(l.input.c, CHANNEL_ALIGN);
    let mut m = BitMatrix::zeros(fc_padded_in(l), l.out_channels, Major::Col);
    for o in 0..l.out_channels {
        for h in 0..l.input.h {
            for w in 0..l.input.w {
                for c in 0..l.input.c {
                    if signs(o, h, w, c) {
                        m.set((h * l.input.w + w) * c_pad + c, o, true);
                    }
                }
            }
        }
    }
    match layout {
        ActLayout::Plain => m,
        ActLayout::Fsb => fsb_cols(&m),
    }
}

/// Column-major FSB form with the default tile.
pub(crate) fn fsb_cols(m: &BitMatrix) -> BitMatrix {
    to_fsb(m, FsbGeometry::default_for(m.cols(), m.padded_rows())).expect("covering geometry")
}

/// Row-major FSB form with the default tile.
pub(crate) fn fsb_rows(m: &BitMatrix) -> BitMatrix {
    to_fsb(m, FsbGeometry::default_for(m.rows(), m.padded_cols())).expect("covering geometry")
}

/// Binarizes float weights, packs them in `layout`, and folds batch norm
/// into thresholds for fused layers.
pub fn convert_weights(plan: &ModelPlan, weights: &FloatWeights, layout: ActLayout) -> Result<WeightStore> {
    let mut weights = weights.clone();
    weights.validate(plan)?;
    let mut layers = Vec::new();
    for ((i, spec), fl) in plan.weighted_layers().zip(&weights.layers) {
        let w = &fl.weights;
        let sign = |k: usize| w[k] >= 0.0;
        let (dims, words) = match spec.kind {
            LayerKind::FirstConvBwn | LayerKind::BitConv => {
                let (kh, kw, o, c) = (spec.kernel_h, spec.kernel_w, spec.out_channels, spec.input.c);
                // a leading FC arrives as [out][in]
                let from_fc = spec.source.ends_with("FC");
                let f = BitFilterKKOC::from_fn(kh, kw, o, c, layout, |r, s, oo, cc| {
                    if from_fc {
                        sign(fc_index(spec, oo, r, s, cc))
                    } else {
                        sign(((r * kw + s) * o + oo) * c + cc)
                    }
                });
                (vec![kh, kw, o, c], f.bits().words().to_vec())
            }
            LayerKind::BitFc | LayerKind::LastFc => {
                let m = fc_matrix(spec, |o, h, ww, c| sign(fc_index(spec, o, h, ww, c)), layout);
                (vec![spec.fan_in(), spec.out_channels], m.bits().words().to_vec())
            }
            LayerKind::OrPool => unreachable!("pools carry no weights"),
        };
        let (thresholds, bn) = if spec.fused {
            let t = fl
                .bn
                .iter()
                .map(fold_bn_sign)
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Validation { layer: i, reason: e.to_string() })?;
            (t, vec![])
        } else {
            (vec![], fl.bn.clone())
        };
        let dims = dims
            .into_iter()
            .map(|d| {
                u32::try_from(d).map_err(|_| Error::Validation { layer: i, reason: format!("dimension {d} too large") })
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(PackedLayer { kind: spec.kind, dims, layout, words, thresholds, bn });
    }
    Ok(WeightStore { layers })
}

impl WeightStore {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"BTNN");
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.push(l.kind.tag());
            for d in &l.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.push(l.layout.tag());
            out.extend_from_slice(&(l.words.len() as u64).to_le_bytes());
            for w in &l.words {
                out.extend_from_slice(&w.to_le_bytes());
            }
            out.extend_from_slice(&(l.thresholds.len() as u32).to_le_bytes());
            for t in &l.thresholds {
                out.extend_from_slice(&t.tau.to_le_bytes());
            }
            out.extend(l.thresholds.iter().map(|t| t.direction.tag()));
            write_bn(&mut out, &l.bn);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "weight file");
        r.magic(b"BTNN")?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let count = r.count(count as u64, 18)?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let tag = r.u8()?;
            let kind = LayerKind::from_tag(tag)
                .filter(|k| k.weighted())
                .ok_or_else(|| r.corrupt(format!("bad layer kind {tag}")))?;
            let ndims = if kind.is_conv() { 4 } else { 2 };
            let dims = (0..ndims).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let tag = r.u8()?;
            let layout = ActLayout::from_tag(tag).ok_or_else(|| r.corrupt(format!("bad layout tag {tag}")))?;
            let n = r.u64()?;
            let n = r.count(n, 8)?;
            let words = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let t = r.u32()?;
            let t = r.count(t as u64, 9)?;
            let taus = (0..t).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let mut thresholds = Vec::with_capacity(t);
            for tau in taus {
                let tag = r.u8()?;
                let direction =
                    Direction::from_tag(tag).ok_or_else(|| r.corrupt(format!("bad direction tag {tag}")))?;
                thresholds.push(ThresholdSpec { tau, direction });
            }
            let bn = read_bn(&mut r)?;
            layers.push(PackedLayer { kind, dims, layout, words, thresholds, bn });
        }
        r.finish()?;
        Ok(Self { layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Checks per-layer kinds, dims and parameter counts against a model.
    pub fn check(&self, plan: &ModelPlan) -> Result<()> {
        let specs: Vec<(usize, &LayerSpec)> = plan.weighted_layers().collect();
        if specs.len() != self.layers.len() {
            return Err(Error::Load(format!(
                "model has {} weighted layers, weight file has {}",
                specs.len(),
                self.layers.len()
            )));
        }
        for ((i, spec), l) in specs.into_iter().zip(&self.layers) {
            let expect: Vec<usize> = if spec.kind.is_conv() {
                vec![spec.kernel_h, spec.kernel_w, spec.out_channels, spec.input.c]
            } else {
                vec![spec.fan_in(), spec.out_channels]
            };
            let dims: Vec<usize> = l.dims.iter().map(|&d| d as usize).collect();
            if l.kind != spec.kind || dims != expect {
                return Err(load_err(i, format!("{:?} {dims:?} does not match {:?} {expect:?}", l.kind, spec.kind)));
            }
            let o = spec.out_channels;
            let ok = if spec.fused {
                l.thresholds.len() == o && l.bn.is_empty()
            } else {
                l.bn.len() == o && l.thresholds.is_empty()
            };
            if !ok {
                return Err(load_err(
                    i,
                    format!(
                        "{} thresholds and {} batch-norm entries for {o} {} channels",
                        l.thresholds.len(),
                        l.bn.len(),
                        if spec.fused { "fused" } else { "explicit" }
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{preset, ModelSpec};

    fn small() -> ModelPlan {
        ModelSpec {
            name: "s".into(),
            input: [6, 6, 3],
            classes: 5,
            layers: vec!["16C3-P2-20C3-P3-30FC".into()],
            shortcuts: vec![],
            epsilon: 1e-5,
            explicit_bn: vec![],
        }
        .plan()
        .unwrap()
    }

    #[test]
    fn convert_round_trip() {
        let plan = small();
        let fw = FloatWeights::random(&plan, 3);
        assert_eq!(FloatWeights::from_bytes(&fw.to_bytes()).unwrap(), fw);
        for layout in [ActLayout::Plain, ActLayout::Fsb] {
            let store = convert_weights(&plan, &fw, layout).unwrap();
            store.check(&plan).unwrap();
            let back = WeightStore::from_bytes(&store.to_bytes()).unwrap();
            assert_eq!(back, store);
        }
    }

    #[test]
    fn negative_weights_give_zero_planes() {
        let plan = small();
        let mut fw = FloatWeights::random(&plan, 4);
        for l in &mut fw.layers {
            l.weights.iter_mut().for_each(|w| *w = -w.abs() - 0.1);
        }
        let store = convert_weights(&plan, &fw, ActLayout::Plain).unwrap();
        assert!(store.layers.iter().all(|l| l.words.iter().all(|&w| w == 0)));
    }

    #[test]
    fn positive_gamma_folds_to_geq() {
        let plan = small();
        let mut fw = FloatWeights::random(&plan, 5);
        for l in &mut fw.layers {
            l.bn.iter_mut().for_each(|p| p.gamma = p.gamma.abs() + 0.1);
        }
        let store = convert_weights(&plan, &fw, ActLayout::Plain).unwrap();
        let fused: Vec<_> = store.layers.iter().flat_map(|l| &l.thresholds).collect();
        assert!(!fused.is_empty());
        assert!(fused.iter().all(|t| t.direction == Direction::Geq));
    }

    #[test]
    fn mismatches_are_reported() {
        let plan = small();
        let mut fw = FloatWeights::random(&plan, 6);
        fw.layers.pop();
        assert!(matches!(convert_weights(&plan, &fw, ActLayout::Plain), Err(Error::Validation { .. })));
        let mut fw = FloatWeights::random(&plan, 6);
        fw.layers[1].weights.pop();
        assert!(matches!(convert_weights(&plan, &fw, ActLayout::Plain), Err(Error::Validation { layer: 2, .. })));
        let store = convert_weights(&plan, &FloatWeights::random(&plan, 6), ActLayout::Plain).unwrap();
        let other = preset("mlp").unwrap().plan().unwrap();
        assert!(matches!(store.check(&other), Err(Error::Load(_))));
        let bytes = store.to_bytes();
        assert!(matches!(WeightStore::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn leading_fc_reorders_to_filter() {
        let plan = preset("mlp").unwrap().plan().unwrap();
        let fw = FloatWeights::random(&plan, 7);
        let store = convert_weights(&plan, &fw, ActLayout::Plain).unwrap();
        let l0 = &store.layers[0];
        let f = BitFilterKKOC::from_words(28, 28, 1024, 1, ActLayout::Plain, l0.words.clone()).unwrap();
        let spec = &plan.layers[0];
        for (o, h, w) in [(0, 0, 0), (5, 3, 17), (1023, 27, 27)] {
            assert_eq!(f.get(h, w, o, 0), fw.layers[0].weights[fc_index(spec, o, h, w, 0)] >= 0.0);
        }
    }
}
