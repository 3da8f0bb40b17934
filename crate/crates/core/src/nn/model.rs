//! Model descriptions: the JSON model file, the layer shorthand, shape
//! planning and built-in network presets.
//!
//! Shorthand items are joined by `-`:
//!
//! | item          | meaning                                               |
//! |---------------|-------------------------------------------------------|
//! | `128C3`       | conv, 128 outputs, 3×3, stride 1, pad `K/2`           |
//! | `128C11/4`    | as above with stride 4                                |
//! | `64C3p0`      | explicit padding                                      |
//! | `1024FC`      | fully connected, 1024 neurons                         |
//! | `P2`, `MP2`   | 2×2 max (OR) pool, stride 2; `P3/2` sets the stride   |
//! | `2x128C3`     | repeat an item                                        |
//! | `2x(...)`     | repeat a parenthesized sequence                       |
//!
//! The first weighted layer always runs as a binary-weight layer on real
//! input, and a final fully connected layer with `classes` outputs is
//! appended.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bconv::{ConvGeometry, PoolSpec};
use crate::error::{Error, Result};
use crate::nn::DEFAULT_EPSILON;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    FirstConvBwn,
    BitConv,
    OrPool,
    BitFc,
    LastFc,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::FirstConvBwn => 0,
            LayerKind::BitConv => 1,
            LayerKind::OrPool => 2,
            LayerKind::BitFc => 3,
            LayerKind::LastFc => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => LayerKind::FirstConvBwn,
            1 => LayerKind::BitConv,
            2 => LayerKind::OrPool,
            3 => LayerKind::BitFc,
            4 => LayerKind::LastFc,
            _ => return None,
        })
    }

    /// Whether the layer carries weights.
    pub fn weighted(self) -> bool {
        self != LayerKind::OrPool
    }

    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::FirstConvBwn | LayerKind::BitConv)
    }

    pub fn is_fc(self) -> bool {
        matches!(self, LayerKind::BitFc | LayerKind::LastFc)
    }
}

/// Spatial size and channel count of an activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

/// Residual edge between two conv layers of the expanded list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shortcut {
    pub from: usize,
    pub to: usize,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

/// A model as written in a model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// `[height, width, channels]` of one input image.
    pub input: [usize; 3],
    pub classes: usize,
    /// Shorthand items; each entry may itself be a `-`-joined sequence.
    pub layers: Vec<String>,
    #[serde(default)]
    pub shortcuts: Vec<Shortcut>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Layers (expanded indices) that keep an explicit batch norm instead of
    /// a folded threshold.
    #[serde(default)]
    pub explicit_bn: Vec<usize>,
}

/// One layer of a validated model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Shorthand the layer was parsed from (`"classes"` for the last layer).
    pub source: String,
    /// Output channels or neurons; for pools, the passed-through channels.
    pub out_channels: usize,
    /// Filter or pool window height and width.
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    /// Folded threshold (true) or explicit batch norm then sign (false).
    pub fused: bool,
    /// The pre-sign real output feeds a shortcut.
    pub residual_tap: bool,
    /// Layer whose tapped output is added before sign.
    pub residual_from: Option<usize>,
    pub input: Shape,
    pub output: Shape,
}

impl LayerSpec {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.pad)
    }

    pub fn pool(&self) -> PoolSpec {
        PoolSpec::new(self.kernel_h, self.stride)
    }

    /// Logical inputs feeding one output value.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::FirstConvBwn | LayerKind::BitConv => self.kernel_h * self.kernel_w * self.input.c,
            LayerKind::BitFc | LayerKind::LastFc => self.input.len(),
            LayerKind::OrPool => 0,
        }
    }

    /// Real weights the layer expects in a float weight file.
    pub fn weight_count(&self) -> usize {
        self.fan_in() * if self.kind.weighted() { self.out_channels } else { 0 }
    }

    /// Short label used in reports.
    pub fn label(&self, index: usize) -> String {
        format!("L{index} {:?} {}", self.kind, self.source)
    }
}

/// A model with every layer's shape resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPlan {
    pub name: String,
    pub input: Shape,
    pub classes: usize,
    pub epsilon: f64,
    pub layers: Vec<LayerSpec>,
}

impl ModelPlan {
    /// Indices of the layers that carry weights, in order.
    pub fn weighted_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.kind.weighted())
    }

    pub fn output(&self) -> Shape {
        self.layers.last().map_or(self.input, |l| l.output)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Atom {
    Conv { out: usize, k: usize, stride: usize, pad: Option<usize> },
    Fc(usize),
    Pool { window: usize, stride: usize },
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse(format!("{msg} at offset {} in `{}`", self.pos, self.src))
    }

    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_str(&mut self, s: &str) -> bool {
        if self.src[self.pos..].starts_with(s) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn number(&mut self) -> Result<usize> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a number"));
        }
        self.src[start..self.pos].parse().map_err(|_| self.err("number out of range"))
    }

    fn sequence(&mut self, out: &mut Vec<(Atom, String)>) -> Result<()> {
        loop {
            self.item(out)?;
            if !self.eat(b'-') {
                return Ok(());
            }
        }
    }

    fn item(&mut self, out: &mut Vec<(Atom, String)>) -> Result<()> {
        let save = self.pos;
        let mut count = 1;
        if self.peek().is_some_and(|c| c.is_ascii_digit()) {
            let n = self.number()?;
            if self.eat(b'x') {
                count = n;
            } else {
                self.pos = save;
            }
        }
        if count == 0 {
            return Err(self.err("repeat count must be positive"));
        }
        let mut body = Vec::new();
        if self.eat(b'(') {
            self.sequence(&mut body)?;
            if !self.eat(b')') {
                return Err(self.err("expected `)`"));
            }
        } else {
            let start = self.pos;
            let atom = self.atom()?;
            body.push((atom, self.src[start..self.pos].to_string()));
        }
        for _ in 0..count {
            out.extend(body.iter().cloned());
        }
        Ok(())
    }

    fn atom(&mut self) -> Result<Atom> {
        if self.eat_str("MP") || self.eat(b'P') {
            let window = self.number()?;
            let stride = if self.eat(b'/') { self.number()? } else { window };
            return Ok(Atom::Pool { window, stride });
        }
        let n = self.number()?;
        if self.eat_str("FC") {
            return Ok(Atom::Fc(n));
        }
        if !self.eat(b'C') {
            return Err(self.err("expected `C` or `FC`"));
        }
        let k = self.number()?;
        let stride = if self.eat(b'/') { self.number()? } else { 1 };
        let pad = if self.eat(b'p') { Some(self.number()?) } else { None };
        Ok(Atom::Conv { out: n, k, stride, pad })
    }
}

fn parse_items(items: &[String]) -> Result<Vec<(Atom, String)>> {
    let mut out = Vec::new();
    for item in items {
        let compact: String = item.chars().filter(|c| !c.is_whitespace()).collect();
        let mut p = Parser { src: &compact, pos: 0 };
        p.sequence(&mut out)?;
        if p.pos != compact.len() {
            return Err(p.err("unexpected trailing input"));
        }
    }
    Ok(out)
}

/// Expands shorthand into one item per layer, without resolving shapes.
pub fn expand_shorthand(items: &[String]) -> Result<Vec<String>> {
    Ok(parse_items(items)?.into_iter().map(|(_, s)| s).collect())
}

fn fail(layer: usize, reason: impl Into<String>) -> Error {
    Error::Validation { layer, reason: reason.into() }
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    /// Resolves shapes and checks that every layer composes.
    pub fn plan(&self) -> Result<ModelPlan> {
        let [h, w, c] = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Parse(format!("input dims {h}x{w}x{c} must be positive")));
        }
        if self.classes == 0 {
            return Err(Error::Parse("class count must be positive".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Parse(format!("epsilon {} must be a positive number", self.epsilon)));
        }
        let atoms = parse_items(&self.layers)?;
        let mut layers: Vec<LayerSpec> = Vec::with_capacity(atoms.len() + 1);
        let mut shape = Shape::new(h, w, c);
        let mut flat = false;
        for (i, (atom, source)) in atoms.into_iter().enumerate() {
            let first = !layers.iter().any(|l| l.kind.weighted());
            let layer = match atom {
                Atom::Conv { out, k, stride, pad } => {
                    if flat {
                        return Err(fail(i, "convolution after a fully connected layer"));
                    }
                    if out == 0 || k == 0 || stride == 0 {
                        return Err(fail(i, "conv channels, kernel and stride must be positive"));
                    }
                    let pad = pad.unwrap_or(k / 2);
                    let (p, q) = ConvGeometry::new(stride, pad)
                        .output_dims(shape.h, shape.w, k, k)
                        .map_err(|e| fail(i, e.to_string()))?;
                    LayerSpec {
                        kind: if first { LayerKind::FirstConvBwn } else { LayerKind::BitConv },
                        source,
                        out_channels: out,
                        kernel_h: k,
                        kernel_w: k,
                        stride,
                        pad,
                        fused: !first,
                        residual_tap: false,
                        residual_from: None,
                        input: shape,
                        output: Shape::new(p, q, out),
                    }
                }
                Atom::Fc(out) => {
                    if out == 0 {
                        return Err(fail(i, "layer width must be positive"));
                    }
                    flat = true;
                    // a leading FC is a full-frame filter over the real input
                    LayerSpec {
                        kind: if first { LayerKind::FirstConvBwn } else { LayerKind::BitFc },
                        source,
                        out_channels: out,
                        kernel_h: shape.h,
                        kernel_w: shape.w,
                        stride: 1,
                        pad: 0,
                        fused: !first,
                        residual_tap: false,
                        residual_from: None,
                        input: shape,
                        output: Shape::new(1, 1, out),
                    }
                }
                Atom::Pool { window, stride } => {
                    if first {
                        return Err(fail(i, "a pool cannot precede the first weighted layer"));
                    }
                    let pool = PoolSpec::new(window, stride);
                    let p = pool.output_len(shape.h).map_err(|e| fail(i, e.to_string()))?;
                    let q = pool.output_len(shape.w).map_err(|e| fail(i, e.to_string()))?;
                    LayerSpec {
                        kind: LayerKind::OrPool,
                        source,
                        out_channels: shape.c,
                        kernel_h: window,
                        kernel_w: window,
                        stride,
                        pad: 0,
                        fused: true,
                        residual_tap: false,
                        residual_from: None,
                        input: shape,
                        output: Shape::new(p, q, shape.c),
                    }
                }
            };
            shape = layer.output;
            layers.push(layer);
        }
        if layers.is_empty() {
            return Err(Error::Parse("model has no layers".into()));
        }
        let user_layers = layers.len();
        for &i in &self.explicit_bn {
            match layers.get_mut(i) {
                Some(l) if matches!(l.kind, LayerKind::BitConv | LayerKind::BitFc) => l.fused = false,
                Some(_) => return Err(fail(i, "explicit batch norm applies to binary conv and FC layers only")),
                None => return Err(fail(i, format!("explicit_bn index past the {user_layers} layers"))),
            }
        }
        for s in &self.shortcuts {
            let bad = |r: String| fail(s.to, format!("shortcut {} -> {}: {r}", s.from, s.to));
            if s.from >= s.to || s.to >= user_layers {
                return Err(bad("edges must point forward to an existing layer".into()));
            }
            let (src, dst) = (&layers[s.from], &layers[s.to]);
            if !src.kind.is_conv() || dst.kind != LayerKind::BitConv {
                return Err(bad("shortcuts connect conv layers".into()));
            }
            if dst.residual_from.is_some() {
                return Err(bad("layer already receives a shortcut".into()));
            }
            let (a, b) = (src.output, dst.output);
            let halves = a.h == 2 * b.h && a.w == 2 * b.w;
            if !((a.h == b.h && a.w == b.w) || halves) || b.c < a.c {
                return Err(bad(format!("cannot map {a} onto {b}")));
            }
            layers[s.from].residual_tap = true;
            layers[s.from].fused = false;
            let dst = &mut layers[s.to];
            dst.residual_from = Some(s.from);
            dst.fused = false;
        }
        layers.push(LayerSpec {
            kind: LayerKind::LastFc,
            source: "classes".into(),
            out_channels: self.classes,
            kernel_h: shape.h,
            kernel_w: shape.w,
            stride: 1,
            pad: 0,
            fused: false,
            residual_tap: false,
            residual_from: None,
            input: shape,
            output: Shape::new(1, 1, self.classes),
        });
        Ok(ModelPlan {
            name: self.name.clone(),
            input: Shape::new(h, w, c),
            classes: self.classes,
            epsilon: self.epsilon,
            layers,
        })
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 6] = ["mlp", "cifar-vgg", "resnet14", "alexnet", "vgg16", "resnet18"];

fn chain_shortcuts(first: usize, last: usize) -> Vec<Shortcut> {
    (first..last).step_by(2).map(|from| Shortcut { from, to: from + 2 }).collect()
}

/// Built-in network structures at their usual input size.
pub fn preset(name: &str) -> Result<ModelSpec> {
    let (input, classes, layers, shortcuts) = match name {
        "mlp" => ([28, 28, 1], 10, "4x1024FC", vec![]),
        "cifar-vgg" => ([32, 32, 3], 10, "(2x128C3)-MP2-(2x256C3)-MP2-(2x512C3)-MP2-(3x1024FC)", vec![]),
        "resnet14" => {
            ([32, 32, 3], 10, "128C3/2-4x128C3-256C3/2-3x256C3-512C3/2-3x512C3-(2x512FC)", chain_shortcuts(0, 12))
        }
        "alexnet" => ([224, 224, 3], 1000, "(128C11/4)-P2-(256C5)-P2-(3x256C3)-P2-(3x4096FC)", vec![]),
        "vgg16" => ([224, 224, 3], 1000, "(2x64C3)-P2-(2x128C3)-P2-(3x256C3)-P2-2x(3x512C3-P2)-(3x4096FC)", vec![]),
        "resnet18" => (
            [224, 224, 3],
            1000,
            "64C7/4-4x64C3-128C3/2-3x128C3-256C3/2-3x256C3-512C3/2-3x512C3-(2x512FC)",
            chain_shortcuts(0, 16),
        ),
        _ => return Err(Error::Parse(format!("unknown preset `{name}` (expected one of {})", PRESETS.join(", ")))),
    };
    Ok(ModelSpec {
        name: name.to_string(),
        input,
        classes,
        layers: vec![layers.to_string()],
        shortcuts,
        epsilon: DEFAULT_EPSILON,
        explicit_bn: vec![],
    })
}

/// A preset with its spatial input size replaced.
pub fn preset_with_input(name: &str, h: usize, w: usize) -> Result<ModelSpec> {
    let mut spec = preset(name)?;
    spec.input[0] = h;
    spec.input[1] = w;
    Ok(spec)
}
