//! Batch normalization and its folding into a per-channel threshold.
//!
//! The fold is exact with respect to floating-point evaluation: the
//! returned threshold selects precisely the finite inputs `x` for which
//! [`BnParams::apply`] yields a value `>= 0`. Because each step of the
//! normalization is a correctly rounded monotone operation, the computed
//! `bn(x)` is monotone in `x`, so the cut point can be found by bisection
//! over the ordered bit patterns of `f64`.

use serde::{Deserialize, Serialize};

use crate::bconv::RealTensor;
use crate::bitcore::sign_bit;
use crate::error::{invalid, Result};

/// Default normalization epsilon.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-channel batch-norm statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: f64,
    pub beta: f64,
    pub mean: f64,
    pub var: f64,
    pub eps: f64,
}

impl BnParams {
    pub fn new(gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> Result<Self> {
        let p = Self { gamma, beta, mean, var, eps };
        p.validate()?;
        Ok(p)
    }

    /// Statistics that leave the input unchanged.
    pub fn identity() -> Self {
        Self { gamma: 1.0, beta: 0.0, mean: 0.0, var: 1.0, eps: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma, self.beta, self.mean, self.var, self.eps];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite batch-norm parameters {self:?}")));
        }
        if self.var < 0.0 || self.eps < 0.0 {
            return Err(invalid("batch-norm variance and epsilon must be non-negative"));
        }
        if self.var + self.eps <= 0.0 {
            return Err(invalid("batch-norm variance + epsilon must be positive"));
        }
        Ok(())
    }

    /// `((x - mean) / sqrt(var + eps)) * gamma + beta`.
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        ((x - self.mean) / (self.var + self.eps).sqrt()) * self.gamma + self.beta
    }
}

/// How a threshold compares its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// +1 iff `x >= tau`.
    Geq,
    /// +1 iff `x <= tau`.
    Leq,
    /// Always +1.
    ConstPlus,
    /// Always -1.
    ConstMinus,
}

impl Direction {
    pub fn tag(self) -> u8 {
        match self {
            Direction::Geq => 0,
            Direction::Leq => 1,
            Direction::ConstPlus => 2,
            Direction::ConstMinus => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Direction::Geq,
            1 => Direction::Leq,
            2 => Direction::ConstPlus,
            3 => Direction::ConstMinus,
            _ => return None,
        })
    }
}

/// A folded `sign(bn(x))` as a single comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub tau: f64,
    pub direction: Direction,
}

impl ThresholdSpec {
    pub fn geq(tau: f64) -> Self {
        Self { tau, direction: Direction::Geq }
    }

    pub fn leq(tau: f64) -> Self {
        Self { tau, direction: Direction::Leq }
    }

    pub fn constant(plus: bool) -> Self {
        Self { tau: 0.0, direction: if plus { Direction::ConstPlus } else { Direction::ConstMinus } }
    }

    /// `x >= 0`, the plain sign binarization.
    pub fn sign() -> Self {
        Self::geq(0.0)
    }

    /// True means +1 (bit set).
    #[inline]
    pub fn test(&self, x: f64) -> bool {
        match self.direction {
            Direction::Geq => x >= self.tau,
            Direction::Leq => x <= self.tau,
            Direction::ConstPlus => true,
            Direction::ConstMinus => false,
        }
    }
}

/// Maps an `f64` to an integer key with the same ordering (for finite values).
fn order_key(x: f64) -> i64 {
    let bits = x.to_bits() as i64;
    if bits < 0 {
        i64::MIN - bits
    } else {
        bits
    }
}

fn from_order_key(k: i64) -> f64 {
    if k < 0 {
        f64::from_bits((i64::MIN - k) as u64)
    } else {
        f64::from_bits(k as u64)
    }
}

/// Bisects for the boundary of a monotone predicate over finite `f64`s.
/// `pred(lo)` and `pred(hi)` must differ; returns the last key for which
/// `pred` equals `pred(lo)`.
fn bisect(mut lo: i64, mut hi: i64, pred: impl Fn(f64) -> bool) -> i64 {
    let at_lo = pred(from_order_key(lo));
    while (hi as i128) - (lo as i128) > 1 {
        let mid = ((lo as i128 + hi as i128) / 2) as i64;
        if pred(from_order_key(mid)) == at_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Folds `sign(bn(x))` into a threshold comparison on `x`.
///
/// `gamma > 0` gives `x >= tau`, `gamma < 0` gives `x <= tau`, and
/// `gamma == 0` gives a constant decided by the sign of `beta`. `tau` sits at
/// the algebraic root `mean - beta * sqrt(var + eps) / gamma`, nudged to the
/// exact floating-point cut of [`BnParams::apply`].
pub fn fold_bn_sign(bn: &BnParams) -> Result<ThresholdSpec> {
    bn.validate()?;
    if bn.gamma == 0.0 {
        return Ok(ThresholdSpec::constant(sign_bit(bn.beta)));
    }
    let pos = |x: f64| sign_bit(bn.apply(x));
    let lo = order_key(f64::MIN);
    let hi = order_key(f64::MAX);
    let (at_lo, at_hi) = (pos(f64::MIN), pos(f64::MAX));
    if at_lo == at_hi {
        return Ok(ThresholdSpec::constant(at_lo));
    }
    let last = bisect(lo, hi, pos);
    Ok(if bn.gamma > 0.0 {
        // lo side is negative; the first positive key is the threshold
        ThresholdSpec::geq(from_order_key(last + 1))
    } else {
        ThresholdSpec::leq(from_order_key(last))
    })
}

/// Applies per-channel batch norm along the last axis of an HWNC tensor.
pub fn bn_apply(x: &RealTensor, bn: &[BnParams]) -> Result<RealTensor> {
    if bn.len() != x.c {
        return Err(invalid(format!("{} batch-norm channels for a tensor with {} channels", bn.len(), x.c)));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(x.c.max(1)) {
        for (v, p) in row.iter_mut().zip(bn) {
            *v = p.apply(*v);
        }
    }
    Ok(out)
}
