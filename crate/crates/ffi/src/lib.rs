//! C ABI over the btnn engine.
//!
//! Every function returns a [`BtnnStatus`]. On failure a message is kept
//! per thread and can be read with [`btnn_last_error`]. Handles are opaque
//! and owned by the caller, who releases them with the matching `_free`.
//! Panics never cross the boundary; they become `BTNN_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use btnn::bconv::{ActLayout, RealTensor};
use btnn::bitcore::{dot_pm1, pack_signs, to_fsb, BitBuffer, BitMatrix, FsbGeometry, Major};
use btnn::bmm::{bmm_pm1, Variant};
use btnn::nn::{convert_weights, preset, Engine, FloatWeights, ModelPlan, ModelSpec, RunOptions, WeightStore};
use btnn::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BtnnStatus {
    Ok = 0,
    InvalidInput = 1,
    UnsupportedShape = 2,
    Validation = 3,
    CorruptFile = 4,
    Load = 5,
    Parse = 6,
    Io = 7,
    Check = 8,
    NullPointer = 9,
    Panic = 10,
}

pub const BTNN_LAYOUT_PLAIN: u32 = 0;
pub const BTNN_LAYOUT_FSB: u32 = 1;

pub const BTNN_VARIANT_NAIVE: u32 = 0;
pub const BTNN_VARIANT_BLOCKED: u32 = 1;
pub const BTNN_VARIANT_FSB: u32 = 2;

/// A validated model structure.
pub struct BtnnModel(ModelPlan);

/// Float weights before binarization.
pub struct BtnnFloatWeights(FloatWeights);

/// Packed weights as stored in a weight file.
pub struct BtnnWeights(WeightStore);

/// A model bound to its weights; safe to use from several threads at once.
pub struct BtnnEngine(Engine);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Engine(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

fn status_of(e: &Error) -> BtnnStatus {
    match e {
        Error::InvalidInput(_) => BtnnStatus::InvalidInput,
        Error::UnsupportedShape(_) => BtnnStatus::UnsupportedShape,
        Error::Validation { .. } => BtnnStatus::Validation,
        Error::CorruptFile(_) => BtnnStatus::CorruptFile,
        Error::Load(_) => BtnnStatus::Load,
        Error::Parse(_) => BtnnStatus::Parse,
        Error::Io(_) => BtnnStatus::Io,
        Error::Check(_) => BtnnStatus::Check,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BtnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BtnnStatus::Ok,
        Ok(Err(Failure::Engine(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            BtnnStatus::NullPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            BtnnStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Error::InvalidInput(format!("{what} is not UTF-8")).into())
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn layout_arg(v: u32) -> Result<ActLayout, Failure> {
    match v {
        BTNN_LAYOUT_PLAIN => Ok(ActLayout::Plain),
        BTNN_LAYOUT_FSB => Ok(ActLayout::Fsb),
        _ => Err(Error::InvalidInput(format!("unknown layout {v}")).into()),
    }
}

fn variant_arg(v: u32) -> Result<Variant, Failure> {
    match v {
        BTNN_VARIANT_NAIVE => Ok(Variant::Naive),
        BTNN_VARIANT_BLOCKED => Ok(Variant::Blocked),
        BTNN_VARIANT_FSB => Ok(Variant::Fsb),
        _ => Err(Error::InvalidInput(format!("unknown variant {v}")).into()),
    }
}

/// Message for the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn btnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn btnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a JSON model spec.
#[no_mangle]
pub unsafe extern "C" fn btnn_model_from_json(json: *const c_char, out: *mut *mut BtnnModel) -> BtnnStatus {
    guard(|| {
        let spec = ModelSpec::from_json(str_arg(json, "json")?)?;
        put(out, BtnnModel(spec.plan()?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn btnn_model_from_file(path: *const c_char, out: *mut *mut BtnnModel) -> BtnnStatus {
    guard(|| {
        let spec = ModelSpec::from_file(str_arg(path, "path")?)?;
        put(out, BtnnModel(spec.plan()?))
    })
}

/// One of the built-in structures: mlp, cifar-vgg, resnet14, alexnet,
/// vgg16, resnet18.
#[no_mangle]
pub unsafe extern "C" fn btnn_model_preset(name: *const c_char, out: *mut *mut BtnnModel) -> BtnnStatus {
    guard(|| {
        let spec = preset(str_arg(name, "name")?)?;
        put(out, BtnnModel(spec.plan()?))
    })
}

/// Input height, width, channels and the class count.
#[no_mangle]
pub unsafe extern "C" fn btnn_model_dims(
    model: *const BtnnModel,
    h: *mut usize,
    w: *mut usize,
    c: *mut usize,
    classes: *mut usize,
) -> BtnnStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        for (p, v) in [(h, m.input.h), (w, m.input.w), (c, m.input.c), (classes, m.classes)] {
            if p.is_null() {
                return Err(Failure::Null("dims out"));
            }
            *p = v;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn btnn_model_free(model: *mut BtnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Seeded random float weights shaped for `model`.
#[no_mangle]
pub unsafe extern "C" fn btnn_float_weights_random(
    model: *const BtnnModel,
    seed: u64,
    out: *mut *mut BtnnFloatWeights,
) -> BtnnStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        put(out, BtnnFloatWeights(FloatWeights::random(m, seed)))
    })
}

#[no_mangle]
pub unsafe extern "C" fn btnn_float_weights_load(path: *const c_char, out: *mut *mut BtnnFloatWeights) -> BtnnStatus {
    guard(|| put(out, BtnnFloatWeights(FloatWeights::load(str_arg(path, "path")?)?)))
}

#[no_mangle]
pub unsafe extern "C" fn btnn_float_weights_free(weights: *mut BtnnFloatWeights) {
    if !weights.is_null() {
        drop(Box::from_raw(weights));
    }
}

/// Binarizes and packs float weights in `layout`.
#[no_mangle]
pub unsafe extern "C" fn btnn_weights_convert(
    model: *const BtnnModel,
    weights: *const BtnnFloatWeights,
    layout: u32,
    out: *mut *mut BtnnWeights,
) -> BtnnStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        let mut fw = ref_arg(weights, "weights")?.0.clone();
        fw.validate(m)?;
        put(out, BtnnWeights(convert_weights(m, &fw, layout_arg(layout)?)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn btnn_weights_load(path: *const c_char, out: *mut *mut BtnnWeights) -> BtnnStatus {
    guard(|| put(out, BtnnWeights(WeightStore::load(str_arg(path, "path")?)?)))
}

#[no_mangle]
pub unsafe extern "C" fn btnn_weights_from_bytes(
    bytes: *const u8,
    len: usize,
    out: *mut *mut BtnnWeights,
) -> BtnnStatus {
    guard(|| put(out, BtnnWeights(WeightStore::from_bytes(slice_arg(bytes, len, "bytes")?)?)))
}

#[no_mangle]
pub unsafe extern "C" fn btnn_weights_save(weights: *const BtnnWeights, path: *const c_char) -> BtnnStatus {
    guard(|| Ok(ref_arg(weights, "weights")?.0.save(str_arg(path, "path")?)?))
}

#[no_mangle]
pub unsafe extern "C" fn btnn_weights_free(weights: *mut BtnnWeights) {
    if !weights.is_null() {
        drop(Box::from_raw(weights));
    }
}

/// Binds weights to a model, running activations in `layout`.
#[no_mangle]
pub unsafe extern "C" fn btnn_engine_new(
    model: *const BtnnModel,
    weights: *const BtnnWeights,
    layout: u32,
    out: *mut *mut BtnnEngine,
) -> BtnnStatus {
    guard(|| {
        let m = ref_arg(model, "model")?.0.clone();
        let w = &ref_arg(weights, "weights")?.0;
        put(out, BtnnEngine(Engine::new(m, w, layout_arg(layout)?)?))
    })
}

/// Runs `n` images given as f32 NHWC. Writes `n × classes` scores and `n`
/// labels; `labels` may be null.
#[no_mangle]
pub unsafe extern "C" fn btnn_engine_infer(
    engine: *const BtnnEngine,
    input: *const f32,
    n: usize,
    scores: *mut f64,
    scores_len: usize,
    labels: *mut u32,
) -> BtnnStatus {
    guard(|| {
        let e = &ref_arg(engine, "engine")?.0;
        let p = e.plan();
        let (h, w, c) = (p.input.h, p.input.w, p.input.c);
        let x = slice_arg(input, n * h * w * c, "input")?;
        if scores_len != n * p.classes {
            return Err(Error::InvalidInput(format!("scores holds {scores_len}, need {}", n * p.classes)).into());
        }
        let out = e.run(&RealTensor::from_nhwc(n, h, w, c, x)?, RunOptions::default())?;
        slice_out(scores, scores_len, "scores")?.copy_from_slice(&out.scores);
        if !labels.is_null() {
            for (d, &l) in slice_out(labels, n, "labels")?.iter_mut().zip(&out.labels) {
                *d = l as u32;
            }
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn btnn_engine_free(engine: *mut BtnnEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Number of 64-bit words holding `n` packed signs.
#[no_mangle]
pub extern "C" fn btnn_words_for(n: usize) -> usize {
    btnn::bitcore::words_for(n)
}

/// Packs `sign(values[i])` LSB-first into `words` (`btnn_words_for(n)` long).
#[no_mangle]
pub unsafe extern "C" fn btnn_pack_signs(
    values: *const f64,
    n: usize,
    words: *mut u64,
    words_len: usize,
) -> BtnnStatus {
    guard(|| {
        let b = pack_signs(slice_arg(values, n, "values")?)?;
        let dst = slice_out(words, words_len, "words")?;
        if dst.len() != b.words().len() {
            return Err(Error::InvalidInput(format!("need {} words, got {}", b.words().len(), dst.len())).into());
        }
        dst.copy_from_slice(b.words());
        Ok(())
    })
}

/// ±1 dot product of two packed vectors of `n` bits.
#[no_mangle]
pub unsafe extern "C" fn btnn_dot_pm1(a: *const u64, b: *const u64, n: usize, out: *mut i64) -> BtnnStatus {
    guard(|| {
        let len = btnn::bitcore::words_for(n);
        let a = BitBuffer::from_words(n, slice_arg(a, len, "a")?.to_vec())?;
        let b = BitBuffer::from_words(n, slice_arg(b, len, "b")?.to_vec())?;
        let v = dot_pm1(&a, &b, n)?;
        *out.as_mut().ok_or(Failure::Null("out"))? = v;
        Ok(())
    })
}

/// `sign(a) · sign(b)` for row-major `a` (m × n) and `b` (n × k); `n` must
/// be a multiple of 128. Writes m × k values row-major.
#[no_mangle]
pub unsafe extern "C" fn btnn_bmm_pm1_signs(
    a: *const f64,
    b: *const f64,
    m: usize,
    n: usize,
    k: usize,
    variant: u32,
    out: *mut i32,
) -> BtnnStatus {
    guard(|| {
        let v = variant_arg(variant)?;
        let am = BitMatrix::from_signs(m, n, slice_arg(a, m * n, "a")?, Major::Row)?;
        let bm = BitMatrix::from_signs(n, k, slice_arg(b, n * k, "b")?, Major::Col)?;
        let (am, bm) = if v == Variant::Fsb {
            (
                to_fsb(&am, FsbGeometry::default_for(am.rows(), am.padded_cols()))?,
                to_fsb(&bm, FsbGeometry::default_for(bm.cols(), bm.padded_rows()))?,
            )
        } else {
            (am, bm)
        };
        let r = bmm_pm1(&am, &bm, n, v)?;
        slice_out(out, m * k, "out")?.copy_from_slice(&r.data);
        Ok(())
    })
}
