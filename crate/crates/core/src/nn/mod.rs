//! Layer algebra, model and weight formats, and the inference pipeline.

mod bn;
mod io;
mod model;
mod pipeline;
mod shortcut;
mod weights;

pub use bn::{bn_apply, fold_bn_sign, BnParams, Direction, ThresholdSpec, DEFAULT_EPSILON};
pub use io::Batch;
pub use model::{
    expand_shorthand, preset, preset_with_input, LayerKind, LayerSpec, ModelPlan, ModelSpec, Shape, Shortcut, PRESETS,
};
pub use pipeline::{argmax, Engine, LayerTiming, RunOptions, RunOutput};
pub use shortcut::shortcut_type_a;
pub use weights::{convert_weights, FloatLayer, FloatWeights, PackedLayer, WeightStore};
pub(crate) use weights::{fsb_cols, fsb_rows};
