#![allow(dead_code)]

use btnn::bconv::ActLayout;
use btnn::nn::{convert_weights, Batch, Engine, FloatWeights, ModelPlan, RunOptions};
use btnn::oracle::OracleOutput;

/// Engine run compared against a reference run of the same model.
#[derive(Debug)]
pub struct ModelCheck {
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
    pub labels_equal: bool,
    /// Every captured activation equals the reference ±1 tensor.
    pub bits_equal: bool,
    pub max_rel_err: f64,
}

impl ModelCheck {
    pub fn ok(&self) -> bool {
        self.labels_equal && self.bits_equal && self.max_rel_err <= 1e-9
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }
}

pub fn check_model(
    plan: &ModelPlan,
    fw: &FloatWeights,
    batch: &Batch,
    layout: ActLayout,
    expect: &OracleOutput,
) -> ModelCheck {
    let store = convert_weights(plan, fw, layout).expect("convert");
    let engine = Engine::new(plan.clone(), &store, layout).expect("engine");
    let out = engine.run(&batch.to_tensor().unwrap(), RunOptions { timings: false, capture: true }).expect("run");
    let bits_equal = out.activations.iter().all(|(i, bits)| bits.to_pm1().data == expect.activations[*i].data);
    let max_rel_err = out.scores.iter().zip(&expect.scores).map(|(&a, &b)| rel_err(a, b)).fold(0.0, f64::max);
    ModelCheck {
        labels_equal: out.labels == expect.labels,
        labels: out.labels,
        scores: out.scores,
        bits_equal,
        max_rel_err,
    }
}
