//! Writes reference cases to JSON files for the test suite.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bconv::RealTensor;
use crate::error::{Error, Result};
use crate::nn::{Batch, FloatWeights, ModelSpec, Shortcut, DEFAULT_EPSILON};
use crate::oracle::{ref_bmm, ref_conv_zero_pad, ref_pipeline, PmFilter, PmMatrix};

/// `a` is `m × n` row-major, `b` is `n × k` row-major; entries ±1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BmmFixture {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub a: Vec<i8>,
    pub b: Vec<i8>,
    pub expected: Vec<i32>,
}

/// Input HWNC and filter KKOC as ±1; expected PQNO.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvFixture {
    pub h: usize,
    pub w: usize,
    pub n: usize,
    pub c: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: Vec<i8>,
    pub filter: Vec<i8>,
    pub expected: Vec<i32>,
}

/// A model with seeded random weights and inputs, and the oracle's answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFixture {
    pub model: ModelSpec,
    pub weights_seed: u64,
    pub batch_seed: u64,
    pub batch: usize,
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureSet {
    pub seed: u64,
    pub bmm: Vec<BmmFixture>,
    pub conv: Vec<ConvFixture>,
    pub models: Vec<ModelFixture>,
}

fn pm(rng: &mut ChaCha8Rng, len: usize) -> Vec<i8> {
    (0..len).map(|_| if rng.gen() { 1 } else { -1 }).collect()
}

fn to_f64(v: &[i8]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl FixtureSet {
    /// Computes every expected value with the oracle.
    pub fn generate(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bmm = Vec::new();
        for &(m, n, k) in &[(8, 128, 8), (13, 256, 21), (1, 384, 9)] {
            let (a, b) = (pm(&mut rng, m * n), pm(&mut rng, n * k));
            let expected = ref_bmm(&PmMatrix::new(m, n, to_f64(&a))?, &PmMatrix::new(n, k, to_f64(&b))?)?.data;
            bmm.push(BmmFixture { m, n, k, a, b, expected });
        }
        let mut conv = Vec::new();
        for &(h, w, n, c, o, k, stride, pad) in
            &[(6, 6, 8, 128, 8, 3, 1, 1), (7, 5, 3, 200, 5, 3, 2, 1), (9, 9, 2, 64, 4, 5, 2, 2)]
        {
            let (input, filter) = (pm(&mut rng, h * w * n * c), pm(&mut rng, k * k * o * c));
            let x = RealTensor::from_vec(h, w, n, c, to_f64(&input))?;
            let f = PmFilter::new(k, k, o, c, to_f64(&filter))?;
            let expected = ref_conv_zero_pad(&x, &f, stride, pad)?.data;
            conv.push(ConvFixture { h, w, n, c, o, k, stride, pad, input, filter, expected });
        }
        let mut models = Vec::new();
        let specs = [
            ModelSpec {
                name: "tiny-mlp".into(),
                input: [6, 6, 1],
                classes: 4,
                layers: vec!["2x40FC".into()],
                shortcuts: vec![],
                epsilon: DEFAULT_EPSILON,
                explicit_bn: vec![1],
            },
            ModelSpec {
                name: "tiny-res".into(),
                input: [8, 8, 3],
                classes: 5,
                layers: vec!["16C3-16C3-32C3/2-P2-24FC".into()],
                shortcuts: vec![Shortcut { from: 0, to: 1 }, Shortcut { from: 1, to: 2 }],
                epsilon: DEFAULT_EPSILON,
                explicit_bn: vec![],
            },
        ];
        for model in specs {
            let plan = model.plan()?;
            let (weights_seed, batch_seed, batch) = (rng.gen(), rng.gen(), 9);
            let fw = FloatWeights::random(&plan, weights_seed);
            let b = Batch::random(batch, plan.input.h, plan.input.w, plan.input.c, batch_seed);
            let out = ref_pipeline(&plan, &fw, &b)?;
            models.push(ModelFixture {
                model,
                weights_seed,
                batch_seed,
                batch,
                labels: out.labels,
                scores: out.scores,
            });
        }
        Ok(Self { seed, bmm, conv, models })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Writes `fixtures.json` into `dir` and returns its path.
pub fn emit_fixtures(dir: impl AsRef<Path>, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.as_ref())?;
    let path = dir.as_ref().join("fixtures.json");
    let set = FixtureSet::generate(seed)?;
    std::fs::write(&path, serde_json::to_string(&set).expect("fixtures serialize"))?;
    Ok(path)
}
