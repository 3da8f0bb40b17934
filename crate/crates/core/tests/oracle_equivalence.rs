mod common;

use btnn::bconv::{bconv_pm1, ActLayout, BitFilterKKOC, BitTensorHWNC, ConvGeometry, RealTensor};
use btnn::bitcore::{to_fsb, BitMatrix, FsbGeometry, Major};
use btnn::bmm::{bmm_pm1, Variant};
use btnn::nn::{preset_with_input, Batch, FloatWeights, ModelSpec, Shortcut, DEFAULT_EPSILON};
use btnn::oracle::{ref_bmm, ref_conv_zero_pad, ref_pipeline, PmFilter, PmMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::check_model;

fn pm(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect()
}

#[test]
fn bmm_variants_match_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..12 {
        let (m, n, k) = (rng.gen_range(1..40), 128 * rng.gen_range(1..4), rng.gen_range(1..40));
        let (a, b) = (pm(&mut rng, m * n), pm(&mut rng, n * k));
        let want = ref_bmm(&PmMatrix::new(m, n, a.clone()).unwrap(), &PmMatrix::new(n, k, b.clone()).unwrap()).unwrap();
        let ab = BitMatrix::from_signs(m, n, &a, Major::Row).unwrap();
        let bb = BitMatrix::from_signs(n, k, &b, Major::Col).unwrap();
        for v in [Variant::Naive, Variant::Blocked] {
            assert_eq!(bmm_pm1(&ab, &bb, n, v).unwrap(), want, "{v} {m}x{n}x{k}");
        }
        let fa = to_fsb(&ab, FsbGeometry::default_for(ab.rows(), ab.padded_cols())).unwrap();
        let fb = to_fsb(&bb, FsbGeometry::default_for(bb.cols(), bb.padded_rows())).unwrap();
        assert_eq!(bmm_pm1(&fa, &fb, n, Variant::Fsb).unwrap(), want);
    }
}

#[test]
fn bconv_matches_zero_padded_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..3));
        let (h, w) = (rng.gen_range(k..k + 6), rng.gen_range(k..k + 6));
        let (n, c, o) = (rng.gen_range(1..10), rng.gen_range(1..200), rng.gen_range(1..12));
        let x = RealTensor::from_vec(h, w, n, c, pm(&mut rng, h * w * n * c)).unwrap();
        let f = pm(&mut rng, k * k * o * c);
        let want = ref_conv_zero_pad(&x, &PmFilter::new(k, k, o, c, f.clone()).unwrap(), stride, pad).unwrap();
        for layout in [ActLayout::Plain, ActLayout::Fsb] {
            let xb = BitTensorHWNC::from_real(&x, layout).unwrap();
            let fb = BitFilterKKOC::from_signs(k, k, o, c, &f, layout).unwrap();
            let got = bconv_pm1(&xb, &fb, &ConvGeometry::new(stride, pad)).unwrap();
            assert_eq!(got, want);
        }
    }
}

fn small_models() -> Vec<ModelSpec> {
    vec![
        ModelSpec {
            name: "mlp".into(),
            input: [5, 5, 2],
            classes: 6,
            layers: vec!["3x100FC".into()],
            shortcuts: vec![],
            epsilon: DEFAULT_EPSILON,
            explicit_bn: vec![],
        },
        ModelSpec {
            name: "res".into(),
            input: [12, 12, 3],
            classes: 10,
            layers: vec!["32C3-32C3-32C3-64C3/2-64C3-P2-50FC".into()],
            shortcuts: vec![Shortcut { from: 0, to: 2 }, Shortcut { from: 2, to: 4 }],
            epsilon: DEFAULT_EPSILON,
            explicit_bn: vec![1],
        },
        ModelSpec {
            name: "vgg".into(),
            input: [10, 8, 1],
            classes: 3,
            layers: vec!["20C5p1-MP2-130C3-P2/1-20FC".into()],
            shortcuts: vec![],
            epsilon: 1e-3,
            explicit_bn: vec![],
        },
    ]
}

#[test]
fn engine_matches_oracle_on_every_intermediate() {
    for (i, spec) in small_models().into_iter().enumerate() {
        let plan = spec.plan().unwrap();
        let fw = FloatWeights::random(&plan, 40 + i as u64);
        let batch = Batch::random(11, plan.input.h, plan.input.w, plan.input.c, 90 + i as u64);
        let expect = ref_pipeline(&plan, &fw, &batch).unwrap();
        for layout in [ActLayout::Plain, ActLayout::Fsb] {
            let c = check_model(&plan, &fw, &batch, layout, &expect);
            assert!(c.ok(), "{} {layout}: {c:?}", spec.name);
        }
    }
}

#[test]
fn resnet14_structure_matches_oracle() {
    let plan = preset_with_input("resnet14", 16, 16).unwrap().plan().unwrap();
    let fw = FloatWeights::random(&plan, 5);
    let batch = Batch::random(8, 16, 16, 3, 6);
    let expect = ref_pipeline(&plan, &fw, &batch).unwrap();
    let c = check_model(&plan, &fw, &batch, ActLayout::Fsb, &expect);
    assert!(c.ok(), "{c:?}");
}
