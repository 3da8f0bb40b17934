use btnn::bconv::{
    bconv_fused, bconv_pm1, or_pool, ActLayout, Activation, BitFilterKKOC, BitTensorHWNC, ConvGeometry, PoolSpec,
    RealTensor,
};
use btnn::bitcore::{dot_pm1, from_fsb, pack_signs, to_fsb, BitMatrix, FsbGeometry, Major};
use btnn::bmm::{bmm_pm1, bmm_pm1_bin, Variant};
use btnn::nn::{
    bn_apply, convert_weights, fold_bn_sign, preset_with_input, shortcut_type_a, Batch, BnParams, FloatWeights, Shape,
    ThresholdSpec, WeightStore,
};
use btnn::oracle::{hard_tanh, ref_max_pool, sign};
use proptest::prelude::*;

fn pm_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { -1.0 }), len)
}

fn bn_params() -> impl Strategy<Value = BnParams> {
    (
        prop_oneof![3 => -4.0f64..4.0, 1 => Just(0.0), 1 => Just(-0.0)],
        -5.0f64..5.0,
        -200.0f64..200.0,
        0.0f64..50.0,
        prop_oneof![Just(1e-5), 1e-9f64..1.0],
    )
        .prop_map(|(g, b, m, v, e)| BnParams::new(g, b, m, v, e).unwrap())
}

fn real_tensor(h: usize, w: usize, n: usize, c: usize) -> impl Strategy<Value = RealTensor> {
    prop::collection::vec(-3.0f64..3.0, h * w * n * c).prop_map(move |d| RealTensor::from_vec(h, w, n, c, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dot_matches_pm1_sum(v in (1usize..400).prop_flat_map(|n| (pm_vec(n), pm_vec(n)))) {
        let (a, b) = v;
        let want: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let got = dot_pm1(&pack_signs(&a).unwrap(), &pack_signs(&b).unwrap(), a.len()).unwrap();
        prop_assert_eq!(got as f64, want);
    }

    #[test]
    fn fold_predicate_is_sign_of_bn(bn in bn_params(), x in prop_oneof![-1e4f64..1e4, (-3000i32..3000).prop_map(f64::from)]) {
        let t = fold_bn_sign(&bn).unwrap();
        prop_assert_eq!(t.test(x), bn.apply(x) >= 0.0);
    }

    #[test]
    fn fold_holds_at_the_threshold(bn in bn_params()) {
        let t = fold_bn_sign(&bn).unwrap();
        let tau = t.tau;
        for x in [tau, tau.next_up(), tau.next_down(), tau.floor(), tau.ceil()] {
            prop_assert_eq!(t.test(x), bn.apply(x) >= 0.0, "x={}", x);
        }
    }

    #[test]
    fn fsb_round_trip(
        rows in 1usize..70, cols in 1usize..300, major_row in any::<bool>(),
        tile in prop::sample::select(vec![(8usize, 128usize), (1, 64), (4, 32), (16, 64), (2, 96)]),
        seed in any::<u64>(),
    ) {
        let major = if major_row { Major::Row } else { Major::Col };
        let m = BitMatrix::from_fn(rows, cols, major, |r, c| (seed >> ((r * 7 + c * 13) % 64)) & 1 == 1);
        let (outer, inner) = if major_row { (m.rows(), m.padded_cols()) } else { (m.cols(), m.padded_rows()) };
        let g = FsbGeometry::covering(outer, inner, tile.0, tile.1).unwrap();
        let f = to_fsb(&m, g).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(f.get(r, c), m.get(r, c));
            }
        }
        prop_assert_eq!(from_fsb(&f).unwrap(), m);
    }

    #[test]
    fn bmm_variants_agree(m in 1usize..24, k in 1usize..24, words in 1usize..4, seed in any::<u64>()) {
        let n = 128 * words;
        let bit = |i: usize| (seed.rotate_left((i % 64) as u32) ^ (i as u64).wrapping_mul(0x9E37_79B9)) & 1 == 1;
        let a = BitMatrix::from_fn(m, n, Major::Row, |r, c| bit(r * n + c));
        let b = BitMatrix::from_fn(n, k, Major::Col, |r, c| bit(r * 3 + c * 5 + 1));
        let naive = bmm_pm1(&a, &b, n, Variant::Naive).unwrap();
        prop_assert_eq!(&bmm_pm1(&a, &b, n, Variant::Blocked).unwrap(), &naive);
        let fa = to_fsb(&a, FsbGeometry::default_for(a.rows(), a.padded_cols())).unwrap();
        let fb = to_fsb(&b, FsbGeometry::default_for(b.cols(), b.padded_rows())).unwrap();
        prop_assert_eq!(&bmm_pm1(&fa, &fb, n, Variant::Fsb).unwrap(), &naive);
        let thr: Vec<ThresholdSpec> = (0..k).map(|j| ThresholdSpec::geq(j as f64 - 8.0)).collect();
        let bin = bmm_pm1_bin(&a, &b, n, &thr, Variant::Blocked).unwrap();
        for i in 0..m {
            for j in 0..k {
                prop_assert_eq!(bin.get(i, j), naive.get(i, j) as f64 >= j as f64 - 8.0);
            }
        }
    }

    #[test]
    fn bconv_layout_independent(
        h in 1usize..7, w in 1usize..7, n in 1usize..10, c in 1usize..150, o in 1usize..10,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 >= k && w + 2 >= k);
        let bit = |i: usize| (seed >> (i % 61)) & 1 == 1 || i % 7 == 3;
        let x = BitTensorHWNC::from_fn(h, w, n, c, ActLayout::Plain, |a, b, d, e| bit(((a * w + b) * n + d) * c + e));
        let f = BitFilterKKOC::from_fn(k, k, o, c, ActLayout::Plain, |a, b, d, e| bit(a + 3 * b + 5 * d + 7 * e));
        let g = ConvGeometry::new(stride, 1);
        let plain = bconv_pm1(&x, &f, &g).unwrap();
        let fsb = bconv_pm1(&x.to_layout(ActLayout::Fsb), &f.to_layout(ActLayout::Fsb), &g).unwrap();
        prop_assert_eq!(plain, fsb);
    }

    #[test]
    fn fused_equals_unfused_chain(
        (h, w) in prop::sample::select(vec![(4usize, 4usize), (6, 2), (5, 5)]),
        n in 1usize..9, c in 1usize..140, o in 1usize..6,
        bn in prop::collection::vec(bn_params(), 5),
        seed in any::<u64>(), pool in any::<bool>(), residual in any::<bool>(),
        layout in prop::sample::select(vec![ActLayout::Plain, ActLayout::Fsb]),
    ) {
        let bn = &bn[..o];
        let bit = |i: usize| (seed.rotate_right((i % 64) as u32) ^ i as u64) & 2 == 2;
        let x = BitTensorHWNC::from_fn(h, w, n, c, layout, |a, b, d, e| bit(((a * w + b) * n + d) * c + e));
        let f = BitFilterKKOC::from_fn(3, 3, o, c, layout, |a, b, d, e| bit(a * 11 + b * 17 + d * 5 + e));
        let g = ConvGeometry::new(1, 1);
        let res = RealTensor::from_vec(h, w, n, o, (0..h * w * n * o).map(|i| ((i * 37 % 11) as f64 - 5.0) / 2.0).collect()).unwrap();
        let ps = if pool && h % 2 == 0 && w % 2 == 0 { Some(PoolSpec::new(2, 2)) } else { None };

        let mut y = bn_apply(&bconv_pm1(&x, &f, &g).unwrap().to_real(), bn).unwrap();
        if residual {
            for (a, b) in y.data.iter_mut().zip(&res.data) { *a += b; }
        }
        let mut want = BitTensorHWNC::from_real(&y, layout).unwrap();
        if let Some(p) = ps { want = or_pool(&want, p).unwrap(); }

        let act = Activation::BatchNorm { params: bn, residual_in: residual.then_some(&res), emit_residual: true };
        let got = bconv_fused(&x, &f, &g, &act, ps).unwrap();
        prop_assert_eq!(&got.bits, &want);
        prop_assert_eq!(got.residual.unwrap().data, y.data);
        if !residual {
            let thr: Vec<ThresholdSpec> = bn.iter().map(|b| fold_bn_sign(b).unwrap()).collect();
            let folded = bconv_fused(&x, &f, &g, &Activation::Threshold(&thr), ps).unwrap();
            prop_assert_eq!(&folded.bits, &want);
        }
    }

    #[test]
    fn or_pool_is_max_pool(
        x in (1usize..4, 1usize..4, 1usize..5, 1usize..140)
            .prop_flat_map(|(a, b, n, c)| real_tensor(2 * a, 2 * b, n, c)),
    ) {
        let bits = BitTensorHWNC::from_real(&x, ActLayout::Fsb).unwrap();
        let pooled = or_pool(&bits, PoolSpec::new(2, 2)).unwrap().to_pm1();
        let signs = RealTensor { data: x.data.iter().map(|&v| sign(v)).collect(), ..x.clone() };
        prop_assert_eq!(pooled, ref_max_pool(&signs, 2, 2).unwrap());
    }

    #[test]
    fn hard_tanh_is_invisible_to_sign(v in prop::num::f64::ANY.prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(sign(hard_tanh(v)), sign(v));
    }

    #[test]
    fn shortcut_halving_is_mean_and_zero_fill(x in real_tensor(4, 6, 3, 5), extra in 0usize..4) {
        let out = shortcut_type_a(&x, Shape { h: 2, w: 3, c: 5 + extra }).unwrap();
        for y in 0..2 {
            for w in 0..3 {
                for n in 0..3 {
                    for c in 0..5 + extra {
                        let want = if c < 5 {
                            (x.get(2 * y, 2 * w, n, c) + x.get(2 * y, 2 * w + 1, n, c)
                                + x.get(2 * y + 1, 2 * w, n, c) + x.get(2 * y + 1, 2 * w + 1, n, c)) / 4.0
                        } else {
                            0.0
                        };
                        prop_assert_eq!(out.get(y, w, n, c), want);
                    }
                }
            }
        }
        prop_assert_eq!(shortcut_type_a(&x, Shape { h: 4, w: 6, c: 5 }).unwrap(), x);
    }

    #[test]
    fn batch_bytes_round_trip(n in 1usize..4, h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
        let b = Batch::random(n, h, w, c, seed);
        let bytes = b.to_bytes();
        prop_assert_eq!(&bytes[..4], b"BTIN");
        prop_assert_eq!(Batch::from_bytes(&bytes).unwrap(), b);
    }
}

#[test]
fn weight_files_round_trip_bit_identically() {
    let plan = preset_with_input("cifar-vgg", 8, 8).unwrap().plan().unwrap();
    let fw = FloatWeights::random(&plan, 3);
    assert_eq!(FloatWeights::from_bytes(&fw.to_bytes()).unwrap(), fw);
    for layout in [ActLayout::Plain, ActLayout::Fsb] {
        let store = convert_weights(&plan, &fw, layout).unwrap();
        let bytes = store.to_bytes();
        assert_eq!(&bytes[..4], b"BTNN");
        let back = WeightStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in back.layers.iter().zip(&store.layers) {
            assert_eq!(a.words, b.words);
        }
    }
}

#[test]
fn truncated_weight_files_are_rejected() {
    let plan = preset_with_input("mlp", 4, 4).unwrap().plan().unwrap();
    let bytes = convert_weights(&plan, &FloatWeights::random(&plan, 1), ActLayout::Plain).unwrap().to_bytes();
    for cut in (0..bytes.len()).step_by(97) {
        assert!(WeightStore::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}
