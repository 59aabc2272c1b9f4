use proptest::prelude::*;
use tpuimac::imac::{
    adc_quantize, argmax, decode, encode_ternary, forward_fc, forward_fc_analog, neuron, program_crossbar, CrossbarConfig,
    TernaryMatrix,
};
use tpuimac::mptrain::{sign_binarize, ternarize};

fn ternary(rows: usize, cols: usize) -> impl Strategy<Value = TernaryMatrix> {
    prop::collection::vec(-1i8..=1, rows * cols).prop_map(move |v| TernaryMatrix::new(rows, cols, v).unwrap())
}

fn signs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { -1.0 }), n)
}

fn reference(layers: &[TernaryMatrix], x: &[f64], slope: f64) -> Vec<f64> {
    let mut act = x.to_vec();
    for w in layers {
        act = (0..w.cols())
            .map(|j| {
                let u: f64 = (0..w.rows()).map(|i| act[i] * w.get(i, j) as f64).sum();
                1.0 / (1.0 + (-slope * u).exp())
            })
            .collect();
    }
    act
}

proptest! {
    #[test]
    fn encode_decode_roundtrip(g_off in 1e-7f64..1e-4, ratio in 1.01f64..1e3) {
        let cfg = CrossbarConfig { g_on: g_off * ratio, g_off, ..CrossbarConfig::default() };
        for w in [-1i8, 0, 1] {
            prop_assert_eq!(decode(encode_ternary(w, &cfg).unwrap(), &cfg), w as f64);
        }
    }

    #[test]
    fn mvm_is_the_integer_product(w in ternary(16, 8), x in signs(16)) {
        let xbar = program_crossbar(&w, &CrossbarConfig::default(), None).unwrap();
        let got = xbar.mvm(&x).unwrap();
        for (j, &g) in got.iter().enumerate() {
            let expect: i32 = (0..16).map(|i| x[i] as i32 * w.get(i, j) as i32).sum();
            prop_assert_eq!(g, expect as f64);
        }
    }

    #[test]
    fn sign_flip_antisymmetry(w in ternary(12, 5), x in signs(12)) {
        let xbar = program_crossbar(&w, &CrossbarConfig::default(), None).unwrap();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let a = xbar.mvm(&x).unwrap();
        let b = xbar.mvm(&neg).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert_eq!(*p, -*q);
        }
    }

    #[test]
    fn chained_layers_match_reference(w1 in ternary(20, 9), w2 in ternary(9, 4), x in signs(20), slope in 0.05f64..2.0) {
        let cfg = CrossbarConfig { neuron_slope: slope, ..CrossbarConfig::default() };
        let xbars = vec![program_crossbar(&w1, &cfg, None).unwrap(), program_crossbar(&w2, &cfg, None).unwrap()];
        let exact = reference(&[w1, w2], &x, slope);
        let analog = forward_fc_analog(&xbars, &x).unwrap();
        for (a, e) in analog.iter().zip(&exact) {
            prop_assert!((a - e).abs() <= 1e-9 * e.abs());
        }
        let coded = forward_fc(&xbars, &x).unwrap();
        for (q, e) in coded.iter().zip(&exact) {
            prop_assert!((q - e).abs() <= cfg.lsb() / 2.0 + 1e-12);
        }
        let mut sorted = exact.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if sorted[0] - sorted[1] > cfg.lsb() {
            prop_assert_eq!(argmax(&coded), argmax(&exact));
        }
    }

    #[test]
    fn sigmoid_preserves_argmax(u in prop::collection::vec(-40i32..40, 1..20), slope in 0.01f64..0.5) {
        // Integer pre-activations, as a ±1 crossbar produces; kept below saturation.
        let u: Vec<f64> = u.into_iter().map(f64::from).collect();
        let cfg = CrossbarConfig { neuron_slope: slope, ..CrossbarConfig::default() };
        let y: Vec<f64> = u.iter().map(|&v| neuron(v, &cfg)).collect();
        prop_assert_eq!(u[argmax(&y)], u[argmax(&u)]);
    }

    #[test]
    fn adc_error_within_half_lsb(y in prop::collection::vec(0.0f64..=1.0, 1..30), bits in 1u32..12) {
        let cfg = CrossbarConfig { adc_bits: bits, ..CrossbarConfig::default() };
        for (q, v) in adc_quantize(&y, &cfg).unwrap().iter().zip(&y) {
            prop_assert!((q - v).abs() <= cfg.lsb() / 2.0 + 1e-15);
        }
    }

    #[test]
    fn variation_is_seed_deterministic(w in ternary(6, 6), seed in any::<u64>(), x in signs(6)) {
        let cfg = CrossbarConfig { variation_sigma: 0.05, ..CrossbarConfig::default() };
        let a = program_crossbar(&w, &cfg, Some(seed)).unwrap();
        let b = program_crossbar(&w, &cfg, Some(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.mvm(&x).unwrap(), b.mvm(&x).unwrap());
    }

    #[test]
    fn ternarize_codomain_and_scale(v in prop::collection::vec(-3.0f64..3.0, 12), alpha in 0.001f64..1000.0) {
        let w = ndarray::Array2::from_shape_vec((3, 4), v).unwrap();
        let t = ternarize(&w);
        prop_assert!(t.values().iter().all(|x| (-1..=1).contains(x)));
        prop_assert_eq!(t, ternarize(&(&w * alpha)));
    }

    #[test]
    fn sign_binarize_is_scale_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..20), eps in 1e-6f64..10.0) {
        let s = sign_binarize(&v);
        prop_assert!(s.iter().all(|&x| x == 1.0 || x == -1.0));
        let scaled: Vec<f64> = s.iter().map(|x| x * eps).collect();
        prop_assert_eq!(sign_binarize(&scaled), s);
    }
}
