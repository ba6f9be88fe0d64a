//! Randomized property tests over the tensor engine.

use proptest::prelude::*;
use seid_core::layers::{conv_out_size, ConvSpec};
use seid_core::tape::Tape;
use seid_core::tensor::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        n in 1usize..5,
        m in 1usize..6,
        shift in -5.0..5.0f64,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * m).map(|_| rng.random_range(-8.0..8.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_dims(&[n, m], data.clone()).unwrap());
        let p = tape.softmax(x).unwrap();
        let pd = tape.value(p).data.clone();
        for row in pd.chunks(m) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
        // invariance to a constant shift of the logits
        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let xs = tape.constant(Tensor::from_dims(&[n, m], shifted).unwrap());
        let ps = tape.softmax(xs).unwrap();
        for (a, b) in pd.iter().zip(&tape.value(ps).data) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_output_shape_matches_formula(
        n in 1usize..3,
        cin in 1usize..4,
        cout in 1usize..4,
        h in 3usize..10,
        k in 1usize..4,
        stride in 1usize..3,
        pad in 0usize..2,
    ) {
        prop_assume!(h + 2 * pad >= k);
        let spec = ConvSpec::new(cin, cout, k, stride, pad, true).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[n, cin, h, h]));
        let w = tape.constant(Tensor::zeros(&spec.weight_dims()));
        let b = tape.constant(Tensor::zeros(&[cout]));
        let y = tape.conv2d(x, w, Some(b), spec).unwrap();
        let out = conv_out_size(h, k, stride, pad).unwrap();
        prop_assert_eq!(tape.value(y).shape.dims(), &[n, cout, out, out]);
    }

    #[test]
    fn add_mul_elementwise_agree_with_scalar_arithmetic(
        ab in proptest::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 1..20),
    ) {
        let len = ab.len();
        let (a, b): (Vec<f64>, Vec<f64>) = ab.into_iter().unzip();
        let mut tape = Tape::new();
        let va = tape.constant(Tensor::from_dims(&[len], a.clone()).unwrap());
        let vb = tape.constant(Tensor::from_dims(&[len], b.clone()).unwrap());
        let sum = tape.add(va, vb).unwrap();
        let prod = tape.mul(va, vb).unwrap();
        for i in 0..len {
            prop_assert_eq!(tape.value(sum).data[i], a[i] + b[i]);
            prop_assert_eq!(tape.value(prod).data[i], a[i] * b[i]);
        }
    }

    #[test]
    fn concat_then_split_round_trips(
        n in 1usize..3,
        c1 in 1usize..4,
        c2 in 1usize..4,
        hw in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d1: Vec<f64> = (0..n * c1 * hw * hw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d2: Vec<f64> = (0..n * c2 * hw * hw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_dims(&[n, c1, hw, hw], d1.clone()).unwrap());
        let b = tape.constant(Tensor::from_dims(&[n, c2, hw, hw], d2.clone()).unwrap());
        let cat = tape.concat(&[a, b]).unwrap();
        let cd = &tape.value(cat).data;
        prop_assert_eq!(tape.value(cat).shape.dims(), &[n, c1 + c2, hw, hw]);
        // channels of a then channels of b, per sample
        let plane = hw * hw;
        for ni in 0..n {
            for ci in 0..c1 {
                let src = &d1[(ni * c1 + ci) * plane..(ni * c1 + ci + 1) * plane];
                let dst = &cd[(ni * (c1 + c2) + ci) * plane..(ni * (c1 + c2) + ci + 1) * plane];
                prop_assert_eq!(src, dst);
            }
            for ci in 0..c2 {
                let src = &d2[(ni * c2 + ci) * plane..(ni * c2 + ci + 1) * plane];
                let dst = &cd[(ni * (c1 + c2) + c1 + ci) * plane
                    ..(ni * (c1 + c2) + c1 + ci + 1) * plane];
                prop_assert_eq!(src, dst);
            }
        }
    }
}
