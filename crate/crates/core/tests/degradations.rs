//! Linearity and generalized-inverse identities of the degradation
//! operators.

use nalgebra::DMatrix;
use proptest::prelude::*;
use pseudoflow::degradations::{level_centers, quantize, DegradationKind, DegradationOp};
use pseudoflow::numerics::rng::purpose;
use pseudoflow::numerics::{RngStream, Tensor};

fn dense(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    DMatrix::from_fn(r, c, |i, j| t.data()[i * c + j] as f64)
}

fn operators() -> Vec<(&'static str, DegradationOp)> {
    vec![
        (
            "identity",
            DegradationOp::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(),
        ),
        ("select", DegradationOp::from_rows(&[&[1.0, 0.0]]).unwrap()),
        ("average", DegradationOp::from_rows(&[&[0.5, 0.5]]).unwrap()),
        (
            "avg-pool",
            DegradationOp::average_pool(&[1, 8, 8], 4).unwrap(),
        ),
        (
            "avg-pool-rgb",
            DegradationOp::average_pool(&[3, 4, 8], 2).unwrap(),
        ),
        ("bicubic", DegradationOp::bicubic(&[1, 8, 8], 2).unwrap()),
    ]
}

#[test]
fn moore_penrose_satisfies_both_generalized_inverse_identities() {
    for (name, op) in operators() {
        let d = dense(&op.matrix().unwrap());
        let p = dense(&op.moore_penrose().unwrap());
        let dpd = &d * &p * &d;
        let pdp = &p * &d * &p;
        assert!((dpd - &d).amax() < 1e-5, "{name}: D D+ D != D");
        assert!((pdp - &p).amax() < 1e-5, "{name}: D+ D D+ != D+");
        // The projectors are symmetric, which pins the Moore-Penrose inverse
        // among all reflexive generalized inverses.
        let dp = &d * &p;
        let pd = &p * &d;
        assert!((&dp - dp.transpose()).amax() < 1e-5, "{name}");
        assert!((&pd - pd.transpose()).amax() < 1e-5, "{name}");
    }
}

#[test]
fn fast_pseudoinverse_agrees_with_the_dense_one() {
    let mut rng = RngStream::new(2, purpose::EVAL);
    for (name, op) in operators() {
        let p = op.moore_penrose().unwrap();
        let y = rng.normal_tensor(&[3, op.output_len()]);
        let fast = op
            .pseudoinverse()
            .unwrap()
            .apply(&y.reshape(batched(3, op.output_shape())).unwrap())
            .unwrap();
        let pm = dense(&p);
        for n in 0..3 {
            let yv = nalgebra::DVector::from_iterator(
                op.output_len(),
                y.data()[n * op.output_len()..(n + 1) * op.output_len()]
                    .iter()
                    .map(|&v| v as f64),
            );
            let x = &pm * yv;
            for (i, xi) in x.iter().enumerate() {
                let got = fast.data()[n * op.input_len() + i] as f64;
                assert!((got - xi).abs() < 1e-4, "{name}: {got} vs {xi}");
            }
        }
    }
}

fn batched(n: usize, item: &[usize]) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(item);
    s
}

#[test]
fn antialiased_bicubic_preserves_constants_at_every_scale() {
    for s in [2, 4] {
        for c in [1, 3] {
            let op = DegradationOp::spatial(DegradationKind::BicubicDownsample, &[c, 32, 32], s)
                .unwrap();
            let x = Tensor::full(vec![c, 32, 32], 0.37f32);
            let y = op.apply(&x).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn spatial_operators_are_linear(
        seed in any::<u64>(),
        kind in prop_oneof![
            Just(DegradationKind::AveragePool),
            Just(DegradationKind::BicubicDownsample),
            Just(DegradationKind::NearestSubsample),
        ],
        s in 2usize..5,
        a in -3.0f32..3.0,
        b in -3.0f32..3.0,
    ) {
        let op = DegradationOp::spatial(kind, &[2, 4 * s, 2 * s], s).unwrap();
        let mut rng = RngStream::new(seed, purpose::EVAL);
        let x1 = rng.normal_tensor(&[3, 2, 4 * s, 2 * s]);
        let x2 = rng.normal_tensor(&[3, 2, 4 * s, 2 * s]);
        let combo = x1.scale(a).add(&x2.scale(b)).unwrap();
        let lhs = op.apply(&combo).unwrap();
        let rhs = op.apply(&x1).unwrap().scale(a).add(&op.apply(&x2).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-4);
        prop_assert_eq!(lhs.shape(), &[3, 2, 4, 2][..]);
    }

    #[test]
    fn pseudoinverse_outputs_are_consistent(seed in any::<u64>(), s in 2usize..5, pool in any::<bool>()) {
        let kind = if pool { DegradationKind::AveragePool } else { DegradationKind::BicubicDownsample };
        let op = DegradationOp::spatial(kind, &[1, 4 * s, 4 * s], s).unwrap();
        let y = RngStream::new(seed, purpose::EVAL).uniform_tensor(&[2, 1, 4, 4], 0.0, 1.0);
        let x = op.pseudoinverse().unwrap().apply(&y).unwrap();
        prop_assert!(op.apply(&x).unwrap().max_abs_diff(&y).unwrap() < 1e-5);
    }

    #[test]
    fn quantization_inverts_level_centres(levels in proptest::collection::vec(any::<u8>(), 1..64)) {
        let x = level_centers(&levels, &[levels.len()]).unwrap();
        prop_assert_eq!(quantize(&x), levels);
    }

    #[test]
    fn quantization_rounds_to_the_nearest_level(v in -0.5f32..1.5) {
        let q = quantize(&Tensor::from_vec(vec![1], vec![v]).unwrap())[0];
        let centre = (q as f32 + 0.5) / 256.0;
        let inside = (0.0..1.0).contains(&v);
        prop_assert!(!inside || (centre - v).abs() <= 0.5 / 256.0 + 1e-6);
    }
}
