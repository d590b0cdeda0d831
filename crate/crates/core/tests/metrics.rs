//! Image-quality metrics against direct reference formulas.

use proptest::prelude::*;
use pseudoflow::degradations::DegradationOp;
use pseudoflow::metrics::{consistency, evaluate_pair, mse, psnr, ssim, EvalReport, PSNR_CAP};
use pseudoflow::numerics::rng::purpose;
use pseudoflow::numerics::{RngStream, Tensor};

/// Straight-line SSIM: every 7x7 window fully inside the image, population
/// moments, averaged over windows and channels.
fn reference_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let at = |t: &Tensor, i: usize, j: usize| t.data()[(ch * h + i) * w + j] as f64;
        let mut sum = 0.0;
        for i in 0..=h - 7 {
            for j in 0..=w - 7 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for di in 0..7 {
                    for dj in 0..7 {
                        ma += at(a, i + di, j + dj);
                        mb += at(b, i + di, j + dj);
                    }
                }
                ma /= 49.0;
                mb /= 49.0;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for di in 0..7 {
                    for dj in 0..7 {
                        let (x, y) = (at(a, i + di, j + dj) - ma, at(b, i + di, j + dj) - mb);
                        va += x * x;
                        vb += y * y;
                        cov += x * y;
                    }
                }
                let (va, vb, cov) = (va / 49.0, vb / 49.0, cov / 49.0);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total += sum / ((h - 6) * (w - 6)) as f64;
    }
    total / c as f64
}

#[test]
fn identical_images_score_perfectly() {
    let x = RngStream::new(0, purpose::EVAL).uniform_tensor(&[3, 16, 16], 0.0, 1.0);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    let d = DegradationOp::average_pool(&[3, 16, 16], 4).unwrap();
    let y = d.apply(&x).unwrap();
    let row = evaluate_pair("same", &x, &x, &y, &d).unwrap();
    let report = EvalReport::new(vec![row], &d).unwrap();
    assert_eq!(report.mean_psnr(), PSNR_CAP);
    assert!(report.mean_consistency() < 1e-6);
}

#[test]
fn kernel_perturbations_keep_consistency() {
    // Adding a zero-mean pattern inside each pooling block leaves D(x) alone.
    let d = DegradationOp::average_pool(&[1, 8, 8], 2).unwrap();
    let x = RngStream::new(1, purpose::EVAL).uniform_tensor(&[1, 8, 8], 0.2, 0.8);
    let wiggle = Tensor::from_fn(vec![1, 8, 8], |k| {
        let (i, j) = (k / 8, k % 8);
        if (i + j) % 2 == 0 {
            0.1
        } else {
            -0.1
        }
    });
    let y = d.apply(&x).unwrap();
    let x2 = x.add(&wiggle).unwrap();
    assert!(consistency(&y, &x2, &d).unwrap() < 1e-6);
    assert!(psnr(&x2, &x, 1.0).unwrap() < 25.0);
}

#[test]
fn empty_reports_are_rejected() {
    let d = DegradationOp::average_pool(&[1, 8, 8], 2).unwrap();
    assert!(EvalReport::new(vec![], &d).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn ssim_matches_the_direct_formula(seed in any::<u64>(), c in 1usize..4, h in 7usize..14, w in 7usize..14, noise in 0.0f32..0.5) {
        let mut rng = RngStream::new(seed, purpose::EVAL);
        let a = rng.uniform_tensor(&[c, h, w], 0.0, 1.0);
        let b = a.add(&rng.normal_tensor(&[c, h, w]).scale(noise)).unwrap();
        let got = ssim(&a, &b).unwrap();
        let want = reference_ssim(&a, &b);
        prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        prop_assert!((ssim(&b, &a).unwrap() - got).abs() < 1e-12);
        prop_assert!(got <= 1.0 + 1e-12);
    }

    #[test]
    fn psnr_is_symmetric_and_decreases_with_error(seed in any::<u64>(), e1 in 0.001f32..0.1, k in 1.1f32..4.0) {
        let mut rng = RngStream::new(seed, purpose::EVAL);
        let x = rng.uniform_tensor(&[1, 8, 8], 0.0, 1.0);
        let n = rng.normal_tensor(&[1, 8, 8]);
        let small = x.add(&n.scale(e1)).unwrap();
        let large = x.add(&n.scale(e1 * k)).unwrap();
        let p_small = psnr(&small, &x, 1.0).unwrap();
        prop_assert!((p_small - psnr(&x, &small, 1.0).unwrap()).abs() < 1e-12);
        prop_assert!(p_small > psnr(&large, &x, 1.0).unwrap());
        let m = mse(&small, &x).unwrap();
        prop_assert!((p_small - (-10.0 * m.log10())).abs() < 1e-9);
        // Doubling the peak adds 20·log10(2) dB.
        prop_assert!((psnr(&small, &x, 2.0).unwrap() - p_small - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn report_means_ignore_row_order(seed in any::<u64>(), n in 2usize..8) {
        let d = DegradationOp::average_pool(&[1, 8, 8], 2).unwrap();
        let mut rng = RngStream::new(seed, purpose::EVAL);
        let mut rows = Vec::new();
        for i in 0..n {
            let x = rng.uniform_tensor(&[1, 8, 8], 0.0, 1.0);
            let sr = x.add(&rng.normal_tensor(&[1, 8, 8]).scale(0.05)).unwrap();
            rows.push(evaluate_pair(&format!("{i}"), &sr, &x, &d.apply(&x).unwrap(), &d).unwrap());
        }
        let fwd = EvalReport::new(rows.clone(), &d).unwrap();
        rows.reverse();
        let rev = EvalReport::new(rows, &d).unwrap();
        prop_assert!((fwd.mean_psnr() - rev.mean_psnr()).abs() < 1e-9);
        prop_assert!((fwd.mean_ssim() - rev.mean_ssim()).abs() < 1e-12);
        prop_assert!((fwd.mean_consistency() - rev.mean_consistency()).abs() < 1e-9);
        prop_assert!((fwd.consistency_stderr() - rev.consistency_stderr()).abs() < 1e-9);
    }
}
