//! Reverse-mode gradients against central differences, and the
//! persistence and randomness guarantees of the numerics layer.

use proptest::prelude::*;
use pseudoflow::numerics::rng::purpose;
use pseudoflow::numerics::{
    gradcheck, Bindings, Checkpoint, Graph, Objective, ParamStore, Real, RngStream, Tensor, Var,
};
use pseudoflow::Result;

/// Each variant wires the trainable tensors `a` and `b` through one
/// family of operations and reduces to a scalar.
#[derive(Clone, Copy, Debug)]
enum Op {
    Matmul,
    Elementwise,
    Conv,
    Pooling,
    Slicing,
}

impl Objective for Op {
    fn loss<R: Real>(&self, g: &Graph<R>, p: &Bindings) -> Result<Var> {
        let a = p.get("a")?;
        let b = p.get("b")?;
        let out = match self {
            Op::Matmul => g.tanh(g.matmul(a, b)?),
            Op::Elementwise => {
                let s = g.add(g.mul(a, b)?, g.exp(g.scale(a, 0.5)))?;
                let q = g.div(g.silu(s), g.add_scalar(g.square(b), 1.0))?;
                g.add(g.soft_clamp(q, 1.5), g.log(g.add_scalar(g.square(a), 0.5)))?
            }
            Op::Conv => g.relu(g.conv2d(a, b, None, 1)?),
            Op::Pooling => {
                let up = g.upsample_nearest2d(g.avg_pool2d(a, 2)?, 2)?;
                g.mul(g.sub(a, up)?, b)?
            }
            Op::Slicing => {
                let left = g.slice(a, 1, 0, 2)?;
                let right = g.slice(a, 1, 2, 2)?;
                let joined = g.concat(&[g.mul(right, b)?, left], 1)?;
                g.reshape(joined, &[4, 2])?
            }
        };
        let weights = g.constant(Tensor::<R>::from_fn(g.shape(out), |i| {
            R::of(0.3 + 0.1 * (i % 7) as f64)
        }));
        Ok(g.sum_all(g.square(g.mul(out, weights)?)))
    }
}

fn store(seed: u64, a: &[usize], b: &[usize]) -> ParamStore {
    let mut rng = RngStream::new(seed, purpose::INIT);
    let mut p = ParamStore::new();
    p.insert("a", rng.normal_tensor(a).scale(0.7).with_grad())
        .unwrap();
    p.insert("b", rng.normal_tensor(b).scale(0.7).with_grad())
        .unwrap();
    p
}

fn shapes(op: Op) -> (Vec<usize>, Vec<usize>) {
    match op {
        Op::Matmul => (vec![3, 4], vec![4, 2]),
        Op::Elementwise => (vec![2, 3], vec![2, 3]),
        Op::Conv => (vec![2, 2, 4, 4], vec![3, 2, 3, 3]),
        Op::Pooling => (vec![1, 2, 4, 4], vec![1, 2, 4, 4]),
        Op::Slicing => (vec![2, 4], vec![2, 2]),
    }
}

#[test]
fn every_operation_family_passes_gradcheck() {
    for op in [
        Op::Matmul,
        Op::Elementwise,
        Op::Conv,
        Op::Pooling,
        Op::Slicing,
    ] {
        for seed in 0..3 {
            let (a, b) = shapes(op);
            let p = store(seed, &a, &b);
            let report = gradcheck(&op, &p, 1e-4, 1e-3).unwrap();
            assert!(report.passed, "{op:?} seed {seed}: {:?}", report.worst);
            assert_eq!(report.checked, p.num_scalars());
        }
    }
}

#[test]
fn gradcheck_catches_a_wrong_gradient() {
    let op = Op::Matmul;
    let (a, b) = shapes(op);
    let p = store(0, &a, &b);
    let (_, mut analytic) = pseudoflow::numerics::grad(&p, |g, b| op.loss(g, b)).unwrap();
    analytic.get_mut("a").unwrap().data_mut()[2] += 0.5;
    let report = pseudoflow::numerics::compare_gradients(&op, &p, &analytic, 1e-4, 1e-3).unwrap();
    assert!(!report.passed);
    assert_eq!(report.failures.len(), 1);
    assert_eq!(
        (report.failures[0].path.as_str(), report.failures[0].index),
        ("a", 2)
    );
}

#[test]
fn checkpoints_roundtrip_bit_exactly() {
    let mut p = store(4, &[3, 5], &[7]);
    p.insert(
        "frozen",
        Tensor::from_vec(vec![2], vec![f32::MIN_POSITIVE, -0.0]).unwrap(),
    )
    .unwrap();
    let ck = Checkpoint::new(p.clone())
        .with_meta("kind", "test")
        .with_meta("note", "multi\nline = value");
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.meta("note").unwrap(), "multi\nline = value");
    for (path, t) in p.iter() {
        let u = back.params.get(path).unwrap();
        assert_eq!(t.shape(), u.shape());
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t), bits(u), "{path}");
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), bytes);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let bytes = Checkpoint::new(store(1, &[2, 2], &[3])).to_bytes();
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            Checkpoint::from_bytes(&bytes[..cut]).is_err(),
            "truncated at {cut}"
        );
    }
}

proptest! {
    #[test]
    fn streams_are_pure_functions_of_seed_stream_and_index(seed in any::<u64>(), stream in 0u64..16, idx in 0u64..1000) {
        let mut a = RngStream::new(seed, stream).substream(idx);
        let mut b = RngStream::new(seed, stream).substream(idx);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        prop_assert_eq!(&xs, &ys);
        let mut c = RngStream::new(seed, stream).substream(idx + 1);
        let zs: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        prop_assert_ne!(&xs, &zs);
        let mut d = RngStream::new(seed, stream + 16).substream(idx);
        let ws: Vec<u64> = (0..8).map(|_| d.next_u64()).collect();
        prop_assert_ne!(xs, ws);
    }

    #[test]
    fn uniforms_stay_in_the_unit_interval(seed in any::<u64>()) {
        let mut r = RngStream::new(seed, purpose::EVAL);
        for _ in 0..256 {
            let u = r.uniform();
            prop_assert!((0.0..1.0).contains(&u));
            prop_assert!(r.below(7) < 7);
        }
    }

    #[test]
    fn matmul_gradient_is_the_outer_product(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        // d/dA sum(A B) = 1 Bᵀ, so every row of the gradient equals the row sums of B.
        let mut p = ParamStore::new();
        let mut rng = RngStream::new(seed, purpose::INIT);
        p.insert("a", rng.normal_tensor(&[m, k]).with_grad()).unwrap();
        let bmat = rng.normal_tensor(&[k, n]);
        let (_, grads) = pseudoflow::numerics::grad(&p, |g, bind| {
            let out = g.matmul(bind.get("a")?, g.constant(bmat.clone()))?;
            Ok(g.sum_all(out))
        }).unwrap();
        let ga = grads.get("a").unwrap();
        for i in 0..m {
            for j in 0..k {
                let expected: f32 = bmat.data()[j * n..(j + 1) * n].iter().sum();
                prop_assert!((ga.data()[i * k + j] - expected).abs() < 1e-5);
            }
        }
    }
}
