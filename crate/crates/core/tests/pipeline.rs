//! Reproducibility and persistence of the training and sampling pipeline.

use proptest::prelude::*;
use pseudoflow::numerics::Tensor;
use pseudoflow::pipeline::config::MAX_SEED;
use pseudoflow::pipeline::corpus::generate_corpus;
use pseudoflow::pipeline::toy::{oracle_problem, toy_config};
use pseudoflow::pipeline::{
    sample_posterior, train_ddpm, train_flow, Dataset, DdpmModel, ExperimentConfig, FlowModel,
    ImageSet,
};

fn small_toy(seed: u64) -> ExperimentConfig {
    let mut cfg = toy_config(&[vec![0.5, 0.5]], 0.05, seed).unwrap();
    cfg.training.flow_iters = 40;
    cfg.training.ddpm_iters = 40;
    cfg.training.batch_size = 32;
    cfg.training.log_every = 10;
    cfg.training.eval_samples = 100;
    cfg.diffusion.steps = 50;
    cfg
}

fn small_images() -> (ExperimentConfig, Dataset) {
    let cfg = ExperimentConfig::from_toml(
        r#"
[problem]
kind = "image"
[problem.degradation]
kind = "average-pool"
scale = 2
input_shape = [3, 8, 8]
[flow]
layers = 2
hidden = 8
[diffusion]
steps = 20
hidden = 8
blocks = 1
embed_dim = 8
cache_latents = true
[training]
sigma = 0.05
batch_size = 4
flow_iters = 6
ddpm_iters = 6
log_every = 2
"#,
    )
    .unwrap();
    let data = Dataset::Images(ImageSet::new(&[3, 8, 8], generate_corpus(3, 0, 10, 3, 8)).unwrap());
    (cfg, data)
}

#[test]
fn identical_runs_write_identical_files() {
    let cfg = small_toy(11);
    let data = Dataset::Gaussian { dim: 2 };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let flow = train_flow(&cfg, &data, Some(d.path())).unwrap();
        train_ddpm(&cfg, &flow.model, &data, Some(d.path())).unwrap();
    }
    for f in [
        "flow.ckpt",
        "flow_metrics.csv",
        "ddpm.ckpt",
        "ddpm_metrics.csv",
    ] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert!(!a.is_empty(), "{f}");
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let other = tempfile::tempdir().unwrap();
    train_flow(&small_toy(12), &data, Some(other.path())).unwrap();
    assert_ne!(
        std::fs::read(other.path().join("flow_metrics.csv")).unwrap(),
        std::fs::read(dirs[0].path().join("flow_metrics.csv")).unwrap()
    );
}

#[test]
fn reloaded_models_sample_bit_identically() {
    let (cfg, data) = small_images();
    let dir = tempfile::tempdir().unwrap();
    let flow = train_flow(&cfg, &data, Some(dir.path())).unwrap().model;
    let ddpm = train_ddpm(&cfg, &flow, &data, Some(dir.path()))
        .unwrap()
        .model;
    let flow2 = FlowModel::load(&dir.path().join("flow.ckpt")).unwrap();
    let ddpm2 = DdpmModel::load(&dir.path().join("ddpm.ckpt")).unwrap();
    for (a, b) in flow.params.iter().zip(flow2.params.iter()) {
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.data(), b.1.data());
    }
    assert_eq!(
        flow2.to_checkpoint().to_bytes(),
        flow.to_checkpoint().to_bytes()
    );
    assert_eq!(
        ddpm2.to_checkpoint().to_bytes(),
        ddpm.to_checkpoint().to_bytes()
    );

    let y = Tensor::full(vec![3, 3, 4, 4], 0.5f32);
    let s1 = sample_posterior(&y, &flow, &ddpm, 20, 5).unwrap();
    let s2 = sample_posterior(&y, &flow2, &ddpm2, 20, 5).unwrap();
    assert_eq!(s1.x.data(), s2.x.data());
    assert_eq!(s1.nfe, 21);
    assert_eq!(s1.x.shape(), &[3, 3, 8, 8]);
    let s3 = sample_posterior(&y, &flow, &ddpm, 20, 6).unwrap();
    assert_ne!(s1.x.data(), s3.x.data());
}

#[test]
fn samples_do_not_depend_on_batch_composition() {
    let cfg = small_toy(3);
    let data = Dataset::Gaussian { dim: 2 };
    let flow = train_flow(&cfg, &data, None).unwrap().model;
    let ddpm = train_ddpm(&cfg, &flow, &data, None).unwrap().model;
    let y = Tensor::from_vec(vec![300, 1], (0..300).map(|i| i as f32 / 100.0).collect()).unwrap();
    let all = sample_posterior(&y, &flow, &ddpm, 10, 1).unwrap();
    let tail = pseudoflow::pipeline::sample::sample_posterior_from(
        &y.rows(257, 300).unwrap(),
        &flow,
        &ddpm,
        10,
        1,
        257,
    )
    .unwrap();
    assert_eq!(tail.x.data(), &all.x.data()[257 * 2..]);
}

#[test]
fn seeds_beyond_the_config_range_are_rejected() {
    assert!(toy_config(&[vec![1.0, 0.0]], 0.05, MAX_SEED).is_ok());
    assert!(toy_config(&[vec![1.0, 0.0]], 0.05, MAX_SEED + 1).is_err());
    let mut cfg = small_toy(0);
    cfg.training.seed = u64::MAX;
    assert!(cfg.validate().is_err());
}

#[test]
fn sampling_validates_its_inputs() {
    let cfg = small_toy(0);
    let data = Dataset::Gaussian { dim: 2 };
    let flow = train_flow(&cfg, &data, None).unwrap().model;
    let ddpm = train_ddpm(&cfg, &flow, &data, None).unwrap().model;
    let y = Tensor::zeros(vec![2, 1]);
    assert!(sample_posterior(&y, &flow, &ddpm, 0, 0).is_err());
    assert!(sample_posterior(&y, &flow, &ddpm, 51, 0).is_err());
    assert!(sample_posterior(&Tensor::zeros(vec![2, 2]), &flow, &ddpm, 5, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn configs_survive_a_text_roundtrip(seed in 0..=MAX_SEED, sigma in 1e-3f64..1.0, a in -2.0f64..2.0, b in 0.1f64..2.0) {
        let cfg = toy_config(&[vec![a, b]], sigma, seed).unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(&back, &cfg);
        let p = oracle_problem(&back, &[1.0]).unwrap();
        // The operator stores single-precision entries.
        prop_assert!((p.d()[(0, 1)] - b).abs() <= 1e-7 * b.abs());
    }

    #[test]
    fn corpus_images_are_reproducible(seed in any::<u64>(), idx in 0u64..1000) {
        let a = generate_corpus(seed, idx, 2, 3, 8);
        let b = generate_corpus(seed, idx + 1, 1, 3, 8);
        prop_assert_eq!(a.len(), 2);
        prop_assert_eq!(&a[1], &b[0]);
        prop_assert_eq!(a[0].len(), 3 * 64);
    }
}
