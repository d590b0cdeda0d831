use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pseudoflow::pipeline::{DdpmModel, FlowModel};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pseudoflow"));
    c.env_remove("PSEUDOFLOW_OUT_DIR")
        .env("PSEUDOFLOW_THREADS", "2");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const VECTOR_CONFIG: &str = r#"
[problem]
kind = "vector"
measurement_dither = true

[problem.degradation]
kind = "linear-matrix"
input_shape = [2]
matrix = [[1.0, 0.0]]

[flow]
layers = 2
hidden = 8

[diffusion]
steps = 20
hidden = 16
blocks = 1
embed_dim = 8

[training]
sigma = 0.1
batch_size = 32
flow_iters = 30
ddpm_iters = 30
log_every = 10
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// Trains both phases of the vector toy into `dir/run`.
fn train_vector(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, VECTOR_CONFIG);
    let out = dir.join("run");
    let o = run(&["train-flow", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let flow = out.join("flow.ckpt");
    let o = run(&[
        "train-ddpm",
        "--config",
        p(&cfg),
        "--flow",
        p(&flow),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn train_flow_writes_a_reloadable_checkpoint_and_reproducible_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_vector(dir.path());
    let flow = FlowModel::load(&out.join("flow.ckpt")).unwrap();
    assert_eq!(flow.sigma, 0.1);
    DdpmModel::load(&out.join("ddpm.ckpt")).unwrap();
    let log = std::fs::read(out.join("flow_metrics.csv")).unwrap();

    let cfg = dir.path().join("config.toml");
    let again = dir.path().join("again");
    let o = run(&["train-flow", "--config", p(&cfg), "--out", p(&again)]);
    assert!(o.status.success());
    assert_eq!(log, std::fs::read(again.join("flow_metrics.csv")).unwrap());
    assert_eq!(
        std::fs::read(out.join("flow.ckpt")).unwrap(),
        std::fs::read(again.join("flow.ckpt")).unwrap()
    );

    let other = dir.path().join("other");
    let o = run(&[
        "train-flow",
        "--config",
        p(&cfg),
        "--seed",
        "7",
        "--out",
        p(&other),
    ]);
    assert!(o.status.success());
    assert_ne!(log, std::fs::read(other.join("flow_metrics.csv")).unwrap());
}

#[test]
fn output_directory_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), VECTOR_CONFIG);
    let out = dir.path().join("from-env");
    let o = bin()
        .args([
            "train-flow",
            "--config",
            p(&cfg),
            "--set",
            "training.flow_iters=5",
        ])
        .env("PSEUDOFLOW_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("flow.ckpt").is_file());
}

#[test]
fn missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
[problem]
kind = "image"
data_dir = "no-such-images"
[problem.degradation]
kind = "average-pool"
scale = 2
input_shape = [1, 8, 8]
"#,
    );
    let o = run(&[
        "train-flow",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no-such-images"), "{}", stderr(&o));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train-flow", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    let cfg = write_config(dir.path(), &format!("{VECTOR_CONFIG}\n[extra]\nkey = 1\n"));
    let o = run(&[
        "train-flow",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("extra"), "{}", stderr(&o));
    let cfg = write_config(dir.path(), VECTOR_CONFIG);
    let o = run(&[
        "train-flow",
        "--config",
        p(&cfg),
        "--set",
        "training.sigma=-1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), VECTOR_CONFIG);
    let o = run(&[
        "train-flow",
        "--config",
        p(&cfg),
        "--set",
        "training.sigma=1e-30",
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

#[test]
fn train_ddpm_rejects_a_mismatched_flow() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_vector(dir.path());
    let cfg3 = dir.path().join("three.toml");
    std::fs::write(
        &cfg3,
        VECTOR_CONFIG
            .replace("input_shape = [2]", "input_shape = [3]")
            .replace("[[1.0, 0.0]]", "[[1.0, 0.0, 0.0]]"),
    )
    .unwrap();
    let o = run(&[
        "train-ddpm",
        "--config",
        p(&cfg3),
        "--flow",
        p(&out.join("flow.ckpt")),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
}

#[test]
fn vector_sampling_is_seeded_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_vector(dir.path());
    let input = dir.path().join("y.txt");
    std::fs::write(&input, "2.0\n-1.0\n\n0.5\n").unwrap();
    let sample = |nfe: &str, seed: &str, to: &str| {
        run(&[
            "sample",
            "--flow",
            p(&out.join("flow.ckpt")),
            "--ddpm",
            p(&out.join("ddpm.ckpt")),
            "--input",
            p(&input),
            "--nfe",
            nfe,
            "--seed",
            seed,
            "--out",
            p(&dir.path().join(to)),
        ])
    };
    assert!(sample("1", "3", "one").status.success());
    let manifest = std::fs::read_to_string(dir.path().join("one/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    assert!(
        manifest.lines().nth(1).unwrap().ends_with(",3,0,2,0"),
        "{manifest}"
    );

    assert!(sample("20", "3", "a").status.success());
    assert!(sample("20", "3", "b").status.success());
    let a = std::fs::read(dir.path().join("a/samples.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/samples.csv")).unwrap());
    assert!(sample("20", "4", "c").status.success());
    assert_ne!(a, std::fs::read(dir.path().join("c/samples.csv")).unwrap());

    let o = sample("21", "3", "d");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--nfe"));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        let o = run(&[
            "gen-data",
            "--out",
            p(&dir.path().join(d)),
            "--count",
            "3",
            "--seed",
            "5",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in [
        "hr/000002.png",
        "lr/000002.png",
        "corpus.csv",
        "degradation.toml",
    ] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let img = image::open(dir.path().join("a/lr/000000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (8, 8));
}

#[test]
fn eval_scores_identical_and_pseudoinverse_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(&[
        "gen-data",
        "--out",
        p(&data),
        "--count",
        "2",
        "--size",
        "16",
        "--scale",
        "2",
    ]);
    assert!(o.status.success());
    // Average pooling has nearest upsampling as its pseudoinverse, which is
    // exact on 8-bit levels.
    let desc = dir.path().join("avg.toml");
    std::fs::write(
        &desc,
        "kind = \"average-pool\"\nscale = 2\ninput_shape = [1, 16, 16]\n",
    )
    .unwrap();
    for name in ["000000", "000001"] {
        let hr = image::open(data.join(format!("hr/{name}.png")))
            .unwrap()
            .to_luma8();
        let lr = image::imageops::resize(&hr, 8, 8, image::imageops::FilterType::Nearest);
        lr.save(dir.path().join(format!("lr{name}.png"))).unwrap();
        let up = image::imageops::resize(&lr, 16, 16, image::imageops::FilterType::Nearest);
        up.save(dir.path().join(format!("up{name}.png"))).unwrap();
    }
    let pairs = dir.path().join("same.csv");
    std::fs::write(&pairs, "sr,reference\ndata/hr/000000.png,data/hr/000000.png\ndata/hr/000001.png,data/hr/000001.png\n").unwrap();
    let report = dir.path().join("same_report.csv");
    let o = run(&[
        "eval",
        "--pairs",
        p(&pairs),
        "--degradation",
        p(&desc),
        "--out",
        p(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.ends_with("mean,99,1,0\n"), "{text}");

    let pairs = dir.path().join("pinv.csv");
    std::fs::write(&pairs, "sr,reference,measurement\nup000000.png,data/hr/000000.png,lr000000.png\nup000001.png,data/hr/000001.png,lr000001.png\n").unwrap();
    let o = run(&["eval", "--pairs", p(&pairs), "--degradation", p(&desc)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let mean: Vec<&str> = text.lines().last().unwrap().split(',').collect();
    assert!(mean[3].parse::<f64>().unwrap() < 1e-6, "{text}");

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "sr,reference\n").unwrap();
    let o = run(&["eval", "--pairs", p(&empty), "--degradation", p(&desc)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn toy2d_emits_oracle_data_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let toy = |to: &str| {
        run(&[
            "toy2d",
            "--iters",
            "40",
            "--ddpm-iters",
            "40",
            "--samples",
            "200",
            "--nfe",
            "10",
            "--no-sweep",
            "--out",
            p(&dir.path().join(to)),
        ])
    };
    let o = toy("a");
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read_to_string(dir.path().join("a/toy2d.csv")).unwrap();
    assert!(a.starts_with("kind,x1,x2\n"));
    assert!(a.contains("moore-penrose,2,0\n"), "oracle point missing");
    assert!(a.contains("feasibility,2,-4\n"));
    assert_eq!(a.lines().filter(|l| l.starts_with("flow,")).count(), 200);
    assert!(toy("b").status.success());
    assert_eq!(
        a,
        std::fs::read_to_string(dir.path().join("b/toy2d.csv")).unwrap()
    );
}
