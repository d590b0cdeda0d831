use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pseudoflow::degradations::{level_centers, quantize, DegradationDescriptor, DegradationOp};
use pseudoflow::metrics::{evaluate_pair, mse, EvalReport, EvalRow};
use pseudoflow::numerics::Tensor;
use pseudoflow::pipeline::corpus::generate_image;
use pseudoflow::pipeline::sample::sample_posterior_from;
use pseudoflow::pipeline::toy::{
    loglog_slope, run_toy, sigma_sweep, toy_config, write_toy_data, TOY_DDPM_ITERS, TOY_FLOW_ITERS,
};
use pseudoflow::pipeline::train::{FLOW_CHECKPOINT, FLOW_LOG};
use pseudoflow::pipeline::{
    train_ddpm, train_flow, Dataset, DdpmModel, ExperimentConfig, FlowModel, ProblemKind,
};

use crate::imageio::{file_stem, list_pngs, load_image_set, load_png, save_png};
use crate::CliError;

pub const OUT_DIR_ENV: &str = "PSEUDOFLOW_OUT_DIR";
pub const THREADS_ENV: &str = "PSEUDOFLOW_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "pseudoflow",
    version,
    about = "Consistent super-resolution with flow-based generative pseudoinverses"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the degradation flow; writes flow.ckpt and flow_metrics.csv.
    TrainFlow(TrainArgs),
    /// Train the conditional denoiser on a frozen flow.
    TrainDdpm {
        #[command(flatten)]
        train: TrainArgs,
        /// Flow checkpoint from `train-flow`.
        #[arg(long)]
        flow: PathBuf,
    },
    /// Draw one posterior sample per input measurement.
    Sample(SampleArgs),
    /// Score SR outputs against references.
    Eval(EvalArgs),
    /// Train and check the two-dimensional linear-Gaussian toy.
    Toy2d(ToyArgs),
    /// Write the synthetic image corpus.
    GenData(GenArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Config override, e.g. `--set training.sigma=0.1`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides `training.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $PSEUDOFLOW_OUT_DIR, then `io.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Flow checkpoint from `train-flow`.
    #[arg(long)]
    flow: PathBuf,
    /// Denoiser checkpoint from `train-ddpm`.
    #[arg(long)]
    ddpm: PathBuf,
    /// A PNG, a directory of PNGs, or (vector problems) a text file with
    /// one comma-separated measurement per line.
    #[arg(long)]
    input: PathBuf,
    /// Reverse-diffusion steps (denoiser evaluations per sample).
    #[arg(long, default_value_t = 100)]
    nfe: usize,
    /// Item i of the input list draws from stream (seed, i).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (default: $PSEUDOFLOW_OUT_DIR, then `samples`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// CSV with columns `sr` (or `output`), `reference` and optionally
    /// `measurement` (or `input`); relative paths are relative to the file.
    #[arg(long)]
    pairs: PathBuf,
    /// Degradation descriptor (TOML).
    #[arg(long)]
    degradation: PathBuf,
    /// Report path (default: `report.csv` next to the pairs file).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ToyArgs {
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    /// Flow training iterations.
    #[arg(long, default_value_t = TOY_FLOW_ITERS)]
    iters: usize,
    #[arg(long, default_value_t = TOY_DDPM_ITERS)]
    ddpm_iters: usize,
    /// Operator rows separated by `;`, entries by `,`.
    #[arg(long, default_value = "1,0")]
    matrix: String,
    /// Measurement to condition on, comma-separated.
    #[arg(long, default_value = "2")]
    y: String,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 1000)]
    nfe: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the σ-scaling table (σ·2, σ, σ/2).
    #[arg(long)]
    no_sweep: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Index of the first image.
    #[arg(long, default_value_t = 0)]
    start: u64,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Scale of the bicubic-downsampled `lr/` copies.
    #[arg(long, default_value_t = 4)]
    scale: usize,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainFlow(a) => cmd_train_flow(&a),
        Command::TrainDdpm { train, flow } => cmd_train_ddpm(&train, &flow),
        Command::Sample(a) => cmd_sample(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Toy2d(a) => cmd_toy2d(&a),
        Command::GenData(a) => cmd_gen_data(&a),
    }
}

fn out_dir(flag: &Option<PathBuf>, fallback: &Path) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| fallback.to_path_buf())
}

fn threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(avail, |n| n.min(avail))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::user(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::user(format!("cannot write {}: {e}", path.display())))
}

fn load_config(a: &TrainArgs) -> Result<(ExperimentConfig, PathBuf), CliError> {
    if !a.config.is_file() {
        return Err(CliError::user(format!(
            "config file {} does not exist",
            a.config.display()
        )));
    }
    let mut overrides = a.overrides.clone();
    if let Some(s) = a.seed {
        overrides.push(format!("training.seed={s}"));
    }
    let cfg = ExperimentConfig::load(&a.config, &overrides)?;
    let dir = out_dir(&a.out, &cfg.io.out_dir);
    create_dir(&dir)?;
    write_file(&dir.join("config.toml"), &cfg.to_toml())?;
    Ok((cfg, dir))
}

fn dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let op = cfg.degradation()?;
    match cfg.problem.kind {
        ProblemKind::Vector => Ok(Dataset::Gaussian {
            dim: op.input_len(),
        }),
        ProblemKind::Image => {
            let dir = cfg
                .problem
                .data_dir
                .as_ref()
                .ok_or_else(|| CliError::user("image problems need problem.data_dir"))?;
            Ok(Dataset::Images(load_image_set(dir, op.input_shape())?))
        }
    }
}

fn cmd_train_flow(a: &TrainArgs) -> Result<(), CliError> {
    let (cfg, dir) = load_config(a)?;
    let data = dataset(&cfg)?;
    let run = train_flow(&cfg, &data, Some(&dir))?;
    let last = run.log.rows().last().cloned().unwrap_or_default();
    println!(
        "trained flow for {} iterations; final loss {:?}; wrote {} and {}",
        cfg.training.flow_iters,
        last.get(2),
        dir.join(FLOW_CHECKPOINT).display(),
        dir.join(FLOW_LOG).display()
    );
    Ok(())
}

fn cmd_train_ddpm(a: &TrainArgs, flow_path: &Path) -> Result<(), CliError> {
    let (cfg, dir) = load_config(a)?;
    let flow = FlowModel::load(flow_path)?;
    let want = cfg.flow_config()?;
    let have = flow.flow.config();
    if want.input_shape != have.input_shape || want.y_shape() != have.y_shape() {
        return Err(CliError::user(format!(
            "flow checkpoint {} maps {:?} -> y {:?}, but the config describes {:?} -> y {:?}",
            flow_path.display(),
            have.input_shape,
            have.y_shape(),
            want.input_shape,
            want.y_shape()
        )));
    }
    let data = dataset(&cfg)?;
    let run = train_ddpm(&cfg, &flow, &data, Some(&dir))?;
    let last = run.log.rows().last().cloned().unwrap_or_default();
    println!(
        "trained denoiser for {} iterations; final loss {:?}; wrote {}",
        cfg.training.ddpm_iters,
        last.get(2),
        dir.display()
    );
    Ok(())
}

/// One measurement to sample from.
struct SampleInput {
    label: String,
    stem: String,
    y: Tensor,
}

fn read_sample_inputs(path: &Path, flow: &FlowModel) -> Result<Vec<SampleInput>, CliError> {
    let y_shape = flow.flow.config().y_shape();
    if flow.flow.config().is_image() {
        let files = if path.is_dir() {
            list_pngs(path)?
        } else if path.is_file() {
            vec![path.to_path_buf()]
        } else {
            return Err(CliError::user(format!(
                "input {} does not exist",
                path.display()
            )));
        };
        let mut out = Vec::new();
        for f in files {
            let (levels, h, w) = load_png(&f, y_shape[0])?;
            if (h, w) != (y_shape[1], y_shape[2]) {
                return Err(CliError::user(format!(
                    "{} is {h}x{w}, the flow measures {}x{}",
                    f.display(),
                    y_shape[1],
                    y_shape[2]
                )));
            }
            out.push(SampleInput {
                label: f.display().to_string(),
                stem: file_stem(&f),
                y: level_centers(&levels, &y_shape)?,
            });
        }
        Ok(out)
    } else {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user(format!("cannot read input {}: {e}", path.display())))?;
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Result<Vec<f32>, _> =
                line.split(',').map(|v| v.trim().parse::<f32>()).collect();
            let vals =
                vals.map_err(|e| CliError::user(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if vals.len() != y_shape[0] {
                return Err(CliError::user(format!(
                    "{}:{}: expected {} values, found {}",
                    path.display(),
                    i + 1,
                    y_shape[0],
                    vals.len()
                )));
            }
            out.push(SampleInput {
                label: format!("{}:{}", path.display(), i + 1),
                stem: format!("{:06}", out.len()),
                y: Tensor::new(y_shape.clone(), vals)?,
            });
        }
        Ok(out)
    }
}

fn cmd_sample(a: &SampleArgs) -> Result<(), CliError> {
    let flow = FlowModel::load(&a.flow)?;
    let ddpm = DdpmModel::load(&a.ddpm)?;
    ddpm.check_compatible(&flow)?;
    let t_max = ddpm.schedule.len();
    if a.nfe == 0 || a.nfe > t_max {
        return Err(CliError::user(format!(
            "--nfe must be in 1..={t_max}, got {}",
            a.nfe
        )));
    }
    let inputs = read_sample_inputs(&a.input, &flow)?;
    if inputs.is_empty() {
        return Err(CliError::user(format!(
            "no inputs found in {}",
            a.input.display()
        )));
    }
    let dir = out_dir(&a.out, Path::new("samples"));
    create_dir(&dir)?;

    // Contiguous chunks per worker; item i always uses substream i.
    let n = inputs.len();
    let workers = threads().min(n);
    let per = n.div_ceil(workers);
    let results: Vec<Result<Tensor, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(per)
            .map(|start| {
                let end = (start + per).min(n);
                let (flow, ddpm, inputs) = (&flow, &ddpm, &inputs);
                s.spawn(move || -> Result<Tensor, CliError> {
                    let ys: Vec<Tensor> = inputs[start..end].iter().map(|i| i.y.clone()).collect();
                    let y = Tensor::stack(&ys)?;
                    Ok(sample_posterior_from(&y, flow, ddpm, a.nfe, a.seed, start as u64)?.x)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(CliError::user("sampling worker panicked")))
            })
            .collect()
    });
    let mut parts = Vec::new();
    for r in results {
        parts.push(r?);
    }
    let x = Tensor::concat_rows(&parts)?;
    let item: Vec<usize> = x.item_shape().to_vec();
    let len: usize = item.iter().product();

    let mut manifest = String::from("input,output,seed,stream,nfe,quantization_mse\n");
    if flow.flow.config().is_image() {
        for (i, inp) in inputs.iter().enumerate() {
            let xi = Tensor::new(item.clone(), x.data()[i * len..(i + 1) * len].to_vec())?;
            let levels = quantize(&xi);
            let q = level_centers(&levels, &item)?;
            let name = format!("{}_sr.png", inp.stem);
            save_png(&dir.join(&name), &levels, &item)?;
            let _ = writeln!(
                manifest,
                "{},{name},{},{i},{},{}",
                inp.label,
                a.seed,
                a.nfe + 1,
                mse(&xi, &q)?
            );
        }
    } else {
        let mut csv: String = (1..=len)
            .map(|j| format!("x{j}"))
            .collect::<Vec<_>>()
            .join(",");
        csv.push('\n');
        for (i, inp) in inputs.iter().enumerate() {
            let row: Vec<String> = x.data()[i * len..(i + 1) * len]
                .iter()
                .map(|v| v.to_string())
                .collect();
            let _ = writeln!(csv, "{}", row.join(","));
            let _ = writeln!(
                manifest,
                "{},samples.csv:{},{},{i},{},0",
                inp.label,
                i + 1,
                a.seed,
                a.nfe + 1
            );
        }
        write_file(&dir.join("samples.csv"), &csv)?;
    }
    write_file(&dir.join("manifest.csv"), &manifest)?;
    println!(
        "wrote {n} samples ({} NFEs each) to {}",
        a.nfe + 1,
        dir.display()
    );
    Ok(())
}

struct PairRow {
    sr: PathBuf,
    reference: PathBuf,
    measurement: Option<PathBuf>,
}

fn read_pairs(path: &Path) -> Result<Vec<PairRow>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::user(format!(
            "cannot read pairs manifest {}: {e}",
            path.display()
        ))
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CliError::user(format!("pairs manifest {} is empty", path.display())))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |names: &[&str]| header.iter().position(|h| names.contains(h));
    let sr = col(&["sr", "output"])
        .ok_or_else(|| CliError::user("pairs manifest needs an `sr` column"))?;
    let reference = col(&["reference"])
        .ok_or_else(|| CliError::user("pairs manifest needs a `reference` column"))?;
    let measurement = col(&["measurement", "input"]);
    let resolve = |p: &str| {
        let p = PathBuf::from(p.trim());
        if p.is_relative() {
            base.join(p)
        } else {
            p
        }
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let get = |k: usize| {
            f.get(k).copied().ok_or_else(|| {
                CliError::user(format!(
                    "{}: row {} has too few columns",
                    path.display(),
                    i + 2
                ))
            })
        };
        rows.push(PairRow {
            sr: resolve(get(sr)?),
            reference: resolve(get(reference)?),
            measurement: match measurement {
                Some(k) => Some(resolve(get(k)?)),
                None => None,
            },
        });
    }
    if rows.is_empty() {
        return Err(CliError::user(format!(
            "pairs manifest {} lists no pairs",
            path.display()
        )));
    }
    Ok(rows)
}

fn load_image_tensor(path: &Path, shape: &[usize]) -> Result<Tensor, CliError> {
    let (levels, h, w) = load_png(path, shape[0])?;
    if (h, w) != (shape[1], shape[2]) {
        return Err(CliError::user(format!(
            "{} is {h}x{w}, expected {}x{}",
            path.display(),
            shape[1],
            shape[2]
        )));
    }
    Ok(level_centers(&levels, shape)?)
}

fn eval_row(row: &PairRow, d: &DegradationOp) -> Result<EvalRow, CliError> {
    let x_sr = load_image_tensor(&row.sr, d.input_shape())?;
    let x_ref = load_image_tensor(&row.reference, d.input_shape())?;
    let y = match &row.measurement {
        Some(p) => load_image_tensor(p, d.output_shape())?,
        None => d.apply(&x_ref)?,
    };
    Ok(evaluate_pair(&file_stem(&row.sr), &x_sr, &x_ref, &y, d)?)
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.degradation).map_err(|e| {
        CliError::user(format!(
            "cannot read degradation {}: {e}",
            a.degradation.display()
        ))
    })?;
    let base = a.degradation.parent();
    let d = DegradationOp::from_descriptor(&DegradationDescriptor::from_text(&text)?, base)?;
    if d.input_shape().len() != 3 {
        return Err(CliError::user(
            "eval scores images; the degradation must act on [C, H, W]",
        ));
    }
    let pairs = read_pairs(&a.pairs)?;
    let n = pairs.len();
    let per = n.div_ceil(threads().min(n));
    let rows: Vec<Result<EvalRow, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(per)
            .map(|chunk| {
                let d = &d;
                s.spawn(move || chunk.iter().map(|r| eval_row(r, d)).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| {
                h.join()
                    .unwrap_or_else(|_| vec![Err(CliError::user("evaluation worker panicked"))])
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = EvalReport::new(rows, &d)?;
    let out = a.out.clone().unwrap_or_else(|| {
        a.pairs
            .parent()
            .unwrap_or(Path::new("."))
            .join("report.csv")
    });
    write_file(&out, &report.to_csv())?;
    print!("{}", report.summary());
    println!("report written to {}", out.display());
    Ok(())
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| CliError::user(format!("{what}: {v:?}: {e}")))
        })
        .collect()
}

fn cmd_toy2d(a: &ToyArgs) -> Result<(), CliError> {
    let rows = a
        .matrix
        .split(';')
        .map(|r| parse_list(r, "--matrix"))
        .collect::<Result<Vec<_>, _>>()?;
    let y = parse_list(&a.y, "--y")?;
    let mut cfg = toy_config(&rows, a.sigma, a.seed)?;
    cfg.training.flow_iters = a.iters;
    cfg.training.ddpm_iters = a.ddpm_iters;
    cfg.validate()?;
    let dir = out_dir(&a.out, Path::new("runs/toy2d"));
    create_dir(&dir)?;
    write_file(&dir.join("config.toml"), &cfg.to_toml())?;
    let run = run_toy(&cfg, &y, a.samples, a.nfe, Some(&dir))?;
    write_toy_data(&dir.join("toy2d.csv"), &run.problem, &run.samples, a.seed)?;
    let mut summary = run.report.summary();
    if !a.no_sweep {
        let sigmas = [2.0 * a.sigma, a.sigma, a.sigma / 2.0];
        let pts = sigma_sweep(&cfg, &sigmas)?;
        let slope = loglog_slope(&pts)?;
        let mut table = String::from("sigma,fit_mse,fit_mse_over_sigma_sq\n");
        for (s, f) in &pts {
            let _ = writeln!(table, "{s},{f},{}", f / (s * s));
        }
        let _ = writeln!(table, "# log-log slope {slope}");
        write_file(&dir.join("sigma_scaling.csv"), &table)?;
        summary.push_str("\nsigma scaling\n");
        summary.push_str(&table);
    }
    write_file(&dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_gen_data(a: &GenArgs) -> Result<(), CliError> {
    if a.count == 0 {
        return Err(CliError::user("--count must be positive"));
    }
    let shape = [a.channels, a.size, a.size];
    let d = DegradationOp::bicubic(&shape, a.scale)?;
    let (hr, lr) = (a.out.join("hr"), a.out.join("lr"));
    create_dir(&hr)?;
    create_dir(&lr)?;
    let mut index = String::from("name,seed,index,hr,lr\n");
    for k in 0..a.count as u64 {
        let i = a.start + k;
        let levels = generate_image(a.seed, i, a.channels, a.size);
        let name = format!("{i:06}");
        save_png(&hr.join(format!("{name}.png")), &levels, &shape)?;
        let y = d.apply(&level_centers(&levels, &shape)?)?;
        save_png(
            &lr.join(format!("{name}.png")),
            &quantize(&y),
            d.output_shape(),
        )?;
        let _ = writeln!(index, "{name},{},{i},hr/{name}.png,lr/{name}.png", a.seed);
    }
    write_file(&a.out.join("corpus.csv"), &index)?;
    write_file(&a.out.join("degradation.toml"), &d.descriptor().to_text())?;
    println!("wrote {} images to {}", a.count, a.out.display());
    Ok(())
}
