//! `resfuse` command-line interface.
//!
//! Every subcommand first prints its resolved configuration as one JSON line
//! on stdout. Exit codes: 0 success, 1 usage error, 2 runtime error, with a
//! single `error: usage: ...` or `error: runtime: ...` line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use resfuse::checkpoint::Checkpoint;
use resfuse::compare::{self, CompareConfig};
use resfuse::dataset::{Dataset, Split};
use resfuse::gradcheck::{self, SuiteConfig};
use resfuse::phantom::{self, PhantomSpec, Sample};
use resfuse::tensor::Tensor;
use resfuse::train::{self, TrainConfig};
use resfuse::volume::{self, Volume};
use resfuse::{export, FusionVariant};

#[derive(Parser)]
#[command(
    name = "resfuse",
    version,
    about = "Dual-branch residual fusion segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset directory.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Segment one pre/post volume pair.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train post-only, direct and weighted models over several seeds.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 160)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Volume size as D,H,W; overrides the size in --spec.
    #[arg(long, value_parser = parse_size)]
    size: Option<[usize; 3]>,
    /// JSON phantom spec; missing fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Plain,
    Direct,
    Weighted,
}

impl From<VariantArg> for FusionVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Plain => FusionVariant::PlainResidual,
            VariantArg::Direct => FusionVariant::DirectAdd,
            VariantArg::Weighted => FusionVariant::WeightedAdd,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::Weighted)]
    variant: VariantArg,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Last checkpoint; the best one is written next to it as NAME.best.rfck.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines metrics log, one record per epoch.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Feed the post volume to both branches (requires --variant plain).
    #[arg(long)]
    post_only: bool,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    /// Continue training from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    /// Write axial mid-slice PGM/PPM images per case into this directory.
    #[arg(long)]
    export_slices: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    post: PathBuf,
    /// Output label volume (0 background, 1 lesion).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Spatial edge of the per-op inputs (even).
    #[arg(long, default_value_t = 6)]
    size: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = CompareConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = CompareConfig::default().lr)]
    lr: f64,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("size `{s}`: {e}"))?;
    dims.try_into()
        .map_err(|_| format!("size `{s}` must have three comma-separated values"))
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<resfuse::Error> for Failure {
    fn from(e: resfuse::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Prefixes runtime errors with the file they concern.
fn at<T>(path: &Path, r: resfuse::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("error: usage: {}", one_line(first));
            return ExitCode::from(1);
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Compare(a) => compare_cmd(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: usage: {}", one_line(&msg));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: runtime: {}", one_line(&msg));
            ExitCode::from(2)
        }
    }
}

/// `RESFUSE_THREADS` sizes the global thread pool. Results do not depend on
/// it; only wall time does.
fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("RESFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Usage(format!(
            "RESFUSE_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn echo(config: serde_json::Value) {
    println!("{config}");
}

fn gen_data(a: GenDataArgs) -> Outcome {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<PhantomSpec>(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(size) = a.size {
        spec.size = size;
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    echo(json!({
        "command": "gen-data",
        "out": a.out,
        "cases": a.cases,
        "seed": a.seed,
        "spec": spec,
    }));
    let ds = Dataset::generate(&a.out, &spec, a.cases, a.seed)?;
    println!(
        "{}",
        json!({
            "train": ds.indices(Split::Train).len(),
            "val": ds.indices(Split::Val).len(),
        })
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let cfg = TrainConfig {
        data: a.data,
        out: a.out,
        log: a.log,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        variant: a.variant.into(),
        post_only: a.post_only,
        levels: a.levels,
        base_channels: a.base_channels,
        resume: a.resume,
    };
    if cfg.post_only && cfg.variant != FusionVariant::PlainResidual {
        return Err(Failure::Usage(
            "--post-only requires --variant plain".into(),
        ));
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let mut echoed = serde_json::to_value(&cfg)?;
    echoed["command"] = json!("train");
    echo(echoed);
    let outcome = train::train(&cfg)?;
    for r in &outcome.records {
        println!("{}", serde_json::to_string(r)?);
    }
    println!(
        "{}",
        json!({
            "epochs": outcome.last.training.epoch,
            "best_val_dsc": outcome.last.training.best_val_dsc,
            "last": cfg.out,
            "best": train::best_path(&cfg.out),
        })
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let split: Split = a.split.into();
    echo(json!({
        "command": "eval",
        "ckpt": a.ckpt,
        "data": a.data,
        "split": split,
        "export_slices": a.export_slices,
    }));
    let ck = at(&a.ckpt, Checkpoint::load(&a.ckpt))?;
    let ds = Dataset::open(&a.data)?;
    let indices = ds.indices(split);
    let samples = ds.load_split(split)?;
    let post_only = ck.training.post_only;
    let mut report = train::evaluate(&ck.net, &samples, post_only)?;
    for (m, &index) in report.cases.iter_mut().zip(&indices) {
        m.case = index;
    }
    if let Some(dir) = &a.export_slices {
        for (s, &index) in samples.iter().zip(&indices) {
            let (_, logits) = train::predict_mask(&ck.net, s, post_only)?;
            export::export_case(dir, &format!("case_{index}"), s, &logits)?;
        }
    }
    for c in &report.cases {
        println!("{}", serde_json::to_string(c)?);
    }
    println!(
        "{}",
        json!({
            "split": split,
            "cases": report.cases.len(),
            "dsc": report.dsc,
            "recall": report.recall,
            "loss": report.loss,
            "gland_marked_fraction": report.gland_marked_fraction,
        })
    );
    Ok(())
}

/// Reads a float volume as `[1, D, H, W]`, accepting `[D, H, W]` too.
fn read_channel_volume(path: &Path) -> Result<Tensor<f32>, Failure> {
    let t = at(path, volume::read(path).and_then(Volume::into_float))?;
    let shape = t.shape().to_vec();
    match shape.as_slice() {
        [_, _, _] => Ok(t.reshape([1, shape[0], shape[1], shape[2]])?),
        [1, _, _, _] => Ok(t),
        _ => Err(Failure::Runtime(format!(
            "{}: expected a [D,H,W] or [1,D,H,W] volume, got {shape:?}",
            path.display()
        ))),
    }
}

fn predict_cmd(a: PredictArgs) -> Outcome {
    echo(json!({
        "command": "predict",
        "ckpt": a.ckpt,
        "pre": a.pre,
        "post": a.post,
        "out": a.out,
    }));
    let ck = at(&a.ckpt, Checkpoint::load(&a.ckpt))?;
    let pre = read_channel_volume(&a.pre)?;
    let post = read_channel_volume(&a.post)?;
    if pre.shape() != post.shape() {
        return Err(Failure::Runtime(format!(
            "pre {:?} and post {:?} differ in shape",
            pre.shape(),
            post.shape()
        )));
    }
    let dims = [pre.shape()[1], pre.shape()[2], pre.shape()[3]];
    let sample = Sample {
        labels: phantom::LabelVolume {
            dims,
            data: vec![phantom::BACKGROUND; dims.iter().product()],
        },
        pre,
        post,
    };
    let (mask, _) = train::predict_mask(&ck.net, &sample, ck.training.post_only)?;
    let labels: Vec<u8> = mask.iter().map(|&m| u8::from(m)).collect();
    let lesion = labels.iter().filter(|&&l| l == 1).count();
    volume::write(
        &a.out,
        &Volume::Labels {
            dims: dims.to_vec(),
            data: labels,
        },
    )?;
    println!("{}", json!({ "dims": dims, "lesion_voxels": lesion }));
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Outcome {
    if a.size < 2 || !a.size.is_multiple_of(2) || a.size > 8 {
        return Err(Failure::Usage(format!(
            "--size must be even and between 2 and 8, got {}",
            a.size
        )));
    }
    let cfg = SuiteConfig {
        size: a.size,
        trials: a.trials,
        seed: a.seed,
        ..SuiteConfig::default()
    };
    echo(json!({
        "command": "gradcheck",
        "size": cfg.size,
        "trials": cfg.trials,
        "entries_per_param": cfg.entries_per_param,
        "step": cfg.step,
        "kinked_step": cfg.kinked_step,
        "seed": cfg.seed,
        "rtol": gradcheck::GRAD_RTOL,
        "atol": gradcheck::GRAD_ATOL,
    }));
    println!(
        "{:<16} {:>14} {:>8}  result",
        "op", "max rel error", "entries"
    );
    let mut failed = Vec::new();
    for op in gradcheck::SUITE_OPS {
        let check = gradcheck::check_op(op, &cfg)?;
        println!(
            "{:<16} {:>14.3e} {:>8}  {}",
            check.op,
            check.max_error,
            check.entries,
            if check.passed() { "ok" } else { "FAIL" }
        );
        if !check.passed() {
            failed.push(check.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient check failed for {}",
            failed.join(",")
        )))
    }
}

fn compare_cmd(a: CompareArgs) -> Outcome {
    let cfg = CompareConfig {
        seeds: a.seeds,
        epochs: a.epochs,
        lr: a.lr,
        ..CompareConfig::default()
    };
    if cfg.seeds.is_empty() {
        return Err(Failure::Usage("--seeds needs at least one seed".into()));
    }
    echo(json!({
        "command": "compare",
        "data": a.data,
        "out": a.out,
        "config": cfg,
    }));
    let ds = Dataset::open(&a.data)?;
    let train_set = ds.load_split(Split::Train)?;
    let val_set = ds.load_split(Split::Val)?;
    // Noise-free twins of the validation cases, for the gland false-positive
    // measurement.
    let clean = ds.spec.clone().noiseless();
    let noiseless_val = ds
        .indices(Split::Val)
        .into_iter()
        .map(|i| phantom::generate(&clean, phantom::case_seed(ds.seed, i)))
        .collect::<Result<Vec<_>, _>>()?;
    let report = compare::run(&cfg, &train_set, &val_set, &noiseless_val, |cell| {
        println!(
            "{}",
            json!({ "cell": cell.arm.name(), "seed": cell.seed, "val_dsc": cell.val_dsc, "wall_ms": cell.wall_ms })
        );
    })?;
    print!("{}", report.table());
    let text = serde_json::to_string(&report)?;
    println!("{text}");
    if let Some(path) = &a.out {
        std::fs::write(
            path,
            format!("{}\n", serde_json::to_string_pretty(&report)?),
        )?;
    }
    Ok(())
}
