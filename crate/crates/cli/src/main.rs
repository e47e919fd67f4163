//! `csasr` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (unreadable images, datasets, checkpoints), 3 numerical failure
//! (gradient check or self-test failure, non-finite loss).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use csasr::checks::gradcheck_suite;
use csasr::config::RunConfig;
use csasr::dataset::{make_splits, scan_dataset, PatchSampler, Split, SplitSpec};
use csasr::imaging::{degrade, load_image, save_image};
use csasr::selftest::run_selftest;
use csasr::tensor::fault::SigmoidFault;
use csasr::trainer::{evaluate, super_resolve, Checkpoint, EvalReport, Predictor, Trainer};
use csasr::Error;
use log::{info, warn};

const SPLIT_FILE: &str = "split.txt";
const LOG_FILE: &str = "train_log.csv";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(name = "csasr", version, about = "Attention/transformer single-image super-resolution")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Upscaling factor (2, 3 or 4).
    #[arg(long, global = true)]
    scale: Option<usize>,
    /// Seeds initialization, batch sampling and the dataset split.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset root (one sub-directory per class); same as `--set data.root=DIR`.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing checkpoints, the split file and a loss log to --out.
    Train {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint (or a baseline) on a dataset split and print a CSV table.
    Eval {
        #[arg(long, value_name = "PATH", required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Split file; defaults to the one next to the checkpoint, else a fresh seeded split.
        #[arg(long, value_name = "PATH")]
        split_file: Option<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[arg(long)]
        pretty: bool,
    },
    /// Super-resolve images with a trained checkpoint.
    Sr {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write bicubic-degraded LR/HR pairs for every image under a directory.
    Degrade {
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the gradient-check suite.
    Gradcheck {
        /// Only run cases whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        pretty: bool,
        /// Scale the sigmoid backward pass to test the harness itself.
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Run the worked examples of every module.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Bicubic,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::UnknownKey(_) | Error::BadValue { .. } => Failure::Usage(msg),
            Error::Image(_)
            | Error::Checkpoint(_)
            | Error::Dataset(_)
            | Error::Io { .. }
            | Error::PatchDivisibility { .. }
            | Error::PositionalGrid { .. } => Failure::Data(msg),
            _ => Failure::Numerical(msg),
        }
    }
}

macro_rules! from_data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Data(e.to_string())
            }
        }
    )*};
}

from_data_error!(
    csasr::imaging::ImageError,
    csasr::dataset::DatasetError,
    csasr::trainer::CheckpointError,
    std::io::Error
);

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let common = &cli.common;
    match cli.command {
        Command::Train { out, checkpoint } => train(common, out, checkpoint),
        Command::Eval { checkpoint, baseline, split, split_file, out, pretty } => {
            eval(common, checkpoint, baseline, split, split_file, out, pretty)
        }
        Command::Sr { checkpoint, out, inputs } => sr(common, &checkpoint, &out, &inputs),
        Command::Degrade { input, out } => degrade_dir(common, &input, &out),
        Command::Gradcheck { filter, pretty, inject_fault } => {
            resolve_config(common, RunConfig::default())?;
            gradcheck(filter, pretty, inject_fault)
        }
        Command::Selftest => {
            resolve_config(common, RunConfig::default())?;
            selftest()
        }
    }
}

/// Config file, then `--set`, then the dedicated flags, on top of `base`.
fn resolve_config(common: &Common, mut cfg: RunConfig) -> Result<RunConfig, Failure> {
    let mut pairs = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    for o in &common.overrides {
        pairs.push(RunConfig::parse_override(o)?);
    }
    if let Some(s) = common.scale {
        pairs.push(("model.scale".into(), s.to_string()));
    }
    if let Some(seed) = common.seed {
        pairs.push(("train.seed".into(), seed.to_string()));
        pairs.push(("data.split_seed".into(), seed.to_string()));
    }
    if let Some(root) = &common.data {
        pairs.push(("data.root".into(), root.display().to_string()));
    }
    cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn data_root(cfg: &RunConfig) -> Result<&Path, Failure> {
    cfg.data
        .root
        .as_deref()
        .ok_or_else(|| Failure::Usage("no dataset given; pass --data DIR or set data.root".into()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    let ck = Checkpoint::load(path)?;
    info!("loaded {} (epoch {}, step {})", path.display(), ck.epoch, ck.step);
    Ok(ck)
}

fn train(common: &Common, out: Option<PathBuf>, resume: Option<PathBuf>) -> Outcome {
    let (mut trainer, cfg) = match &resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let cfg = resolve_config(common, ck.config.clone())?;
            ck.check_model(&cfg.model)?;
            let mut t = Trainer::from_checkpoint(ck);
            t.config = cfg.clone();
            (t, cfg)
        }
        None => {
            let cfg = resolve_config(common, RunConfig::default())?;
            (Trainer::new(cfg.clone())?, cfg)
        }
    };
    let root = data_root(&cfg)?;
    let out = out
        .or_else(|| cfg.train.checkpoint_dir.clone())
        .ok_or_else(|| Failure::Usage("no output directory; pass --out DIR".into()))?;
    fs::create_dir_all(&out)?;
    trainer.config.train.checkpoint_dir = Some(out.clone());

    let index = Arc::new(scan_dataset(root)?);
    let split_path = out.join(SPLIT_FILE);
    let split = if resume.is_some() && split_path.exists() {
        SplitSpec::read(&split_path, &index)?
    } else {
        let s = make_splits(&index, cfg.data.split_seed)?;
        s.write(&split_path, &index)?;
        s
    };
    fs::write(out.join(CONFIG_FILE), trainer.config.to_text())?;

    let scale = cfg.model.scale;
    let batch = cfg.train.batch_for(scale);
    let members = split.indices(Split::Train);
    let mut sampler =
        PatchSampler::new(index.clone(), members, scale, cfg.train.patch_hr, batch)?.with_augmentation(cfg.data.augment);
    let iters = match cfg.train.iters_per_epoch {
        0 => members.len().div_ceil(batch),
        n => n,
    };
    let val = split.indices(Split::Val).to_vec();
    let model_cfg = cfg.model.clone();
    let validator = move |params: &csasr::ModelParams<f32>| -> csasr::Result<f64> {
        let report = evaluate(&index, &val, scale, Predictor::Model { params, config: &model_cfg });
        Ok(report.overall().psnr_mean)
    };
    trainer.log_to(&out.join(LOG_FILE))?;
    info!(
        "training x{scale}: {} train images, batch {batch}, {iters} iterations/epoch, epochs {}..{}",
        members.len(),
        trainer.epoch,
        cfg.train.epochs
    );
    trainer.train(&mut sampler, iters, Some(&validator))?;
    info!("done at epoch {}; best validation PSNR {:.4} dB", trainer.epoch, trainer.best_psnr);
    Ok(())
}

fn eval(
    common: &Common,
    checkpoint: Option<PathBuf>,
    baseline: Option<Baseline>,
    split: Split,
    split_file: Option<PathBuf>,
    out: Option<PathBuf>,
    pretty: bool,
) -> Outcome {
    let ck = match (&checkpoint, baseline) {
        (Some(path), None) => Some(load_checkpoint(path)?),
        (Some(_), Some(_)) => return Err(Failure::Usage("--checkpoint and --baseline are exclusive".into())),
        (None, _) => None,
    };
    let base = ck.as_ref().map_or_else(RunConfig::default, |c| c.config.clone());
    let cfg = resolve_config(common, base)?;
    if let Some(ck) = &ck {
        ck.check_model(&cfg.model)?;
    }
    let index = scan_dataset(data_root(&cfg)?)?;
    let sibling = checkpoint.as_ref().and_then(|p| p.parent()).map(|d| d.join(SPLIT_FILE));
    let spec = match split_file.or(sibling.filter(|p| p.exists())) {
        Some(path) => {
            info!("using split file {}", path.display());
            SplitSpec::read(&path, &index)?
        }
        None => make_splits(&index, cfg.data.split_seed)?,
    };
    let members = spec.indices(split);
    let predictor = match &ck {
        Some(ck) => Predictor::Model { params: &ck.params, config: &cfg.model },
        None => Predictor::Bicubic,
    };
    let report = evaluate(&index, members, cfg.model.scale, predictor);
    if report.failures > 0 {
        warn!("{} images could not be scored", report.failures);
    }
    write_report(&report, out.as_deref(), pretty)
}

fn write_report(report: &EvalReport, out: Option<&Path>, pretty: bool) -> Outcome {
    let text = if pretty { report.to_pretty() } else { report.to_csv() };
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn sr(common: &Common, checkpoint: &Path, out: &Path, inputs: &[PathBuf]) -> Outcome {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = resolve_config(common, ck.config.clone())?;
    ck.check_model(&cfg.model)?;
    fs::create_dir_all(out)?;
    for input in inputs {
        let lr = load_image(input)?;
        let sr = super_resolve(&ck.params, &cfg.model, &lr)?;
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let dest = out.join(format!("{stem}_x{}.png", cfg.model.scale));
        save_image(&dest, &sr)?;
        info!("{} -> {} ({}x{})", input.display(), dest.display(), sr.width, sr.height);
    }
    Ok(())
}

/// Canonical form of `path`, resolving through its nearest existing ancestor.
fn resolved(path: &Path) -> PathBuf {
    let abs = std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf());
    let mut base = abs.as_path();
    let mut rest = Vec::new();
    while let Some(parent) = base.parent().filter(|_| !base.exists()) {
        rest.push(base.file_name().unwrap_or_default().to_owned());
        base = parent;
    }
    let mut out = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
    out.extend(rest.iter().rev());
    out
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if path
            .extension()
            .and_then(|x| x.to_str())
            .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff"))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Writes `out/HR/<rel>.png` and `out/LR_x<s>/<rel>.png` for every image.
fn degrade_dir(common: &Common, input: &Path, out: &Path) -> Outcome {
    let cfg = resolve_config(common, RunConfig::default())?;
    let scale = cfg.model.scale;
    if !input.is_dir() {
        return Err(Failure::Data(format!("{}: not a directory", input.display())));
    }
    if resolved(out).starts_with(resolved(input)) {
        return Err(Failure::Usage("--out must not be inside the input directory".into()));
    }
    let mut files = Vec::new();
    collect_images(input, &mut files)?;
    if files.is_empty() {
        return Err(Failure::Data(format!("{}: no images found", input.display())));
    }
    let (hr_dir, lr_dir) = (out.join("HR"), out.join(format!("LR_x{scale}")));
    for file in &files {
        let rel = file.strip_prefix(input).expect("collected under input").with_extension("png");
        let pair = degrade(&load_image(file)?, scale)?;
        for (dir, img) in [(&hr_dir, &pair.hr), (&lr_dir, &pair.lr)] {
            let dest = dir.join(&rel);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            save_image(&dest, img)?;
        }
    }
    info!("wrote {} pairs at x{scale} under {}", files.len(), out.display());
    Ok(())
}

fn gradcheck(filter: Option<String>, pretty: bool, inject_fault: Option<f64>) -> Outcome {
    let _fault = inject_fault.map(SigmoidFault::inject);
    let reports = gradcheck_suite(filter.as_deref())?;
    if reports.is_empty() {
        return Err(Failure::Usage("no gradient-check case matches the filter".into()));
    }
    if pretty {
        for r in &reports {
            println!("{r}");
        }
    } else {
        println!("case,max_rel_error,tol,coords,passed");
        for r in &reports {
            println!("{},{:.6e},{:e},{},{}", r.name, r.max_rel_error, r.tol, r.checked, r.passed);
        }
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn selftest() -> Outcome {
    let outcomes = run_selftest();
    for c in &outcomes {
        let status = if c.passed { "PASS" } else { "FAIL" };
        match c.detail.is_empty() {
            true => println!("{status} {}: {}", c.module, c.name),
            false => println!("{status} {}: {} ({})", c.module, c.name, c.detail),
        }
    }
    let failed = outcomes.iter().filter(|c| !c.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("{failed} of {} checks failed", outcomes.len())))
    }
}
