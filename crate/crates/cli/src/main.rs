use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use steganoforge::channel;
use steganoforge::imagery::{list_pngs, load_image, DatasetSplit};
use steganoforge::networks::{load_weights, Variant};
use steganoforge::payload::RsCodeParams;
use steganoforge::steganalysis::{detect_corpus, VERDICT_THRESHOLD};
use steganoforge::synthetic::write_dataset;
use steganoforge::training::{evaluate, fit, FitSinks, TrainConfig};
use steganoforge::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_CAPACITY: u8 = 4;
const EXIT_DECODE: u8 = 5;
const EXIT_INTERNAL: u8 = 1;

#[derive(Parser)]
#[command(
    name = "steganoforge",
    version,
    about = "Hide bytes in PNG images with a trained encoder/decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on <data>/train and <data>/test.
    Train(TrainArgs),
    /// Hide a file in a cover image.
    Encode(EncodeArgs),
    /// Recover a hidden file from a stego image.
    Decode(DecodeArgs),
    /// Accuracy, RS-BPP, PSNR and SSIM on <data>/test.
    Evaluate(EvaluateArgs),
    /// Run the classical detectors on a cover and a stego directory.
    Detect(DetectArgs),
    /// Print model metadata.
    Info(InfoArgs),
    /// Write a procedural cover dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Where the best checkpoint is written.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=8))]
    depth: u8,
    #[arg(long, default_value = "dense")]
    variant: Variant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 128)]
    crop: usize,
    /// Epoch log, one JSON object per line. Defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct CodeArgs {
    /// Reed-Solomon block length; overrides the model default with --rs-k.
    #[arg(long, requires = "rs_k")]
    rs_n: Option<usize>,
    #[arg(long, requires = "rs_n")]
    rs_k: Option<usize>,
}

impl CodeArgs {
    fn params(&self) -> Result<Option<RsCodeParams>, Error> {
        match (self.rs_n, self.rs_k) {
            (Some(n), Some(k)) => RsCodeParams::new(n, k).map(Some),
            _ => Ok(None),
        }
    }
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cover: PathBuf,
    #[arg(long)]
    message: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seed for the random bits that fill unused capacity.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    code: CodeArgs,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stego: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    code: CodeArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    covers: PathBuf,
    #[arg(long)]
    stegos: PathBuf,
    /// Writes `<out>.jsonl` (per image) and `<out>.csv` (ROC).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Format(_) | Error::Argument(_) | Error::Shape(_) => {
                EXIT_CONFIG
            }
            Error::Training { .. } => EXIT_DIVERGED,
            Error::Capacity { .. } => EXIT_CAPACITY,
            Error::DecodeFailure(_) => EXIT_DECODE,
            Error::Numeric(_) => EXIT_INTERNAL,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| Failure {
        code: EXIT_INTERNAL,
        message: e.to_string(),
    })
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let split = DatasetSplit::from_root(&a.data, a.crop)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        data_depth: a.depth as usize,
        variant: a.variant,
        seed: a.seed,
        crop_size: a.crop,
        ..TrainConfig::default()
    };
    config.validate()?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        p.into()
    });
    let mut log = fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    let outcome = fit(
        &split,
        &config,
        FitSinks {
            checkpoint: Some(&a.out),
            log: Some(&mut log),
        },
    )?;
    let m = outcome.best.measured.expect("fit records quality");
    println!(
        "{}",
        to_json(&json!({
            "model": a.out,
            "best_epoch": outcome.best_epoch,
            "accuracy": m.accuracy,
            "psnr": m.psnr,
            "ssim": m.ssim,
            "rs_code": outcome.best.rs_code,
        }))?
    );
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<(), Failure> {
    let weights = load_weights(&a.model)?;
    let code = channel::code_for(&weights, a.code.params()?)?;
    let message = fs::read(&a.message).map_err(|e| io_failure(&a.message, e))?;
    let cover = load_image(&a.cover)?;
    let max = channel::capacity(&weights, cover.width(), cover.height(), code);
    println!("capacity: {max} bytes with RS({}, {})", code.n, code.k);
    let stego = channel::embed(&weights, &cover, &message, code, a.seed)?;
    steganoforge::imagery::save_image(&stego, &a.out)?;
    info!(
        "wrote {} ({} message bytes)",
        a.out.display(),
        message.len()
    );
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<(), Failure> {
    let weights = load_weights(&a.model)?;
    let code = channel::code_for(&weights, a.code.params()?)?;
    let message = channel::extract_file(&weights, &a.stego, code)?;
    fs::write(&a.out, &message).map_err(|e| io_failure(&a.out, e))?;
    info!("recovered {} bytes", message.len());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<(), Failure> {
    let weights = load_weights(&a.model)?;
    let dir = a.data.join("test");
    let paths = list_pngs(&dir)?;
    if paths.is_empty() {
        return Err(Error::Argument(format!("no test images in {}", dir.display())).into());
    }
    let images = paths
        .iter()
        .map(load_image)
        .collect::<Result<Vec<_>, _>>()?;
    let report = to_json(&evaluate(&weights, &images, a.seed)?)?;
    if let Some(out) = &a.out {
        fs::write(out, &report).map_err(|e| io_failure(out, e))?;
    }
    println!("{report}");
    Ok(())
}

fn load_dir(dir: &Path) -> Result<Vec<steganoforge::imagery::RgbImage>, Failure> {
    let paths = list_pngs(dir)?;
    if paths.is_empty() {
        return Err(Error::Argument(format!("no PNG images in {}", dir.display())).into());
    }
    Ok(paths
        .iter()
        .map(load_image)
        .collect::<Result<Vec<_>, _>>()?)
}

fn detect(a: DetectArgs) -> Result<(), Failure> {
    let covers = load_dir(&a.covers)?;
    let stegos = load_dir(&a.stegos)?;
    let report = detect_corpus(&covers, &stegos)?;
    let jsonl = a.out.with_extension("jsonl");
    let mut f = fs::File::create(&jsonl).map_err(|e| io_failure(&jsonl, e))?;
    let rows = report
        .covers
        .iter()
        .zip(list_pngs(&a.covers)?)
        .map(|(s, p)| ("cover", s, p))
        .chain(
            report
                .stegos
                .iter()
                .zip(list_pngs(&a.stegos)?)
                .map(|(s, p)| ("stego", s, p)),
        );
    for (label, score, path) in rows {
        let line = json!({
            "image": path,
            "label": label,
            "chi_square": score.chi_square,
            "sample_pairs": score.sample_pairs,
            "rs_analysis": score.rs_analysis,
            "fused": score.fused,
            "flagged": score.is_stego(VERDICT_THRESHOLD),
            "warnings": score.warnings,
        });
        writeln!(f, "{line}").map_err(|e| io_failure(&jsonl, e))?;
    }
    let csv = a.out.with_extension("csv");
    fs::write(&csv, report.roc.to_csv()).map_err(|e| io_failure(&csv, e))?;
    println!("auroc {}", report.roc.auroc);
    Ok(())
}

fn info_cmd(a: InfoArgs) -> Result<(), Failure> {
    let weights = load_weights(&a.model)?;
    let mut meta = serde_json::to_value(weights.metadata()).map_err(|e| Failure {
        code: EXIT_INTERNAL,
        message: e.to_string(),
    })?;
    meta["format_version"] = json!(weights.format_version);
    println!("{}", to_json(&meta)?);
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    write_dataset(&a.out, a.train, a.test, a.size, a.seed)?;
    info!(
        "wrote {} + {} covers to {}",
        a.train,
        a.test,
        a.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Detect(a) => detect(a),
        Command::Info(a) => info_cmd(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
