//! Command-line entry point: argument parsing, config files, exit codes.
//!
//! Every command accepts `--config FILE`, a JSON object whose keys are flag
//! names (`steps`, `style_weight`, `no_flip`, ...). Its values are applied as
//! if typed before the command-line flags, so explicit flags win.

mod commands;
mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};

pub const OUT_ENV: &str = "STYLEKIT_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "stylekit",
    version,
    about = "Illustrator style recognition, transfer, and mining"
)]
pub struct Cli {
    /// Worker threads. The default of 1 keeps every output bit-identical.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// JSON file of flag values; flags on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the deterministic synthetic corpus.
    SynthGen(SynthGenArgs),
    /// Scan `root/<illustrator>/<book>/<page>` into a manifest.
    Ingest(IngestArgs),
    /// Draw an instance or book-based split.
    Split(SplitArgs),
    /// Fit the bag-of-words baseline.
    TrainBow(TrainBowArgs),
    /// Train the small convolutional network.
    TrainCnn(TrainCnnArgs),
    /// Page-level evaluation on the test partition.
    Eval(EvalArgs),
    /// Book-level majority-vote evaluation on held-out books.
    EvalBooks(EvalBooksArgs),
    /// Stylize one content page with one style page.
    Transfer(TransferArgs),
    /// Stylize seeded cross-class pairs and score how often the style wins.
    CaptureRate(CaptureRateArgs),
    /// Discover discriminative patches of one illustrator.
    MinePatches(MinePatchesArgs),
    /// Rank an illustrator's most typical pages.
    Representatives(RepresentativesArgs),
    /// Visualize what a network unit responds to.
    Introspect(IntrospectArgs),
    /// Summarize eval reports in a directory as comparison tables.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthGen(_) => "synth-gen",
            Command::Ingest(_) => "ingest",
            Command::Split(_) => "split",
            Command::TrainBow(_) => "train-bow",
            Command::TrainCnn(_) => "train-cnn",
            Command::Eval(_) => "eval",
            Command::EvalBooks(_) => "eval-books",
            Command::Transfer(_) => "transfer",
            Command::CaptureRate(_) => "capture-rate",
            Command::MinePatches(_) => "mine-patches",
            Command::Representatives(_) => "representatives",
            Command::Introspect(_) => "introspect",
            Command::Report(_) => "report",
        }
    }
}

const COMMANDS: &[&str] = &[
    "synth-gen",
    "ingest",
    "split",
    "train-bow",
    "train-cnn",
    "eval",
    "eval-books",
    "transfer",
    "capture-rate",
    "mine-patches",
    "representatives",
    "introspect",
    "report",
];

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SynthGenArgs {
    #[arg(long, default_value_t = 6)]
    pub styles: usize,
    #[arg(long, default_value_t = 4)]
    pub books: usize,
    #[arg(long, default_value_t = 25)]
    pub pages: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Square page size in pixels.
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct IngestArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// Canonical square page size.
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitProtocol {
    Instance,
    Book,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitProtocol::Instance)]
    pub protocol: SplitProtocol,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train, validation and test shares for the instance protocol.
    #[arg(long, value_parser = parse_triple, default_value = "0.6,0.1,0.3")]
    pub fractions: [f64; 3],
    /// Share of each illustrator's books held out for testing (book protocol).
    #[arg(long, default_value_t = 0.25)]
    pub test_books: f64,
    /// Share of the remaining pages used for validation (book protocol).
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TrainBowArgs {
    #[arg(long)]
    pub split: PathBuf,
    /// hog, dsift or color_dsift.
    #[arg(long, default_value = "dsift")]
    pub descriptor: String,
    /// Codebook size.
    #[arg(long, default_value_t = 600)]
    pub k: usize,
    /// Descriptors subsampled for the codebook.
    #[arg(long, default_value_t = 200_000)]
    pub pool_cap: usize,
    #[arg(long, default_value_t = 50)]
    pub kmeans_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub svm_lambda: f64,
    #[arg(long, default_value_t = 40)]
    pub svm_epochs: usize,
    /// Base name of the written model files.
    #[arg(long, default_value = "bow")]
    pub name: String,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TrainCnnArgs {
    #[arg(long)]
    pub split: PathBuf,
    /// Square network input size; defaults to the corpus resolution.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Channels of the three convolutions, e.g. `32,64,64`.
    #[arg(long, value_parser = parse_widths)]
    pub widths: Option<[usize; 3]>,
    /// Width of the hidden dense layer.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, default_value_t = 3000)]
    pub iters: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 40)]
    pub val_batch: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Iterations between learning-rate drops.
    #[arg(long, default_value_t = 1000)]
    pub decay_every: usize,
    /// Divisor applied to the learning rate at each drop.
    #[arg(long, default_value_t = 10.0)]
    pub decay_factor: f64,
    /// Iterations between validation passes; 0 means once per epoch.
    #[arg(long, default_value_t = 0)]
    pub eval_interval: usize,
    /// Train without mirrored copies.
    #[arg(long)]
    pub no_flip: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "cnn")]
    pub name: String,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PageProtocol {
    Instance,
    BookInstance,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// A network (`train-cnn`) or bag-of-words (`train-bow`) model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Defaults to the protocol matching the split kind.
    #[arg(long, value_enum)]
    pub protocol: Option<PageProtocol>,
    /// Report name; defaults to the model file stem.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct EvalBooksArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitArg {
    Content,
    Noise,
}

#[derive(Debug, Args, Serialize)]
pub struct TransferFlags {
    /// Content weight (alpha).
    #[arg(long, default_value_t = 1.0)]
    pub content_weight: f64,
    /// Style weight (beta).
    #[arg(long, default_value_t = 1e3)]
    pub style_weight: f64,
    #[arg(long, default_value = "deep")]
    pub content_tap: String,
    /// Equally weighted style taps, comma separated.
    #[arg(long, default_value = "shallow,mid,deep")]
    pub style_taps: String,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub step_size: f64,
    #[arg(long, default_value_t = 0.9)]
    pub transfer_momentum: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Content)]
    pub init: InitArg,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TransferArgs {
    /// Network model (`train-cnn`).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "stylized")]
    pub name: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub transfer: TransferFlags,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct CaptureRateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Pairs are drawn from this split's test partition.
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write every stylized image.
    #[arg(long)]
    pub save_images: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub transfer: TransferFlags,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct MinePatchesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Illustrator id to mine; every other illustrator is negative.
    #[arg(long)]
    pub class: u32,
    /// Restrict mining to this split's training pages.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
    #[arg(long, default_value_t = 40)]
    pub clusters: usize,
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    #[arg(long, default_value_t = 10)]
    pub top_m: usize,
    #[arg(long, default_value_t = 3)]
    pub min_cluster_size: usize,
    #[arg(long, default_value_t = 20_000)]
    pub negative_cap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Clusters shown in the montage.
    #[arg(long, default_value_t = 5)]
    pub show: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct RepresentativesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub class: u32,
    /// hog, color_dsift or embed.
    #[arg(long, default_value = "embed")]
    pub feature: String,
    /// Network for embed features and for scoring the ranking.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Page size for hog and color_dsift; defaults to the corpus resolution.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Stop eliminating once this many pages survive.
    #[arg(long, default_value_t = 20)]
    pub target: usize,
    #[arg(long, default_value_t = 0.05)]
    pub fraction: f64,
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    /// Pages scored by the classifier and shown in the montage.
    #[arg(long, default_value_t = 20)]
    pub top_k: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct IntrospectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "deep")]
    pub tap: String,
    #[arg(long, default_value_t = 0)]
    pub unit: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub step_size: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub l2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Search this split's test pages for the strongest activations.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = 9)]
    pub top_k: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct ReportArgs {
    /// Directory holding `*.eval.json` reports.
    #[arg(long)]
    pub dir: PathBuf,
    /// Compare reports drawn from different splits.
    #[arg(long)]
    pub force: bool,
    /// Defaults to `--dir`.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

fn parse_triple(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| "expected three comma-separated numbers".to_string())
}

fn parse_widths(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| "expected three comma-separated channel counts".to_string())
}

/// Exit status for a failed command: 1 usage, 2 data, 3 numerical.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_numerical() => 3,
        Error::Invalid(_) | Error::Attribute { .. } | Error::UnknownOp(_) => 1,
        _ => 2,
    }
}

/// Relative output paths resolve under `$STYLEKIT_OUT` when it is set.
pub fn output_dir(out: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

/// Pull `--config FILE` out of `argv` and splice its flags in right after the
/// subcommand name, ahead of the user's own flags.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        match arg.to_str() {
            Some("--config") => {
                config = Some(PathBuf::from(
                    it.next()
                        .ok_or_else(|| Error::invalid("--config needs a file"))?,
                ));
            }
            Some(s) if s.starts_with("--config=") => {
                config = Some(PathBuf::from(&s["--config=".len()..]))
            }
            _ => rest.push(arg),
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let value: serde_json::Value = crate::artifact::read_json(&path)?;
    let obj = value.as_object().ok_or_else(|| {
        Error::invalid(format!("{}: config must be a JSON object", path.display()))
    })?;
    let mut flags: Vec<OsString> = Vec::new();
    for (key, v) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        let text = match v {
            serde_json::Value::Null | serde_json::Value::Bool(false) => continue,
            serde_json::Value::Bool(true) => {
                flags.push(flag.into());
                continue;
            }
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Array(items) => items
                .iter()
                .map(|i| match i {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            serde_json::Value::Object(_) => {
                return Err(Error::invalid(format!(
                    "config key `{key}` must not be an object"
                )))
            }
        };
        flags.push(flag.into());
        flags.push(text.into());
    }
    let mut skip_value = false;
    let at = rest.iter().enumerate().skip(1).find_map(|(i, a)| {
        let s = a.to_str().unwrap_or("");
        if std::mem::take(&mut skip_value) {
            return None;
        }
        if s == "--threads" {
            skip_value = true;
        }
        COMMANDS.contains(&s).then_some(i + 1)
    });
    let at = at.ok_or_else(|| Error::invalid("--config given without a subcommand"))?;
    rest.splice(at..at, flags);
    Ok(rest)
}

/// Run one invocation; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv = match expand_config(argv.into_iter().map(Into::into).collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.verbose {
        let _ = env_logger::Builder::new()
            .filter_level(log::LevelFilter::Info)
            .try_init();
    }
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return 1;
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 2;
        }
    };
    let name = cli.command.name();
    match pool.install(|| commands::dispatch(&cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {name}: {e}");
            exit_code(&e)
        }
    }
}
