//! The `iagan` command-line driver.
//!
//! Every command writes its outputs plus a frozen `run.cfg` into its output
//! directory. While a command runs the directory holds an `INCOMPLETE`
//! marker, which is removed only after every output was written.

mod commands;
mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use commands::{
    ablate_random_input, augment, evaluate, load_model, pipeline, save_model, score, synth, train_model, AblationReport,
    AugmentOptions, EvalOptions, PipelineReport, ScoreOptions, SynthOptions, TrainOptions, TIMING_FILE,
};
pub use config::{RunConfig, RUN_CONFIG_FILE};

use crate::error::{Error, Result};

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Parser, Debug)]
#[command(name = "iagan", version, about = "Image-augmentation GAN laboratory on synthetic lung phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Config file of `key = value` lines; defaults to ./run.cfg when present.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Image side length.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a seeded phantom dataset with its split manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated phantom classes.
        #[arg(long)]
        classes: Option<String>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
        /// Per-class train cap `class=n`; repeatable.
        #[arg(long, value_name = "CLASS=N")]
        train_cap: Vec<String>,
        /// Phantom spec file replacing the built-in constants.
        #[arg(long, value_name = "FILE")]
        phantom_spec: Option<PathBuf>,
    },
    /// Trains a GAN on one class of a dataset or augmented set.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `iagan` or `dcgan`.
        #[arg(long, default_value = "dcgan")]
        variant: String,
        #[arg(long)]
        class: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// `real` or `random`.
        #[arg(long)]
        encoder_input: Option<String>,
        /// Augmented set directory to train on instead of the split's train images.
        #[arg(long, value_name = "DIR")]
        augmented: Option<PathBuf>,
    },
    /// Writes an augmented training set and its provenance manifest.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `iagan`, `dcgan`, `traditional` or `none`.
        #[arg(long)]
        method: String,
        /// Trained model directory (GAN methods only).
        #[arg(long, value_name = "DIR")]
        generator: Option<PathBuf>,
        /// Target class; defaults to the generator's training class.
        #[arg(long)]
        class: Option<String>,
        /// Comma-separated classes fed to an image-conditioned generator.
        #[arg(long)]
        inputs: Option<String>,
        #[arg(long)]
        copies: Option<usize>,
        /// Counts every cross-class input original towards the total.
        #[arg(long)]
        table_arithmetic: bool,
    },
    /// Scores split images by latent search; two models give the summed score.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated trained model directories.
        #[arg(long)]
        models: String,
        /// `test`, `train` or `unused`.
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated classes to score; defaults to every class in the split.
        #[arg(long)]
        classes: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also writes per-image search trajectories.
        #[arg(long)]
        trajectories: bool,
    },
    /// Computes AUC, operating points and DeLong tests from score reports.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Score report `[name=]path`; repeatable.
        #[arg(long, required = true)]
        scores: Vec<String>,
        /// Baseline score report `[name=]path`.
        #[arg(long)]
        baseline: Option<String>,
        /// Anomalous label; defaults to `1` for 0/1 labels.
        #[arg(long)]
        positive: Option<String>,
        /// Comma-separated normal labels; defaults to every other label.
        #[arg(long)]
        negatives: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the image-conditioned GAN on real and on random encoder inputs
    /// and compares how close their samples come to the training images.
    AblateRandomInput {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "pneumonia_like")]
        class: String,
    },
    /// Synthesises phantoms, trains the four augmentation variants, scores
    /// and evaluates them.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let implicit = PathBuf::from(RUN_CONFIG_FILE);
    match &common.config {
        Some(path) => cfg.load_into(path)?,
        None if implicit.is_file() => cfg.load_into(&implicit)?,
        None => {}
    }
    for s in &common.set {
        cfg.set(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(size) = common.size {
        cfg.size = size;
    }
    Ok(cfg)
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

/// Runs `body` with the `INCOMPLETE` marker in `out`, then freezes `cfg`.
pub(crate) fn with_outputs<T>(out: &Path, command: &str, cfg: &RunConfig, body: impl FnOnce() -> Result<T>) -> Result<T> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(INCOMPLETE_MARKER);
    fs::write(&marker, format!("{command} did not finish\n")).map_err(|e| Error::io(&marker, e))?;
    match body() {
        Ok(v) => {
            cfg.save(&out.join(RUN_CONFIG_FILE), command)?;
            fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::write(&marker, format!("{command} failed: {e}\n"));
            Err(e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out, classes, per_class, test_per_class, train_cap, phantom_spec } => {
            let mut cfg = resolve(&common)?;
            if let Some(c) = classes {
                cfg.classes = c;
            }
            if let Some(n) = per_class {
                cfg.per_class = n;
            }
            if let Some(n) = test_per_class {
                cfg.test_per_class = n;
            }
            let mut caps = Vec::new();
            for cap in &train_cap {
                let (c, n) = cap
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("train cap {cap:?} is not class=n")))?;
                let n = n.parse().map_err(|_| Error::Config(format!("train cap {cap:?} has a bad count")))?;
                caps.push((c.to_string(), n));
            }
            let opts = SynthOptions { out, train_caps: caps, phantom_spec };
            synth(&cfg, &opts).map(|_| ())
        }
        Command::Train { common, data, out, variant, class, epochs, max_steps, encoder_input, augmented } => {
            let mut cfg = resolve(&common)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(m) = max_steps {
                cfg.max_steps = m;
            }
            if let Some(e) = encoder_input {
                cfg.encoder_input = e.parse()?;
            }
            let opts = TrainOptions { data, out, variant: variant.parse()?, class, augmented };
            train_model(&cfg, &opts).map(|_| ())
        }
        Command::Augment { common, data, out, method, generator, class, inputs, copies, table_arithmetic } => {
            let mut cfg = resolve(&common)?;
            if table_arithmetic {
                cfg.table_arithmetic = true;
            }
            let method = method.parse()?;
            if let Some(k) = copies {
                match method {
                    crate::augment::Method::Traditional => cfg.traditional_copies = k,
                    _ => cfg.gan_copies = k,
                }
            }
            let opts = AugmentOptions { data, out, method, generator, class, inputs: inputs.as_deref().map(split_list) };
            augment(&cfg, &opts).map(|_| ())
        }
        Command::Score { common, data, models, split, classes, out, trajectories } => {
            let cfg = resolve(&common)?;
            let opts = ScoreOptions {
                data,
                models: split_list(&models).into_iter().map(PathBuf::from).collect(),
                role: split.parse()?,
                classes: classes.as_deref().map(split_list),
                out,
                trajectories,
            };
            score(&cfg, &opts).map(|_| ())
        }
        Command::Eval { common, scores, baseline, positive, negatives, out } => {
            let cfg = resolve(&common)?;
            let opts = EvalOptions {
                scores: scores.iter().map(|s| named_path(s)).collect(),
                baseline: baseline.as_deref().map(named_path),
                positive,
                negatives: negatives.as_deref().map(split_list),
                out,
            };
            evaluate(&cfg, &opts).map(|_| ())
        }
        Command::AblateRandomInput { common, data, out, class } => {
            let cfg = resolve(&common)?;
            let report = ablate_random_input(&cfg, &data, &out, &class)?;
            println!(
                "mean nearest-training residual: real input {:.6}, random input {:.6}",
                report.real_input, report.random_input
            );
            Ok(())
        }
        Command::Pipeline { common, out } => {
            let cfg = resolve(&common)?;
            let report = pipeline(&cfg, &out)?;
            print!("{}", report.summary());
            Ok(())
        }
    }
}

/// `name=path`, or a bare path named by its file stem.
fn named_path(s: &str) -> (String, PathBuf) {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(s);
            let name = p.file_stem().map_or_else(|| s.to_string(), |n| n.to_string_lossy().into_owned());
            (name, p)
        }
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
