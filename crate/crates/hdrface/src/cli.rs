use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use hdrface_core::ablation::{AblationSpec, Streams};
use hdrface_core::model::ConditionMode;
use hdrface_core::onestep::Regime;

use crate::checkpoint;
use crate::config::{self, RunConfig};
use crate::error::{HdrError, Result};
use crate::manifest::{RunManifest, RunStatus};
use crate::run::{self, Backends, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "hdrface", version, about = "Representation-conditioned one-step face restoration at toy scale")]
pub struct Cli {
    /// Log every training step.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize low-quality inputs from clean images.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a directory of clean faces.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint; `steps` is taken from `--config` if given.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Restore every image in a directory with a trained checkpoint.
    Restore {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        /// Noise seed of rectified-flow inference.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare predictions with ground truth by file name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render the fusion gates of a checkpoint as heatmaps.
    FuseViz {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model per condition variant and seed, then compare them on held-out faces.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Subset of placeholder, raw, sdfm.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Feature streams fed to fusion: lr, face, both.
        #[arg(long, value_delimiter = ',')]
        streams: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Seed of the held-out degradations.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    Regime::parse(s).map_err(|e| e.to_string())
}

fn read_config(path: Option<&Path>) -> Result<(RunConfig, Option<String>)> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| HdrError::io(p, e))?;
            Ok((config::parse(&text, p)?, Some(text)))
        }
        None => Ok((run::default_run(Regime::Epsilon), None)),
    }
}

fn variants(names: &[String], streams: &[String]) -> Result<Vec<ConditionMode>> {
    let mut out = Vec::new();
    for n in names {
        let v = match n.as_str() {
            "placeholder" | "text" => ConditionMode::Placeholder,
            "raw" => ConditionMode::Raw,
            "sdfm" => ConditionMode::Sdfm,
            other => return Err(HdrError::usage(format!("unknown variant `{other}` (expected placeholder, raw or sdfm)"))),
        };
        out.push(v);
    }
    for s in streams {
        let v = Streams::parse(s)?.condition();
        if !out.contains(&v) {
            out.push(v);
        }
    }
    if out.is_empty() {
        out = vec![ConditionMode::Placeholder, ConditionMode::Raw, ConditionMode::Sdfm];
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    checkpoint::write_atomic(path, text.as_bytes())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_vec_pretty(value).map_err(|source| HdrError::Json { context: path.display().to_string(), source })?;
    checkpoint::write_atomic(path, &json)
}

/// Runs one command and records it in a manifest inside `dir`.
fn with_manifest(dir: &Path, argv: &[String], config_text: Option<&str>, seed: u64, body: impl FnOnce() -> Result<Vec<PathBuf>>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HdrError::io(dir, e))?;
    let mut manifest = RunManifest::start(argv.to_vec(), config_text, seed);
    manifest.write(dir)?;
    match body() {
        Ok(outputs) => {
            manifest.outputs = outputs;
            manifest.finish(RunStatus::Finished);
            manifest.write(dir)
        }
        Err(e) => {
            manifest.finish(RunStatus::Failed);
            if let Err(w) = manifest.write(dir) {
                log::warn!("could not update manifest: {w}");
            }
            Err(e)
        }
    }
}

pub fn execute(cli: Cli, argv: &[String]) -> Result<()> {
    let backends = Backends::default();
    match cli.command {
        Command::Degrade { input, out, recipe, seed } => {
            let ranges = run::load_recipe(&recipe)?;
            let text = std::fs::read_to_string(&recipe).ok();
            with_manifest(&out, argv, text.as_deref(), seed, || run::degrade_dir(&input, &out, &ranges, seed))
        }
        Command::Train { data, config, out, seed, resume } => {
            if config.is_none() && resume.is_none() {
                return Err(HdrError::usage("train needs --config (or --resume)"));
            }
            let (mut run, text) = match (&config, &resume) {
                (Some(c), _) => read_config(Some(c))?,
                (None, Some(r)) => {
                    let ck = checkpoint::read_header(r)?.0;
                    (RunConfig { train: ck.config, preset: ck.preset, intermediate_restorer: None }, None)
                }
                (None, None) => unreachable!(),
            };
            if let Some(s) = seed {
                run::apply_seed(&mut run.train, s);
            }
            let effective_seed = run.train.seed;
            with_manifest(&out, argv, text.as_deref(), effective_seed, || {
                let snapshot = run::write_config_snapshot(&out, &run)?;
                let outcome = run::train(&run, &TrainOptions { data, out: out.clone(), seed, resume }, &backends)?;
                let mut outputs = vec![snapshot, outcome.metrics];
                outputs.extend(outcome.checkpoints);
                Ok(outputs)
            })
        }
        Command::Restore { input, out, checkpoint: ck_path, regime, seed } => {
            let mut ck = checkpoint::load(&ck_path)?;
            if let Some(s) = seed {
                ck.state.model.config.inference_seed = s;
            }
            let s = ck.state.model.config.inference_seed;
            with_manifest(&out, argv, None, s, || run::restore_dir(&input, &out, &ck, regime))
        }
        Command::Eval { pred, gt, out, seed } => {
            let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            with_manifest(&dir, argv, None, seed, || {
                let report = run::evaluate_dirs(&pred, &gt, &backends)?;
                write_json(&out, &report)?;
                let table = run::render_report(&report);
                let table_path = out.with_extension("txt");
                write_text(&table_path, &table)?;
                print!("{table}");
                Ok(vec![out.clone(), table_path])
            })
        }
        Command::FuseViz { input, out, checkpoint: ck_path, scale, seed } => {
            let ck = checkpoint::load(&ck_path)?;
            with_manifest(&out, argv, None, seed, || run::fuse_viz(&input, &out, &ck, scale))
        }
        Command::Ablate { data, heldout, config, out, variants: names, streams, seeds, seed } => {
            let (run, text) = read_config(config.as_deref())?;
            let spec = AblationSpec { base: run.train.clone(), variants: variants(&names, &streams)?, seeds, eval_seed: seed };
            spec.validate()?;
            with_manifest(&out, argv, text.as_deref(), seed, || {
                let report = run::ablate(&run, &data, &heldout, &spec, &backends)?;
                let json = out.join("ablation.json");
                write_json(&json, &report)?;
                let table = run::render_ablation(&report);
                let txt = out.join("ablation.txt");
                write_text(&txt, &table)?;
                print!("{table}");
                Ok(vec![json, txt])
            })
        }
    }
}

/// Parses `args` (program name first) and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
