//! The work behind each subcommand, callable without going through argv.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hdrface_core::ablation::{run_ablation, AblationReport, AblationSpec};
use hdrface_core::degrade::{degrade_sampled, resize, DegradationRanges};
use hdrface_core::encoder::{encode_native, SourceTag};
use hdrface_core::eval::{build_report, evaluate_pair, EvalBackends, MetricReport, MetricRow, QuadrantDetector};
use hdrface_core::losses::{ToyIdentity, ToyPerceptual};
use hdrface_core::model::{ConditionMode, HdrFaceModel, ModelRestorer};
use hdrface_core::onestep::{IdentityRestorer, IntermediateRestorer, Regime};
use hdrface_core::sdfm::gate_heatmap;
use hdrface_core::train::{train_loop, TrainConfig, TrainContext, TrainState};
use hdrface_core::ImageGrid;
use toml::de::DeTable;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{self, Preset, RunConfig};
use crate::error::{HdrError, Result};
use crate::imageio::{self, load_dir, save_png};
use crate::jpeg::JpegCodec;
use crate::metrics::{MetricRecord, MetricsWriter};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Toy stand-ins for the pretrained perceptual, identity and landmark networks.
pub struct Backends {
    pub perceptual: ToyPerceptual,
    pub identity: ToyIdentity,
    pub landmarks: QuadrantDetector,
}

impl Default for Backends {
    fn default() -> Self {
        Backends { perceptual: ToyPerceptual::default(), identity: ToyIdentity::default(), landmarks: QuadrantDetector }
    }
}

impl Backends {
    pub fn eval(&self) -> EvalBackends<'_> {
        EvalBackends { identity: &self.identity, landmarks: &self.landmarks }
    }

    pub fn train<'a>(&'a self, restorer: &'a dyn IntermediateRestorer) -> TrainContext<'a> {
        TrainContext { restorer, jpeg: &JpegCodec, perceptual: &self.perceptual, identity: &self.identity }
    }
}

/// Frozen stage-0 model, or the identity when there is none.
pub fn restorer_for(stage0: Option<&HdrFaceModel>) -> Box<dyn IntermediateRestorer + '_> {
    match stage0 {
        Some(m) => Box::new(ModelRestorer(m)),
        None => Box::new(IdentityRestorer),
    }
}

/// Reads a degradation recipe. Each of `blur_sigma`, `down_factor`,
/// `noise_sigma` and `jpeg_quality` is either a number (fixed) or a
/// `[low, high]` pair sampled uniformly per image; `second_order` is a bool.
pub fn load_recipe(path: &Path) -> Result<DegradationRanges> {
    let src = std::fs::read_to_string(path).map_err(|e| HdrError::io(path, e))?;
    let err = |line: usize, key: &str, message: String| HdrError::Config { path: path.to_path_buf(), line, key: key.into(), message };
    let line_of = |offset: usize| src[..offset].bytes().filter(|&b| b == b'\n').count() + 1;
    let doc = DeTable::parse(&src).map_err(|e| err(e.span().map_or(1, |s| line_of(s.start)), "<syntax>", e.message().trim().into()))?;
    let plain: toml::Table = toml::from_str(&src).map_err(|e| err(1, "<syntax>", e.message().trim().into()))?;
    let mut r = DegradationRanges::default();
    for key in doc.get_ref().keys() {
        let name: &str = key.get_ref();
        let line = line_of(key.span().start);
        let value = &plain[name];
        let num = |v: &toml::Value| v.as_float().or_else(|| v.as_integer().map(|i| i as f64));
        let range = || -> std::result::Result<(f64, f64), String> {
            match value {
                toml::Value::Array(a) if a.len() == 2 => match (num(&a[0]), num(&a[1])) {
                    (Some(lo), Some(hi)) => Ok((lo, hi)),
                    _ => Err("expected two numbers".into()),
                },
                v => num(v).map(|x| (x, x)).ok_or_else(|| format!("expected a number or [low, high], found {}", v.type_str())),
            }
        };
        match name {
            "blur_sigma" => r.blur_sigma = range().map_err(|m| err(line, name, m))?,
            "down_factor" => r.down_factor = range().map_err(|m| err(line, name, m))?,
            "noise_sigma" => r.noise_sigma = range().map_err(|m| err(line, name, m))?,
            "jpeg_quality" => {
                let (lo, hi) = range().map_err(|m| err(line, name, m))?;
                let q = |v: f64| if v.fract() == 0.0 && (1.0..=100.0).contains(&v) { Ok(v as u8) } else { Err(err(line, name, format!("{v} is not an integer in [1, 100]"))) };
                r.jpeg_quality = (q(lo)?, q(hi)?);
            }
            "second_order" => r.second_order = value.as_bool().ok_or_else(|| err(line, name, format!("expected a bool, found {}", value.type_str())))?,
            _ => return Err(err(line, name, "unknown key".into())),
        }
    }
    r.validate().map_err(|e| err(1, "<recipe>", e.to_string()))?;
    Ok(r)
}

/// Degrades every image in `in_dir`; image `i` (in sorted order) uses the
/// recipe sample at path `[i]` under `seed`.
pub fn degrade_dir(in_dir: &Path, out_dir: &Path, recipe: &DegradationRanges, seed: u64) -> Result<Vec<PathBuf>> {
    let images = load_dir(in_dir)?;
    if images.is_empty() {
        return Err(HdrError::usage(format!("no readable images in {}", in_dir.display())));
    }
    let mut outputs = Vec::new();
    for (i, (name, img)) in images.iter().enumerate() {
        let lq = degrade_sampled(img, recipe, seed, &[i as u64], &JpegCodec)?;
        let path = out_dir.join(format!("{name}.png"));
        save_png(&lq, &path)?;
        outputs.push(path);
    }
    Ok(outputs)
}

pub struct TrainOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Overrides both the training and the initialization seed.
    pub seed: Option<u64>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub records: Vec<MetricRecord>,
}

pub fn apply_seed(cfg: &mut TrainConfig, seed: u64) {
    cfg.seed = seed;
    cfg.model.seed = seed;
}

/// Training images, checked against the model's input size.
pub fn load_training_set(dir: &Path, cfg: &TrainConfig) -> Result<Vec<ImageGrid>> {
    let images = load_dir(dir)?;
    if images.is_empty() {
        return Err(HdrError::usage(format!("no readable images in {}", dir.display())));
    }
    let (h, w) = cfg.model.image_size;
    for (name, img) in &images {
        if (img.height(), img.width()) != (h, w) {
            return Err(HdrError::usage(format!("{name}: image is {}×{}, model expects {h}×{w}", img.height(), img.width())));
        }
    }
    Ok(images.into_iter().map(|(_, img)| img).collect())
}

pub fn load_stage0(run: &RunConfig) -> Result<Option<HdrFaceModel>> {
    match &run.intermediate_restorer {
        Some(path) => Ok(Some(checkpoint::load(path)?.state.model)),
        None => Ok(None),
    }
}

/// Trains from `run` (or continues `opts.resume`) and writes checkpoints and
/// the metrics stream under `opts.out`. With `steps = 0` the initialization
/// itself is checkpointed.
pub fn train(run: &RunConfig, opts: &TrainOptions, backends: &Backends) -> Result<TrainOutcome> {
    let (cfg, preset, mut state, stage0) = match &opts.resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            let mut cfg = ck.config;
            cfg.steps = run.train.steps;
            if let Some(s) = opts.seed {
                if s != cfg.seed {
                    return Err(HdrError::usage(format!("--seed {s} differs from the checkpoint's seed {}", cfg.seed)));
                }
            }
            if ck.state.step > cfg.steps {
                return Err(HdrError::usage(format!("checkpoint is at step {} but the config asks for {}", ck.state.step, cfg.steps)));
            }
            (cfg, ck.preset, ck.state, ck.stage0)
        }
        None => {
            let mut cfg = run.train.clone();
            if let Some(s) = opts.seed {
                apply_seed(&mut cfg, s);
            }
            let state = TrainState::new(&cfg)?;
            (cfg, run.preset, state, load_stage0(run)?)
        }
    };
    cfg.validate()?;
    let images = if cfg.steps > state.step { load_training_set(&opts.data, &cfg)? } else { Vec::new() };

    std::fs::create_dir_all(&opts.out).map_err(|e| HdrError::io(&opts.out, e))?;
    let ckpt_dir = opts.out.join("checkpoints");
    let metrics_path = opts.out.join(METRICS_FILE);
    let mut metrics = MetricsWriter::open(&metrics_path, state.step)?;
    let restorer = restorer_for(stage0.as_ref());
    let ctx = backends.train(restorer.as_ref());
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut io_error = None;

    if state.step < cfg.steps {
        let every = cfg.checkpoint_every;
        let result = train_loop(&images, &mut state, &cfg, &ctx, |m, st| {
            let rec = MetricRecord::from(m);
            log::info!("step {} total {:.5} rec {:.5} per {:.5} id {:.5} gan_g {:.5} gan_d {:.5}", rec.step, rec.total, rec.rec, rec.per, rec.id, rec.gan_g, rec.gan_d);
            let mut sink = || -> Result<()> {
                metrics.write(&rec)?;
                if every > 0 && st.step % every == 0 && st.step < cfg.steps {
                    let path = ckpt_dir.join(format!("step_{:06}.ckpt", st.step));
                    checkpoint::save(&path, &cfg, preset, st, stage0.as_ref())?;
                    checkpoints.push(path);
                }
                Ok(())
            };
            if let Err(e) = sink() {
                io_error = Some(e);
                return Err(hdrface_core::Error::invalid("training output failed"));
            }
            records.push(rec);
            Ok(())
        });
        if let Some(e) = io_error {
            return Err(e);
        }
        result?;
    }
    let final_path = opts.out.join(FINAL_CHECKPOINT);
    checkpoint::save(&final_path, &cfg, preset, &state, stage0.as_ref())?;
    checkpoints.push(final_path.clone());
    Ok(TrainOutcome { checkpoint: final_path, metrics: metrics_path, checkpoints, records })
}

pub fn restore_dir(in_dir: &Path, out_dir: &Path, ck: &Checkpoint, regime: Option<Regime>) -> Result<Vec<PathBuf>> {
    let model = &ck.state.model;
    if let Some(r) = regime {
        if r != model.regime() {
            return Err(HdrError::usage(format!("--regime {r:?} does not match the checkpoint's {:?} model", model.regime())));
        }
    }
    let images = load_dir(in_dir)?;
    if images.is_empty() {
        return Err(HdrError::usage(format!("no readable images in {}", in_dir.display())));
    }
    let restorer = restorer_for(ck.stage0.as_ref());
    let (h, w) = model.config.image_size;
    let mut outputs = Vec::new();
    for (name, img) in &images {
        let input = if img.dims().0 == h && img.dims().1 == w { img.clone() } else { resize(img, h, w)? };
        let out = model.restore(&input, restorer.as_ref())?;
        let path = out_dir.join(format!("{name}.png"));
        save_png(&out, &path)?;
        outputs.push(path);
    }
    Ok(outputs)
}

/// Scores every prediction whose file stem has a ground truth.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, backends: &Backends) -> Result<MetricReport> {
    let preds = load_dir(pred_dir)?;
    let gts = load_dir(gt_dir)?;
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for (name, pred) in &preds {
        match gts.iter().find(|(n, _)| n == name) {
            Some((_, gt)) => rows.push(evaluate_pair(name, pred, gt, &backends.eval())?),
            None => missing.push(name.clone()),
        }
    }
    missing.extend(gts.iter().filter(|(n, _)| !preds.iter().any(|(p, _)| p == n)).map(|(n, _)| n.clone()));
    missing.sort();
    if rows.is_empty() {
        return Err(HdrError::usage(format!("no file names in common between {} and {}", pred_dir.display(), gt_dir.display())));
    }
    Ok(build_report(rows, missing, &backends.eval())?)
}

fn table_row(out: &mut String, name: &str, r: &MetricRow) {
    let _ = writeln!(out, "| {:<14} | {:>8.3} | {:>6.4} | {:>8.3} | {:>7.3} |", name, r.psnr, r.ssim, r.id_degree, r.lmd);
}

fn table_head(out: &mut String, first: &str) {
    let _ = writeln!(out, "| {:<14} | {:>8} | {:>6} | {:>8} | {:>7} |", first, "PSNR", "SSIM", "Deg.", "LMD");
    let _ = writeln!(out, "|{:-<16}|{:->10}|{:->8}|{:->10}|{:->9}|", "", "", "", "", "");
}

pub fn render_report(report: &MetricReport) -> String {
    let mut s = String::new();
    table_head(&mut s, "image");
    for r in &report.rows {
        table_row(&mut s, &r.name, r);
    }
    table_row(&mut s, "mean", &report.mean);
    if !report.missing.is_empty() {
        let _ = writeln!(s, "\nunpaired: {}", report.missing.join(", "));
    }
    s
}

/// Gate heatmaps of the fusion module for every image in `in_dir`,
/// upscaled by `scale` with nearest-neighbour sampling.
pub fn fuse_viz(in_dir: &Path, out_dir: &Path, ck: &Checkpoint, scale: usize) -> Result<Vec<PathBuf>> {
    let model = &ck.state.model;
    if model.config.condition != ConditionMode::Sdfm {
        log::warn!("checkpoint conditions through `{}`; its fusion gates are untrained", model.config.condition.name());
    }
    let images = load_dir(in_dir)?;
    if images.is_empty() {
        return Err(HdrError::usage(format!("no readable images in {}", in_dir.display())));
    }
    let restorer = restorer_for(ck.stage0.as_ref());
    let grid = model.config.cond_grid()?;
    let mut outputs = Vec::new();
    for (name, lq) in &images {
        let mid = restorer.restore(lq)?;
        let face = encode_native(&mid, &model.encoder, SourceTag::FaceMid)?;
        let lr = encode_native(lq, &model.encoder, SourceTag::Lr)?;
        let (_, gates) = model.sdfm().fuse(&model.store, &face, &lr)?;
        let heat = gate_heatmap(&gates, grid)?;
        let s = scale.max(1);
        let big = ImageGrid::from_fn(heat.height() * s, heat.width() * s, 3, |y, x, c| heat.get(y / s, x / s, c));
        let path = out_dir.join(format!("{name}_gate.png"));
        save_png(&big, &path)?;
        outputs.push(path);
    }
    Ok(outputs)
}

pub fn ablate(
    run: &RunConfig,
    train_dir: &Path,
    heldout_dir: &Path,
    spec: &AblationSpec,
    backends: &Backends,
) -> Result<AblationReport> {
    let train = load_training_set(train_dir, &spec.base)?;
    let heldout = load_dir(heldout_dir)?;
    if heldout.is_empty() {
        return Err(HdrError::usage(format!("no readable images in {}", heldout_dir.display())));
    }
    let stage0 = load_stage0(run)?;
    let restorer = restorer_for(stage0.as_ref());
    let ctx = backends.train(restorer.as_ref());
    let report = run_ablation(&train, &heldout, spec, &ctx, &backends.eval(), |v, seed, m| {
        log::debug!("{} seed {seed} step {} total {:.5}", v.name(), m.step, m.total);
    })?;
    Ok(report)
}

/// Variants as rows, metrics as columns, with the degraded inputs first.
pub fn render_ablation(report: &AblationReport) -> String {
    let mut s = String::new();
    table_head(&mut s, "condition");
    table_row(&mut s, "degraded", &report.degraded);
    for row in &report.table {
        table_row(&mut s, &row.name, row);
    }
    s
}

/// Config snapshot written next to a run's outputs.
pub fn write_config_snapshot(dir: &Path, run: &RunConfig) -> Result<PathBuf> {
    let path = dir.join("config.toml");
    checkpoint::write_atomic(&path, config::to_toml(run)?.as_bytes())?;
    Ok(path)
}

pub fn default_run(regime: Regime) -> RunConfig {
    RunConfig::preset(Preset::Toy, regime)
}

pub fn save_images(dir: &Path, images: &[(String, ImageGrid)]) -> Result<()> {
    for (name, img) in images {
        imageio::save_png(img, &dir.join(format!("{name}.png")))?;
    }
    Ok(())
}
