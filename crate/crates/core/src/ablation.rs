//! Condition-pathway ablations: identical training runs that differ only in
//! how the generator's semantic condition is built, scored on held-out pairs.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::degrade::degrade_sampled;
use crate::error::{Error, Result};
use crate::eval::{evaluate_pair, EvalBackends, MetricRow};
use crate::image::ImageGrid;
use crate::model::ConditionMode;
use crate::train::{train_loop, StepMetrics, TrainConfig, TrainContext, TrainState};

/// Which encoded streams reach the condition pathway.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Streams {
    Lr,
    Face,
    Both,
}

impl Streams {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(Self::Lr),
            "face" | "sr" => Ok(Self::Face),
            "both" => Ok(Self::Both),
            _ => Err(Error::invalid(format!("unknown stream set `{s}` (expected lr, face or both)"))),
        }
    }

    /// Condition mode implied by the stream set for a fusing variant.
    pub fn condition(self) -> ConditionMode {
        match self {
            Self::Lr => ConditionMode::LrOnly,
            Self::Face => ConditionMode::FaceOnly,
            Self::Both => ConditionMode::Sdfm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub base: TrainConfig,
    pub variants: Vec<ConditionMode>,
    pub seeds: Vec<u64>,
    /// Seed of the held-out degradations; shared by every variant.
    pub eval_seed: u64,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::invalid("ablation needs at least one variant"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("ablation needs at least one seed"));
        }
        let mut seen = Vec::new();
        for v in &self.variants {
            if seen.contains(v) {
                return Err(Error::invalid(format!("variant `{}` listed twice", v.name())));
            }
            seen.push(*v);
        }
        self.base.validate()
    }
}

/// Metrics of one (variant, seed) run averaged over the held-out pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: ConditionMode,
    pub seed: u64,
    pub final_loss: f64,
    pub metrics: MetricRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    /// One row per variant, averaged over seeds, in the order the variants were given.
    pub table: Vec<MetricRow>,
    /// Metrics of the degraded inputs themselves.
    pub degraded: MetricRow,
    pub heldout: Vec<String>,
}

impl AblationReport {
    /// Restored PSNR of `variant` under `seed`, if that run exists.
    pub fn psnr(&self, variant: ConditionMode, seed: u64) -> Option<f64> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed).map(|r| r.metrics.psnr)
    }
}

fn mean_row(name: &str, rows: &[MetricRow]) -> MetricRow {
    let n = rows.len().max(1) as f64;
    let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    MetricRow {
        name: name.into(),
        psnr: avg(|r| r.psnr),
        ssim: avg(|r| r.ssim),
        id_degree: avg(|r| r.id_degree),
        lmd: avg(|r| r.lmd),
    }
}

/// Degraded inputs for the held-out ground truths, keyed by position.
pub fn heldout_inputs(heldout: &[(String, ImageGrid)], spec: &AblationSpec, ctx: &TrainContext<'_>) -> Result<Vec<ImageGrid>> {
    heldout
        .iter()
        .enumerate()
        .map(|(i, (_, hq))| degrade_sampled(hq, &spec.base.recipe, spec.eval_seed, &[i as u64], ctx.jpeg))
        .collect()
}

/// Trains every `(variant, seed)` pair on `train` and scores it on `heldout`.
/// `progress` sees each run's step metrics.
pub fn run_ablation(
    train: &[ImageGrid],
    heldout: &[(String, ImageGrid)],
    spec: &AblationSpec,
    ctx: &TrainContext<'_>,
    backends: &EvalBackends<'_>,
    mut progress: impl FnMut(ConditionMode, u64, &StepMetrics),
) -> Result<AblationReport> {
    spec.validate()?;
    if heldout.is_empty() {
        return Err(Error::EmptyBatch("held-out pairs"));
    }
    let inputs = heldout_inputs(heldout, spec, ctx)?;
    let degraded_rows = heldout
        .iter()
        .zip(&inputs)
        .map(|((name, hq), lq)| evaluate_pair(name, lq, hq, backends))
        .collect::<Result<Vec<_>>>()?;

    let mut runs = Vec::new();
    for &variant in &spec.variants {
        for &seed in &spec.seeds {
            let mut cfg = spec.base.clone();
            cfg.seed = seed;
            cfg.model.seed = seed;
            cfg.model.condition = variant;
            let mut state = TrainState::new(&cfg)?;
            let mut final_loss = f64::NAN;
            train_loop(train, &mut state, &cfg, ctx, |m, _| {
                final_loss = m.total;
                progress(variant, seed, m);
                Ok(())
            })?;
            let rows = heldout
                .iter()
                .zip(&inputs)
                .map(|((name, hq), lq)| {
                    let out = state.model.restore(lq, ctx.restorer)?;
                    evaluate_pair(name, &out, hq, backends)
                })
                .collect::<Result<Vec<_>>>()?;
            runs.push(AblationRun { variant, seed, final_loss, metrics: mean_row(variant.name(), &rows) });
        }
    }
    let table = spec
        .variants
        .iter()
        .map(|v| {
            let rows: Vec<MetricRow> = runs.iter().filter(|r| r.variant == *v).map(|r| r.metrics.clone()).collect();
            mean_row(v.name(), &rows)
        })
        .collect();
    Ok(AblationReport {
        runs,
        table,
        degraded: mean_row("degraded", &degraded_rows),
        heldout: heldout.iter().map(|(n, _)| n.clone()).collect(),
    })
}
