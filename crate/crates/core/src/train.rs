//! One-step restoration training: on-the-fly degradation, the forward chain,
//! and alternating generator/discriminator AdamW updates.
//!
//! All randomness is drawn from streams keyed by `(seed, step, slot)`, so a
//! run resumed from a checkpoint continues exactly like an uninterrupted one.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::degrade::{degrade_sampled, DegradationRanges, LossyCodec};
use crate::encoder::{encode_native, SourceTag};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::losses::{
    gan_relativistic_descent_graph, gan_standard_graph, identity_loss_graph, mse_graph, perceptual_loss_sd_graph, IdentityBackend,
    LossTerms, LossWeights, PerceptualBackend,
};
use crate::model::{Discriminator, HdrFaceModel, ModelConfig};
use crate::nn::{AdamW, AdamWConfig};
use crate::onestep::{build_lr_condition, rf_forward, IntermediateRestorer, LatentCodec, Regime};
use crate::rng::{normal_vec, purpose, stream};
use crate::LatentGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanKind {
    Standard,
    Relativistic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    GeneratorFirst,
    DiscriminatorFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub p_clean: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub recipe: DegradationRanges,
    /// `0` writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub gan: GanKind,
    pub update_order: UpdateOrder,
    /// Adds the Sobel-domain perceptual branch.
    pub edge_perceptual: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full(Regime::Epsilon)
    }
}

impl TrainConfig {
    /// Optimizer, batch and loss settings of the reference training table.
    pub fn full(regime: Regime) -> Self {
        let (lr, batch, weights, gan) = match regime {
            Regime::Epsilon => (2e-4, 2, LossWeights::EPSILON_DEFAULT, GanKind::Standard),
            Regime::RectifiedFlow => (5e-5, 1, LossWeights::RF_DEFAULT, GanKind::Relativistic),
        };
        Self {
            model: ModelConfig::for_regime(regime),
            steps: 1000,
            batch_size: batch,
            lr_generator: lr,
            lr_discriminator: lr,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            p_clean: 0.5,
            weights,
            seed: 0,
            recipe: DegradationRanges::default(),
            checkpoint_every: 0,
            gan,
            update_order: UpdateOrder::GeneratorFirst,
            edge_perceptual: regime == Regime::Epsilon,
        }
    }

    /// Reference loss weights with batch size, learning rates and degradation
    /// ranges sized for from-scratch training of the toy networks on 64×64 faces.
    pub fn toy(regime: Regime) -> Self {
        let mut c = Self::full(regime);
        c.steps = 500;
        c.batch_size = 4;
        c.lr_generator = 2e-3;
        c.lr_discriminator = 1e-4;
        c.recipe = DegradationRanges {
            blur_sigma: (0.5, 2.5),
            down_factor: (1.0, 4.0),
            noise_sigma: (0.0, 0.05),
            jpeg_quality: (40, 90),
            second_order: false,
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        for (name, v) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.p_clean) {
            return Err(Error::invalid(format!("p_clean must lie in [0, 1], got {}", self.p_clean)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        self.weights.validate()?;
        self.recipe.validate()
    }

    fn adam(&self, lr: f64) -> AdamWConfig {
        AdamWConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: HdrFaceModel,
    pub disc: Discriminator,
    pub opt_g: AdamW,
    pub opt_d: AdamW,
    /// Completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = HdrFaceModel::new(config.model.clone())?;
        let disc = Discriminator::new(&config.model)?;
        let opt_g = AdamW::new(config.adam(config.lr_generator), &model.store);
        let opt_d = AdamW::new(config.adam(config.lr_discriminator), &disc.store);
        Ok(Self { model, disc, opt_g, opt_d, step: 0 })
    }
}

/// Frozen collaborators of a training run.
pub struct TrainContext<'a> {
    pub restorer: &'a dyn IntermediateRestorer,
    pub jpeg: &'a dyn LossyCodec,
    pub perceptual: &'a dyn PerceptualBackend,
    pub identity: &'a dyn IdentityBackend,
}

/// Per-step metrics; batch means for the loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub rec: f64,
    pub per: f64,
    pub id: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub total: f64,
    /// `z_cond` noise level `σ'` per example (rectified-flow regime only).
    pub z_cond_sigma: Vec<f64>,
    pub clean_skips: usize,
}

impl StepMetrics {
    pub fn terms(&self) -> LossTerms {
        LossTerms { rec: self.rec, per: self.per, id: self.id, gan: self.gan_g }
    }
}

/// Degradation of example `slot` at `step`.
pub fn degrade_example(hq: &ImageGrid, config: &TrainConfig, step: u64, slot: u64, jpeg: &dyn LossyCodec) -> Result<ImageGrid> {
    degrade_sampled(hq, &config.recipe, config.seed, &[purpose::DEGRADE, step, slot], jpeg)
}

struct Prepared {
    face: crate::Tensor,
    lr: crate::Tensor,
    z_hr: LatentGrid,
    z_t: LatentGrid,
    aux: Option<LatentGrid>,
    f: Option<f64>,
    sigma_prime: Option<f64>,
    skipped: bool,
}

fn prepare(hq: &ImageGrid, state: &TrainState, config: &TrainConfig, ctx: &TrainContext<'_>, step: u64, slot: u64) -> Result<Prepared> {
    let model = &state.model;
    let lq = degrade_example(hq, config, step, slot, ctx.jpeg).map_err(|e| e.in_stage("degrade"))?;
    let mid = ctx.restorer.restore(&lq).map_err(|e| e.in_stage("intermediate restorer"))?;
    let face = encode_native(&mid, &model.encoder, SourceTag::FaceMid)?.into_tokens();
    let lr = encode_native(&lq, &model.encoder, SourceTag::Lr)?.into_tokens();
    let codec = model.codec();
    let z_lr = codec.encode(&lq)?;
    let z_hr = codec.encode(hq)?;
    match model.regime() {
        Regime::Epsilon => Ok(Prepared { face, lr, z_hr, z_t: z_lr, aux: None, f: None, sigma_prime: None, skipped: false }),
        Regime::RectifiedFlow => {
            let sigma = model.schedule.sigma_t;
            let (h, w, c) = z_lr.dims();
            let noise = LatentGrid::new(h, w, c, normal_vec(&mut stream(config.seed, &[purpose::NOISE, step, slot]), h * w * c))?;
            let z_t = rf_forward(&z_lr, sigma, &noise)?;
            let cond = build_lr_condition(&z_lr, sigma, &mut stream(config.seed, &[purpose::CONDITION, step, slot]), config.p_clean)?;
            Ok(Prepared {
                face,
                lr,
                z_hr,
                z_t,
                aux: Some(cond.z_cond),
                f: Some(cond.f),
                sigma_prime: Some(cond.sigma_prime),
                skipped: cond.skipped,
            })
        }
    }
}

struct GenOutcome {
    terms: LossTerms,
    total: f64,
    fakes: Vec<crate::Tensor>,
    conds: Vec<crate::Tensor>,
}

fn generator_update(batch: &[Prepared], hq: &[&ImageGrid], state: &mut TrainState, config: &TrainConfig, ctx: &TrainContext<'_>) -> GenOutcome {
    let regime = state.model.regime();
    let mut g = Graph::new();
    let p = state.model.store.bind(&mut g, true);
    let pd = state.disc.store.bind(&mut g, false);
    let scale = 1.0 / batch.len() as f64;
    let mut sums = LossTerms::default();
    let mut total: Option<Var> = None;
    let mut fakes = Vec::with_capacity(batch.len());
    let mut conds = Vec::with_capacity(batch.len());
    for (ex, img) in batch.iter().zip(hq) {
        let out = state.model.generate_graph(&mut g, &p, &ex.face, &ex.lr, ex.z_t.tensor(), ex.aux.as_ref().map(|a| a.tensor()), ex.f);
        let target = g.constant(img.tensor().clone());
        let rec = mse_graph(&mut g, out.image, target);
        let per = if config.edge_perceptual {
            perceptual_loss_sd_graph(&mut g, target, out.image, ctx.perceptual)
        } else {
            ctx.perceptual.distance_graph(&mut g, target, out.image)
        };
        let id = (regime == Regime::Epsilon && config.weights.lambda_id > 0.0)
            .then(|| identity_loss_graph(&mut g, target, out.image, ctx.identity));
        let cond_value = g.value(out.cond.cond).clone();
        let cond_const = g.constant(cond_value.clone());
        let d_cond = state.disc.is_conditioned().then_some(cond_const);
        let real_z = g.constant(ex.z_hr.tensor().clone());
        let real = state.disc.forward(&mut g, &pd, real_z, d_cond);
        let fake = state.disc.forward(&mut g, &pd, out.z_hat, d_cond);
        let gan = match config.gan {
            GanKind::Standard => gan_standard_graph(&mut g, real, fake).g_loss,
            GanKind::Relativistic => gan_relativistic_descent_graph(&mut g, real, fake).g_loss,
        };
        let w = &config.weights;
        let mut parts = alloc::vec![g.scale(rec, w.lambda_rec), g.scale(per, w.lambda_per), g.scale(gan, w.lambda_g)];
        if let Some(id) = id {
            parts.push(g.scale(id, w.lambda_id));
            sums.id += g.value(id).item();
        }
        sums.rec += g.value(rec).item();
        sums.per += g.value(per).item();
        sums.gan += g.value(gan).item();
        let mut ex_total = parts[0];
        for &q in &parts[1..] {
            ex_total = g.add(ex_total, q);
        }
        let ex_total = g.scale(ex_total, scale);
        total = Some(match total {
            Some(t) => g.add(t, ex_total),
            None => ex_total,
        });
        fakes.push(g.value(out.z_hat).clone());
        conds.push(cond_value);
    }
    let total = total.expect("non-empty batch");
    let total_value = g.value(total).item();
    let terms = LossTerms { rec: sums.rec * scale, per: sums.per * scale, id: sums.id * scale, gan: sums.gan * scale };
    if total_value.is_finite() && terms.all_finite() {
        let mut grads = g.backward(total);
        let grads = p.collect_grads(&state.model.store, &mut grads);
        state.opt_g.update(&mut state.model.store, &grads);
    }
    GenOutcome { terms, total: total_value, fakes, conds }
}

fn discriminator_update(batch: &[Prepared], fakes: &[crate::Tensor], conds: &[crate::Tensor], state: &mut TrainState, config: &TrainConfig) -> f64 {
    let mut g = Graph::new();
    let p = state.disc.store.bind(&mut g, true);
    let scale = 1.0 / batch.len() as f64;
    let mut total: Option<Var> = None;
    for ((ex, fake), cond) in batch.iter().zip(fakes).zip(conds) {
        let cond = state.disc.is_conditioned().then(|| g.constant(cond.clone()));
        let real_z = g.constant(ex.z_hr.tensor().clone());
        let fake_z = g.constant(fake.clone());
        let real = state.disc.forward(&mut g, &p, real_z, cond);
        let fake = state.disc.forward(&mut g, &p, fake_z, cond);
        let d = match config.gan {
            GanKind::Standard => gan_standard_graph(&mut g, real, fake).d_loss,
            GanKind::Relativistic => gan_relativistic_descent_graph(&mut g, real, fake).d_loss,
        };
        let d = g.scale(d, scale);
        total = Some(match total {
            Some(t) => g.add(t, d),
            None => d,
        });
    }
    let total = total.expect("non-empty batch");
    let value = g.value(total).item();
    if value.is_finite() {
        let mut grads = g.backward(total);
        let grads = p.collect_grads(&state.disc.store, &mut grads);
        state.opt_d.update(&mut state.disc.store, &grads);
    }
    value
}

/// One generator update followed by one discriminator update on the
/// detached generator outputs (or the reverse, per `update_order`).
pub fn train_step(hq: &[&ImageGrid], state: &mut TrainState, config: &TrainConfig, ctx: &TrainContext<'_>) -> Result<StepMetrics> {
    if hq.is_empty() {
        return Err(Error::EmptyBatch("train_step"));
    }
    let step = state.step + 1;
    let prepared = hq
        .iter()
        .enumerate()
        .map(|(slot, img)| prepare(img, state, config, ctx, step, slot as u64))
        .collect::<Result<Vec<_>>>()?;
    let (gen, gan_d) = match config.update_order {
        UpdateOrder::GeneratorFirst => {
            let gen = generator_update(&prepared, hq, state, config, ctx);
            check_finite(step, &gen, None)?;
            let d = discriminator_update(&prepared, &gen.fakes, &gen.conds, state, config);
            (gen, d)
        }
        UpdateOrder::DiscriminatorFirst => {
            let probe = generator_outputs_only(&prepared, hq, state, config, ctx);
            let d = discriminator_update(&prepared, &probe.fakes, &probe.conds, state, config);
            let gen = generator_update(&prepared, hq, state, config, ctx);
            (gen, d)
        }
    };
    check_finite(step, &gen, Some(gan_d))?;
    state.step = step;
    let sigmas: Vec<f64> = prepared.iter().filter_map(|p| p.sigma_prime).collect();
    Ok(StepMetrics {
        step,
        rec: gen.terms.rec,
        per: gen.terms.per,
        id: gen.terms.id,
        gan_g: gen.terms.gan,
        gan_d,
        total: gen.total,
        z_cond_sigma: sigmas,
        clean_skips: prepared.iter().filter(|p| p.skipped).count(),
    })
}

fn generator_outputs_only(batch: &[Prepared], hq: &[&ImageGrid], state: &TrainState, config: &TrainConfig, ctx: &TrainContext<'_>) -> GenOutcome {
    let mut probe = state.clone();
    probe.opt_g.config.lr = 0.0;
    generator_update(batch, hq, &mut probe, config, ctx)
}

fn check_finite(step: u64, gen: &GenOutcome, d: Option<f64>) -> Result<()> {
    let d_ok = d.is_none_or(f64::is_finite);
    if gen.total.is_finite() && gen.terms.all_finite() && d_ok {
        return Ok(());
    }
    let mut msg: String = format!("step {step}: total={} {}", gen.total, gen.terms.describe());
    if let Some(d) = d {
        msg.push_str(&format!(" disc={d}"));
    }
    Err(Error::NonFinite(msg))
}

/// Indices of the examples used at `step` (1-based): consecutive slices of
/// a per-epoch shuffled order.
pub fn batch_indices(dataset_len: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let start = (step - 1) as usize * batch_size;
    let mut epoch_cache: Option<(usize, Vec<usize>)> = None;
    (start..start + batch_size)
        .map(|pos| {
            let epoch = pos / dataset_len;
            if epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut order: Vec<usize> = (0..dataset_len).collect();
                order.shuffle(&mut stream(seed, &[purpose::SHUFFLE, epoch as u64]));
                epoch_cache = Some((epoch, order));
            }
            epoch_cache.as_ref().unwrap().1[pos % dataset_len]
        })
        .collect()
}

/// Runs `config.steps − state.step` further steps, calling `on_step` after each.
pub fn train_loop(
    images: &[ImageGrid],
    state: &mut TrainState,
    config: &TrainConfig,
    ctx: &TrainContext<'_>,
    mut on_step: impl FnMut(&StepMetrics, &TrainState) -> Result<()>,
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::EmptyBatch("training dataset"));
    }
    if images.len() < config.batch_size {
        return Err(Error::invalid(format!(
            "dataset has {} images but batch_size is {}",
            images.len(),
            config.batch_size
        )));
    }
    while state.step < config.steps {
        let idx = batch_indices(images.len(), config.batch_size, config.seed, state.step + 1);
        let batch: Vec<&ImageGrid> = idx.iter().map(|&i| &images[i]).collect();
        let metrics = train_step(&batch, state, config, ctx)?;
        on_step(&metrics, state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::Lossless;
    use crate::losses::{MsePerceptual, ToyIdentity};
    use crate::onestep::IdentityRestorer;
    use crate::synth::toy_face;

    fn ctx<'a>(p: &'a MsePerceptual, id: &'a ToyIdentity) -> TrainContext<'a> {
        TrainContext { restorer: &IdentityRestorer, jpeg: &Lossless, perceptual: p, identity: id }
    }

    fn small(regime: Regime) -> TrainConfig {
        let mut c = TrainConfig::toy(regime);
        c.model.generator.hidden = 8;
        c.steps = 2;
        c
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (p, id) = (MsePerceptual, ToyIdentity::default());
        let mut cfg = small(Regime::Epsilon);
        cfg.lr_generator = 0.0;
        cfg.lr_discriminator = 0.0;
        let mut st = TrainState::new(&cfg).unwrap();
        let before = (st.model.store.clone(), st.disc.store.clone());
        let imgs = [toy_face(1, 64, 64), toy_face(2, 64, 64)];
        let m = train_step(&[&imgs[0], &imgs[1]], &mut st, &cfg, &ctx(&p, &id)).unwrap();
        assert!(m.total.is_finite() && m.rec > 0.0);
        assert_eq!(st.model.store, before.0);
        assert_eq!(st.disc.store, before.1);
    }

    #[test]
    fn rf_step_reports_condition_levels() {
        let (p, id) = (MsePerceptual, ToyIdentity::default());
        let mut cfg = small(Regime::RectifiedFlow);
        cfg.p_clean = 1.0;
        let mut st = TrainState::new(&cfg).unwrap();
        let img = toy_face(3, 64, 64);
        let m = train_step(&[&img], &mut st, &cfg, &ctx(&p, &id)).unwrap();
        assert_eq!(m.z_cond_sigma, alloc::vec![0.0]);
        assert_eq!(m.clean_skips, 1);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (1..=3).flat_map(|s| batch_indices(6, 2, 9, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }
}
