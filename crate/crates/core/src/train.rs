//! Two-stage training: rate-distortion-perceptual pretraining, then
//! adversarial fine-tuning with alternating generator and discriminator
//! updates.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::corpus::Corpus;
use crate::disc::{DesignKind, DiscConfig, Discriminator};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Tape};
use crate::losses::{
    adv_d_loss_graph, adv_g_loss_graph, hrrgan_pair, AdvKind, FeatureMetric, LossBreakdown, LossTerms, LossWeights,
    PerceptualMetric, StageCoefficients,
};
use crate::model::{Model, ModelConfig, QualityControl, DEFAULT_BETA_MAX, PAD_MULTIPLE};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

/// Share of each stage trained at the final learning rate.
pub const DECAY_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub batch_size: usize,
    /// Square crop side; a multiple of 64.
    pub crop_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub levels: usize,
    pub beta_max: f64,
    pub design: DesignKind,
    pub adversarial: AdvKind,
    pub rate_weights: Vec<f64>,
    pub distortion_weight: f64,
    /// Defaults to `2 / beta_max`.
    pub perceptual_weight: Option<f64>,
    /// Defaults to `0.002 / beta_max`.
    pub adversarial_weight: Option<f64>,
    pub channels: usize,
    pub latent_channels: usize,
    pub disc_widths: [usize; 4],
    /// Directory of training PNGs.
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Optional weights file for the perceptual metric.
    pub metric_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            stage1_steps: 2_000_000,
            stage2_steps: 3_000_000,
            batch_size: 8,
            crop_size: 256,
            base_lr: 1e-4,
            final_lr: 1e-5,
            levels: 5,
            beta_max: DEFAULT_BETA_MAX,
            design: DesignKind::Independent,
            adversarial: AdvKind::Hrrgan,
            rate_weights: w.rate,
            distortion_weight: w.distortion,
            perceptual_weight: None,
            adversarial_weight: None,
            channels: 32,
            latent_channels: 32,
            disc_widths: [64, 128, 256, 256],
            corpus: PathBuf::from("corpus"),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            checkpoint_interval: 1000,
            metric_weights: None,
        }
    }
}

impl TrainConfig {
    /// Parses TOML, then applies `key=value` overrides. Values are read as
    /// TOML literals and fall back to plain strings.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.trim().to_string(), value);
        }
        let config: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serialisable config").as_bytes())
    }

    pub fn total_steps(&self) -> u64 {
        self.stage1_steps + self.stage2_steps
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            levels: self.levels,
            channels: self.channels,
            latent_channels: self.latent_channels,
            beta_max: self.beta_max,
            ..ModelConfig::default()
        }
    }

    pub fn disc_config(&self) -> DiscConfig {
        DiscConfig { kind: self.design, levels: self.levels, widths: self.disc_widths }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            rate: self.rate_weights.clone(),
            distortion: self.distortion_weight,
            perceptual: self.perceptual_weight.unwrap_or(2.0 / self.beta_max),
            adversarial: self.adversarial_weight.unwrap_or(0.002 / self.beta_max),
            beta_max: self.beta_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage1_steps == 0 || self.stage2_steps == 0 {
            return bad("both stages need at least one step".into());
        }
        if self.levels < 2 {
            return bad("training needs at least two quality levels".into());
        }
        if self.rate_weights.len() != self.levels {
            return bad(format!("{} rate weights for {} levels", self.rate_weights.len(), self.levels));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(PAD_MULTIPLE) {
            return bad(format!("crop_size must be a positive multiple of {PAD_MULTIPLE}"));
        }
        if !(self.base_lr > 0.0 && self.final_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.beta_max > 0.0 && self.beta_max.is_finite()) {
            return bad("beta_max must be positive".into());
        }
        self.model_config().validate()?;
        self.loss_weights().validate()
    }
}

/// Uniform level in `0..levels`.
pub fn sample_quality(rng: &mut impl Rng, levels: usize) -> usize {
    if levels <= 1 {
        0
    } else {
        rng.gen_range(0..levels)
    }
}

/// Uniform weight in `[0, beta_max]`.
pub fn sample_beta(rng: &mut impl Rng, beta_max: f64) -> f64 {
    if beta_max <= 0.0 {
        0.0
    } else {
        rng.gen_range(0.0..=beta_max)
    }
}

/// Step decay: `base` before the last 20% of `total` steps, `final_lr` after.
pub fn lr_at(step: u64, total: u64, base: f64, final_lr: f64) -> f64 {
    if (step as f64) < (1.0 - DECAY_FRACTION) * total as f64 {
        base
    } else {
        final_lr
    }
}

/// Adam with the usual moment coefficients.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    steps: u64,
    moments: BTreeMap<usize, (Tensor, Tensor)>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter in `store` that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - Self::BETA1.powi(t);
        let c2 = 1.0 - Self::BETA2.powi(t);
        for id in store.ids() {
            let Some(g) = grads.param(id) else { continue };
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {}", id.index)));
            }
            let (m, v) = self
                .moments
                .entry(id.index)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(id);
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = Self::BETA1 * *mv + (1.0 - Self::BETA1) * gv;
                *vv = Self::BETA2 * *vv + (1.0 - Self::BETA2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + Self::EPS);
            }
        }
        Ok(())
    }

    fn export(&self, tag: &str, store: &ParamStore, out: &mut BTreeMap<String, Tensor>) {
        for (id, p) in store.iter() {
            if let Some((m, v)) = self.moments.get(&id.index) {
                out.insert(format!("adam.{tag}.m.{}", p.name), m.clone());
                out.insert(format!("adam.{tag}.v.{}", p.name), v.clone());
            }
        }
    }

    fn import(steps: u64, tag: &str, store: &ParamStore, arrays: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (id, p) in store.iter() {
            let m = arrays.get(&format!("adam.{tag}.m.{}", p.name));
            let v = arrays.get(&format!("adam.{tag}.v.{}", p.name));
            match (m, v) {
                (Some(m), Some(v)) if m.shape() == p.value.shape() && v.shape() == p.value.shape() => {
                    moments.insert(id.index, (m.clone(), v.clone()));
                }
                (None, None) => {}
                _ => return Err(Error::Compatibility(format!("optimizer state for {} is inconsistent", p.name))),
            }
        }
        Ok(Self { steps, moments })
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub stage: u8,
    pub q: usize,
    pub beta: f64,
    pub rate_bpp: f64,
    pub distortion: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub total: f64,
    pub disc_loss: Option<f64>,
    pub lr: f64,
}

impl StepReport {
    fn new(step: u64, stage: u8, q: usize, beta: f64, b: &LossBreakdown, disc_loss: Option<f64>, lr: f64) -> Result<Self> {
        let r = Self {
            step,
            stage,
            q,
            beta,
            rate_bpp: b.rate,
            distortion: b.distortion,
            perceptual: b.perceptual,
            adversarial: b.adversarial,
            total: b.total,
            disc_loss,
            lr,
        };
        let values = [r.rate_bpp, r.distortion, r.perceptual, r.adversarial, r.total, r.disc_loss.unwrap_or(0.0)];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        Ok(r)
    }
}

/// Gradients and values of one generator-side evaluation.
pub struct GeneratorPhase {
    pub gradients: Gradients,
    pub breakdown: LossBreakdown,
    /// Reconstruction at the sampled level, reused by the discriminator step.
    pub reconstruction: Tensor,
}

#[derive(Serialize, Deserialize)]
struct TrainingMeta {
    step: u64,
    config_digest: String,
    config: TrainConfig,
    adam_g_steps: u64,
    adam_d_steps: u64,
}

pub struct Trainer {
    config: TrainConfig,
    model: Model,
    disc: Option<Discriminator>,
    metric: FeatureMetric,
    weights: LossWeights,
    opt_g: Adam,
    opt_d: Adam,
    step: u64,
}

/// Independent RNG stream per global step, so a resumed run draws the same
/// samples as an uninterrupted one.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

const DISC_SEED_OFFSET: u64 = 0xd15c;

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(), config.seed)?;
        let metric = match &config.metric_weights {
            Some(p) => FeatureMetric::load(p)?,
            None => FeatureMetric::default(),
        };
        let weights = config.loss_weights();
        Ok(Self { config, model, disc: None, metric, weights, opt_g: Adam::new(), opt_d: Adam::new(), step: 0 })
    }

    /// Continues from a checkpoint written by [`Trainer::save`] under the
    /// same configuration.
    pub fn resume(config: TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut t = Self::new(config)?;
        let ck = Checkpoint::load(path)?;
        let meta: TrainingMeta = serde_json::from_value(
            ck.training.ok_or_else(|| Error::Compatibility("checkpoint has no training state".into()))?,
        )
        .map_err(|e| Error::Format(format!("training state: {e}")))?;
        if meta.config_digest != t.config.digest() {
            return Err(Error::Compatibility("checkpoint was trained with a different configuration".into()));
        }
        t.opt_g = Adam::import(meta.adam_g_steps, "g", ck.model.params(), &ck.extra)?;
        if let Some(d) = &ck.discriminator {
            t.opt_d = Adam::import(meta.adam_d_steps, "d", d.params(), &ck.extra)?;
        }
        t.model = ck.model;
        t.disc = ck.discriminator;
        t.step = meta.step;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = TrainingMeta {
            step: self.step,
            config_digest: self.config.digest(),
            config: self.config.clone(),
            adam_g_steps: self.opt_g.steps,
            adam_d_steps: self.opt_d.steps,
        };
        let mut extra = BTreeMap::new();
        self.opt_g.export("g", self.model.params(), &mut extra);
        if let Some(d) = &self.disc {
            self.opt_d.export("d", d.params(), &mut extra);
        }
        let meta = serde_json::to_value(meta).map_err(|e| Error::Format(e.to_string()))?;
        Checkpoint::save(path, &self.model, self.disc.as_ref(), Some(meta), extra)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn discriminator(&self) -> Option<&Discriminator> {
        self.disc.as_ref()
    }

    pub fn metric(&self) -> &FeatureMetric {
        &self.metric
    }

    /// Global steps completed.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn stage(&self) -> u8 {
        if self.step < self.config.stage1_steps {
            1
        } else {
            2
        }
    }

    fn generator_lr(&self) -> f64 {
        let c = &self.config;
        if self.step < c.stage1_steps {
            lr_at(self.step, c.stage1_steps, c.base_lr, c.final_lr)
        } else {
            lr_at(self.step - c.stage1_steps, c.stage2_steps, c.base_lr, c.final_lr)
        }
    }

    /// Creates the stage-2 discriminator if it does not exist yet.
    pub fn ensure_discriminator(&mut self) -> Result<&Discriminator> {
        if self.disc.is_none() {
            self.disc = Some(Discriminator::new(self.config.disc_config(), self.config.seed.wrapping_add(DISC_SEED_OFFSET))?);
        }
        Ok(self.disc.as_ref().expect("just created"))
    }

    /// Shared rate, distortion and perceptual terms of a codec pass.
    fn base_terms<G: Graph>(
        &self,
        g: &mut G,
        x: &G::Var,
        quantized: &G::Var,
        recon: &G::Var,
    ) -> Result<(G::Var, G::Var, G::Var)> {
        let (b, _, h, w) = g.value(x).dims4()?;
        let bits = self.model.rate_bits_graph(g, quantized)?;
        let rate = g.scale(&bits, 1.0 / (b * h * w) as f64)?;
        let mse = g.mse(x, recon)?;
        let distortion = g.scale(&mse, 255.0 * 255.0)?;
        let perceptual = self.metric.distance_graph(g, recon, x)?;
        Ok((rate, distortion, perceptual))
    }

    /// Gradients of the stage-1 objective for `batch` at level `q`.
    pub fn stage1_phase(&self, batch: &Tensor, q: usize, beta: f64) -> Result<GeneratorPhase> {
        let mut g = Tape::new(&Group::MODEL);
        let x = g.constant(batch.clone());
        let b = g.constant(Tensor::scalar(beta));
        let qc = QualityControl::new(q, 0.0, self.config.levels)?;
        let out = self.model.nic_forward(&mut g, &x, qc, &b)?;
        let (rate, distortion, perceptual) = self.base_terms(&mut g, &x, &out.quantized, &out.reconstruction)?;
        let coef = StageCoefficients::stage1(&self.weights, q)?;
        let total = coef.combine_graph(&mut g, &rate, &distortion, Some(&perceptual), None)?;
        let terms = LossTerms {
            rate: g.value(&rate).item(),
            distortion: g.value(&distortion).item(),
            perceptual: g.value(&perceptual).item(),
            adversarial: 0.0,
        };
        let mut breakdown = coef.combine(&terms);
        breakdown.total = g.value(&total).item();
        let gradients = g.backward(total)?;
        Ok(GeneratorPhase { gradients, breakdown, reconstruction: g.value(&out.reconstruction).clone() })
    }

    /// Gradients of the stage-2 generator objective; the discriminator is
    /// frozen.
    pub fn stage2_generator_phase(&self, batch: &Tensor, q: usize, beta: f64) -> Result<GeneratorPhase> {
        let disc = self.disc.as_ref().ok_or_else(|| Error::Config("stage 2 needs a discriminator".into()))?;
        let mut g = Tape::new(&Group::MODEL);
        let x = g.constant(batch.clone());
        let b = g.constant(Tensor::scalar(beta));
        let (quantized, recon, adversarial) = match self.config.adversarial {
            AdvKind::Hrrgan => {
                let pair = hrrgan_pair(&mut g, &x, q, &b, &self.model, disc)?;
                (pair.primary.quantized, pair.primary.reconstruction, pair.generator_loss)
            }
            kind => {
                let qc = QualityControl::new(q, 0.0, self.config.levels)?;
                let out = self.model.nic_forward(&mut g, &x, qc, &b)?;
                let fake = disc.discriminate_graph(&mut g, &out.reconstruction, q)?;
                let real = disc.discriminate_graph(&mut g, &x, q)?;
                let loss = adv_g_loss_graph(&mut g, kind, &fake, &real)?;
                (out.quantized, out.reconstruction, loss)
            }
        };
        let (rate, distortion, perceptual) = self.base_terms(&mut g, &x, &quantized, &recon)?;
        let coef = StageCoefficients::stage2(&self.weights, q, beta)?;
        let total = coef.combine_graph(&mut g, &rate, &distortion, Some(&perceptual), Some(&adversarial))?;
        let terms = LossTerms {
            rate: g.value(&rate).item(),
            distortion: g.value(&distortion).item(),
            perceptual: g.value(&perceptual).item(),
            adversarial: g.value(&adversarial).item(),
        };
        let mut breakdown = coef.combine(&terms);
        breakdown.total = g.value(&total).item();
        let gradients = g.backward(total)?;
        Ok(GeneratorPhase { gradients, breakdown, reconstruction: g.value(&recon).clone() })
    }

    /// Discriminator loss and gradients on real `batch` against `fake`.
    pub fn discriminator_phase(&self, batch: &Tensor, fake: &Tensor, q: usize) -> Result<(f64, Gradients)> {
        let disc = self.disc.as_ref().ok_or_else(|| Error::Config("stage 2 needs a discriminator".into()))?;
        let mut g = Tape::new(&[Group::Discriminator]);
        let x = g.constant(batch.clone());
        let f = g.constant(fake.clone());
        let real = disc.discriminate_graph(&mut g, &x, q)?;
        let fake = disc.discriminate_graph(&mut g, &f, q)?;
        let loss = adv_d_loss_graph(&mut g, self.config.adversarial, &real, &fake)?;
        let value = g.value(&loss).item();
        Ok((value, g.backward(loss)?))
    }

    pub fn train_step_stage1(&mut self, batch: &Tensor, q: usize, beta: f64) -> Result<StepReport> {
        let lr = self.generator_lr();
        let phase = self.stage1_phase(batch, q, beta)?;
        let report = StepReport::new(self.step, 1, q, beta, &phase.breakdown, None, lr)?;
        self.opt_g.step(self.model.params_mut(), &phase.gradients, lr)?;
        self.step += 1;
        Ok(report)
    }

    pub fn train_step_stage2(&mut self, batch: &Tensor, q: usize, beta: f64) -> Result<StepReport> {
        self.ensure_discriminator()?;
        let lr = self.generator_lr();
        let phase = self.stage2_generator_phase(batch, q, beta)?;
        self.opt_g.step(self.model.params_mut(), &phase.gradients, lr)?;
        // The discriminator schedule starts over with stage 2.
        let (d_loss, d_grads) = self.discriminator_phase(batch, &phase.reconstruction, q)?;
        let report = StepReport::new(self.step, 2, q, beta, &phase.breakdown, Some(d_loss), lr)?;
        let disc = self.disc.as_mut().expect("created above");
        self.opt_d.step(disc.params_mut(), &d_grads, lr)?;
        self.step += 1;
        Ok(report)
    }

    /// Draws this step's level, weight and batch, then runs the stage's update.
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<StepReport> {
        let mut rng = step_rng(self.config.seed, self.step);
        let q = sample_quality(&mut rng, self.config.levels);
        let beta = sample_beta(&mut rng, self.config.beta_max);
        let batch = corpus.sample_batch(&mut rng, self.config.batch_size, self.config.crop_size)?;
        if self.stage() == 1 {
            self.train_step_stage1(&batch, q, beta)
        } else {
            self.train_step_stage2(&batch, q, beta)
        }
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.total_steps()
    }
}

/// Files written by [`run`].
pub struct RunPaths {
    pub latest: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub config: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            latest: dir.join("latest.ckpt"),
            final_checkpoint: dir.join("final.ckpt"),
            metrics: dir.join("metrics.csv"),
            config: dir.join("config.toml"),
        }
    }
}

/// Trains to completion, resuming from `latest.ckpt` in the output
/// directory when `resume` is set and that file exists. Returns the path of
/// the final checkpoint.
pub fn run(config: TrainConfig, resume: bool, mut on_report: impl FnMut(&StepReport)) -> Result<PathBuf> {
    let paths = RunPaths::new(&config.output_dir);
    std::fs::create_dir_all(&config.output_dir)?;
    let mut trainer = if resume && paths.latest.exists() {
        Trainer::resume(config.clone(), &paths.latest)?
    } else {
        Trainer::new(config.clone())?
    };
    let effective = config.to_toml()?;
    log::info!("effective configuration:\n{effective}");
    std::fs::write(&paths.config, &effective)?;
    let corpus = Corpus::load_dir(&config.corpus)?;

    // Keep log rows that precede the resume point.
    let mut kept = Vec::new();
    if trainer.step() > 0 && paths.metrics.exists() {
        let mut r = csv::Reader::from_path(&paths.metrics)?;
        for row in r.deserialize::<StepReport>() {
            let row = row?;
            if row.step < trainer.step() {
                kept.push(row);
            }
        }
    }
    let mut log = csv::Writer::from_path(&paths.metrics)?;
    for row in &kept {
        log.serialize(row)?;
    }
    while !trainer.is_finished() {
        let report = trainer.train_step(&corpus)?;
        log.serialize(&report)?;
        on_report(&report);
        let done = trainer.step();
        if config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 {
            log.flush()?;
            trainer.save(&paths.latest)?;
        }
    }
    log.flush()?;
    trainer.save(&paths.latest)?;
    trainer.save(&paths.final_checkpoint)?;
    Ok(paths.final_checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_down_in_the_last_fifth() {
        assert_eq!(lr_at(0, 1000, 1e-4, 1e-5), 1e-4);
        assert_eq!(lr_at(799, 1000, 1e-4, 1e-5), 1e-4);
        assert_eq!(lr_at(800, 1000, 1e-4, 1e-5), 1e-5);
        assert_eq!(lr_at(999, 1000, 1e-4, 1e-5), 1e-5);
    }

    #[test]
    fn sampling_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| sample_quality(&mut rng, 1) == 0));
        assert!((0..100).all(|_| sample_beta(&mut rng, 0.0) == 0.0));
        let a: Vec<usize> = (0..20).map(|_| sample_quality(&mut step_rng(3, 7), 5)).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn config_overrides_and_validation() {
        let c = TrainConfig::from_toml(
            "levels = 3\nrate_weights = [3.4, 0.4, 0.05]\ncrop_size = 64\n",
            &["stage1_steps=10".into(), "design=shared".into(), "base_lr=5e-4".into()],
        )
        .unwrap();
        assert_eq!(c.stage1_steps, 10);
        assert_eq!(c.design, DesignKind::Shared);
        assert_eq!(c.base_lr, 5e-4);
        assert!(TrainConfig::from_toml("levels = 3\n", &[]).is_err());
        assert!(TrainConfig::from_toml("bogus = 1\n", &[]).is_err());
        let back = TrainConfig::from_toml(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
    }
}
