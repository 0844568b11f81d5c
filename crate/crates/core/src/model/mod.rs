//! Encoder, quantizer and realism-conditioned generator with per-level
//! channel scaling for rate control.

pub mod layers;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::{EntropyParams, QuantizedLatent};
use crate::error::{Error, Result};
use crate::graph::{Eval, Graph};
use crate::image::ImageTensor;
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;
use layers::{Conv, Dense, ResBlock, Upsample, LEAKY_SLOPE};

/// Images are padded to this multiple before encoding.
pub const PAD_MULTIPLE: usize = 64;
/// Spatial reduction between image and latent.
pub const DOWNSAMPLE: usize = 16;
pub const DEFAULT_BETA_MAX: f64 = 5.12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of quality levels.
    pub levels: usize,
    /// Feature width of the hidden layers.
    pub channels: usize,
    /// Latent channel count.
    pub latent_channels: usize,
    pub beta_max: f64,
    /// Fourier bands of the realism embedding.
    pub fourier_bands: usize,
    /// Width of the realism MLP.
    pub beta_hidden: usize,
    /// Initial spread, in log units, between the latent scalings of the
    /// lowest and highest quality level.
    pub ica_init_span: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            channels: 32,
            latent_channels: 32,
            beta_max: DEFAULT_BETA_MAX,
            fourier_bands: 8,
            beta_hidden: 64,
            ica_init_span: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.levels == 0 || self.levels > 256 {
            return bad("levels must be in 1..=256");
        }
        if self.channels == 0 || self.latent_channels == 0 || self.latent_channels > u16::MAX as usize {
            return bad("channel counts must be positive and fit in 16 bits");
        }
        if !(self.beta_max >= 0.0 && self.beta_max.is_finite()) {
            return bad("beta_max must be finite and non-negative");
        }
        if self.fourier_bands == 0 || self.beta_hidden == 0 {
            return bad("fourier_bands and beta_hidden must be positive");
        }
        if !self.ica_init_span.is_finite() {
            return bad("ica_init_span must be finite");
        }
        Ok(())
    }
}

/// Quality level plus an interpolation fraction towards the next level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityControl {
    level: usize,
    fraction: f64,
}

impl QualityControl {
    pub fn new(level: usize, fraction: f64, levels: usize) -> Result<Self> {
        if level >= levels {
            return Err(Error::Domain(format!("quality level {level} outside 0..{levels}")));
        }
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Domain(format!("fraction {fraction} outside [0, 1)")));
        }
        if level + 1 == levels && fraction != 0.0 {
            return Err(Error::Domain("the top level takes no fraction".into()));
        }
        Ok(Self { level, fraction })
    }

    /// From a continuous dial value in `[0, levels - 1]`.
    pub fn from_continuous(q: f64, levels: usize) -> Result<Self> {
        if levels == 0 || !(0.0..=(levels - 1) as f64).contains(&q) {
            return Err(Error::Domain(format!("quality {q} outside [0, {}]", levels.saturating_sub(1))));
        }
        let level = (q.floor() as usize).min(levels - 1);
        let fraction = if level + 1 == levels { 0.0 } else { q - level as f64 };
        Self::new(level, fraction, levels)
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn value(&self) -> f64 {
        self.level as f64 + self.fraction
    }

    /// Fraction as a numerator over 256, saturating below 256.
    pub fn fraction_byte(&self) -> u8 {
        (self.fraction * 256.0).round().min(255.0) as u8
    }

    pub fn from_fraction_byte(level: usize, numerator: u8, levels: usize) -> Result<Self> {
        Self::new(level, numerator as f64 / 256.0, levels)
    }

    /// The same setting after a trip through the one-byte fraction field.
    pub fn byte_quantized(&self) -> Self {
        Self { level: self.level, fraction: self.fraction_byte() as f64 / 256.0 }
    }
}

/// Decode-time realism weight in `[0, beta_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RealismWeight {
    beta: f64,
    beta_max: f64,
}

impl RealismWeight {
    pub fn new(beta: f64, beta_max: f64) -> Result<Self> {
        if !(0.0..=beta_max).contains(&beta) {
            return Err(Error::Domain(format!("realism weight {beta} outside [0, {beta_max}]")));
        }
        Ok(Self { beta, beta_max })
    }

    pub fn value(&self) -> f64 {
        self.beta
    }

    pub fn max(&self) -> f64 {
        self.beta_max
    }
}

/// Blends a bank of positive per-level vectors at `q`; integer `q` returns
/// the stored vector unchanged.
pub fn ica_scaling(bank: &[Vec<f64>], q: f64) -> Result<Vec<f64>> {
    let qc = QualityControl::from_continuous(q, bank.len())?;
    let lo = &bank[qc.level];
    if qc.fraction == 0.0 {
        return Ok(lo.clone());
    }
    let hi = &bank[qc.level + 1];
    if hi.len() != lo.len() {
        return Err(Error::Dimension("scaling vectors differ in length".into()));
    }
    let a = qc.fraction;
    Ok(lo.iter().zip(hi).map(|(l, h)| (1.0 - a) * l + a * h).collect())
}

/// `[sin(2^k pi b), cos(2^k pi b)]` for `k < bands`, with `b = beta / beta_max`.
pub fn beta_embed(beta: RealismWeight, bands: usize) -> Vec<f64> {
    let t = Tensor::scalar(beta.value());
    crate::graph::forward(crate::graph::Op::Fourier { bands, max: beta.max() }, &[&t])
        .expect("scalar input")
        .into_data()
}

/// Real-valued latent `[1, C, H/16, W/16]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor(Tensor);

impl LatentTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let (n, ..) = t.dims4()?;
        if n != 1 {
            return Err(Error::Dimension("latent must hold a single image".into()));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("non-finite latent".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[1], s[2], s[3])
    }
}

/// Rounds every latent value, ties away from zero.
pub fn quantize(y: &LatentTensor) -> Result<QuantizedLatent> {
    let (c, h, w) = y.shape();
    let symbols = y
        .0
        .data()
        .iter()
        .map(|&v| {
            let r = v.round();
            if r.abs() > i32::MAX as f64 / 2.0 {
                Err(Error::Numeric(format!("latent value {v} too large to code")))
            } else {
                Ok(r as i32)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedLatent::new(c, h, w, symbols)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Rounding with an identity backward pass.
    Train,
    /// Plain rounding, cut from the gradient path.
    Infer,
}

pub fn quantize_graph<G: Graph>(g: &mut G, y: &G::Var, mode: QuantMode) -> Result<G::Var> {
    if !g.value(y).is_finite() {
        return Err(Error::Numeric("non-finite latent".into()));
    }
    match mode {
        QuantMode::Train => g.round_ste(y),
        QuantMode::Infer => {
            let r = g.value(y).map(f64::round);
            Ok(g.constant(r))
        }
    }
}

/// One vector of log-scales per quality level.
#[derive(Clone, Debug)]
struct ScalingBank {
    levels: Vec<ParamId>,
}

impl ScalingBank {
    fn new(store: &mut ParamStore, name: &str, group: Group, channels: usize, init: impl Fn(usize) -> f64, levels: usize) -> Self {
        let levels = (0..levels)
            .map(|q| store.add(format!("{name}.level{q}"), group, Tensor::full(&[channels], init(q))))
            .collect();
        Self { levels }
    }

    fn scaling<G: Graph>(&self, g: &mut G, store: &ParamStore, qc: QualityControl) -> Result<G::Var> {
        let lo = g.param(store, self.levels[qc.level]);
        let lo = g.exp(&lo)?;
        if qc.fraction == 0.0 {
            return Ok(lo);
        }
        let hi = g.param(store, self.levels[qc.level + 1]);
        let hi = g.exp(&hi)?;
        let lo = g.scale(&lo, 1.0 - qc.fraction)?;
        let hi = g.scale(&hi, qc.fraction)?;
        g.add(&lo, &hi)
    }

    fn apply<G: Graph>(&self, g: &mut G, store: &ParamStore, x: &G::Var, qc: QualityControl) -> Result<G::Var> {
        let s = self.scaling(g, store, qc)?;
        g.channel_scale(x, &s)
    }

    fn positive_vectors(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        self.levels.iter().map(|&id| store.get(id).data().iter().map(|v| v.exp()).collect()).collect()
    }
}

#[derive(Clone, Debug)]
struct Layout {
    enc_convs: Vec<Conv>,
    enc_scaling: Vec<ScalingBank>,
    enc_blocks: Vec<ResBlock>,
    gen_scaling: Vec<ScalingBank>,
    gen_in: Conv,
    gen_blocks: Vec<ResBlock>,
    gen_up: Vec<Upsample>,
    beta_mlp: Vec<Dense>,
    entropy_loc: ParamId,
    entropy_log_scale: ParamId,
}

/// Graph values of one full codec pass.
pub struct NicOutput<V> {
    pub latent: V,
    pub quantized: V,
    pub reconstruction: V,
}

/// The learned codec: networks, scaling banks and entropy parameters.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    passes: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            passes: AtomicUsize::new(self.passes.load(Ordering::Relaxed)),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (q, n, m) = (config.levels, config.channels, config.latent_channels);
        let zero = |_: usize| 0.0;
        let centre = (q as f64 - 1.0) / 2.0;
        let step = if q > 1 { config.ica_init_span / (q as f64 - 1.0) } else { 0.0 };
        let prior = move |level: usize| (level as f64 - centre) * step;

        let widths = [3, n, n, n, m];
        let mut enc_convs = Vec::new();
        let mut enc_scaling = Vec::new();
        for i in 0..4 {
            let gain = if i == 3 { 0.5 } else { 1.0 };
            enc_convs.push(Conv::new(&mut p, &mut rng, &format!("encoder.down{i}"), Group::Encoder, widths[i], widths[i + 1], 5, 2, gain));
            let init: &dyn Fn(usize) -> f64 = if i == 3 { &prior } else { &zero };
            enc_scaling.push(ScalingBank::new(&mut p, &format!("encoder.scaling{i}"), Group::EncoderIca, widths[i + 1], init, q));
        }
        let enc_blocks = (0..2)
            .map(|i| ResBlock::new(&mut p, &mut rng, &format!("encoder.res{i}"), Group::Encoder, n, None))
            .collect();

        let hidden = config.beta_hidden;
        let beta_mlp = vec![
            Dense::new(&mut p, &mut rng, "beta.fc0", Group::BetaCond, 2 * config.fourier_bands, hidden, 1.0),
            Dense::new(&mut p, &mut rng, "beta.fc1", Group::BetaCond, hidden, hidden, 1.0),
        ];
        let inverse = move |level: usize| -prior(level);
        let mut gen_scaling = vec![ScalingBank::new(&mut p, "generator.scaling0", Group::GeneratorIca, m, inverse, q)];
        for i in 1..4 {
            gen_scaling.push(ScalingBank::new(&mut p, &format!("generator.scaling{i}"), Group::GeneratorIca, n, zero, q));
        }
        let gen_in = Conv::new(&mut p, &mut rng, "generator.input", Group::Generator, m, n, 3, 1, 1.0);
        let gen_blocks = (0..3)
            .map(|i| {
                ResBlock::new(&mut p, &mut rng, &format!("generator.res{i}"), Group::Generator, n, Some((Group::BetaCond, hidden)))
            })
            .collect();
        let mut gen_up = Vec::new();
        for i in 0..4 {
            let (cout, gain) = if i == 3 { (3, 0.1) } else { (n, 1.0) };
            gen_up.push(Upsample::new(&mut p, &mut rng, &format!("generator.up{i}"), Group::Generator, n, cout, gain));
        }
        // Start the output around mid grey.
        p.get_mut(gen_up[3].bias).data_mut().fill(0.5);

        let entropy_loc = p.add("entropy.loc", Group::Entropy, Tensor::zeros(&[m]));
        let entropy_log_scale = p.add("entropy.log_scale", Group::Entropy, Tensor::zeros(&[m]));

        let layout = Layout {
            enc_convs,
            enc_scaling,
            enc_blocks,
            gen_scaling,
            gen_in,
            gen_blocks,
            gen_up,
            beta_mlp,
            entropy_loc,
            entropy_log_scale,
        };
        Ok(Self { config, params: p, layout, passes: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_counts(&self) -> BTreeMap<Group, usize> {
        self.params.counts()
    }

    /// Number of full codec passes run through [`Model::nic_forward`].
    pub fn forward_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    pub fn quality(&self, q: f64) -> Result<QualityControl> {
        QualityControl::from_continuous(q, self.config.levels)
    }

    pub fn realism(&self, beta: f64) -> Result<RealismWeight> {
        RealismWeight::new(beta, self.config.beta_max)
    }

    fn check_quality(&self, qc: QualityControl) -> Result<()> {
        QualityControl::new(qc.level, qc.fraction, self.config.levels).map(|_| ())
    }

    /// Positive scaling vectors of the encoder's `layer`-th bank.
    pub fn encoder_scaling_bank(&self, layer: usize) -> Vec<Vec<f64>> {
        self.layout.enc_scaling[layer].positive_vectors(&self.params)
    }

    pub fn encode_graph<G: Graph>(&self, g: &mut G, x: &G::Var, qc: QualityControl) -> Result<G::Var> {
        self.check_quality(qc)?;
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % PAD_MULTIPLE != 0 || w % PAD_MULTIPLE != 0 {
            return Err(Error::Dimension(format!("input {h}x{w} is not padded to a multiple of {PAD_MULTIPLE}")));
        }
        let (p, l) = (&self.params, &self.layout);
        let mut h = x.clone();
        for i in 0..4 {
            h = l.enc_convs[i].apply(g, p, &h)?;
            h = l.enc_scaling[i].apply(g, p, &h, qc)?;
            if i < 3 {
                h = g.leaky_relu(&h, LEAKY_SLOPE)?;
            }
            if i == 1 || i == 2 {
                h = l.enc_blocks[i - 1].apply(g, p, &h, None)?;
            }
        }
        Ok(h)
    }

    /// Realism conditioning vector from a scalar `beta` value.
    fn beta_condition<G: Graph>(&self, g: &mut G, beta: &G::Var) -> Result<G::Var> {
        let b = g.value(beta);
        if b.numel() != 1 {
            return Err(Error::Dimension("realism weight must be a scalar".into()));
        }
        RealismWeight::new(b.item(), self.config.beta_max)?;
        let (p, l) = (&self.params, &self.layout);
        let mut z = g.fourier(beta, self.config.fourier_bands, self.config.beta_max)?;
        for layer in &l.beta_mlp {
            z = layer.apply(g, p, &z)?;
            z = g.leaky_relu(&z, LEAKY_SLOPE)?;
        }
        Ok(z)
    }

    pub fn generate_graph<G: Graph>(&self, g: &mut G, y_hat: &G::Var, qc: QualityControl, beta: &G::Var) -> Result<G::Var> {
        self.check_quality(qc)?;
        let (_, c, _, _) = g.value(y_hat).dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::Dimension(format!(
                "latent has {c} channels, model expects {}",
                self.config.latent_channels
            )));
        }
        let z = self.beta_condition(g, beta)?;
        let (p, l) = (&self.params, &self.layout);
        let mut h = l.gen_scaling[0].apply(g, p, y_hat, qc)?;
        h = l.gen_in.apply(g, p, &h)?;
        h = g.leaky_relu(&h, LEAKY_SLOPE)?;
        for i in 0..4 {
            if i < 3 {
                h = l.gen_blocks[i].apply(g, p, &h, Some(&z))?;
            }
            h = l.gen_up[i].apply(g, p, &h)?;
            if i < 3 {
                h = l.gen_scaling[i + 1].apply(g, p, &h, qc)?;
                h = g.leaky_relu(&h, LEAKY_SLOPE)?;
            }
        }
        g.clamp(&h, 0.0, 1.0)
    }

    /// Encode, quantize with the straight-through estimator and generate.
    pub fn nic_forward<G: Graph>(&self, g: &mut G, x: &G::Var, qc: QualityControl, beta: &G::Var) -> Result<NicOutput<G::Var>> {
        self.passes.fetch_add(1, Ordering::Relaxed);
        let latent = self.encode_graph(g, x, qc)?;
        let quantized = quantize_graph(g, &latent, QuantMode::Train)?;
        let reconstruction = self.generate_graph(g, &quantized, qc, beta)?;
        Ok(NicOutput { latent, quantized, reconstruction })
    }

    /// Total bits of `y_hat` under the continuous entropy model.
    pub fn rate_bits_graph<G: Graph>(&self, g: &mut G, y_hat: &G::Var) -> Result<G::Var> {
        let loc = g.param(&self.params, self.layout.entropy_loc);
        let log_scale = g.param(&self.params, self.layout.entropy_log_scale);
        g.rate_bits(y_hat, &loc, &log_scale)
    }

    pub fn entropy_params(&self) -> Result<EntropyParams> {
        EntropyParams::from_log_scale(
            self.params.get(self.layout.entropy_loc).data().to_vec(),
            self.params.get(self.layout.entropy_log_scale).data(),
        )
    }

    /// Inference encode of a padded image.
    pub fn encode(&self, x: &ImageTensor, qc: QualityControl) -> Result<LatentTensor> {
        let mut g = Eval;
        LatentTensor::new(self.encode_graph(&mut g, &x.to_tensor(), qc)?)
    }

    /// Inference decode of a quantized latent.
    pub fn generate(&self, y_hat: &QuantizedLatent, qc: QualityControl, beta: RealismWeight) -> Result<ImageTensor> {
        let t = Tensor::new(
            vec![1, y_hat.channels, y_hat.height, y_hat.width],
            y_hat.symbols.iter().map(|&s| s as f64).collect(),
        )?;
        let mut g = Eval;
        let b = Tensor::scalar(beta.value());
        ImageTensor::from_tensor(&self.generate_graph(&mut g, &t, qc, &b)?)
    }

    /// Full inference pass on a padded image.
    pub fn reconstruct(&self, x: &ImageTensor, qc: QualityControl, beta: RealismWeight) -> Result<ImageTensor> {
        let y = quantize(&self.encode(x, qc)?)?;
        self.generate(&y, qc, beta)
    }
}
