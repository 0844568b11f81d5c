//! Training objectives: distortion, perceptual distance, adversarial losses
//! and the two stage totals.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Eval, Graph};
use crate::image::ImageTensor;
use crate::model::layers::{Conv, LEAKY_SLOPE};
use crate::disc::Discriminator;
use crate::model::{Model, NicOutput, QualityControl, DEFAULT_BETA_MAX};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

/// Mean squared error on the 0-255 scale.
pub fn distortion(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Dimension("images differ in size".into()));
    }
    let sq: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) * 255.0).powi(2)).collect();
    Ok(crate::tensor::pairwise_sum(&sq) / sq.len() as f64)
}

/// A differentiable image distance, zero for identical inputs.
pub trait PerceptualMetric {
    /// Mean distance over the batch of `[B, 3, H, W]` tensors in [0, 1].
    fn distance_graph<G: Graph>(&self, g: &mut G, a: &G::Var, b: &G::Var) -> Result<G::Var>;

    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        let mut g = Eval;
        Ok(self.distance_graph(&mut g, &a.to_tensor(), &b.to_tensor())?.item())
    }
}

/// Feature distance through a fixed convolutional stack: features are
/// unit-normalised across channels, squared differences are weighted per
/// channel, averaged over positions and then over layers.
#[derive(Clone, Debug)]
pub struct FeatureMetric {
    params: ParamStore,
    layers: Vec<Conv>,
    channel_weights: Vec<Tensor>,
}

impl FeatureMetric {
    const WIDTHS: [usize; 3] = [16, 32, 32];
    pub const DEFAULT_SEED: u64 = 0x5eed_1a7e;

    /// Random stack drawn from `seed`, unit channel weights.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut channel_weights = Vec::new();
        let mut cin = 3;
        for (i, &w) in Self::WIDTHS.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            layers.push(Conv::new(&mut params, &mut rng, &format!("metric.layer{i}"), Group::Metric, cin, w, 3, stride, 1.0));
            channel_weights.push(Tensor::full(&[w], 1.0));
            cin = w;
        }
        Self { params, layers, channel_weights }
    }

    /// Replaces convolution and channel weights from a parameter container.
    /// Arrays are named `metric.layer{i}.weight`, `metric.layer{i}.bias` and
    /// `metric.layer{i}.channel_weight`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = crate::checkpoint::Container::read(path)?;
        let mut m = Self::random(Self::DEFAULT_SEED);
        let mut named = file.arrays.clone();
        for (i, w) in m.channel_weights.iter_mut().enumerate() {
            let key = format!("metric.layer{i}.channel_weight");
            if let Some(t) = named.remove(&key) {
                if t.shape() != w.shape() || t.data().iter().any(|v| *v < 0.0 || !v.is_finite()) {
                    return Err(Error::Compatibility(format!("bad {key}")));
                }
                *w = t;
            }
        }
        m.params.load_named(&named)?;
        Ok(m)
    }
}

impl Default for FeatureMetric {
    fn default() -> Self {
        Self::random(Self::DEFAULT_SEED)
    }
}

impl PerceptualMetric for FeatureMetric {
    fn distance_graph<G: Graph>(&self, g: &mut G, a: &G::Var, b: &G::Var) -> Result<G::Var> {
        if g.value(a).shape() != g.value(b).shape() {
            return Err(Error::Dimension("perceptual inputs differ in shape".into()));
        }
        // Inputs are mapped to [-1, 1].
        let mut fa = g.affine(a, 2.0, -1.0)?;
        let mut fb = g.affine(b, 2.0, -1.0)?;
        let mut total: Option<G::Var> = None;
        for (conv, weights) in self.layers.iter().zip(&self.channel_weights) {
            fa = conv.apply(g, &self.params, &fa)?;
            fa = g.leaky_relu(&fa, LEAKY_SLOPE)?;
            fb = conv.apply(g, &self.params, &fb)?;
            fb = g.leaky_relu(&fb, LEAKY_SLOPE)?;
            let na = g.channel_normalize(&fa)?;
            let nb = g.channel_normalize(&fb)?;
            let diff = g.sub(&na, &nb)?;
            let sq = g.mul(&diff, &diff)?;
            let w = g.constant(weights.clone());
            let weighted = g.channel_scale(&sq, &w)?;
            let (n, _, h, wd) = g.value(&weighted).dims4()?;
            let s = g.sum(&weighted)?;
            let layer = g.scale(&s, 1.0 / (n * h * wd) as f64)?;
            total = Some(match total {
                Some(t) => g.add(&t, &layer)?,
                None => layer,
            });
        }
        let t = total.expect("at least one layer");
        g.scale(&t, 1.0 / self.layers.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvKind {
    Sgan,
    Rgan,
    Ragan,
    Hrrgan,
}

impl AdvKind {
    pub const ALL: [AdvKind; 4] = [AdvKind::Sgan, AdvKind::Rgan, AdvKind::Ragan, AdvKind::Hrrgan];

    pub fn name(self) -> &'static str {
        match self {
            AdvKind::Sgan => "sgan",
            AdvKind::Rgan => "rgan",
            AdvKind::Ragan => "ragan",
            AdvKind::Hrrgan => "hrrgan",
        }
    }
}

impl fmt::Display for AdvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown adversarial loss {s:?}")))
    }
}

/// `mean(softplus(-z))`, the mean of `-log sigmoid(z)`.
fn mean_neg_log_sigmoid<G: Graph>(g: &mut G, z: &G::Var) -> Result<G::Var> {
    let neg = g.scale(z, -1.0)?;
    let sp = g.softplus(&neg)?;
    g.mean(&sp)
}

/// `mean(softplus(z))`, the mean of `-log(1 - sigmoid(z))`.
fn mean_neg_log_one_minus_sigmoid<G: Graph>(g: &mut G, z: &G::Var) -> Result<G::Var> {
    let sp = g.softplus(z)?;
    g.mean(&sp)
}

fn same_shape<G: Graph>(g: &G, a: &G::Var, b: &G::Var) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::Dimension(format!(
            "score maps {:?} and {:?} are not aligned",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    Ok(())
}

/// Generator-side loss on fake scores `fake = D(x_hat_q)`.
///
/// `reference` is `D(x)` for the relativistic losses and the level-above
/// reference for HRRGAN, which is cut from the gradient path here. SGAN
/// ignores it.
pub fn adv_g_loss_graph<G: Graph>(g: &mut G, kind: AdvKind, fake: &G::Var, reference: &G::Var) -> Result<G::Var> {
    same_shape(g, fake, reference)?;
    match kind {
        AdvKind::Sgan => mean_neg_log_sigmoid(g, fake),
        AdvKind::Rgan => {
            let gap = g.sub(fake, reference)?;
            mean_neg_log_sigmoid(g, &gap)
        }
        AdvKind::Hrrgan => {
            let r = g.detach(reference);
            let gap = g.sub(fake, &r)?;
            mean_neg_log_sigmoid(g, &gap)
        }
        AdvKind::Ragan => {
            let mean_real = g.mean(reference)?;
            let mean_fake = g.mean(fake)?;
            let fake_gap = g.sub(fake, &mean_real)?;
            let real_gap = g.sub(reference, &mean_fake)?;
            let a = mean_neg_log_sigmoid(g, &fake_gap)?;
            let b = mean_neg_log_one_minus_sigmoid(g, &real_gap)?;
            g.add(&a, &b)
        }
    }
}

/// Discriminator-side loss on `real = D(x)` and `fake = D(x_hat_q)`.
pub fn adv_d_loss_graph<G: Graph>(g: &mut G, kind: AdvKind, real: &G::Var, fake: &G::Var) -> Result<G::Var> {
    same_shape(g, real, fake)?;
    match kind {
        AdvKind::Sgan => {
            let a = mean_neg_log_sigmoid(g, real)?;
            let b = mean_neg_log_one_minus_sigmoid(g, fake)?;
            g.add(&a, &b)
        }
        AdvKind::Rgan | AdvKind::Hrrgan => {
            let gap = g.sub(real, fake)?;
            mean_neg_log_sigmoid(g, &gap)
        }
        AdvKind::Ragan => {
            let mean_real = g.mean(real)?;
            let mean_fake = g.mean(fake)?;
            let real_gap = g.sub(real, &mean_fake)?;
            let fake_gap = g.sub(fake, &mean_real)?;
            let a = mean_neg_log_sigmoid(g, &real_gap)?;
            let b = mean_neg_log_one_minus_sigmoid(g, &fake_gap)?;
            g.add(&a, &b)
        }
    }
}

fn scores(values: &[f64]) -> Tensor {
    Tensor::from_vec(values.to_vec())
}

/// [`adv_g_loss_graph`] on plain score arrays.
pub fn adv_g_loss(kind: AdvKind, fake: &[f64], reference: &[f64]) -> Result<f64> {
    let mut g = Eval;
    Ok(adv_g_loss_graph(&mut g, kind, &scores(fake), &scores(reference))?.item())
}

/// [`adv_d_loss_graph`] on plain score arrays.
pub fn adv_d_loss(kind: AdvKind, real: &[f64], fake: &[f64]) -> Result<f64> {
    let mut g = Eval;
    Ok(adv_d_loss_graph(&mut g, kind, &scores(real), &scores(fake))?.item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Rate weight per quality level.
    pub rate: Vec<f64>,
    pub distortion: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub beta_max: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rate: vec![3.4, 1.3, 0.4, 0.12, 0.05],
            distortion: 150.0,
            perceptual: 2.0 / DEFAULT_BETA_MAX,
            adversarial: 0.002 / DEFAULT_BETA_MAX,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.distortion, self.perceptual, self.adversarial, self.beta_max];
        if self.rate.is_empty() || self.rate.iter().chain(&positive).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be positive and finite".into()));
        }
        if self.rate.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("rate weights must strictly decrease with the quality level".into()));
        }
        Ok(())
    }

    pub fn rate_weight(&self, q: usize) -> Result<f64> {
        self.rate
            .get(q)
            .copied()
            .ok_or_else(|| Error::Domain(format!("quality level {q} outside 0..{}", self.rate.len())))
    }
}

/// Divides 0-255 squared error down to the [0, 1] scale the distortion
/// weight is calibrated for.
pub const DISTORTION_SCALE: f64 = 1.0 / (255.0 * 255.0);

/// Raw loss terms: rate in bpp, distortion as 0-255 MSE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub rate: f64,
    pub distortion: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub rate: f64,
    pub distortion: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub total: f64,
}

/// Coefficients multiplying each raw term in a stage total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageCoefficients {
    pub rate: f64,
    pub distortion: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl StageCoefficients {
    pub fn stage1(w: &LossWeights, q: usize) -> Result<Self> {
        Ok(Self { rate: w.rate_weight(q)?, distortion: w.distortion * DISTORTION_SCALE, perceptual: 1.0, adversarial: 0.0 })
    }

    pub fn stage2(w: &LossWeights, q: usize, beta: f64) -> Result<Self> {
        if !(0.0..=w.beta_max).contains(&beta) {
            return Err(Error::Domain(format!("realism weight {beta} outside [0, {}]", w.beta_max)));
        }
        Ok(Self {
            rate: w.rate_weight(q)?,
            distortion: w.distortion * DISTORTION_SCALE,
            perceptual: beta * w.perceptual,
            adversarial: beta * w.adversarial,
        })
    }

    pub fn combine(&self, t: &LossTerms) -> LossBreakdown {
        let mut total = self.rate * t.rate + self.distortion * t.distortion;
        // Zero coefficients drop their terms outright.
        if self.perceptual != 0.0 {
            total += self.perceptual * t.perceptual;
        }
        if self.adversarial != 0.0 {
            total += self.adversarial * t.adversarial;
        }
        LossBreakdown { rate: t.rate, distortion: t.distortion, perceptual: t.perceptual, adversarial: t.adversarial, total }
    }

    /// The same weighted sum on graph values.
    pub fn combine_graph<G: Graph>(
        &self,
        g: &mut G,
        rate: &G::Var,
        distortion: &G::Var,
        perceptual: Option<&G::Var>,
        adversarial: Option<&G::Var>,
    ) -> Result<G::Var> {
        let r = g.scale(rate, self.rate)?;
        let d = g.scale(distortion, self.distortion)?;
        let mut total = g.add(&r, &d)?;
        for (coef, term) in [(self.perceptual, perceptual), (self.adversarial, adversarial)] {
            if let (true, Some(t)) = (coef != 0.0, term) {
                let s = g.scale(t, coef)?;
                total = g.add(&total, &s)?;
            }
        }
        Ok(total)
    }
}

/// `lambda_R(q) R + lambda_d d + L_P`.
pub fn stage1_total(terms: &LossTerms, w: &LossWeights, q: usize) -> Result<LossBreakdown> {
    Ok(StageCoefficients::stage1(w, q)?.combine(&LossTerms { adversarial: 0.0, ..*terms }))
}

/// `lambda_R(q) R + lambda_d d + beta (lambda_P L_P + lambda_adv L_adv)`.
pub fn stage2_total(terms: &LossTerms, w: &LossWeights, q: usize, beta: f64) -> Result<LossBreakdown> {
    Ok(StageCoefficients::stage2(w, q, beta)?.combine(terms))
}

/// Graph values of one HRRGAN evaluation.
pub struct HrrganPair<V> {
    /// Pass at the sampled level.
    pub primary: NicOutput<V>,
    /// Reconstruction at the level above, absent at the top level.
    pub upper: Option<V>,
    /// Cut-off reference scores: `D(x_hat_{q+1})`, or `D(x)` at the top level.
    pub reference: V,
    pub real: V,
    pub fake: V,
    pub generator_loss: V,
    pub discriminator_loss: V,
}

/// HRRGAN losses for a batch sharing level `q` and realism weight `beta`.
/// Both reconstructions use the same `beta`; every score comes from the
/// level-`q` discriminator.
pub fn hrrgan_pair<G: Graph>(
    g: &mut G,
    x: &G::Var,
    q: usize,
    beta: &G::Var,
    model: &Model,
    disc: &Discriminator,
) -> Result<HrrganPair<G::Var>> {
    let levels = model.levels();
    let primary = model.nic_forward(g, x, QualityControl::new(q, 0.0, levels)?, beta)?;
    let fake = disc.discriminate_graph(g, &primary.reconstruction, q)?;
    let real = disc.discriminate_graph(g, x, q)?;
    let (upper, reference) = if q + 1 < levels {
        let up = model.nic_forward(g, x, QualityControl::new(q + 1, 0.0, levels)?, beta)?;
        let scores = disc.discriminate_graph(g, &up.reconstruction, q)?;
        (Some(up.reconstruction), g.detach(&scores))
    } else {
        (None, g.detach(&real))
    };
    let generator_loss = adv_g_loss_graph(g, AdvKind::Hrrgan, &fake, &reference)?;
    let discriminator_loss = adv_d_loss_graph(g, AdvKind::Hrrgan, &real, &fake)?;
    Ok(HrrganPair { primary, upper, reference, real, fake, generator_loss, discriminator_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distortion_examples() {
        let a = ImageTensor::filled(4, 4, 100.0 / 255.0).unwrap();
        let b = ImageTensor::filled(4, 4, 107.0 / 255.0).unwrap();
        assert_eq!(distortion(&a, &a).unwrap(), 0.0);
        assert!((distortion(&a, &b).unwrap() - 49.0).abs() < 1e-9);
        assert_eq!(distortion(&a, &b).unwrap(), distortion(&b, &a).unwrap());
    }

    #[test]
    fn perceptual_zero_on_identical_and_positive_otherwise() {
        let m = FeatureMetric::default();
        let a = ImageTensor::new(16, 16, (0..768).map(|i| (i % 13) as f64 / 12.0).collect()).unwrap();
        let b = ImageTensor::new(16, 16, (0..768).map(|i| (i % 7) as f64 / 6.0).collect()).unwrap();
        assert_eq!(m.distance(&a, &a).unwrap(), 0.0);
        let d = m.distance(&a, &b).unwrap();
        assert!(d > 0.0);
        assert_eq!(d, FeatureMetric::default().distance(&a, &b).unwrap());
    }

    #[test]
    fn scalar_examples() {
        assert!((adv_g_loss(AdvKind::Hrrgan, &[0.3; 4], &[0.3; 4]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((adv_g_loss(AdvKind::Rgan, &[2.5; 3], &[0.5; 3]).unwrap() - 0.126_928_011_042_972_6).abs() < 1e-12);
        assert!((adv_d_loss(AdvKind::Sgan, &[10.0], &[-10.0]).unwrap() - 9.079_779_843_372_93e-5).abs() < 1e-15);
        assert!(matches!(adv_g_loss(AdvKind::Rgan, &[1.0, 2.0], &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn stage_totals() {
        let w = LossWeights::default();
        let t = LossTerms { rate: 1.0, ..Default::default() };
        assert!((stage1_total(&t, &w, 0).unwrap().total - 3.4).abs() < 1e-15);
        assert!((stage1_total(&t, &w, 4).unwrap().total - 0.05).abs() < 1e-15);
        assert_eq!(stage1_total(&LossTerms::default(), &w, 2).unwrap().total, 0.0);
        let c = StageCoefficients::stage2(&w, 0, w.beta_max).unwrap();
        assert!((c.perceptual - 2.0).abs() < 1e-15);
        let full = LossTerms { rate: 0.7, distortion: 30.0, perceptual: 0.2, adversarial: 0.9 };
        let zero = stage2_total(&full, &w, 1, 0.0).unwrap().total;
        assert_eq!(zero, 1.3 * 0.7 + 150.0 * DISTORTION_SCALE * 30.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let mut w = LossWeights::default();
        w.rate = vec![1.0, 1.0];
        assert!(w.validate().is_err());
    }
}
