//! Factorized entropy model, rate estimation and the range coder that turns
//! quantized latents into bytes.
//!
//! Training uses the continuous per-channel logistic density (through
//! [`crate::graph::Op::RateBits`]). Coding uses [`CdfTable`], a 16-bit
//! quantization of the same density, so encoder and decoder agree bit for
//! bit on every platform.

mod cdf;
mod range_coder;

pub use cdf::{default_bounds, ChannelCdf, CdfTable, FREQ_BITS, FREQ_TOTAL};
pub use range_coder::{escape_decode, escape_encode, range_decode, range_encode, RangeDecoder, RangeEncoder};

use crate::error::{Error, Result};
use crate::graph::{logistic_bin, LIKELIHOOD_FLOOR};
use crate::tensor::pairwise_sum;

/// A per-channel density over the real line whose mass is integrated over
/// unit bins centred on integers.
pub trait BinnedDensity {
    fn channels(&self) -> usize;
    /// Cumulative distribution of `channel` at `x`.
    fn cdf(&self, channel: usize, x: f64) -> f64;

    /// Mass of the bin `[s - 0.5, s + 0.5)`.
    fn bin_probability(&self, channel: usize, symbol: i32) -> f64 {
        let s = symbol as f64;
        (self.cdf(channel, s + 0.5) - self.cdf(channel, s - 0.5)).max(0.0)
    }
}

/// Location and scale of a logistic density per latent channel.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyParams {
    loc: Vec<f64>,
    scale: Vec<f64>,
}

impl EntropyParams {
    pub fn new(loc: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if loc.len() != scale.len() {
            return Err(Error::Parameter(format!("{} locations but {} scales", loc.len(), scale.len())));
        }
        if let Some((c, s)) = scale.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter(format!("scale {s} of channel {c} is not positive")));
        }
        if loc.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite location".into()));
        }
        Ok(Self { loc, scale })
    }

    /// From the stored log-scale parameterisation.
    pub fn from_log_scale(loc: Vec<f64>, log_scale: &[f64]) -> Result<Self> {
        Self::new(loc, log_scale.iter().map(|v| v.exp()).collect())
    }

    pub fn loc(&self) -> &[f64] {
        &self.loc
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }
}

impl BinnedDensity for EntropyParams {
    fn channels(&self) -> usize {
        self.loc.len()
    }

    fn cdf(&self, channel: usize, x: f64) -> f64 {
        crate::tensor::stable_sigmoid((x - self.loc[channel]) / self.scale[channel])
    }

    fn bin_probability(&self, channel: usize, symbol: i32) -> f64 {
        // Same tail-aware evaluation as the training-time rate term.
        logistic_bin(symbol as f64, self.loc[channel], self.scale[channel].ln()).0
    }
}

/// Integer latent `[channels, height, width]`, channel-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedLatent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub symbols: Vec<i32>,
}

impl QuantizedLatent {
    pub fn new(channels: usize, height: usize, width: usize, symbols: Vec<i32>) -> Result<Self> {
        if symbols.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "{} symbols for a {channels}x{height}x{width} latent",
                symbols.len()
            )));
        }
        Ok(Self { channels, height, width, symbols })
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel_of(&self, index: usize) -> usize {
        index / self.plane()
    }
}

/// Per-element bin probabilities of `latent`, floored at 1e-9.
pub fn likelihood(latent: &QuantizedLatent, model: &impl BinnedDensity) -> Result<Vec<f64>> {
    if latent.channels != model.channels() {
        return Err(Error::Dimension(format!(
            "latent has {} channels, entropy model {}",
            latent.channels,
            model.channels()
        )));
    }
    Ok(latent
        .symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| model.bin_probability(latent.channel_of(i), s).max(LIKELIHOOD_FLOOR))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateEstimate {
    pub bits: f64,
    pub bpp: f64,
}

impl RateEstimate {
    pub fn from_probabilities(probabilities: &[f64], height: usize, width: usize) -> Self {
        let terms: Vec<f64> = probabilities.iter().map(|p| -p.log2()).collect();
        let bits = pairwise_sum(&terms).max(0.0);
        Self { bits, bpp: bits / (height * width) as f64 }
    }
}

/// `-sum log2 p` over the latent, and that total per pixel of an `height x width` image.
pub fn rate_estimate(
    latent: &QuantizedLatent,
    model: &impl BinnedDensity,
    height: usize,
    width: usize,
) -> Result<RateEstimate> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension("rate of an empty image".into()));
    }
    Ok(RateEstimate::from_probabilities(&likelihood(latent, model)?, height, width))
}
