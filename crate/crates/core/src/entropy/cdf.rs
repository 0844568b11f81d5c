use super::BinnedDensity;
use crate::error::{Error, Result};

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;

/// Smallest half-width of a channel's symbol range.
const MIN_HALF_WIDTH: i32 = 8;
/// Largest half-width; keeps every table well under `FREQ_TOTAL` symbols.
const MAX_HALF_WIDTH: i32 = 2000;
/// Tail mass left outside the symbol range on each side.
const TAIL_MASS: f64 = 1e-6;

/// Quantized cumulative frequencies for one channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelCdf {
    min: i32,
    max: i32,
    /// `cdf[i]` is the cumulative frequency below symbol `min + i`;
    /// `cdf[0] == 0`, `cdf[len] == FREQ_TOTAL`.
    cdf: Vec<u32>,
}

impl ChannelCdf {
    /// Quantizes `probabilities` (one per symbol of `min..=max`) so that every
    /// symbol gets at least frequency 1 and the total is exactly `FREQ_TOTAL`.
    /// Leftover counts go to the largest fractional remainders, lower symbol
    /// first on ties.
    pub fn from_probabilities(min: i32, probabilities: &[f64]) -> Result<Self> {
        let n = probabilities.len();
        if n == 0 || n as u32 > FREQ_TOTAL {
            return Err(Error::Parameter(format!("cannot build a table over {n} symbols")));
        }
        if probabilities.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite bin probability".into()));
        }
        let mass: f64 = probabilities.iter().map(|p| p.max(0.0)).sum();
        let spare = FREQ_TOTAL - n as u32;
        let mut freq = vec![1u32; n];
        if spare > 0 {
            let mut remainders = Vec::with_capacity(n);
            let mut assigned = 0u32;
            for (i, p) in probabilities.iter().enumerate() {
                let target = if mass > 0.0 && mass.is_finite() {
                    p.max(0.0) / mass * spare as f64
                } else {
                    spare as f64 / n as f64
                };
                let whole = (target.floor() as u32).min(spare - assigned);
                freq[i] += whole;
                assigned += whole;
                remainders.push((target - target.floor(), i));
            }
            remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, i) in remainders.iter().cycle().take((spare - assigned) as usize) {
                freq[i] += 1;
            }
        }
        let mut cdf = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for f in &freq {
            acc += f;
            cdf.push(acc);
        }
        debug_assert_eq!(acc, FREQ_TOTAL);
        Ok(Self { min, max: min + n as i32 - 1, cdf })
    }

    /// Two equiprobable symbols `0` and `1`.
    pub(super) fn binary() -> Self {
        Self { min: 0, max: 1, cdf: vec![0, FREQ_TOTAL / 2, FREQ_TOTAL] }
    }

    pub fn min(&self) -> i32 {
        self.min
    }

    pub fn max(&self) -> i32 {
        self.max
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cdf
    }

    pub fn contains(&self, symbol: i32) -> bool {
        (self.min..=self.max).contains(&symbol)
    }

    /// `(cumulative, frequency)` of an in-range symbol.
    pub fn interval(&self, symbol: i32) -> (u32, u32) {
        let i = (symbol - self.min) as usize;
        (self.cdf[i], self.cdf[i + 1] - self.cdf[i])
    }

    pub fn frequency(&self, symbol: i32) -> u32 {
        self.interval(symbol).1
    }

    /// Symbol whose interval contains `count` (`count < FREQ_TOTAL`).
    pub fn lookup(&self, count: u32) -> i32 {
        let i = self.cdf.partition_point(|&c| c <= count) - 1;
        self.min + i as i32
    }

    pub fn probability(&self, symbol: i32) -> f64 {
        self.frequency(symbol) as f64 / FREQ_TOTAL as f64
    }

    /// Lower bound on the bits any symbol of this channel costs.
    pub fn min_bits(&self) -> f64 {
        let most = self.cdf.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(FREQ_TOTAL);
        -(most as f64 / FREQ_TOTAL as f64).log2()
    }
}

/// Coding tables for every latent channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    channels: Vec<ChannelCdf>,
}

impl CdfTable {
    /// Tables for `model` over inclusive per-channel `bounds`.
    pub fn build(model: &impl BinnedDensity, bounds: &[(i32, i32)]) -> Result<Self> {
        if bounds.len() != model.channels() {
            return Err(Error::Parameter(format!(
                "{} bounds for {} channels",
                bounds.len(),
                model.channels()
            )));
        }
        let channels = bounds
            .iter()
            .enumerate()
            .map(|(c, &(lo, hi))| {
                if hi < lo {
                    return Err(Error::Parameter(format!("empty bounds [{lo}, {hi}]")));
                }
                let probs: Vec<f64> = (lo..=hi).map(|s| model.bin_probability(c, s)).collect();
                ChannelCdf::from_probabilities(lo, &probs)
            })
            .collect::<Result<_>>()?;
        Ok(Self { channels })
    }

    /// Like [`CdfTable::build`] with one extra symbol on each side,
    /// `lo - 1` and `hi + 1`, carrying the density's mass beyond the bounds.
    /// Coders use them as escapes for symbols outside `bounds`.
    pub fn build_escaped(model: &impl BinnedDensity, bounds: &[(i32, i32)]) -> Result<Self> {
        if bounds.len() != model.channels() {
            return Err(Error::Parameter(format!(
                "{} bounds for {} channels",
                bounds.len(),
                model.channels()
            )));
        }
        let channels = bounds
            .iter()
            .enumerate()
            .map(|(c, &(lo, hi))| {
                if hi < lo || lo == i32::MIN || hi == i32::MAX {
                    return Err(Error::Parameter(format!("invalid bounds [{lo}, {hi}]")));
                }
                let mut probs = vec![model.cdf(c, lo as f64 - 0.5)];
                probs.extend((lo..=hi).map(|s| model.bin_probability(c, s)));
                probs.push(1.0 - model.cdf(c, hi as f64 + 0.5));
                ChannelCdf::from_probabilities(lo - 1, &probs)
            })
            .collect::<Result<_>>()?;
        Ok(Self { channels })
    }

    pub fn from_channels(channels: Vec<ChannelCdf>) -> Self {
        Self { channels }
    }

    pub fn channel(&self, c: usize) -> &ChannelCdf {
        &self.channels[c]
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Ideal code length in bits of channel-major `symbols` with `plane`
    /// symbols per channel, under the quantized frequencies.
    pub fn estimate_bits(&self, symbols: &[i32], plane: usize) -> Result<f64> {
        let mut terms = Vec::with_capacity(symbols.len());
        for (i, &s) in symbols.iter().enumerate() {
            let c = (i / plane.max(1)) % self.channels.len();
            let cdf = &self.channels[c];
            if !cdf.contains(s) {
                return Err(Error::SymbolRange { symbol: s, min: cdf.min, max: cdf.max, channel: c });
            }
            terms.push(-cdf.probability(s).log2());
        }
        Ok(crate::tensor::pairwise_sum(&terms))
    }
}

/// Symbol bounds covering all but `TAIL_MASS` of each channel's logistic
/// density on either side.
pub fn default_bounds(params: &super::EntropyParams) -> Vec<(i32, i32)> {
    let tail = ((1.0 - TAIL_MASS) / TAIL_MASS).ln();
    params
        .loc()
        .iter()
        .zip(params.scale())
        .map(|(&loc, &scale)| {
            let half = (scale * tail).ceil().clamp(MIN_HALF_WIDTH as f64, MAX_HALF_WIDTH as f64) as i32;
            let centre = loc.round().clamp(-1e6, 1e6) as i32;
            (centre - half, centre + half)
        })
        .collect()
}
