//! Parameterised building blocks shared by the codec networks and the
//! discriminators.

use rand::Rng;

use crate::error::Result;
use crate::graph::Graph;
use crate::params::{Group, ParamId, ParamStore};

pub const LEAKY_SLOPE: f64 = 0.2;

/// He-uniform bound for a layer followed by a leaky ReLU.
pub fn he_bound(fan_in: usize) -> f64 {
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    gain * (3.0 / fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// `k x k` convolution with "same" padding, weights scaled by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight =
            store.add_uniform(format!("{name}.weight"), group, &[cout, cin, kernel, kernel], gain * he_bound(fan_in), rng);
        let bias = store.add_uniform(format!("{name}.bias"), group, &[cout], 1.0 / (fan_in as f64).sqrt(), rng);
        Self { weight, bias, stride, pad: kernel / 2 }
    }

    pub fn apply<G: Graph>(&self, g: &mut G, store: &ParamStore, x: &G::Var) -> Result<G::Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, &w, Some(&b), self.stride, self.pad)
    }
}

/// 5x5 stride-2 transposed convolution doubling the spatial size.
#[derive(Clone, Copy, Debug)]
pub struct Upsample {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upsample {
    pub const KERNEL: usize = 5;

    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        gain: f64,
    ) -> Self {
        let k = Self::KERNEL;
        // Each output sees about cin * k^2 / 4 inputs.
        let fan_in = (cin * k * k / 4).max(1);
        let weight = store.add_uniform(format!("{name}.weight"), group, &[cin, cout, k, k], gain * he_bound(fan_in), rng);
        let bias = store.add_uniform(format!("{name}.bias"), group, &[cout], 1.0 / (fan_in as f64).sqrt(), rng);
        Self { weight, bias }
    }

    pub fn apply<G: Graph>(&self, g: &mut G, store: &ParamStore, x: &G::Var) -> Result<G::Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_transpose2d(x, &w, Some(&b), 2, Self::KERNEL / 2, 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        din: usize,
        dout: usize,
        gain: f64,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), group, &[dout, din], gain * he_bound(din), rng);
        let bias = store.add_uniform(format!("{name}.bias"), group, &[dout], 1.0 / (din as f64).sqrt(), rng);
        Self { weight, bias }
    }

    pub fn apply<G: Graph>(&self, g: &mut G, store: &ParamStore, x: &G::Var) -> Result<G::Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, &w, &b)
    }
}

/// Two 3x3 convolutions with a skip connection. With a modulation pair the
/// first convolution's output is scaled and shifted per channel.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub first: Conv,
    pub second: Conv,
    pub modulation: Option<(Dense, Dense)>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        channels: usize,
        modulation: Option<(Group, usize)>,
    ) -> Self {
        let first = Conv::new(store, rng, &format!("{name}.conv1"), group, channels, channels, 3, 1, 1.0);
        let second = Conv::new(store, rng, &format!("{name}.conv2"), group, channels, channels, 3, 1, 0.2);
        let modulation = modulation.map(|(mg, hidden)| {
            (
                Dense::new(store, rng, &format!("{name}.gamma"), mg, hidden, channels, 0.3),
                Dense::new(store, rng, &format!("{name}.shift"), mg, hidden, channels, 0.3),
            )
        });
        Self { first, second, modulation }
    }

    pub fn apply<G: Graph>(
        &self,
        g: &mut G,
        store: &ParamStore,
        x: &G::Var,
        condition: Option<&G::Var>,
    ) -> Result<G::Var> {
        let mut h = self.first.apply(g, store, x)?;
        if let (Some((gamma, shift)), Some(z)) = (&self.modulation, condition) {
            let gm = gamma.apply(g, store, z)?;
            let sh = shift.apply(g, store, z)?;
            h = g.modulate(&h, &gm, &sh)?;
        }
        let h = g.leaky_relu(&h, LEAKY_SLOPE)?;
        let h = self.second.apply(g, store, &h)?;
        g.add(x, &h)
    }
}
