//! Quality-aware patch discriminators.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Eval, Graph};
use crate::image::ImageTensor;
use crate::model::layers::{Conv, LEAKY_SLOPE};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

/// Spatial reduction between the input image and the score map.
pub const SCORE_DOWNSAMPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// One discriminator per quality level.
    Independent,
    /// One network, condition map concatenated at the input.
    Shared,
    /// Per-level lower blocks, shared last block and projection.
    HybridHead,
    /// Shared blocks, per-level projection.
    HybridBackbone,
    /// One network that never sees the quality level.
    SharedNoCond,
}

impl DesignKind {
    pub const ALL: [DesignKind; 5] = [
        DesignKind::Independent,
        DesignKind::Shared,
        DesignKind::HybridHead,
        DesignKind::HybridBackbone,
        DesignKind::SharedNoCond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DesignKind::Independent => "independent",
            DesignKind::Shared => "shared",
            DesignKind::HybridHead => "hybrid_head",
            DesignKind::HybridBackbone => "hybrid_backbone",
            DesignKind::SharedNoCond => "shared_no_cond",
        }
    }

    pub fn is_conditioned(self) -> bool {
        !matches!(self, DesignKind::SharedNoCond)
    }
}

impl fmt::Display for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DesignKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown discriminator design {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscConfig {
    pub kind: DesignKind,
    pub levels: usize,
    /// Output widths of the four stride-2 blocks.
    pub widths: [usize; 4],
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { kind: DesignKind::Independent, levels: 5, widths: [16, 32, 64, 64] }
    }
}

/// One-hot quality map `[batch, levels, h, w]`.
pub fn make_condition(q: usize, h: usize, w: usize, levels: usize, batch: usize) -> Result<Tensor> {
    if q >= levels {
        return Err(Error::Domain(format!("quality level {q} outside 0..{levels}")));
    }
    let mut t = Tensor::zeros(&[batch, levels, h, w]);
    let plane = h * w;
    for b in 0..batch {
        let start = (b * levels + q) * plane;
        t.data_mut()[start..start + plane].fill(1.0);
    }
    Ok(t)
}

/// Patch logits `[H/16, W/16]` for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub logits: Vec<f64>,
}

impl ScoreMap {
    pub fn mean(&self) -> f64 {
        crate::tensor::shifted_mean(&self.logits)
    }
}

/// Per-level and shared scalar parameter counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub kind: DesignKind,
    pub shared: usize,
    pub per_level: Vec<usize>,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.shared + self.per_level.iter().sum::<usize>()
    }
}

#[derive(Clone, Debug)]
struct Stack {
    blocks: Vec<Conv>,
    projection: Option<Conv>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscConfig,
    params: ParamStore,
    /// Per-level networks (possibly partial).
    per_level: Vec<Stack>,
    /// Shared network part (possibly empty).
    shared: Stack,
}

const BLOCK_KERNEL: usize = 3;

impl Discriminator {
    pub fn new(config: DiscConfig, seed: u64) -> Result<Self> {
        if config.levels == 0 {
            return Err(Error::Config("discriminator needs at least one level".into()));
        }
        if config.widths.contains(&0) {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (q, w) = (config.levels, config.widths);
        let inputs = [3, w[0], w[1], w[2]];
        let g = Group::Discriminator;
        let mut block = |p: &mut ParamStore, name: String, i: usize, extra: usize| {
            Conv::new(p, &mut rng, &name, g, inputs[i] + extra, w[i], BLOCK_KERNEL, 2, 1.0)
        };
        let mut per_level = Vec::new();
        let mut shared = Stack { blocks: Vec::new(), projection: None };
        // Blocks [0, split) are per level, [split, 4) shared; the condition
        // enters at the first shared block.
        let (split, cond, shared_projection) = match config.kind {
            DesignKind::Independent => (4, 0, false),
            DesignKind::Shared => (0, q, true),
            DesignKind::SharedNoCond => (0, 0, true),
            DesignKind::HybridHead => (3, q, true),
            DesignKind::HybridBackbone => (0, q, false),
        };
        for level in 0..q {
            if split == 0 && shared_projection {
                break;
            }
            let blocks = (0..split).map(|i| block(&mut p, format!("disc.level{level}.block{i}"), i, 0)).collect();
            per_level.push(Stack { blocks, projection: None });
        }
        for i in split..4 {
            let extra = if i == split { cond } else { 0 };
            shared.blocks.push(block(&mut p, format!("disc.shared.block{i}"), i, extra));
        }
        let mut proj = |p: &mut ParamStore, name: &str| Conv::new(p, &mut rng, name, g, w[3], 1, 1, 1, 1.0);
        if shared_projection {
            shared.projection = Some(proj(&mut p, "disc.shared.projection"));
        } else {
            for (level, stack) in per_level.iter_mut().enumerate() {
                stack.projection = Some(proj(&mut p, &format!("disc.level{level}.projection")));
            }
        }
        Ok(Self { config, params: p, per_level, shared })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn kind(&self) -> DesignKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn block<G: Graph>(&self, g: &mut G, conv: &Conv, x: &G::Var) -> Result<G::Var> {
        let h = conv.apply(g, &self.params, x)?;
        g.leaky_relu(&h, LEAKY_SLOPE)
    }

    /// Logits `[B, 1, H/16, W/16]` of a batch that shares quality level `q`.
    pub fn discriminate_graph<G: Graph>(&self, g: &mut G, x: &G::Var, q: usize) -> Result<G::Var> {
        let levels = self.config.levels;
        if q >= levels {
            return Err(Error::Domain(format!("quality level {q} outside 0..{levels}")));
        }
        let (b, c, h, w) = g.value(x).dims4()?;
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % SCORE_DOWNSAMPLE != 0 || w % SCORE_DOWNSAMPLE != 0 {
            return Err(Error::Dimension(format!("input {h}x{w} is not a multiple of {SCORE_DOWNSAMPLE}")));
        }
        let mut hcur = x.clone();
        if let Some(stack) = self.per_level.get(q) {
            for conv in &stack.blocks {
                hcur = self.block(g, conv, &hcur)?;
            }
        }
        for (i, conv) in self.shared.blocks.iter().enumerate() {
            if i == 0 && self.config.kind.is_conditioned() {
                let (_, _, hh, ww) = g.value(&hcur).dims4()?;
                let cond = g.constant(make_condition(q, hh, ww, levels, b)?);
                hcur = g.concat_channels(&hcur, &cond)?;
            }
            hcur = self.block(g, conv, &hcur)?;
        }
        let projection = match &self.shared.projection {
            Some(p) => p,
            None => self.per_level[q].projection.as_ref().expect("per-level projection"),
        };
        projection.apply(g, &self.params, &hcur)
    }

    pub fn discriminate(&self, img: &ImageTensor, q: usize) -> Result<ScoreMap> {
        let mut g = Eval;
        let out = self.discriminate_graph(&mut g, &img.to_tensor(), q)?;
        let (_, _, height, width) = out.dims4()?;
        Ok(ScoreMap { height, width, logits: out.into_data() })
    }

    pub fn param_report(&self) -> ParamReport {
        let mut per_level = vec![0; self.config.levels];
        let mut shared = 0;
        for (_, p) in self.params.iter() {
            let n = p.value.numel();
            let level = p
                .name
                .strip_prefix("disc.level")
                .and_then(|rest| rest.split('.').next())
                .and_then(|s| s.parse::<usize>().ok());
            match level {
                Some(l) => per_level[l] += n,
                None => shared += n,
            }
        }
        ParamReport { kind: self.config.kind, shared, per_level }
    }
}
