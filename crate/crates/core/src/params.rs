//! Named parameter storage shared by the codec, the discriminators and the
//! optimizer.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter families. Each family lives in exactly one store, so a
/// `ParamId` is unique across the stores used together in one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Encoder,
    EncoderIca,
    Generator,
    GeneratorIca,
    BetaCond,
    Entropy,
    Discriminator,
    /// Fixed weights of the perceptual metric; never trained.
    Metric,
}

impl Group {
    pub const MODEL: [Group; 6] = [
        Group::Encoder,
        Group::EncoderIca,
        Group::Generator,
        Group::GeneratorIca,
        Group::BetaCond,
        Group::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::EncoderIca => "encoder_ica",
            Group::Generator => "generator",
            Group::GeneratorIca => "generator_ica",
            Group::BetaCond => "beta_cond",
            Group::Entropy => "entropy",
            Group::Discriminator => "discriminator",
            Group::Metric => "metric",
        }
    }

    pub fn from_name(name: &str) -> Option<Group> {
        [Group::Discriminator, Group::Metric].iter().chain(Group::MODEL.iter()).copied().find(|g| g.name() == name)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub group: Group,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        let index = self.params.len();
        self.params.push(Param { name: name.into(), group, value });
        ParamId { group, index }
    }

    /// Uniform init in `±bound`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 }).collect();
        self.add(name, group, Tensor::new(shape.to_vec(), data).expect("consistent shape"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        let p = &self.params[id.index];
        debug_assert_eq!(p.group, id.group);
        &p.value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.index].value
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.params.get(id.index).is_some_and(|p| p.group == id.group)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(index, p)| (ParamId { group: p.group, index }, p))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.iter().map(|(id, _)| id).collect()
    }

    /// Scalar parameter counts per group.
    pub fn counts(&self) -> BTreeMap<Group, usize> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            *out.entry(p.group).or_insert(0) += p.value.numel();
        }
        out
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Overwrites every parameter from `named`, which must hold exactly the
    /// same names and shapes.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in &mut self.params {
            let t = named
                .get(&p.name)
                .ok_or_else(|| Error::Compatibility(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Compatibility(format!(
                    "parameter {} has shape {:?} in checkpoint, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}
