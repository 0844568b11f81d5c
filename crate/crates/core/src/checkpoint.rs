//! Versioned binary container for named parameter arrays.
//!
//! Layout (integers big-endian, floats little-endian IEEE 754):
//! magic `CRDRPARM`, version `u8`, metadata length `u32`, metadata JSON,
//! SHA-256 of the metadata, array count `u32`, then per array: name length
//! `u16`, name, rank `u8`, dims `u32` each, values `f64`. A SHA-256 of
//! everything before it closes the file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::disc::{DiscConfig, Discriminator};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CRDRPARM";
const VERSION: u8 = 1;
const DIGEST_LEN: usize = 32;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    /// Free-form JSON metadata.
    pub meta: String,
    pub arrays: BTreeMap<String, Tensor>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("container truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

impl Container {
    pub fn new(meta: String) -> Self {
        Self { meta, arrays: BTreeMap::new() }
    }

    /// Hex SHA-256 of the metadata.
    pub fn meta_digest(&self) -> String {
        sha256_hex(self.meta.as_bytes())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let meta = self.meta.as_bytes();
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| Error::Format("metadata too long".into()))?.to_be_bytes());
        out.extend_from_slice(meta);
        out.extend_from_slice(&Sha256::digest(meta));
        out.extend_from_slice(&(self.arrays.len() as u32).to_be_bytes());
        for (name, t) in &self.arrays {
            let n = u16::try_from(name.len()).map_err(|_| Error::Format(format!("array name too long: {name}")))?;
            out.extend_from_slice(&n.to_be_bytes());
            out.extend_from_slice(name.as_bytes());
            if t.shape().len() > MAX_RANK {
                return Err(Error::Format(format!("array {name} has rank above {MAX_RANK}")));
            }
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::Format("dimension too large".into()))?.to_be_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 1 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a parameter container".into()));
        }
        if bytes[MAGIC.len()] != VERSION {
            return Err(Error::Format(format!("unsupported container version {}", bytes[MAGIC.len()])));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("container checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() + 1 };
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?
            .to_string();
        if Sha256::digest(meta.as_bytes()).as_slice() != r.take(DIGEST_LEN)? {
            return Err(Error::Format("metadata digest mismatch".into()));
        }
        let count = r.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            if rank > MAX_RANK {
                return Err(Error::Format(format!("array {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format("array too large".into()))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
            arrays.insert(name.to_string(), Tensor::new(shape, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in container".into()));
        }
        Ok(Self { meta, arrays })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Metadata of a model checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub discriminator: Option<DiscConfig>,
    /// Opaque training state written by the training loop.
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

const DISC_PREFIX: &str = "disc.";

/// Model, optional discriminator and any extra arrays (such as optimizer
/// state) from one container.
pub struct Checkpoint {
    pub model: Model,
    pub discriminator: Option<Discriminator>,
    pub training: Option<serde_json::Value>,
    pub extra: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_container(
        model: &Model,
        discriminator: Option<&Discriminator>,
        training: Option<serde_json::Value>,
        extra: BTreeMap<String, Tensor>,
    ) -> Result<Container> {
        let meta = CheckpointMeta {
            model: model.config().clone(),
            discriminator: discriminator.map(|d| d.config().clone()),
            training,
        };
        let meta = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut c = Container::new(meta);
        c.arrays = model.params().named();
        if let Some(d) = discriminator {
            c.arrays.extend(d.params().named());
        }
        for (k, v) in extra {
            if c.arrays.insert(k.clone(), v).is_some() {
                return Err(Error::Format(format!("duplicate array {k}")));
            }
        }
        Ok(c)
    }

    pub fn save(
        path: impl AsRef<Path>,
        model: &Model,
        discriminator: Option<&Discriminator>,
        training: Option<serde_json::Value>,
        extra: BTreeMap<String, Tensor>,
    ) -> Result<()> {
        Self::to_container(model, discriminator, training, extra)?.write(path)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&c.meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let mut model = Model::new(meta.model, 0)?;
        let mut model_arrays = BTreeMap::new();
        let mut disc_arrays = BTreeMap::new();
        let mut extra = BTreeMap::new();
        let model_names: std::collections::HashSet<String> = model.params().iter().map(|(_, p)| p.name.clone()).collect();
        for (k, v) in c.arrays {
            if model_names.contains(&k) {
                model_arrays.insert(k, v);
            } else if k.starts_with(DISC_PREFIX) {
                disc_arrays.insert(k, v);
            } else {
                extra.insert(k, v);
            }
        }
        model.params_mut().load_named(&model_arrays)?;
        let discriminator = match meta.discriminator {
            Some(cfg) => {
                let mut d = Discriminator::new(cfg, 0)?;
                d.params_mut().load_named(&disc_arrays)?;
                Some(d)
            }
            None => None,
        };
        Ok(Self { model, discriminator, training: meta.training, extra })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}
