//! Model checkpoints: a named parameter map plus an architecture id.
//!
//! A checkpoint is the unit of persistence and of parameter-space averaging.
//! Construction quantizes every tensor to f32 precision (the on-disk width),
//! which makes save→load round-trips bit-exact: a run started from an
//! in-memory checkpoint and a run started from the same file agree bitwise.

use std::collections::BTreeMap;
use std::path::Path;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered parameter name → tensor map (deterministic iteration).
pub type ParamMap = BTreeMap<String, Tensor>;

/// Reserved container entry holding the architecture id.
const META_ARCH: &str = "meta.arch";

/// A full parameter set with metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    arch: String,
    params: ParamMap,
}

impl Checkpoint {
    /// Builds a checkpoint, quantizing all values to f32 precision.
    /// Parameter names must be ASCII and must not collide with metadata.
    pub fn new(arch: impl Into<String>, mut params: ParamMap) -> Result<Self> {
        if params.contains_key(META_ARCH) {
            return Err(Error::format(format!(
                "parameter name {META_ARCH:?} is reserved"
            )));
        }
        for v in params.values_mut() {
            v.quantize_f32();
        }
        Ok(Checkpoint {
            arch: arch.into(),
            params,
        })
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    /// Clones the parameters into a live (mutable) map.
    pub fn to_params(&self) -> ParamMap {
        self.params.clone()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        c.insert_bytes(
            META_ARCH,
            vec![self.arch.len()],
            self.arch.as_bytes().to_vec(),
        )?;
        for (name, tensor) in &self.params {
            c.insert_tensor(name, tensor)?;
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let arch = String::from_utf8(c.bytes(META_ARCH)?.to_vec())
            .map_err(|_| Error::format("checkpoint: non-UTF8 architecture id"))?;
        let mut params = ParamMap::new();
        for name in c.names() {
            if name == META_ARCH {
                continue;
            }
            params.insert(name.to_string(), c.tensor(name)?);
        }
        Ok(Checkpoint { arch, params })
    }
}
