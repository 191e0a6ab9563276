//! Model checkpoints: a safetensors file whose header metadata records the
//! format version, the model kind and its JSON-encoded configuration.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const FORMAT: &str = "hierscribe";
pub const VERSION: &str = "1";

#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: &impl Serialize, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        Ok(Checkpoint {
            kind: kind.into(),
            config: serde_json::to_value(config)?,
            tensors,
        })
    }

    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Checkpoint(format!("config: {e}")))
    }

    /// Fails with `E_CHECKPOINT` unless the stored kind is `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }

    /// Tensors under `prefix.`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&p).map(|rest| (rest.to_string(), t.clone())))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("version".to_string(), VERSION.to_string());
        meta.insert("kind".to_string(), self.kind.clone());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        let contiguous: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
            .collect::<Result<_>>()?;
        safetensors::serialize_to_file(contiguous.iter().map(|(k, t)| (k.as_str(), t)), Some(meta), path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint(format!("{}: no metadata", path.display())))?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{k}`", path.display())))
        };
        if field("format")? != FORMAT {
            return Err(Error::Checkpoint(format!("{}: not a {FORMAT} checkpoint", path.display())));
        }
        let version = field("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("{}: unsupported version {version}", path.display())));
        }
        let config = serde_json::from_str(&field("config")?)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?.into_iter().collect();
        Ok(Checkpoint {
            kind: field("kind")?,
            config,
            tensors,
        })
    }
}

/// Writes a single f32 matrix, used for per-segment feature files.
pub fn save_matrix(path: &Path, name: &str, values: &ndarray::Array2<f32>) -> Result<()> {
    let (r, c) = values.dim();
    let t = Tensor::from_vec(values.iter().copied().collect::<Vec<f32>>(), (r, c), &Device::Cpu)?;
    safetensors::serialize_to_file([(name, &t)], None, path)?;
    Ok(())
}

pub fn load_matrix(path: &Path, name: &str) -> Result<ndarray::Array2<f32>> {
    let bytes = std::fs::read(path)?;
    let mut map = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let t = map
        .remove(name)
        .ok_or_else(|| Error::Data(format!("{}: no tensor `{name}`", path.display())))?;
    let (r, c) = t.dims2()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(ndarray::Array2::from_shape_vec((r, c), v).expect("dims from tensor"))
}
