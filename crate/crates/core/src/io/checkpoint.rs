//! Model checkpoints: a tensor container with the architecture under
//! [`CONFIG_ENTRY`] and every parameter and buffer under its dotted name.

use super::tensorfile;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{DType, Float, Tensor};
use std::path::Path;

pub const CONFIG_ENTRY: &str = "__config__";

pub struct Checkpoint<T: Float> {
    pub config: ModelConfig,
    pub model: Model,
    pub params: ParamStore<T>,
}

pub fn encode<T: Float>(config: &ModelConfig, params: &ParamStore<T>) -> Result<Vec<u8>> {
    let cfg = config.to_vec();
    let mut entries = vec![(CONFIG_ENTRY.to_string(), Tensor::new(&[cfg.len()], cfg.into_iter().map(T::of).collect())?)];
    entries.extend(params.slots().iter().map(|s| (s.name.clone(), s.value.clone())));
    tensorfile::encode_container(&entries)
}

/// Rebuilds the model and fills its store, requiring an exact name and shape match.
pub fn decode<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let entries: Vec<(String, Tensor<T>)> = match tensorfile::peek_dtype(bytes)? {
        d if d == T::DTYPE => tensorfile::decode_container(bytes)?,
        DType::F32 => cast_all(tensorfile::decode_container::<f32>(bytes)?),
        DType::F64 => cast_all(tensorfile::decode_container::<f64>(bytes)?),
    };
    let mut map: std::collections::HashMap<String, Tensor<T>> = entries.into_iter().collect();
    let cfg = map
        .remove(CONFIG_ENTRY)
        .ok_or_else(|| Error::format(format!("checkpoint has no {CONFIG_ENTRY} entry")))?;
    let config = ModelConfig::from_vec(&cfg.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>())?;
    let (model, mut params) = Model::build::<T>(&config, 0)?;
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.slot(id).name.clone();
        let t = map.remove(&name).ok_or_else(|| Error::format(format!("checkpoint lacks {name}")))?;
        params.set(id, t)?;
    }
    if let Some(extra) = map.keys().min() {
        return Err(Error::format(format!("checkpoint has unexpected entry {extra}")));
    }
    Ok(Checkpoint { config, model, params })
}

fn cast_all<U: Float, T: Float>(entries: Vec<(String, Tensor<U>)>) -> Vec<(String, Tensor<T>)> {
    entries.into_iter().map(|(n, t)| (n, t.cast())).collect()
}

pub fn save<T: Float>(path: &Path, config: &ModelConfig, params: &ParamStore<T>) -> Result<()> {
    Ok(std::fs::write(path, encode(config, params)?)?)
}

pub fn load<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path)?)
}
