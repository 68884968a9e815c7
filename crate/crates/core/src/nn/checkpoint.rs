//! Model checkpoints as versioned JSON.
//!
//! ```text
//! {
//!   "format": "walknoise-checkpoint",
//!   "version": 1,
//!   "spec": ModelSpec,
//!   "seed": u64,
//!   "params": [Tensor, ...],        // in Model::params order
//!   "bn_state": [[mean, var], ...]  // per batch norm layer
//! }
//! ```
//!
//! Floats are written with shortest round-trip formatting, so a load
//! reproduces the saved parameters bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{build_model, Model};
use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_FORMAT: &str = "walknoise-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct Checkpoint<T: Real> {
    format: String,
    version: u32,
    spec: ModelSpec,
    seed: u64,
    params: Vec<Tensor<T>>,
    bn_state: Vec<(Tensor<T>, Tensor<T>)>,
}

pub fn to_json<T: Real>(model: &Model<T>) -> Result<String> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        spec: model.spec().clone(),
        seed: model.seed(),
        params: model.params().into_iter().cloned().collect(),
        bn_state: model
            .bn_state()
            .into_iter()
            .map(|(m, v)| (m.clone(), v.clone()))
            .collect(),
    };
    Ok(serde_json::to_string(&ck)?)
}

pub fn from_json<T: Real>(json: &str) -> Result<Model<T>> {
    let ck: Checkpoint<T> = serde_json::from_str(json)?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    let mut model = build_model::<T>(&ck.spec, ck.seed)?;
    let mismatch = |what: &str| Error::InvalidArgument(format!("checkpoint {what} do not match the spec"));
    {
        let params = model.params_mut();
        if params.len() != ck.params.len() {
            return Err(mismatch("parameter counts"));
        }
        for (dst, src) in params.into_iter().zip(ck.params) {
            if dst.shape() != src.shape() {
                return Err(mismatch("parameter shapes"));
            }
            *dst = src;
        }
    }
    let state = model.bn_state_mut();
    if state.len() != ck.bn_state.len() {
        return Err(mismatch("batch norm layers"));
    }
    for ((dm, dv), (sm, sv)) in state.into_iter().zip(ck.bn_state) {
        if dm.shape() != sm.shape() || dv.shape() != sv.shape() {
            return Err(mismatch("batch norm shapes"));
        }
        *dm = sm;
        *dv = sv;
    }
    Ok(model)
}

pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Model<T>> {
    let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic_gaussian_blobs;
    use crate::nn::train::{train, TrainConfig};

    #[test]
    fn round_trip_is_exact() {
        let ds = synthetic_gaussian_blobs(3, 40, 4, 2.0, 1).unwrap();
        let spec = ModelSpec::mlp([1, 1, 4], 3, true);
        let mut model = build_model::<f32>(&spec, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 20,
            ..TrainConfig::default()
        };
        train(&mut model, &ds, None, None, &cfg, 0).unwrap();

        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.json");
        save(&model, &path).unwrap();
        let back: Model<f32> = load(&path).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.bn_state(), model.bn_state());
        assert_eq!(back.spec(), model.spec());
    }

    #[test]
    fn rejects_foreign_documents() {
        let model = build_model::<f32>(&ModelSpec::mlp([1, 1, 4], 3, false), 5).unwrap();
        let json = to_json(&model).unwrap().replace(CHECKPOINT_FORMAT, "other");
        assert!(from_json::<f32>(&json).is_err());
    }
}
