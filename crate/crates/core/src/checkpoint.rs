//! Checkpoints: the model's parameter tensors concatenated in canonical
//! order in the flat binary tensor format, with a JSON sidecar manifest
//! (same path, `.json` extension) listing names, shapes, and stage
//! positions, plus the model spec needed to rebuild the skeleton.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelSpec};
use crate::scalar::Scalar;
use crate::tensor::io;

const CKPT_FORMAT: &str = "snr-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    spec: ModelSpec,
    precision: String,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    /// Backbone stage the tensor belongs to; None for the head.
    stage: Option<usize>,
}

fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn stage_of(name: &str) -> Option<usize> {
    name.strip_prefix("stage")
        .and_then(|rest| rest.split('.').next())
        .and_then(|ix| ix.parse().ok())
}

pub fn save_checkpoint<S: Scalar>(path: &Path, model: &Model<S>) -> Result<()> {
    let entries = model.param_entries();
    let tensors: Vec<TensorInfo> = entries
        .iter()
        .map(|(name, t)| TensorInfo {
            name: name.clone(),
            shape: t.shape().to_vec(),
            stage: stage_of(name),
        })
        .collect();
    let records: Vec<_> = entries.iter().map(|(_, t)| *t).collect();
    io::save_tensors(path, &records)?;
    let manifest = CheckpointManifest {
        format: CKPT_FORMAT.to_string(),
        spec: model.spec.clone(),
        precision: S::NAME.to_string(),
        tensors,
    };
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("checkpoint manifest: {e}")))?;
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let mpath = manifest_path(path);
    let raw = std::fs::read_to_string(&mpath).map_err(|_| Error::Format {
        path: mpath.clone(),
        reason: "missing checkpoint manifest".to_string(),
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&raw).map_err(|e| Error::Format {
        path: mpath.clone(),
        reason: format!("manifest parse: {e}"),
    })?;
    if manifest.format != CKPT_FORMAT {
        return Err(Error::Format {
            path: mpath,
            reason: format!("unsupported checkpoint format {}", manifest.format),
        });
    }
    let mut model: Model<S> = build_model(&manifest.spec, 0)?;
    let loaded = io::load_tensors::<S>(path)?;
    let mut entries = model.param_entries_mut();
    if loaded.len() != entries.len() || manifest.tensors.len() != entries.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {} tensors (manifest {}), model expects {}",
            loaded.len(),
            manifest.tensors.len(),
            entries.len()
        )));
    }
    for ((entry, info), tensor) in entries.iter_mut().zip(&manifest.tensors).zip(loaded) {
        let (name, slot) = entry;
        if *name != info.name {
            return Err(Error::CheckpointMismatch(format!(
                "tensor order mismatch: model expects {name}, manifest has {}",
                info.name
            )));
        }
        if slot.shape() != info.shape || slot.shape() != tensor.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "{name}: model shape {:?}, manifest {:?}, file {:?}",
                slot.shape(),
                info.shape,
                tensor.shape()
            )));
        }
        **slot = tensor;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, Variant};

    #[test]
    fn round_trip_preserves_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.snrt");
        let model: Model<f32> =
            build_model(&ModelSpec::default_toy(Variant::Snr, 4), 11).unwrap();
        save_checkpoint(&p, &model).unwrap();
        let back: Model<f32> = load_checkpoint(&p).unwrap();
        for ((na, ta), (nb, tb)) in model.param_entries().iter().zip(back.param_entries()) {
            assert_eq!(na, &nb);
            assert_eq!(*ta, tb, "{na}");
        }
        assert_eq!(model.spec, back.spec);
    }

    #[test]
    fn wrong_shape_is_checkpoint_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.snrt");
        let model: Model<f32> =
            build_model(&ModelSpec::default_toy(Variant::Baseline, 4), 12).unwrap();
        save_checkpoint(&p, &model).unwrap();
        // rewrite payload with an extra record missing
        let records = io::load_tensors::<f32>(&p).unwrap();
        let refs: Vec<_> = records.iter().take(records.len() - 1).collect();
        io::save_tensors(&p, &refs).unwrap();
        let r = load_checkpoint::<f32>(&p);
        assert!(matches!(r, Err(Error::CheckpointMismatch(_))), "{r:?}");
    }
}
