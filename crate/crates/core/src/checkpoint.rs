//! Adapter-and-head checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and `tensors.bin`.
//! The blob is the concatenation of every stored tensor as little-endian
//! IEEE-754 values in manifest order. The backbone is not stored: loading
//! rebuilds it from the recorded spec and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::engine::CycleReport;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{slot_location, Model, ModelSpec, SlotKind};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub slot: usize,
    pub layer_index: usize,
    pub kind: SlotKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub initial_hidden: usize,
    /// Original index of every surviving neuron.
    pub origin: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model_spec: ModelSpec,
    pub spec_hash: String,
    pub backbone_seed: u64,
    pub dtype: String,
    pub blob_bytes: usize,
    pub tensors: Vec<TensorEntry>,
    pub adapters: Vec<AdapterEntry>,
    pub history: Vec<CycleReport>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub manifest: CheckpointManifest,
}

fn down_name(slot: usize) -> String {
    format!("adapter.{slot}.down")
}

fn up_name(slot: usize) -> String {
    format!("adapter.{slot}.up")
}

/// Serializes the trainable state of `model` to `(manifest, blob)`.
pub fn encode<T: Scalar>(model: &Model<T>, history: &[CycleReport]) -> (CheckpointManifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor<T>, blob: &mut Vec<u8>| {
        let offset = blob.len();
        t.data().iter().for_each(|x| x.write_le(blob));
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
            length: blob.len() - offset,
        });
    };
    push("head.weight".into(), &model.head().weight, &mut blob);
    push("head.bias".into(), &model.head().bias, &mut blob);
    let mut adapters = Vec::new();
    for (slot, a) in model.adapters() {
        push(down_name(slot), a.down(), &mut blob);
        push(up_name(slot), a.up(), &mut blob);
        let (layer_index, kind) = slot_location(slot);
        adapters.push(AdapterEntry {
            slot,
            layer_index,
            kind,
            input_dim: a.input_dim(),
            hidden: a.hidden(),
            initial_hidden: a.initial_hidden(),
            origin: a.origin().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        model_spec: model.spec().clone(),
        spec_hash: model.spec().hash(),
        backbone_seed: model.seed(),
        dtype: T::DTYPE.to_string(),
        blob_bytes: blob.len(),
        tensors,
        adapters,
        history: history.to_vec(),
    };
    (manifest, blob)
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json` and `tensors.bin` into `dir`, creating it.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, history: &[CycleReport], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = encode(model, history);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write(dir.join(MANIFEST_FILE), &json)?;
    write(dir.join(BLOB_FILE), &blob)
}

fn read_values<T: Scalar>(bytes: &[u8], dtype: &str) -> Result<Vec<T>> {
    match dtype {
        "f32" => Ok(bytes.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect()),
        "f64" => Ok(bytes.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect()),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn dtype_bytes(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

/// Rebuilds a model from a manifest and blob. Values stored in another
/// precision are converted.
pub fn decode<T: Scalar>(manifest: CheckpointManifest, blob: &[u8]) -> Result<Checkpoint<T>> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let computed = manifest.model_spec.hash();
    if computed != manifest.spec_hash {
        return Err(Error::HashMismatch {
            manifest: manifest.spec_hash.clone(),
            computed,
        });
    }
    let expected: usize = manifest.tensors.iter().map(|t| t.length).sum();
    if blob.len() < expected || blob.len() < manifest.blob_bytes {
        return Err(Error::TruncatedBlob {
            expected: expected.max(manifest.blob_bytes),
            found: blob.len(),
        });
    }
    if blob.len() != expected || manifest.blob_bytes != expected {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest describes {expected}",
            blob.len()
        )));
    }
    let mut cursor = 0;
    let mut tensors = std::collections::HashMap::new();
    for t in &manifest.tensors {
        if t.offset != cursor {
            return Err(Error::Checkpoint(format!(
                "tensor {} starts at {}, expected {cursor}",
                t.name, t.offset
            )));
        }
        let count: usize = t.shape.iter().product();
        if count * dtype_bytes(&t.dtype)? != t.length {
            return Err(Error::Checkpoint(format!(
                "tensor {} of shape {:?} cannot span {} bytes",
                t.name, t.shape, t.length
            )));
        }
        let values = read_values::<T>(&blob[t.offset..t.offset + t.length], &t.dtype)?;
        tensors.insert(t.name.clone(), Tensor::new(t.shape.clone(), values)?);
        cursor += t.length;
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };

    let mut model = Model::<T>::build(&manifest.model_spec, manifest.backbone_seed)?;
    let (w, b) = (take("head.weight")?, take("head.bias")?);
    let head = model.head_mut();
    if w.shape() != head.weight.shape() || b.shape() != head.bias.shape() {
        return Err(Error::Checkpoint("head shape does not match the model spec".into()));
    }
    head.weight = w.with_requires_grad(true);
    head.bias = b.with_requires_grad(true);
    for e in &manifest.adapters {
        if e.slot >= model.num_slots() || slot_location(e.slot) != (e.layer_index, e.kind) {
            return Err(Error::Checkpoint(format!("adapter slot {} is not in the model", e.slot)));
        }
        let a = Adapter::with_history(
            take(&down_name(e.slot))?,
            take(&up_name(e.slot))?,
            e.initial_hidden,
            e.origin.clone(),
        )?;
        if a.hidden() != e.hidden || a.input_dim() != e.input_dim {
            return Err(Error::Checkpoint(format!("adapter {} shape disagrees with its entry", e.slot)));
        }
        model.set_adapter(e.slot, Some(a))?;
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("tensor {name} belongs to no adapter")));
    }
    Ok(Checkpoint { model, manifest })
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(BLOB_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode(manifest, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{inject_adapters, AdapterPlan};

    fn spec() -> ModelSpec {
        ModelSpec {
            patch_size: 2,
            image_side: 4,
            stages: vec![(8, 1), (16, 1)],
            heads_per_stage: vec![2, 2],
            mlp_ratio: 2.0,
            num_classes: 3,
        }
    }

    fn model() -> Model<f32> {
        let mut m = Model::build(&spec(), 7).unwrap();
        inject_adapters(&mut m, &AdapterPlan::uniform(4.0, 2), 3).unwrap();
        for (i, x) in m.head_mut().weight.data_mut().iter_mut().enumerate() {
            *x = i as f32 * 0.01;
        }
        let a = m.adapter(1).unwrap().prune(&[1]).unwrap();
        m.set_adapter(1, Some(a)).unwrap();
        let a = m.adapter(2).unwrap().prune(&[]).unwrap();
        m.set_adapter(2, Some(a)).unwrap();
        m
    }

    #[test]
    fn round_trip_restores_model() {
        let m = model();
        let (manifest, blob) = encode(&m, &[]);
        let back = decode::<f32>(manifest.clone(), &blob).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(encode(&back.model, &[]), (manifest, blob));
    }

    #[test]
    fn empty_adapter_is_an_empty_entry() {
        let (manifest, _) = encode(&model(), &[]);
        let e = manifest.adapters.iter().find(|e| e.slot == 2).unwrap();
        assert_eq!((e.hidden, e.origin.len()), (0, 0));
        let t = manifest.tensors.iter().find(|t| t.name == "adapter.2.down").unwrap();
        assert_eq!(t.length, 0);
        assert_eq!(manifest.adapters.iter().find(|e| e.slot == 1).unwrap().origin, vec![1]);
    }

    #[test]
    fn detects_corruption() {
        let (manifest, blob) = encode(&model(), &[]);
        let mut v = manifest.clone();
        v.format_version = 99;
        assert!(matches!(decode::<f32>(v, &blob), Err(Error::VersionMismatch { .. })));
        let mut h = manifest.clone();
        h.model_spec.num_classes = 4;
        assert!(matches!(decode::<f32>(h, &blob), Err(Error::HashMismatch { .. })));
        assert!(matches!(
            decode::<f32>(manifest, &blob[..blob.len() - 1]),
            Err(Error::TruncatedBlob { .. })
        ));
    }

    #[test]
    fn files_are_byte_identical_after_reload() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save_checkpoint(&model(), &[], &a).unwrap();
        let loaded = load_checkpoint::<f32>(&a).unwrap();
        save_checkpoint(&loaded.model, &loaded.manifest.history, &b).unwrap();
        for f in [MANIFEST_FILE, BLOB_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
    }
}
