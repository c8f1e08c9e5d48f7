//! Tensor files: a JSON manifest plus one blob of little-endian scalars.
//!
//! The manifest lists every tensor's name, shape, dtype and byte range in the
//! blob, in blob order. Loading validates the ranges against the blob size
//! and rejects truncated or overlapping layouts.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::HashSpec;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const FORMAT: &str = "dppnet-tensors";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
    pub nbytes: u64,
    /// Absent for non-trainable buffers such as batch-norm running stats.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ParamKind>,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: Dtype,
    pub blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<HashSpec>,
    pub tensors: Vec<TensorEntry>,
}

/// One tensor headed for a file.
pub struct Item<'a, S> {
    pub name: &'a str,
    pub tensor: &'a Tensor<S>,
    pub kind: Option<ParamKind>,
    pub frozen: bool,
}

impl<'a, S: Scalar> Item<'a, S> {
    pub fn buffer(name: &'a str, tensor: &'a Tensor<S>) -> Self {
        Self {
            name,
            tensor,
            kind: None,
            frozen: false,
        }
    }
}

pub fn params_items<S: Scalar>(store: &ParamStore<S>) -> Vec<Item<'_, S>> {
    store
        .iter()
        .map(|(name, p)| Item {
            name,
            tensor: &p.tensor,
            kind: Some(p.kind),
            frozen: p.frozen,
        })
        .collect()
}

pub fn write<S: Scalar>(dir: &Path, items: &[Item<'_, S>], hash: Option<HashSpec>) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(items.len());
    for item in items {
        let offset = blob.len() as u64;
        for &v in item.tensor.data() {
            v.write_le(&mut blob);
        }
        entries.push(TensorEntry {
            name: item.name.to_string(),
            shape: item.tensor.shape().to_vec(),
            dtype: S::DTYPE,
            offset,
            nbytes: blob.len() as u64 - offset,
            kind: item.kind,
            frozen: item.frozen,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: S::DTYPE,
        blob: BLOB_FILE.into(),
        hash,
        tensors: entries,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(format!("writing {}", blob_path.display()), e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;
    Ok(manifest)
}

/// Reads every tensor, converting to `S` when the file was written at the
/// other precision.
pub fn read<S: Scalar>(dir: &Path) -> Result<(Manifest, IndexMap<String, Tensor<S>>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let bad = |message: String| Error::Checkpoint {
        path: manifest_path.clone(),
        message,
    };
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(bad(format!("unknown format `{}`", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(format!("reading {}", blob_path.display()), e))?;

    let mut out = IndexMap::with_capacity(manifest.tensors.len());
    let mut cursor = 0u64;
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let width = entry.dtype.size_bytes();
        if entry.nbytes != (count * width) as u64 {
            return Err(bad(format!(
                "`{}`: {} bytes declared for shape {:?} of {}",
                entry.name,
                entry.nbytes,
                entry.shape,
                entry.dtype.as_str()
            )));
        }
        if entry.offset != cursor {
            return Err(bad(format!(
                "`{}`: offset {} but previous tensor ends at {cursor}",
                entry.name, entry.offset
            )));
        }
        let end = entry.offset + entry.nbytes;
        if end > blob.len() as u64 {
            return Err(bad(format!(
                "`{}`: needs bytes {}..{end} but blob has {} (truncated)",
                entry.name,
                entry.offset,
                blob.len()
            )));
        }
        let bytes = &blob[entry.offset as usize..end as usize];
        let data: Vec<S> = match entry.dtype {
            Dtype::F32 => bytes.chunks_exact(4).map(|c| S::lit(f32::read_le(c) as f64)).collect(),
            Dtype::F64 => bytes.chunks_exact(8).map(|c| S::lit(f64::read_le(c))).collect(),
        };
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| bad(e.to_string()))?;
        if out.insert(entry.name.clone(), tensor).is_some() {
            return Err(bad(format!("duplicate tensor `{}`", entry.name)));
        }
        cursor = end;
    }
    if cursor != blob.len() as u64 {
        return Err(bad(format!(
            "blob has {} trailing bytes",
            blob.len() as u64 - cursor
        )));
    }
    Ok((manifest, out))
}

/// Rebuilds a parameter store from the entries that carry a kind.
pub fn store_from<S: Scalar>(manifest: &Manifest, tensors: &IndexMap<String, Tensor<S>>) -> Result<ParamStore<S>> {
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        if let Some(kind) = entry.kind {
            store.insert(entry.name.clone(), tensors[&entry.name].clone(), kind)?;
            if entry.frozen {
                store.set_frozen(&entry.name, true);
            }
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::uniform(&[3, 4], 1.0, &mut rng), ParamKind::Static)
            .unwrap();
        s.insert("b", Tensor::uniform(&[5], 1e-300, &mut rng), ParamKind::DynamicProducing)
            .unwrap();
        s.set_frozen("b", true);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let store = sample_store();
        let hash = HashSpec::with_default_seeds(3, 4, 5).unwrap();
        write(dir.path(), &params_items(&store), Some(hash)).unwrap();
        let (manifest, tensors) = read::<f64>(dir.path()).unwrap();
        assert_eq!(manifest.hash, Some(hash));
        let back = store_from(&manifest, &tensors).unwrap();
        for ((n1, p1), (n2, p2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.kind, p2.kind);
            assert_eq!(p1.frozen, p2.frozen);
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p1.tensor), bits(&p2.tensor));
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), &params_items(&sample_store()), None).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        let err = read::<f64>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn f32_file_loads_into_f64() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_vec(vec![0.1f32, -2.5, 3.0]);
        write(dir.path(), &[Item::buffer("t", &t)], None).unwrap();
        let (m, tensors) = read::<f64>(dir.path()).unwrap();
        assert_eq!(m.dtype, Dtype::F32);
        assert_eq!(tensors["t"].data(), &[0.1f32 as f64, -2.5, 3.0]);
    }
}
