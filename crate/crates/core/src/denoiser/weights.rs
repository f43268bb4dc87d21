//! Weight files: a JSON manifest naming each tensor's shape and offset, next
//! to a raw little-endian `f32` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::unet::{ParamSpec, UNetArch};
use crate::error::{Error, Result};

pub const WEIGHTS_FORMAT: &str = "zvrd-weights";
pub const WEIGHTS_VERSION: u32 = 1;

/// Named tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl ParamStore {
    pub fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) {
        self.entries.push((name, shape, data));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.entries
            .iter()
            .find(|e| e.0 == name)
            .map(|e| (e.1.as_slice(), e.2.as_slice()))
            .ok_or_else(|| Error::config(format!("missing weight tensor '{name}'")))
    }

    pub(crate) fn check_layout(&self, layout: &[ParamSpec]) -> Result<()> {
        for p in layout {
            let (shape, data) = self.get(&p.name)?;
            if shape != p.shape.as_slice() || data.len() != p.shape.iter().product::<usize>() {
                return Err(Error::config(format!(
                    "weight tensor '{}' has shape {shape:?}, expected {:?}",
                    p.name, p.shape
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    architecture: UNetArch,
    /// Blob file name, relative to the manifest.
    blob: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in elements from the start of the blob.
    offset: usize,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `manifest` and a sibling `.bin` blob. Values are stored as `f32`.
pub fn save_weights(manifest: &Path, arch: &UNetArch, store: &ParamStore) -> Result<()> {
    let blob = blob_path(manifest);
    let mut bytes = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (name, shape, data) in &store.entries {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += data.len();
        for &v in data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let m = Manifest {
        format: WEIGHTS_FORMAT.into(),
        version: WEIGHTS_VERSION,
        architecture: *arch,
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::input(manifest, "manifest path has no file name"))?
            .to_string(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serialises");
    fs::write(manifest, text).map_err(|e| Error::io(manifest, e))?;
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))
}

pub fn load_weights(manifest: &Path) -> Result<(UNetArch, ParamStore)> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::input(manifest, e.to_string()))?;
    if m.format != WEIGHTS_FORMAT || m.version != WEIGHTS_VERSION {
        return Err(Error::input(
            manifest,
            format!("unsupported weight format {} v{}", m.format, m.version),
        ));
    }
    let blob = manifest.parent().unwrap_or(Path::new(".")).join(&m.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::input(&blob, "blob length is not a multiple of 4"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let mut store = ParamStore::default();
    for t in m.tensors {
        let n: usize = t.shape.iter().product();
        let data = values
            .get(t.offset..t.offset + n)
            .ok_or_else(|| Error::input(&blob, format!("tensor '{}' runs past the end of the blob", t.name)))?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(&blob, format!("tensor '{}' has a non-finite value at {i}", t.name)));
        }
        store.push(t.name, t.shape, data.to_vec());
    }
    Ok((m.architecture, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::unet::{TinyUNet, TinyUNetSpec, WeightSource};
    use crate::video::Frame;

    #[test]
    fn roundtrip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let arch = UNetArch {
            base_channels: 4,
            head_dim: 4,
            ..UNetArch::default()
        };
        let store = arch.seeded_params(11);
        save_weights(&path, &arch, &store).unwrap();
        let (arch2, store2) = load_weights(&path).unwrap();
        assert_eq!(arch, arch2);
        assert_eq!(store, store2);

        let x = Frame::from_fn(8, 8, 3, |y, x, c| ((y * 8 + x + c) as f64 / 40.0).sin()).unwrap();
        let seeded = TinyUNet::from_spec(&TinyUNetSpec { arch, weights: WeightSource::Seed(11) }).unwrap();
        let loaded = TinyUNet::from_spec(&TinyUNetSpec { arch, weights: WeightSource::File(path) }).unwrap();
        assert_eq!(seeded.forward(&x, 40, None).unwrap().0, loaded.forward(&x, 40, None).unwrap().0);
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let arch = UNetArch::default();
        save_weights(&path, &arch, &arch.seeded_params(1)).unwrap();
        let blob = path.with_extension("bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Input { .. })));
    }

    #[test]
    fn wrong_architecture_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let arch = UNetArch::default();
        save_weights(&path, &arch, &arch.seeded_params(1)).unwrap();
        let other = UNetArch { levels: 1, ..arch };
        let r = TinyUNet::from_spec(&TinyUNetSpec { arch: other, weights: WeightSource::File(path) });
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
