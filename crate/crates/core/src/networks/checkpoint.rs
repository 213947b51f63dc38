//! Checkpoint directory: `manifest.json` (ordered `{name, shape, dtype}`
//! records) and `weights.bin` (each tensor as little-endian f32, row-major,
//! in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchConfig, TeacherStudent};
use crate::error::{Error, Result};
use crate::rng::Prng;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

impl ManifestEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub type Manifest = Vec<ManifestEntry>;

/// Write `bytes` to `path` via a temporary sibling and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(ts: &TeacherStudent, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::new();
    let mut bytes = Vec::new();
    for (name, t) in ts.named_tensors() {
        manifest.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
        });
        for &x in t.data() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(WEIGHTS_FILE), &bytes)?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(weights_checksum(&bytes))
}

/// Hex SHA-256 of the weights payload.
pub fn weights_checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::json(&path, e))
}

/// Manifest and raw weights, with the payload length checked against it.
pub fn read_raw(dir: &Path) -> Result<(Manifest, Vec<u8>)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if let Some(e) = manifest.iter().find(|e| e.dtype != "f32") {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported dtype {}",
            e.name, e.dtype
        )));
    }
    let expected: usize = manifest.iter().map(|e| e.numel() * 4).sum();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "weights.bin holds {} bytes, manifest describes {expected}",
            bytes.len()
        )));
    }
    Ok((manifest, bytes))
}

fn shape_of<'a>(manifest: &'a Manifest, name: &str) -> Result<&'a [usize]> {
    manifest
        .iter()
        .find(|e| e.name == name)
        .map(|e| e.shape.as_slice())
        .filter(|s| s.len() == 2)
        .ok_or_else(|| Error::Checkpoint(format!("missing matrix {name}")))
}

/// Layer widths implied by the weight shapes.
pub fn infer_arch(manifest: &Manifest) -> Result<ArchConfig> {
    let enc1 = shape_of(manifest, "student.encoder.fc1.weight")?;
    let enc2 = shape_of(manifest, "student.encoder.fc2.weight")?;
    let proj1 = shape_of(manifest, "student.projector.fc1.weight")?;
    let proj2 = shape_of(manifest, "student.projector.fc2.weight")?;
    if proj2[1] % 2 != 0 {
        return Err(Error::Checkpoint("projector output width is odd".into()));
    }
    Ok(ArchConfig {
        input_dim: enc1[0],
        encoder_hidden: enc1[1],
        feat_dim: enc2[1],
        head_hidden: proj1[1],
        latent_dim: proj2[1] / 2,
    })
}

pub fn load_checkpoint(dir: &Path) -> Result<TeacherStudent> {
    let (manifest, bytes) = read_raw(dir)?;
    let arch = infer_arch(&manifest)?;
    let mut ts = TeacherStudent::new(arch, super::DEFAULT_TAU, &mut Prng::seed_from_u64(0))?;
    let slots = ts.named_tensors_mut();
    if slots.len() != manifest.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, architecture has {}",
            manifest.len(),
            slots.len()
        )));
    }
    let mut offset = 0;
    for ((name, slot), entry) in slots.into_iter().zip(&manifest) {
        if name != entry.name || slot.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "expected {name} {:?}, found {} {:?}",
                slot.shape(),
                entry.name,
                entry.shape
            )));
        }
        for x in slot.data_mut() {
            let b: [u8; 4] = bytes[offset..offset + 4].try_into().expect("4 bytes");
            *x = f32::from_le_bytes(b) as f64;
            offset += 4;
        }
    }
    Ok(ts)
}
