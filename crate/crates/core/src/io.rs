//! File helpers: atomic writes, f32le blobs with JSON sidecars, digests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IoContext, PrismError, Result};
use crate::synthgen::{Phase, Volume};

/// Writes through a temporary sibling and renames into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).at(path)?;
    Ok(serde_json::from_str(&s)?)
}

pub fn f32_to_le(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_to_f32(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(PrismError::Invalid(format!(
            "f32le blob length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Sidecar describing one image blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobMeta {
    pub subject_id: String,
    pub view: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub phase_labels: Vec<Phase>,
}

/// Writes `<dir>/<view>.f32` and `<dir>/<view>.json`.
pub fn write_volume(dir: &Path, view: &str, subject_id: &str, vol: &Volume, phases: &[Phase]) -> Result<()> {
    let meta = BlobMeta {
        subject_id: subject_id.to_string(),
        view: view.to_string(),
        shape: vol.shape.clone(),
        dtype: "f32le".to_string(),
        phase_labels: phases.to_vec(),
    };
    atomic_write(&dir.join(format!("{view}.f32")), &f32_to_le(&vol.data))?;
    write_json(&dir.join(format!("{view}.json")), &meta)
}

pub fn read_volume(dir: &Path, view: &str) -> Result<(Volume, BlobMeta)> {
    let meta: BlobMeta = read_json(&dir.join(format!("{view}.json")))?;
    if meta.dtype != "f32le" {
        return Err(PrismError::Invalid(format!("unsupported dtype {}", meta.dtype)));
    }
    let path = dir.join(format!("{view}.f32"));
    let data = le_to_f32(&fs::read(&path).at(&path)?)?;
    let expected: usize = meta.shape.iter().product();
    if data.len() != expected {
        return Err(PrismError::Shape {
            what: format!("blob {}", path.display()),
            expected: meta.shape.clone(),
            got: vec![data.len()],
        });
    }
    Ok((
        Volume {
            shape: meta.shape.clone(),
            data,
        },
        meta,
    ))
}

/// SHA-256 over every regular file below `root` (relative path and
/// contents, in sorted path order), skipping names in `exclude`.
pub fn dir_digest(root: &Path, exclude: &[&str]) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        if exclude.iter().any(|e| rel == *e) {
            continue;
        }
        let p = root.join(&rel);
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update(fs::read(&p).at(&p)?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).at(dir)? {
        let entry = entry.at(dir)?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).unwrap_or(&p);
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume {
            shape: vec![2, 3, 4],
            data: (0..24).map(|i| i as f32 * 0.25).collect(),
        };
        write_volume(dir.path(), "sax", "s1", &vol, &[Phase::EarlyDiastole, Phase::LateDiastole]).unwrap();
        let (back, meta) = read_volume(dir.path(), "sax").unwrap();
        assert_eq!(back, vol);
        assert_eq!(meta.dtype, "f32le");
        assert_eq!(meta.phase_labels.len(), 2);
    }

    #[test]
    fn digest_changes_with_content() {
        let dir = tempfile::tempdir().unwrap();
        atomic_write(&dir.path().join("a.txt"), b"one").unwrap();
        let d1 = dir_digest(dir.path(), &[]).unwrap();
        assert_eq!(d1, dir_digest(dir.path(), &[]).unwrap());
        atomic_write(&dir.path().join("a.txt"), b"two").unwrap();
        assert_ne!(d1, dir_digest(dir.path(), &[]).unwrap());
    }
}
