//! Checkpoint files: a JSON manifest next to a raw float blob.
//!
//! The manifest holds the architecture tag, the model spec, and one entry
//! per tensor (`name`, `rows`, `cols`, byte `offset`). The blob is the
//! tensors' data as little-endian `f32`, concatenated in manifest order.
//! Values are computed in `f64` but stored in single precision, so a
//! save/load/save cycle is byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{ModelSpec, ARCH_TAGS};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    arch: &'a str,
    spec: &'a ModelSpec,
    tensors: &'a [TensorEntry],
}

/// Loose first-stage parse so an unknown arch tag can be reported before
/// the spec is interpreted.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    arch: String,
    spec: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: spec plus named tensors in file order.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub spec: ModelSpec,
    pub tensors: Vec<(String, Matrix)>,
}

impl Bundle {
    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::format("tensors", format!("missing tensor `{name}`")))
    }
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Write `<stem>.json` and `<stem>.bin`.
pub fn save(stem: &Path, spec: &ModelSpec, tensors: &[(String, &Matrix)]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset: blob.len() as u64,
        });
        for v in m.as_slice() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest { arch: spec.arch.tag(), spec, tensors: &entries };
    let json = serde_json::to_string_pretty(&manifest)?;
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(manifest_path(stem), json)?;
    fs::write(blob_path(stem), blob)?;
    Ok(())
}

/// Read `<stem>.json` and `<stem>.bin` back into matrices.
pub fn load(stem: &Path) -> Result<Bundle> {
    let mpath = manifest_path(stem);
    let text = fs::read_to_string(&mpath)
        .map_err(|e| Error::format("manifest", format!("{}: {e}", mpath.display())))?;
    let raw: RawManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    if !ARCH_TAGS.contains(&raw.arch.as_str()) {
        return Err(Error::config(format!("unknown arch tag `{}`", raw.arch)));
    }
    let spec: ModelSpec = serde_json::from_value(raw.spec)
        .map_err(|e| Error::format("spec", e.to_string()))?;
    if spec.arch.tag() != raw.arch {
        return Err(Error::format(
            "arch",
            format!("tag `{}` disagrees with spec arch `{}`", raw.arch, spec.arch.tag()),
        ));
    }

    let bpath = blob_path(stem);
    let blob = fs::read(&bpath)
        .map_err(|e| Error::format("blob", format!("{}: {e}", bpath.display())))?;

    let mut tensors = Vec::with_capacity(raw.tensors.len());
    for entry in &raw.tensors {
        let count = entry.rows * entry.cols;
        let start = entry.offset as usize;
        let end = start + count * 4;
        if end > blob.len() {
            return Err(Error::format(
                "tensors",
                format!(
                    "tensor `{}` needs bytes {start}..{end} but blob has {}",
                    entry.name,
                    blob.len()
                ),
            ));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in blob[start..end].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            data.push(v);
        }
        let m = Matrix::new(entry.rows, entry.cols, data).map_err(|e| {
            Error::format("tensors", format!("tensor `{}`: {e}", entry.name))
        })?;
        tensors.push((entry.name.clone(), m));
    }
    Ok(Bundle { spec, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelSpec};

    fn spec() -> ModelSpec {
        ModelSpec::mlp(2, 4, 8)
    }

    fn tensors() -> Vec<(String, Matrix)> {
        vec![
            ("a".to_string(), Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64)),
            ("b".to_string(), Matrix::from_fn(1, 2, |_, j| j as f64 + 0.5)),
        ]
    }

    #[test]
    fn save_load_save_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let ts = tensors();
        let refs: Vec<(String, &Matrix)> = ts.iter().map(|(n, m)| (n.clone(), m)).collect();
        save(&stem, &spec(), &refs).unwrap();
        let first_json = std::fs::read(manifest_path(&stem)).unwrap();
        let first_bin = std::fs::read(blob_path(&stem)).unwrap();

        let bundle = load(&stem).unwrap();
        let stem2 = dir.path().join("ckpt2");
        let refs2: Vec<(String, &Matrix)> =
            bundle.tensors.iter().map(|(n, m)| (n.clone(), m)).collect();
        save(&stem2, &bundle.spec, &refs2).unwrap();
        assert_eq!(first_json, std::fs::read(manifest_path(&stem2)).unwrap());
        assert_eq!(first_bin, std::fs::read(blob_path(&stem2)).unwrap());
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let ts = tensors();
        let refs: Vec<(String, &Matrix)> = ts.iter().map(|(n, m)| (n.clone(), m)).collect();
        save(&stem, &spec(), &refs).unwrap();
        let blob = std::fs::read(blob_path(&stem)).unwrap();
        std::fs::write(blob_path(&stem), &blob[..blob.len() - 4]).unwrap();
        match load(&stem) {
            Err(Error::Format { field, detail }) => {
                assert_eq!(field, "tensors");
                assert!(detail.contains('b'), "should name the tensor: {detail}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_arch_tag_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let ts = tensors();
        let refs: Vec<(String, &Matrix)> = ts.iter().map(|(n, m)| (n.clone(), m)).collect();
        save(&stem, &spec(), &refs).unwrap();
        let text = std::fs::read_to_string(manifest_path(&stem)).unwrap();
        let text = text.replace("mlp-stack", "conv-stack");
        std::fs::write(manifest_path(&stem), text).unwrap();
        match load(&stem) {
            Err(Error::Config(msg)) => assert!(msg.contains("conv-stack"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_with_unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let ts = tensors();
        let refs: Vec<(String, &Matrix)> = ts.iter().map(|(n, m)| (n.clone(), m)).collect();
        save(&stem, &spec(), &refs).unwrap();
        let text = std::fs::read_to_string(manifest_path(&stem)).unwrap();
        let text = text.replacen("\"arch\"", "\"extra\": 1, \"arch\"", 1);
        std::fs::write(manifest_path(&stem), text).unwrap();
        assert!(matches!(load(&stem), Err(Error::Format { .. })));
    }

    #[test]
    fn storage_is_f32() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let precise = Matrix::new(1, 1, vec![0.1234567890123456789]).unwrap();
        let ts = vec![("w".to_string(), &precise)];
        save(&stem, &spec(), &ts).unwrap();
        let bundle = load(&stem).unwrap();
        let got = bundle.tensor("w").unwrap().at(0, 0);
        assert_eq!(got, 0.1234567890123456789f64 as f32 as f64);
    }

    #[test]
    fn arch_tags_cover_both_archs() {
        assert!(ARCH_TAGS.contains(&Arch::MlpStack.tag()));
        assert!(ARCH_TAGS.contains(&Arch::TinyTransformer.tag()));
    }
}
