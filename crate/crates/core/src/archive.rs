//! Versioned on-disk archive shared by corpora and checkpoints.
//!
//! An archive is a directory holding `manifest.json`, a single `tensors.bin`
//! blob of little-endian `f32` buffers and any number of auxiliary text files.
//! The manifest lists each tensor's name, shape and byte offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const TENSORS: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub dtype: String,
    pub byte_order: String,
    pub counts: BTreeMap<String, u64>,
    pub tensors: Vec<TensorEntry>,
}

pub struct ArchiveWriter {
    dest: PathBuf,
    manifest: Manifest,
    data: Vec<u8>,
    files: Vec<(String, Vec<u8>)>,
}

impl ArchiveWriter {
    pub fn new(dest: impl Into<PathBuf>, kind: &str, config_hash: &str) -> Self {
        ArchiveWriter {
            dest: dest.into(),
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                kind: kind.to_string(),
                config_hash: config_hash.to_string(),
                dtype: "float32".into(),
                byte_order: "little".into(),
                counts: BTreeMap::new(),
                tensors: Vec::new(),
            },
            data: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn count(&mut self, key: &str, value: u64) -> &mut Self {
        self.manifest.counts.insert(key.to_string(), value);
        self
    }

    pub fn tensor_f32(&mut self, name: &str, value: &Array2<f32>) -> &mut Self {
        let (r, c) = value.dim();
        self.manifest.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [r, c],
            offset: self.data.len() as u64,
        });
        self.data.reserve(value.len() * 4);
        for v in value.iter() {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    /// Stores an `f64` tensor narrowed to `f32`.
    pub fn tensor(&mut self, name: &str, value: &Tensor) -> &mut Self {
        self.tensor_f32(name, &value.mapv(|v| v as f32))
    }

    pub fn file(&mut self, name: &str, contents: impl Into<Vec<u8>>) -> &mut Self {
        self.files.push((name.to_string(), contents.into()));
        self
    }

    /// Writes everything into a sibling temporary directory and renames it
    /// over the destination, so a crash never leaves a half-written archive.
    pub fn finish(self) -> Result<PathBuf> {
        let tmp = self.dest.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        write(&tmp.join(MANIFEST), manifest.as_bytes())?;
        write(&tmp.join(TENSORS), &self.data)?;
        for (name, contents) in &self.files {
            write(&tmp.join(name), contents)?;
        }
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest).map_err(|e| Error::io(&self.dest, e))?;
        }
        fs::rename(&tmp, &self.dest).map_err(|e| Error::io(&self.dest, e))?;
        Ok(self.dest)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
pub struct Archive {
    dir: PathBuf,
    manifest: Manifest,
    data: Vec<u8>,
}

impl Archive {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Archive(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.dtype != "float32" || manifest.byte_order != "little" {
            return Err(Error::Archive(format!(
                "unsupported tensor encoding {}/{}",
                manifest.dtype, manifest.byte_order
            )));
        }
        let data_path = dir.join(TENSORS);
        let data = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        Ok(Archive { dir, manifest, data })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn kind(&self) -> &str {
        &self.manifest.kind
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.manifest.kind == kind {
            Ok(())
        } else {
            Err(Error::Archive(format!(
                "{} is a {} archive, expected {kind}",
                self.dir.display(),
                self.manifest.kind
            )))
        }
    }

    pub fn config_hash(&self) -> &str {
        &self.manifest.config_hash
    }

    pub fn count(&self, key: &str) -> Option<u64> {
        self.manifest.counts.get(key).copied()
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.manifest.tensors.iter().any(|t| t.name == name)
    }

    pub fn tensor_f32(&self, name: &str) -> Result<Array2<f32>> {
        let entry = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Archive(format!("missing tensor {name}")))?;
        let [r, c] = entry.shape;
        let start = entry.offset as usize;
        let end = start + r * c * 4;
        let bytes = self
            .data
            .get(start..end)
            .ok_or_else(|| Error::Archive(format!("tensor {name} runs past the data blob")))?;
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Array2::from_shape_vec((r, c), values).map_err(|e| Error::Archive(e.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        Ok(self.tensor_f32(name)?.mapv(f64::from))
    }

    pub fn read_file(&self, name: &str) -> Result<String> {
        let path = self.dir.join(name);
        fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    }
}
