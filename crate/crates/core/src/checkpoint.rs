//! Flat key->array checkpoint archive.
//!
//! A checkpoint is a directory holding:
//!
//! ```text
//! dir/
//!   manifest.json   format marker, kind, config hash, trained step count,
//!                   a model-specific `meta` blob, and one entry per tensor
//!                   (name, rows, cols, element offset into params.bin)
//!   params.bin      all tensor contents, f64 little-endian, concatenated
//!                   in manifest order
//! ```
//!
//! Loading is strict: every parameter of the receiving group must be
//! present with the exact shape, and the file may not contain extras.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{collect, ParamGroup};
use crate::tensor::Tensor;

const FORMAT: &str = "slotforge-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    kind: String,
    config_hash: String,
    trained_steps: usize,
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize, // elements into params.bin
}

/// A checkpoint read back from disk.
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: String,
    pub trained_steps: usize,
    pub meta: serde_json::Value,
    tensors: Vec<(String, Tensor)>,
}

/// Write a parameter group plus metadata.
pub fn save(
    dir: &Path,
    kind: &str,
    config_hash: &str,
    trained_steps: usize,
    meta: serde_json::Value,
    group: &dyn ParamGroup,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = collect(group);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, t) in &tensors {
        entries.push(Entry {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
            offset,
        });
        blob.extend_from_slice(&t.to_le_bytes());
        offset += t.len();
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        kind: kind.to_string(),
        config_hash: config_hash.to_string(),
        trained_steps,
        meta,
        entries,
    };
    let manifest_path = dir.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(&manifest_path, e))?;
    let bin_path = dir.join("params.bin");
    fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

/// Read a checkpoint directory.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::state(format!(
            "missing checkpoint: {} does not exist",
            manifest_path.display()
        )));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::data_format(&manifest_path, format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::data_format(
            &manifest_path,
            format!("unsupported checkpoint format '{}'", manifest.format),
        ));
    }
    let bin_path = dir.join("params.bin");
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let start = e.offset * 8;
        let end = start + e.rows * e.cols * 8;
        if end > blob.len() {
            return Err(Error::data_format(
                &bin_path,
                format!("entry '{}' extends past the end of params.bin", e.name),
            ));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push((e.name.clone(), Tensor::from_vec(e.rows, e.cols, data)));
    }
    Ok(Checkpoint {
        kind: manifest.kind,
        config_hash: manifest.config_hash,
        trained_steps: manifest.trained_steps,
        meta: manifest.meta,
        tensors,
    })
}

impl Checkpoint {
    /// Copy every stored tensor into a structurally identical group.
    pub fn apply(&self, group: &mut dyn ParamGroup) -> Result<()> {
        let mut idx = 0usize;
        let mut err: Option<Error> = None;
        group.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(idx) {
                Some((sname, s)) if sname == name && s.shape() == t.shape() => {
                    *t = s.clone();
                }
                Some((sname, s)) => {
                    err = Some(Error::Checkpoint(format!(
                        "parameter mismatch at #{idx}: expected '{name}' {:?}, found '{sname}' {:?}",
                        t.shape(),
                        s.shape()
                    )));
                }
                None => {
                    err = Some(Error::Checkpoint(format!(
                        "checkpoint is missing parameter '{name}'"
                    )));
                }
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} extra parameter(s)",
                self.tensors.len() - idx
            )));
        }
        Ok(())
    }

    pub fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint meta: {e}")))
    }
}
