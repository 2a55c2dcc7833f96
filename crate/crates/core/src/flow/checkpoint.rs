//! Checkpoint directories: `manifest.json` plus `params.fnt`, one FNT1
//! record per parameter in manifest order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::model::{FlowModel, FlowSpec};
use crate::flow::params::ParamStore;
use crate::num::io::{read_record, write_real, DType};

pub const FORMAT: &str = "flownull-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// Layer kinds, dimensions and orthogonal-mixing seeds.
    pub spec: FlowSpec,
    pub actnorm_initialized: bool,
    pub params: Vec<ParamEntry>,
    pub param_count: usize,
    pub config_hash: Option<String>,
    /// Free-form provenance (epoch, validation loss, ...).
    #[serde(default)]
    pub info: serde_json::Value,
}

pub fn write_params(path: &Path, params: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in params.values() {
        write_real(&mut w, v, DType::Real64)?;
    }
    w.flush()?;
    Ok(())
}

/// Read parameters written by [`write_params`] under the given names.
pub fn read_params(path: &Path, entries: &[ParamEntry]) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut store = ParamStore::new();
    for e in entries {
        let t = read_record(&mut r)?
            .ok_or_else(|| Error::Format(format!("{} ends before {}", path.display(), e.name)))?
            .into_real()?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!(
                "parameter {}: stored shape {:?}, manifest {:?}",
                e.name,
                t.shape(),
                e.shape
            )));
        }
        store.add(e.name.clone(), t)?;
    }
    if read_record(&mut r)?.is_some() {
        return Err(Error::Format(format!(
            "{} holds more records than the manifest lists",
            path.display()
        )));
    }
    Ok(store)
}

pub fn param_entries(params: &ParamStore) -> Vec<ParamEntry> {
    params
        .names()
        .iter()
        .zip(params.values())
        .map(|(n, v)| ParamEntry {
            name: n.clone(),
            shape: v.shape().to_vec(),
        })
        .collect()
}

/// Write `model` into `dir`, creating it if needed.
pub fn save_model(
    model: &FlowModel,
    dir: &Path,
    config_hash: Option<&str>,
    info: serde_json::Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        spec: model.spec().clone(),
        actnorm_initialized: model.actnorm_initialized(),
        params: param_entries(model.params()),
        param_count: model.param_count(),
        config_hash: config_hash.map(str::to_owned),
        info,
    };
    write_params(&dir.join("params.fnt"), model.params())?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Format(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Format(format!(
            "unknown checkpoint format {}",
            m.format
        )));
    }
    Ok(m)
}

pub fn load_model(dir: &Path) -> Result<(FlowModel, Manifest)> {
    let m = read_manifest(dir)?;
    let params = read_params(&dir.join("params.fnt"), &m.params)?;
    let model = FlowModel::from_parts(m.spec.clone(), params, m.actnorm_initialized)?;
    Ok((model, m))
}
