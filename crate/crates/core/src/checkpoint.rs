//! Model checkpoints: one binary file of concatenated little-endian arrays,
//! a text index and the model settings as JSON.
//!
//! Index lines read `name dtype shape offset nbytes`, with `shape` written as
//! `d0xd1x…`. Arrays are stored as f32 for f32-precision runs and as f64
//! otherwise, so loading always reproduces the in-memory parameters exactly.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::Model;

pub const PARAMS_FILE: &str = "params.bin";
pub const INDEX_FILE: &str = "params.index";
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    view_dims: Vec<usize>,
    config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
struct IndexEntry {
    name: String,
    dtype: Precision,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

fn dtype_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

fn parse_index(text: &str) -> Result<Vec<IndexEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(ln, line)| {
            let bad = || Error::Checkpoint(format!("malformed index line {}: {line:?}", ln + 1));
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, dtype, shape, offset, nbytes] = parts[..] else {
                return Err(bad());
            };
            let dtype = match dtype {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                _ => return Err(bad()),
            };
            let shape = shape
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            Ok(IndexEntry {
                name: name.to_string(),
                dtype,
                shape,
                offset: offset.parse().map_err(|_| bad())?,
                nbytes: nbytes.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn save_checkpoint(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dtype = model.config.precision;
    let mut bytes = Vec::new();
    let mut index = String::new();
    for (name, t) in model.store.names().iter().zip(model.store.values()) {
        let offset = bytes.len();
        for &v in t.data() {
            match dtype {
                Precision::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
            }
        }
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(
            index,
            "{name} {} {} {offset} {}",
            dtype_name(dtype),
            shape.join("x"),
            bytes.len() - offset
        );
    }
    let meta = ModelMeta {
        view_dims: model.view_dims.clone(),
        config: model.config.clone(),
    };
    let write = |file: &str, data: &[u8]| {
        let p = dir.join(file);
        std::fs::write(&p, data).map_err(|e| Error::io(p, e))
    };
    write(PARAMS_FILE, &bytes)?;
    write(INDEX_FILE, index.as_bytes())?;
    write(MODEL_FILE, serde_json::to_string_pretty(&meta).expect("meta serializes").as_bytes())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let read = |file: &str| {
        let p = dir.join(file);
        std::fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let meta_path = dir.join(MODEL_FILE);
    let meta: ModelMeta = serde_json::from_slice(&read(MODEL_FILE)?).map_err(|e| Error::Json {
        path: meta_path,
        source: e,
    })?;
    let index = parse_index(&String::from_utf8_lossy(&read(INDEX_FILE)?))?;
    let bytes = read(PARAMS_FILE)?;

    let mut model = Model::new(&meta.config, &meta.view_dims)?;
    if index.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "index lists {} arrays, model expects {}",
            index.len(),
            model.store.len()
        )));
    }
    for entry in index {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        let expected = model.store.get(id).shape().to_vec();
        if entry.shape != expected {
            return Err(Error::Checkpoint(format!(
                "{}: stored shape {:?}, model expects {:?}",
                entry.name, entry.shape, expected
            )));
        }
        let width = match entry.dtype {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let numel: usize = expected.iter().product();
        let end = entry.offset.checked_add(entry.nbytes).filter(|&e| e <= bytes.len());
        if entry.nbytes != numel * width || end.is_none() {
            return Err(Error::Checkpoint(format!("{}: byte range out of bounds", entry.name)));
        }
        let raw = &bytes[entry.offset..entry.offset + entry.nbytes];
        let data: Vec<f64> = match entry.dtype {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        *model.store.get_mut(id) = Tensor::new(expected, data)?;
    }
    Ok(model)
}
