//! Binary storage for parameters and optimizer state.
//!
//! A tensor file is `MAGIC`, a little-endian `u64` header length, a JSON
//! header (free-form metadata plus the name and shape of every array) and
//! then every array's entries as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::optimizer::{Accumulator, AdafactorState};
use crate::params::{ModelConfig, Parameters};

pub const MAGIC: &[u8; 8] = b"PSUMTNS1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_arrays(path: &Path, meta: Value, arrays: &[(String, ArrayViewD<'_, f64>)]) -> Result<()> {
    let header = Header {
        meta,
        arrays: arrays.iter().map(|(name, a)| ArrayEntry { name: name.clone(), shape: a.shape().to_vec() }).collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for (_, a) in arrays {
            for v in a.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub type NamedArrays = Vec<(String, ArrayD<f64>)>;

pub fn read_arrays(path: &Path) -> Result<(Value, NamedArrays)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a tensor file", path.display())));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    input.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    let mut buf = [0u8; 8];
    for entry in header.arrays {
        let count: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("{}: truncated data for `{}`", path.display(), entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), data).map_err(|e| Error::Shape(e.to_string()))?;
        arrays.push((entry.name, array));
    }
    if input.read(&mut buf).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Checkpoint(format!("{}: trailing bytes", path.display())));
    }
    Ok((header.meta, arrays))
}

pub fn save_parameters(path: &Path, config: &ModelConfig, params: &Parameters) -> Result<()> {
    let meta = serde_json::json!({ "kind": "parameters", "config": config });
    write_arrays(path, meta, &params.tensors())
}

/// Copies named arrays into freshly shaped parameters for `config`. Every
/// array must be present with the expected shape.
fn fill_parameters(config: &ModelConfig, arrays: Vec<(String, ArrayD<f64>)>) -> Result<Parameters> {
    let mut params = Parameters::zeros(config);
    let mut arrays: std::collections::HashMap<String, ArrayD<f64>> = arrays.into_iter().collect();
    for (name, mut slot) in params.tensors_mut() {
        let source = arrays.remove(&name).ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        if source.shape() != slot.shape() {
            return Err(Error::Shape(format!("{name}: stored {:?}, expected {:?}", source.shape(), slot.shape())));
        }
        slot.assign(&source);
    }
    if let Some(extra) = arrays.keys().min() {
        return Err(Error::Checkpoint(format!("unexpected array `{extra}`")));
    }
    Ok(params)
}

pub fn load_parameters(path: &Path) -> Result<(ModelConfig, Parameters)> {
    let (meta, arrays) = read_arrays(path)?;
    if meta.get("kind").and_then(Value::as_str) != Some("parameters") {
        return Err(Error::Checkpoint(format!("{} does not hold parameters", path.display())));
    }
    let config: ModelConfig = serde_json::from_value(meta["config"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    config.validate()?;
    let params = fill_parameters(&config, arrays)?;
    Ok((config, params))
}

/// Imports externally produced weights for `config`, rejecting any file
/// whose arrays do not match the configured shapes exactly.
pub fn load_pretrained(path: &Path, config: &ModelConfig) -> Result<Parameters> {
    let (_, arrays) = read_arrays(path)?;
    let params = fill_parameters(config, arrays)?;
    if !params.is_finite() {
        return Err(Error::Checkpoint("pretrained weights contain non-finite values".into()));
    }
    Ok(params)
}

pub fn save_optimizer_state(path: &Path, state: &AdafactorState) -> Result<()> {
    let mut arrays = Vec::new();
    for (name, acc) in &state.slots {
        match acc {
            Accumulator::Factored { row, col } => {
                arrays.push((format!("{name}.row"), row.view().into_dyn()));
                arrays.push((format!("{name}.col"), col.view().into_dyn()));
            }
            Accumulator::Full(v) => arrays.push((format!("{name}.full"), v.view())),
        }
    }
    let meta = serde_json::json!({ "kind": "adafactor", "step": state.step });
    write_arrays(path, meta, &arrays)
}

/// Loads optimizer state and checks that its slots line up with `params`.
pub fn load_optimizer_state(path: &Path, params: &Parameters) -> Result<AdafactorState> {
    let (meta, arrays) = read_arrays(path)?;
    if meta.get("kind").and_then(Value::as_str) != Some("adafactor") {
        return Err(Error::Checkpoint(format!("{} does not hold optimizer state", path.display())));
    }
    let step = meta["step"].as_u64().ok_or_else(|| Error::Checkpoint("missing step".into()))?;
    let mut arrays = arrays.into_iter();
    let mut next = |expected: String| -> Result<ArrayD<f64>> {
        match arrays.next() {
            Some((name, a)) if name == expected => Ok(a),
            Some((name, _)) => Err(Error::Checkpoint(format!("found `{name}` where `{expected}` was expected"))),
            None => Err(Error::Checkpoint(format!("missing `{expected}`"))),
        }
    };
    let mut slots = Vec::new();
    for (name, p) in params.tensors() {
        let acc = match Accumulator::for_shape(p.shape()) {
            Accumulator::Factored { row, col } => {
                let r = next(format!("{name}.row"))?;
                let c = next(format!("{name}.col"))?;
                if r.len() != row.len() || c.len() != col.len() {
                    return Err(Error::Shape(format!("{name}: factored accumulator does not match parameter")));
                }
                Accumulator::Factored {
                    row: Array1::from_iter(r.iter().copied()),
                    col: Array1::from_iter(c.iter().copied()),
                }
            }
            Accumulator::Full(v) => {
                let stored = next(format!("{name}.full"))?;
                if stored.shape() != v.shape() {
                    return Err(Error::Shape(format!("{name}: accumulator does not match parameter")));
                }
                Accumulator::Full(stored)
            }
        };
        slots.push((name, acc));
    }
    if let Some((name, _)) = arrays.next() {
        return Err(Error::Checkpoint(format!("unexpected array `{name}`")));
    }
    Ok(AdafactorState { step, slots })
}
