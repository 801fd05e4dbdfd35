//! Checkpoint file: 8-byte magic `MUGFLOW1`, little-endian u64 header
//! length, JSON header, then the flat weight vector as little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, FlowModel, Standardizer};
use crate::error::{Error, Result};
use crate::forward::ParameterSpace;

const MAGIC: &[u8; 8] = b"MUGFLOW1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    space: ParameterSpace,
    measurements: usize,
    architecture: Architecture,
    theta_scaler: Standardizer,
    x_scaler: Standardizer,
    n_params: usize,
    config_hash: Option<String>,
}

pub(super) fn save(model: &FlowModel, path: &Path) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        space: model.space.clone(),
        measurements: model.measurements,
        architecture: model.architecture.clone(),
        theta_scaler: model.theta_scaler.clone(),
        x_scaler: model.x_scaler.clone(),
        n_params: model.params.len(),
        config_hash: model.config_hash.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for v in &model.params {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub(super) fn load(path: &Path) -> Result<FlowModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: not a flow checkpoint", path.display())));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word).map_err(io)?;
    let len = u64::from_le_bytes(word) as usize;
    if len > 1 << 30 {
        return Err(Error::Format(format!("{}: implausible header length {len}", path.display())));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: checkpoint version {} (supported: {FORMAT_VERSION})",
            path.display(),
            header.format_version
        )));
    }
    let mut model = FlowModel::build(header.space, header.measurements, header.architecture)?;
    if model.params.len() != header.n_params {
        return Err(Error::Format(format!(
            "{}: header declares {} weights, architecture needs {}",
            path.display(),
            header.n_params,
            model.params.len()
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != header.n_params * 8 {
        return Err(Error::Format(format!("{}: truncated weights", path.display())));
    }
    for (p, c) in model.params.iter_mut().zip(bytes.chunks_exact(8)) {
        *p = f64::from_le_bytes(c.try_into().expect("chunk of 8"));
    }
    model.set_scalers(header.theta_scaler, header.x_scaler)?;
    model.config_hash = header.config_hash;
    Ok(model)
}
