//! File formats shared by the pipeline stages.
//!
//! Binary matrices: 8-byte magic `MUGMAT01`, rows and columns as
//! little-endian u64, then row-major little-endian f64 values.
//!
//! Signal tables: CSV, one voxel per row. An optional first row holding a
//! single `protocol=<path>` field names the acquisition protocol.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MUGMAT01";

pub fn write_matrix(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(m.ncols() as u64).to_le_bytes()).map_err(io)?;
    for v in m.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: not a matrix file", path.display())));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word).map_err(io)?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word).map_err(io)?;
    let cols = u64::from_le_bytes(word) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Format(format!(
            "{}: expected {} values, found {} bytes",
            path.display(),
            rows * cols,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalTable {
    pub protocol: Option<PathBuf>,
    pub signals: Array2<f64>,
}

pub fn read_signals(path: impl AsRef<Path>) -> Result<SignalTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut protocol = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if i == 0 && rec.len() == 1 {
            if let Some(p) = rec[0].strip_prefix("protocol=") {
                protocol = Some(PathBuf::from(p));
                continue;
            }
        }
        let row: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match row {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue, // column-name header
            Err(e) => {
                return Err(Error::MalformedLine {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    let m = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
        return Err(Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason: format!("expected {m} columns, found {}", r.len()),
        });
    }
    let n = rows.len();
    let signals = Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(SignalTable { protocol, signals })
}

pub fn write_signals(path: impl AsRef<Path>, table: &SignalTable) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(file);
    if let Some(p) = &table.protocol {
        w.write_record([format!("protocol={}", p.display())])?;
    }
    for row in table.signals.rows() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = array![[1.0, 2.5, -3.0], [f64::MIN_POSITIVE, 1e300, 0.1]];
        write_matrix(&p, &m).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), m);
    }

    #[test]
    fn truncated_matrix_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        write_matrix(&p, &array![[1.0, 2.0]]).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_matrix(&p), Err(Error::Format(_))));
    }

    #[test]
    fn signals_round_trip_with_protocol_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let t = SignalTable {
            protocol: Some(PathBuf::from("proto.txt")),
            signals: array![[1.0, 0.5], [0.9, 0.25]],
        };
        write_signals(&p, &t).unwrap();
        assert_eq!(read_signals(&p).unwrap(), t);
    }

    #[test]
    fn ragged_signals_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        fs::write(&p, "1,2,3\n1,2\n").unwrap();
        assert!(matches!(read_signals(&p), Err(Error::MalformedLine { .. })));
    }
}
