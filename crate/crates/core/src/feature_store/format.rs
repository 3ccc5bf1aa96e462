//! Binary (`AOSA`) and JSONL feature-store formats.
//!
//! Binary layout, little-endian throughout:
//!
//! ```text
//! magic     4 bytes  "AOSA"
//! version   u32      1
//! n_samples u64
//! dim       u32
//! n_classes u32
//! records   n_samples x [id u64, label i32, dim x f32]
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::Deserialize;

use super::{FeatureStore, SampleRecord};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AOSA";
pub const VERSION: u32 = 1;

pub fn write_binary<W: Write>(store: &FeatureStore, mut out: W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.n_samples() as u64).to_le_bytes())?;
    out.write_all(&(store.dim() as u32).to_le_bytes())?;
    out.write_all(&(store.n_classes() as u32).to_le_bytes())?;
    for r in store.records() {
        out.write_all(&r.id.to_le_bytes())?;
        out.write_all(&(r.label as i32).to_le_bytes())?;
        for v in &r.feature {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

/// Reads a complete binary store. The magic bytes must already be at the
/// reader's current position.
pub fn read_binary<R: Read>(mut input: R) -> Result<FeatureStore> {
    let mut magic = [0u8; 4];
    read_header_field(&mut input, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_header_field(&mut input, &mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    read_header_field(&mut input, &mut b8)?;
    let n_samples = u64::from_le_bytes(b8);
    read_header_field(&mut input, &mut b4)?;
    let dim = u32::from_le_bytes(b4) as usize;
    read_header_field(&mut input, &mut b4)?;
    let n_classes = u32::from_le_bytes(b4) as usize;

    let record_len = 12 + 4 * dim;
    let mut buf = vec![0u8; record_len];
    let mut records = Vec::new();
    for i in 0..n_samples {
        match input.read_exact(&mut buf) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => {
                return Err(Error::Schema(format!(
                    "header declares {n_samples} records but the file ends after {i}"
                )))
            }
            Err(e) => return Err(Error::Format(e.to_string())),
        }
        let id = u64::from_le_bytes(buf[0..8].try_into().unwrap());
        let label = i32::from_le_bytes(buf[8..12].try_into().unwrap());
        if label < 0 {
            return Err(Error::Schema(format!("sample {id} has negative label {label}")));
        }
        let feature = buf[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(SampleRecord {
            id,
            label: label as u32,
            feature,
        });
    }
    let mut trailing = [0u8; 1];
    match input.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Schema(format!(
                "trailing bytes after the {n_samples} declared records"
            )))
        }
        Err(e) => return Err(Error::Format(e.to_string())),
    }
    FeatureStore::from_records(dim, n_classes, records)
}

fn read_header_field<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Format("truncated header".into()),
        _ => Error::Format(e.to_string()),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    id: u64,
    label: i64,
    feature: Vec<f32>,
}

/// Reads one JSON object per line. `dim` comes from the first record and
/// `n_classes` is one past the largest label.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<FeatureStore> {
    let mut records = Vec::new();
    let mut dim = None;
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        let expected = *dim.get_or_insert(rec.feature.len());
        if rec.feature.len() != expected {
            return Err(Error::Schema(format!(
                "line {}: sample {} has {} feature entries, expected {expected}",
                lineno + 1,
                rec.id,
                rec.feature.len()
            )));
        }
        let label = u32::try_from(rec.label)
            .map_err(|_| Error::Schema(format!("line {}: label {} out of range", lineno + 1, rec.label)))?;
        records.push(SampleRecord {
            id: rec.id,
            label,
            feature: rec.feature,
        });
    }
    let dim = dim.ok_or_else(|| Error::Schema("JSONL file contains no records".into()))?;
    let n_classes = records.iter().map(|r| r.label as usize + 1).max().unwrap_or(0);
    FeatureStore::from_records(dim, n_classes, records)
}

/// Loads a store, choosing the format from the leading magic bytes.
pub fn load_feature_store(path: impl AsRef<Path>) -> Result<FeatureStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let head = reader.fill_buf().map_err(|e| Error::io(path, e))?;
    if head.starts_with(MAGIC) {
        read_binary(reader)
    } else {
        read_jsonl(reader)
    }
}

/// Writes the binary format atomically (temp file + rename).
pub fn save_feature_store(store: &FeatureStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::io::write_atomic(path, |w| write_binary(store, BufWriter::new(w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn header(n: u64, dim: u32, classes: u32) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&n.to_le_bytes());
        b.extend_from_slice(&dim.to_le_bytes());
        b.extend_from_slice(&classes.to_le_bytes());
        b
    }

    fn push_record(b: &mut Vec<u8>, id: u64, label: i32, feature: &[f32]) {
        b.extend_from_slice(&id.to_le_bytes());
        b.extend_from_slice(&label.to_le_bytes());
        for v in feature {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }

    #[test]
    fn jsonl_fixture_loads_normalized() {
        let text = "{\"id\": 0, \"label\": 0, \"feature\": [1.0, 2.0, 2.0]}\n\
                    {\"id\": 1, \"label\": 1, \"feature\": [0.0, 0.0, 5.0]}\n";
        let store = read_jsonl(Cursor::new(text)).unwrap();
        assert_eq!(store.n_samples(), 2);
        assert_eq!(store.dim(), 3);
        assert_eq!(store.n_classes(), 2);
        for r in store.records() {
            let n: f64 = r.feature.iter().map(|&v| f64::from(v).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn short_binary_file_is_a_schema_error() {
        let mut b = header(5, 2, 2);
        for id in 0..4 {
            push_record(&mut b, id, 0, &[1.0, 0.0]);
        }
        let err = read_binary(Cursor::new(b)).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = header(0, 2, 2);
        b[0] = b'X';
        assert!(matches!(
            read_binary(Cursor::new(b)).unwrap_err(),
            Error::Format(_)
        ));
        let mut b = header(0, 2, 2);
        b[4] = 9;
        assert!(matches!(
            read_binary(Cursor::new(b)).unwrap_err(),
            Error::Format(_)
        ));
    }

    #[test]
    fn zero_norm_record_in_binary() {
        let mut b = header(2, 3, 1);
        push_record(&mut b, 0, 0, &[1.0, 0.0, 0.0]);
        push_record(&mut b, 7, 0, &[0.0, 0.0, 0.0]);
        let err = read_binary(Cursor::new(b)).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains('7')), "{err}");
    }

    #[test]
    fn jsonl_dimension_mismatch() {
        let text = "{\"id\": 0, \"label\": 0, \"feature\": [1.0, 2.0]}\n\
                    {\"id\": 1, \"label\": 0, \"feature\": [1.0]}\n";
        assert!(matches!(
            read_jsonl(Cursor::new(text)).unwrap_err(),
            Error::Schema(_)
        ));
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let store = FeatureStore::from_records(
            3,
            2,
            vec![
                SampleRecord {
                    id: 1,
                    label: 0,
                    feature: vec![0.3, -1.7, 2.2],
                },
                SampleRecord {
                    id: 9,
                    label: 1,
                    feature: vec![1e-3, 4.0, 0.5],
                },
            ],
        )
        .unwrap();
        let mut bytes = Vec::new();
        write_binary(&store, &mut bytes).unwrap();
        let back = read_binary(Cursor::new(&bytes)).unwrap();
        assert_eq!(back, store);
        let mut again = Vec::new();
        write_binary(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }
}
