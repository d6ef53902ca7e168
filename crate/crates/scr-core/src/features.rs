//! Entity feature matrices and their on-disk formats.
//!
//! Binary format: magic `FVEC`, u32 LE row count, u32 LE column count, then
//! f32 LE row-major payload. A TSV fallback (`entity_name<TAB>v1 v2 ...`) is
//! accepted for hand-written fixtures; rows are aligned through the entity
//! vocabulary and entities missing from the file get zero rows.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::kg::Vocab;
use crate::tensor::Matrix;

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic (expected FVEC)")]
    BadMagic { path: String },
    #[error("{path}: truncated payload (expected {expected} bytes, got {got})")]
    Truncated {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("{path} line {line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("unknown entity name {name:?} in feature file {path}")]
    UnknownEntity { path: String, name: String },
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
}

const MAGIC: &[u8; 4] = b"FVEC";

fn io_err(path: &Path, source: std::io::Error) -> FeatureError {
    FeatureError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_fvec(path: &Path, m: &Matrix) -> Result<()> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    w.write_all(&(m.rows() as u32).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    w.write_all(&(m.cols() as u32).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    for &v in m.data() {
        w.write_all(&(v as f32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_fvec(path: &Path) -> Result<Matrix> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(FeatureError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(|e| io_err(path, e))?;
    let rows = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4).map_err(|e| io_err(path, e))?;
    let cols = u32::from_le_bytes(buf4) as usize;
    let expected = rows * cols * 4;
    let mut payload = Vec::with_capacity(expected);
    r.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    if payload.len() < expected {
        return Err(FeatureError::Truncated {
            path: path.display().to_string(),
            expected,
            got: payload.len(),
        });
    }
    let data: Vec<f64> = payload[..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

/// Reads the TSV fallback. Each data line is `entity_name<TAB>v1 v2 ...`;
/// comment lines start with `#`. Rows are placed at the entity's vocabulary
/// id; entities absent from the file keep zero features.
pub fn read_feature_tsv(path: &Path, vocab: &Vocab) -> Result<Matrix> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let r = BufReader::new(f);
    let mut cols: Option<usize> = None;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (name, rest) = trimmed.split_once('\t').ok_or_else(|| {
            FeatureError::Malformed {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "expected entity_name<TAB>values".into(),
            }
        })?;
        let entity = vocab.get(name).ok_or_else(|| FeatureError::UnknownEntity {
            path: path.display().to_string(),
            name: name.to_string(),
        })? as usize;
        let values: Vec<f64> = rest
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| FeatureError::Malformed {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("bad number {tok:?}"),
                })
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(values.len()),
            Some(c) if c != values.len() => {
                return Err(FeatureError::Malformed {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("expected {c} values, got {}", values.len()),
                })
            }
            _ => {}
        }
        rows.push((entity, values));
    }
    let cols = cols.unwrap_or(0);
    let n = vocab.len();
    let mut data = vec![0.0; n * cols];
    for (entity, values) in rows {
        data[entity * cols..(entity + 1) * cols].copy_from_slice(&values);
    }
    Ok(Matrix::from_vec(n, cols, data))
}

/// Reads `path` as FVEC or TSV depending on extension.
pub fn read_features(path: &Path, vocab: &Vocab) -> Result<Matrix> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("fvec") => read_fvec(path),
        _ => read_feature_tsv(path, vocab),
    }
}

/// Rejects non-finite entries; returns the matrix unchanged otherwise.
pub fn check_finite(m: Matrix) -> Result<Matrix> {
    for (i, &v) in m.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(FeatureError::NonFinite {
                row: i / m.cols().max(1),
                col: i % m.cols().max(1),
            });
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fvec_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fvec");
        let m = Matrix::from_vec(2, 3, vec![1.0, -2.5, 0.0, 4.25, 1e-3, -7.0]);
        write_fvec(&path, &m).unwrap();
        let back = read_fvec(&path).unwrap();
        assert_eq!(back.shape(), (2, 3));
        assert!(m.max_abs_diff(&back) < 1e-6);
    }

    #[test]
    fn fvec_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.fvec");
        std::fs::write(&bad, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_fvec(&bad), Err(FeatureError::BadMagic { .. })));

        let trunc = dir.path().join("trunc.fvec");
        std::fs::write(&trunc, b"FVEC\x02\x00\x00\x00\x02\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            read_fvec(&trunc),
            Err(FeatureError::Truncated { .. })
        ));
    }

    #[test]
    fn tsv_aligns_rows_by_vocab() {
        let mut vocab = Vocab::default();
        vocab.intern("a");
        vocab.intern("b");
        vocab.intern("c");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.tsv");
        std::fs::write(&path, "# comment\nc\t1 2\na\t3 4\n").unwrap();
        let m = read_feature_tsv(&path, &vocab).unwrap();
        assert_eq!(m.row(0), &[3.0, 4.0]);
        assert_eq!(m.row(1), &[0.0, 0.0]);
        assert_eq!(m.row(2), &[1.0, 2.0]);
    }

    #[test]
    fn tsv_unknown_entity_rejected() {
        let mut vocab = Vocab::default();
        vocab.intern("a");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.tsv");
        std::fs::write(&path, "zz\t1 2\n").unwrap();
        assert!(matches!(
            read_feature_tsv(&path, &vocab),
            Err(FeatureError::UnknownEntity { .. })
        ));
    }
}
