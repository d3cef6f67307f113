//! Corpus input: UTF-8 text (one row per line) or a binary id file.
//!
//! The id file is the 16-byte magic followed by little-endian `u32` ids.
//! Rows are separated by [`ROW_SEPARATOR`]; a file without separators is a
//! single row.

use std::path::Path;

use super::Tokenizer;
use crate::error::{Error, Result};

pub const ID_MAGIC: &[u8; 16] = b"SLENS-IDS\0\0\0\0\0\0\0";
pub const ROW_SEPARATOR: u32 = u32::MAX;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub rows: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn from_rows(rows: Vec<Vec<u32>>) -> Self {
        Self { rows }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(Vec::is_empty)
    }

    /// All rows joined into one stream.
    pub fn stream(&self) -> Vec<u32> {
        self.rows.concat()
    }
}

pub fn read_id_file(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ids(&bytes)
}

fn parse_ids(bytes: &[u8]) -> Result<Vec<Vec<u32>>> {
    if bytes.len() < 16 || &bytes[..16] != ID_MAGIC {
        return Err(Error::format(0, "missing id-file magic"));
    }
    let body = &bytes[16..];
    if body.len() % 4 != 0 {
        return Err(Error::format(16 + (body.len() - body.len() % 4) as u64, "id payload is not a multiple of 4 bytes"));
    }
    let mut rows = vec![Vec::new()];
    for c in body.chunks_exact(4) {
        let id = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if id == ROW_SEPARATOR {
            rows.push(Vec::new());
        } else {
            rows.last_mut().expect("non-empty").push(id);
        }
    }
    rows.retain(|r| !r.is_empty());
    Ok(rows)
}

pub fn write_id_file(path: impl AsRef<Path>, rows: &[Vec<u32>]) -> Result<()> {
    let path = path.as_ref();
    let mut out = ID_MAGIC.to_vec();
    for (i, row) in rows.iter().enumerate() {
        if i > 0 {
            out.extend_from_slice(&ROW_SEPARATOR.to_le_bytes());
        }
        for id in row {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read up to `max_rows` non-empty rows. Text needs a tokenizer; `bos` is
/// prepended to every row when given.
pub fn read_corpus(path: impl AsRef<Path>, tokenizer: Option<&Tokenizer>, max_rows: Option<usize>, bos: Option<u32>) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let limit = max_rows.unwrap_or(usize::MAX);
    let mut rows: Vec<Vec<u32>> = if bytes.starts_with(ID_MAGIC) {
        parse_ids(&bytes)?.into_iter().take(limit).collect()
    } else {
        let tok = tokenizer.ok_or_else(|| Error::Input(format!("{} is text; a tokenizer is required", path.display())))?;
        let text = String::from_utf8(bytes).map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, "corpus is not UTF-8"))?;
        text.lines().filter(|l| !l.trim().is_empty()).take(limit).map(|l| tok.encode(l)).filter(|r| !r.is_empty()).collect()
    };
    if let Some(b) = bos {
        for r in &mut rows {
            r.insert(0, b);
        }
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("corpus {} has no rows", path.display())));
    }
    Ok(Corpus { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ids.bin");
        let rows = vec![vec![1, 2, 3], vec![7], vec![0, 0]];
        write_id_file(&p, &rows).unwrap();
        assert_eq!(read_id_file(&p).unwrap(), rows);
        let c = read_corpus(&p, None, Some(2), Some(9)).unwrap();
        assert_eq!(c.rows, vec![vec![9, 1, 2, 3], vec![9, 7]]);
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(parse_ids(b"nope"), Err(Error::Format { .. })));
    }
}
