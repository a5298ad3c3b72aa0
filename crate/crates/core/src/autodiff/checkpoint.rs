//! Flat binary tensor container with a JSON index.
//!
//! `<stem>.bin` is a sequence of records
//!
//! ```text
//! u32 name length | name (UTF-8) | u32 rank | rank × u64 extents | f64 payload
//! ```
//!
//! all little-endian, preceded by the 8-byte magic `SAPARAM1`. `<stem>.json`
//! lists every record's name, shape and payload byte offset so the payload
//! can also be located without walking the records.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SAPARAM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the payload inside the `.bin` file.
    pub offset: u64,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerIndex {
    pub format: String,
    pub version: u32,
    pub entries: Vec<IndexEntry>,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.json")))
}

pub fn save_tensors<'a>(
    dir: &Path,
    stem: &str,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let (bin_path, index_path) = paths(dir, stem);
    let mut bytes = MAGIC.to_vec();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        entries.push(IndexEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
            len: t.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = ContainerIndex {
        format: "selfadapt-tensors".into(),
        version: 1,
        entries,
    };
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::json("tensor index", e))?;
    fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!("{}: truncated tensor container", self.path.display())));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a container written by [`save_tensors`], cross-checking the index.
pub fn load_tensors(dir: &Path, stem: &str) -> Result<Vec<(String, Tensor)>> {
    let (bin_path, index_path) = paths(dir, stem);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let index_text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: ContainerIndex =
        serde_json::from_str(&index_text).map_err(|e| Error::json(index_path.display().to_string(), e))?;

    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: &bin_path,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Data(format!("{}: bad magic", bin_path.display())));
    }
    let mut out = Vec::with_capacity(index.entries.len());
    for entry in &index.entries {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Data(format!("{}: non-UTF-8 tensor name", bin_path.display())))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != entry.name || shape != entry.shape || r.pos as u64 != entry.offset {
            return Err(Error::Data(format!(
                "{}: record {name:?} disagrees with index entry {:?}",
                bin_path.display(),
                entry.name
            )));
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!("{}: trailing bytes after last record", bin_path.display())));
    }
    Ok(out)
}

pub fn save_params(store: &ParamStore, dir: &Path, stem: &str) -> Result<()> {
    save_tensors(dir, stem, store.iter().map(|(_, n, t)| (n, t)))
}

pub fn load_params(dir: &Path, stem: &str) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, t) in load_tensors(dir, stem)? {
        store.insert(name, t)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::new(&[2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 1.0 / 3.0]).unwrap())
            .unwrap();
        store.insert("b", Tensor::vector(&[std::f64::consts::PI])).unwrap();
        save_params(&store, dir.path(), "params").unwrap();
        let back = load_params(dir.path(), "params").unwrap();
        assert_eq!(back.len(), 2);
        for ((_, n1, t1), (_, n2, t2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn detects_index_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(&[1.0, 2.0])).unwrap();
        save_params(&store, dir.path(), "p").unwrap();
        let idx = dir.path().join("p.json");
        let text = std::fs::read_to_string(&idx).unwrap().replace("\"w\"", "\"v\"");
        std::fs::write(&idx, text).unwrap();
        assert!(matches!(load_params(dir.path(), "p"), Err(Error::Data(_))));
    }
}
