//! On-disk formats.
//!
//! Record files are JSON lines. The first line is a header object
//! `{"format": <name>, "version": 1, ...}`; any extra header fields are
//! free-form metadata. Readers reject a missing header, a different format
//! name, or an unknown version.
//!
//! Embedding blocks are binary, little-endian:
//!
//! ```text
//! magic    4 bytes  "EMBD"
//! version  u32      1
//! count    u64
//! dim      u64
//! width    u32      bytes per element, always 8 (f64)
//! values   count * dim f64, row-major
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::sim::Embedding;

pub const FORMAT_VERSION: u32 = 1;

pub const CORPUS: &str = "corpus";
pub const QUERIES: &str = "queries";
pub const QRELS: &str = "qrels";
pub const DATASET: &str = "dataset";
pub const MINING_AUDIT: &str = "mining-audit";
pub const FINETUNE_AUDIT: &str = "finetune-audit";
pub const LOSS_CURVE: &str = "loss-curve";
pub const METRICS: &str = "metrics";
pub const BENCH: &str = "bench";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub meta: Map<String, Value>,
}

impl Header {
    pub fn new(format: &str) -> Self {
        Self {
            format: format.to_string(),
            version: FORMAT_VERSION,
            meta: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }
}

/// `{id, text, source_doc}`: raw documents or passages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    pub source_doc: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QrelRecord {
    pub query_id: String,
    pub doc_id: String,
    pub grade: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss: f64,
}

/// Streaming writer for a record file.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: impl AsRef<Path>, header: &Header) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = Self {
            path,
            out: BufWriter::new(file),
        };
        w.write_value(header)?;
        Ok(w)
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        self.write_value(record)
    }

    fn write_value<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)
            .map_err(|e| Error::format(&self.path, e.to_string()))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_jsonl<'a, T, I>(path: impl AsRef<Path>, header: &Header, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut w = JsonlWriter::create(path, header)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

/// Reads a record file, checking its header against `format`.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>, format: &str) -> Result<(Header, Vec<T>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let header: Header = loop {
        match lines.next() {
            None => return Err(Error::format(path, "missing header line")),
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line)
                    .map_err(|e| Error::format(path, format!("bad header line: {e}")))?;
            }
        }
    };
    if header.format != format {
        return Err(Error::format(
            path,
            format!("expected a `{format}` file, found `{}`", header.format),
        ));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported `{format}` version {} (this build reads {FORMAT_VERSION})", header.version),
        ));
    }

    let mut records = Vec::new();
    for (n, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        records.push(record);
    }
    Ok((header, records))
}

const EMB_MAGIC: &[u8; 4] = b"EMBD";

pub fn write_embeddings(path: impl AsRef<Path>, embeddings: &[Embedding]) -> Result<()> {
    let path = path.as_ref();
    let dim = embeddings.first().map_or(0, Embedding::dim);
    if let Some(bad) = embeddings.iter().find(|e| e.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.dim(),
            context: "embedding block".into(),
        });
    }
    let mut buf = Vec::with_capacity(28 + embeddings.len() * dim * 8);
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(embeddings.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(dim as u64).to_le_bytes());
    buf.extend_from_slice(&8u32.to_le_bytes());
    for v in embeddings.iter().flat_map(|e| e.as_slice()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<Embedding>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(path, &bytes);
    if r.take(4)? != EMB_MAGIC {
        return Err(Error::format(path, "not an embedding block"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported embedding block version {version}")));
    }
    let count = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let width = r.u32()?;
    if width != 8 {
        return Err(Error::format(path, format!("unsupported element width {width}")));
    }
    let out = (0..count)
        .map(|_| Embedding::new(r.f64s(dim)?))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(out)
}

/// Bounds-checked little-endian reader.
pub(crate) struct ByteReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_with_header_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        let records = vec![
            QueryRecord { id: "a".into(), text: "x y".into() },
            QueryRecord { id: "b".into(), text: "z".into() },
        ];
        write_jsonl(&path, &Header::new(QUERIES).with("note", "hi"), &records).unwrap();
        let (header, back): (_, Vec<QueryRecord>) = read_jsonl(&path, QUERIES).unwrap();
        assert_eq!(back, records);
        assert_eq!(header.meta["note"], "hi");
    }

    #[test]
    fn readers_reject_wrong_format_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        write_jsonl::<QueryRecord, _>(&path, &Header::new(QUERIES), &[]).unwrap();
        let err = read_jsonl::<QueryRecord>(&path, CORPUS).unwrap_err();
        assert!(err.to_string().contains("expected a `corpus` file"));

        std::fs::write(&path, "{\"format\":\"queries\",\"version\":9}\n").unwrap();
        let err = read_jsonl::<QueryRecord>(&path, QUERIES).unwrap_err();
        assert!(err.to_string().contains("version 9"));

        std::fs::write(&path, "").unwrap();
        assert!(read_jsonl::<QueryRecord>(&path, QUERIES).is_err());

        std::fs::write(&path, "{\"format\":\"queries\",\"version\":1}\n{\"id\":\"a\"}\n").unwrap();
        let err = read_jsonl::<QueryRecord>(&path, QUERIES).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn embedding_block_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emb");
        let embs = vec![
            Embedding::new(vec![1.0, -2.5, 0.125]).unwrap(),
            Embedding::new(vec![0.0, 1e-300, f64::MAX]).unwrap(),
        ];
        write_embeddings(&path, &embs).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 28 + 2 * 3 * 8);
        assert_eq!(read_embeddings(&path).unwrap(), embs);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_embeddings(&path).is_err());
    }
}
