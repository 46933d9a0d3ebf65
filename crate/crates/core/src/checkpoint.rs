//! Model checkpoint container.
//!
//! Binary, little-endian, all matrices row-major f64:
//!
//! ```text
//! magic          4 bytes  "TECK"
//! version        u32      1
//! vocab_size V   u64
//! dim d          u64
//! positions P    u64      0 when no decoder is stored
//! token_table    V*d f64
//! projection     d*d f64
//! position_table P*d f64  (only if P > 0)
//! output         d*V f64  (only if P > 0)
//! vocabulary     V entries, each: u32 byte length + UTF-8 bytes, in id order
//! ```
//!
//! Writing the same model twice produces identical bytes.

use std::path::Path;

use crate::encoder::{MaeDecoder, ToyEncoder};
use crate::error::{Error, Result};
use crate::formats::{ByteReader, FORMAT_VERSION};
use crate::tokenizer::Vocabulary;

const MAGIC: &[u8; 4] = b"TECK";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: ToyEncoder,
    pub decoder: Option<MaeDecoder>,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn new(encoder: ToyEncoder, decoder: Option<MaeDecoder>, vocab: Vocabulary) -> Result<Self> {
        if encoder.vocab_size() != vocab.len() {
            return Err(Error::Shape(format!(
                "encoder vocabulary {} != tokenizer vocabulary {}",
                encoder.vocab_size(),
                vocab.len()
            )));
        }
        if let Some(dec) = &decoder {
            if dec.dim() != encoder.dim() || dec.vocab_size() != encoder.vocab_size() {
                return Err(Error::Shape("decoder does not match encoder".into()));
            }
        }
        Ok(Self {
            encoder,
            decoder,
            vocab,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let enc = &self.encoder;
        let positions = self.decoder.as_ref().map_or(0, MaeDecoder::positions);
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for n in [enc.vocab_size(), enc.dim(), positions] {
            buf.extend_from_slice(&(n as u64).to_le_bytes());
        }
        let mut put = |vals: &[f64]| {
            for v in vals {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(enc.token_table());
        put(enc.projection());
        if let Some(dec) = &self.decoder {
            put(dec.position_table());
            put(dec.output());
        }
        for w in self.vocab.words() {
            buf.extend_from_slice(&(w.len() as u32).to_le_bytes());
            buf.extend_from_slice(w.as_bytes());
        }
        buf
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(path, bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let v = r.u64()? as usize;
        let d = r.u64()? as usize;
        let p = r.u64()? as usize;
        let size = |a: usize, b: usize| {
            a.checked_mul(b)
                .ok_or_else(|| Error::format(path, "matrix size overflow"))
        };
        let token_table = r.f64s(size(v, d)?)?;
        let projection = r.f64s(size(d, d)?)?;
        let encoder = ToyEncoder::from_parts(v, d, token_table, projection)?;
        let decoder = if p > 0 {
            let position_table = r.f64s(size(p, d)?)?;
            let output = r.f64s(size(d, v)?)?;
            Some(MaeDecoder::from_parts(p, d, v, position_table, output)?)
        } else {
            None
        };
        let mut words = Vec::with_capacity(v);
        for _ in 0..v {
            let len = r.u32()? as usize;
            let w = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::format(path, format!("vocabulary entry is not UTF-8: {e}")))?;
            words.push(w.to_string());
        }
        r.finish()?;
        let vocab = Vocabulary::from_words(words).map_err(|e| e.context(path.display().to_string()))?;
        Self::new(encoder, decoder, vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}
