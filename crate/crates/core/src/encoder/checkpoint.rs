//! Binary checkpoint format.
//!
//! ```text
//! "SSCSE"                      magic, 5 bytes
//! u32                          format version
//! u32 + bytes                  encoder config as UTF-8 `key = value` text
//! repeated until EOF:
//!   u32 + bytes                tensor name
//!   u32                        rank
//!   u64 × rank                 dims
//!   f64 × product(dims)        values
//! ```
//!
//! All integers and floats are little-endian. Values are always stored as
//! 64-bit floats whatever the in-memory scalar type.

use std::fs;
use std::path::Path;

use super::{Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SSCSE";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(encoder: &Encoder<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = encoder.config.to_kv();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    for (name, t) in encoder.weights.named() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint<T: Scalar>(encoder: &Encoder<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(encoder)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Encoder<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Encoder<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic string".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config = EncoderConfig::from_kv(r.string()?)?;
    let names = EncoderParams::<()>::names(config.n_layers);
    let mut tensors = Vec::with_capacity(names.len());
    for expected in &names {
        if r.at_end() {
            return Err(Error::Checkpoint(format!("missing tensor {expected}")));
        }
        let name = r.string()?;
        if name != expected {
            return Err(Error::Checkpoint(format!(
                "expected tensor {expected}, found {name}"
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if !r.at_end() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    let weights = EncoderParams::from_vec(config.n_layers, tensors)?;
    Encoder::from_parts(config, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn enc() -> Encoder<f64> {
        let cfg = EncoderConfig {
            vocab_size: 10,
            max_seq_len: 4,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_layers: 1,
            ..EncoderConfig::default()
        };
        Encoder::init(cfg, &RngStream::new(1)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let e = enc();
        let bytes = encode_checkpoint(&e);
        assert_eq!(&bytes[..5], b"SSCSE");
        let back: Encoder<f64> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, e);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupted_inputs() {
        let bytes = encode_checkpoint(&enc());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint::<f64>(&bad),
            Err(Error::Checkpoint(_))
        ));

        let mut v2 = bytes.clone();
        v2[5..9].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint::<f64>(&v2),
            Err(Error::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));

        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint::<f64>(&extra).is_err());
    }
}
