//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u32 version
//! u32 spec id length, spec id bytes (UTF-8)
//! u32 tensor count
//! per tensor, in name order:
//!     u32 name length, name bytes, u32 rank, rank x u64 dims, f64 values
//! u64 FNV-1a 64 of every preceding byte
//! ```

use std::path::Path;

use crate::checksum::fnv1a64;
use crate::error::{Error, Result};
use crate::tensor::{NamedTensorMap, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec_id: String,
    pub params: NamedTensorMap,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(spec_id: &str, params: &NamedTensorMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.num_params() * 8);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, spec_id.len());
    out.extend_from_slice(spec_id.as_bytes());
    put_u32(&mut out, params.len());
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint("unexpected end of payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("name is not UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(Error::CorruptCheckpoint(format!("{} bytes is too short", bytes.len())));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(payload) != stored {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: payload, pos: 0 };
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let spec_id = r.string()?;
    let count = r.u32()?;
    let mut params = NamedTensorMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= payload.len() / 8)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("implausible shape {shape:?} for {name}")))?;
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::CorruptCheckpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != payload.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint { spec_id, params })
}

pub fn save_checkpoint(path: &Path, spec_id: &str, params: &NamedTensorMap) -> Result<()> {
    std::fs::write(path, encode_checkpoint(spec_id, params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (String, NamedTensorMap) {
        let spec = ModelSpec::conv(4, 8, 3).unwrap();
        let mut p = spec.init_params(&mut ChaCha8Rng::seed_from_u64(5));
        p.get_mut("fc1.bias").unwrap().data_mut()[0] = -0.0;
        (spec.id().to_string(), p)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (id, p) = sample();
        let bytes = encode_checkpoint(&id, &p);
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.spec_id, id);
        assert_eq!(ck.params.fingerprint(), p.fingerprint());
        assert_eq!(encode_checkpoint(&ck.spec_id, &ck.params), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (id, p) = sample();
        let bytes = encode_checkpoint(&id, &p);
        for cut in [0, 5, 11, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))));
        }
        for pos in [0, 4, 9, bytes.len() / 3, bytes.len() - 9, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[pos] ^= 0x10;
            assert!(matches!(decode_checkpoint(&b), Err(Error::CorruptCheckpoint(_))), "byte {pos}");
        }
    }

    #[test]
    fn other_versions_are_rejected() {
        let (id, p) = sample();
        let mut bytes = encode_checkpoint(&id, &p);
        bytes.truncate(bytes.len() - 8);
        bytes[..4].copy_from_slice(&2u32.to_le_bytes());
        let sum = fnv1a64(&bytes);
        bytes.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
    }
}
