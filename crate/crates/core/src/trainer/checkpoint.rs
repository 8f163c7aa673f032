//! Binary checkpoints: magic `ADGN1`, a config text block, the update
//! count, then one record per tensor (name length, name, rank, extents,
//! f32 little-endian payload) and a trailing 64-bit checksum.
//!
//! Optimizer moments are stored as ordinary records named `opt.m.<param>`
//! and `opt.v.<param>`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::OptimState;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 5] = b"ADGN1";
const M_PREFIX: &str = "opt.m.";
const V_PREFIX: &str = "opt.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: ParamStore<f32>,
    pub state: OptimState<f32>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(ck.config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(ck.config_text.as_bytes());
    out.extend_from_slice(&ck.state.step.to_le_bytes());
    let count = ck.params.len() + ck.state.m.len() + ck.state.v.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        put_tensor(&mut out, name, t);
    }
    for (name, t) in ck.state.m.iter() {
        put_tensor(&mut out, &format!("{M_PREFIX}{name}"), t);
    }
    for (name, t) in ck.state.v.iter() {
        put_tensor(&mut out, &format!("{V_PREFIX}{name}"), t);
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "length overflow".to_string())
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err("file too short".into());
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err("bad magic".into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if checksum(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err("checksum mismatch".into());
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let n = r.len()?;
    let config_text = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| "config block is not UTF-8")?;
    let step = r.u64()?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| "record name is not UTF-8")?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or("extent overflow")?;
        let raw = r.take(numel.checked_mul(4).ok_or("extent overflow")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("record {name}: {e}"))?;
        let (store, key) = if let Some(k) = name.strip_prefix(M_PREFIX) {
            (&mut m, k.to_string())
        } else if let Some(k) = name.strip_prefix(V_PREFIX) {
            (&mut v, k.to_string())
        } else {
            (&mut params, name)
        };
        store.insert(key, t).map_err(|e| e.to_string())?;
    }
    if r.pos != body.len() {
        return Err("trailing bytes after records".into());
    }
    Ok(Checkpoint {
        config_text,
        params,
        state: OptimState { m, v, step },
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|detail| Error::Integrity {
        path: path.to_path_buf(),
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::new([2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-7, 9.0]).unwrap()).unwrap();
        params.insert("b", Tensor::scalar(4.0)).unwrap();
        let mut state = OptimState::new(&params);
        state.step = 17;
        state.m.get_mut("a").unwrap().data_mut()[1] = 0.25;
        Checkpoint {
            config_text: "model.n_layers = 2\n".into(),
            params,
            state,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = encode(&sample());
        let back = decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&sample());
        for cut in [0, 3, 20, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err());
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert_eq!(decode(&flipped).unwrap_err(), "checksum mismatch");
    }
}
