//! Binary tensor checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MOLN"  u32 version=1  u32 count
//! count x { u32 name_len, name (UTF-8), u8 rank, rank x u64 extent, f32 payload }
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOLN";
pub const VERSION: u32 = 1;

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let mut body = Vec::new();
    let mut count = 0u32;
    for (name, t) in tensors {
        count += 1;
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.push(t.shape().len() as u8);
        for &e in t.shape() {
            body.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(body.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint(format!(
            "file too short ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let (content, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let mut r = Reader {
        buf: content,
        pos: 4,
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    if crc32fast::hash(content) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|&n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Checkpoint(format!("absurd shape {shape:?} for {name}")))?;
        let data = r
            .take(n * 4, "payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != content.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            content.len() - r.pos
        )));
    }
    Ok(out)
}

/// Writes through a temporary file so a crash never leaves a half-written checkpoint.
pub fn save<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    let bytes = encode(tensors);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_store(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    save(path, store.iter().map(|(_, p)| (p.name.as_str(), &p.value)))
}

/// Copies tensors into `store`. Names and shapes must match one to one; on
/// any mismatch `store` is left untouched.
pub fn assign(store: &mut ParamStore<f32>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    let mut staged = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        let want = store.value(id).shape();
        if want != t.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                t.shape(),
                want
            )));
        }
        staged.push((id, t));
    }
    for (id, t) in staged {
        store.get_mut(id).value = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            (
                "a.weight".into(),
                Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0),
            ),
            ("a.bias".into(), Tensor::full(&[3], f32::MIN_POSITIVE)),
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let s = sample();
        let bytes = encode(s.iter().map(|(n, t)| (n.as_str(), t)));
        assert_eq!(&bytes[..4], b"MOLN");
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in s.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            assert!(t0
                .data()
                .iter()
                .zip(t1.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn every_single_byte_corruption_is_rejected() {
        let s = sample();
        let bytes = encode(s.iter().map(|(n, t)| (n.as_str(), t)));
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x5a;
            assert!(decode(&b).is_err(), "flip at byte {i} accepted");
        }
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn assign_rejects_shape_mismatch_without_partial_update() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Tensor::zeros(&[2, 3])).unwrap();
        store.add("a.bias", Tensor::zeros(&[4])).unwrap();
        let err = assign(&mut store, sample()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
        assert!(store
            .value(store.id("a.weight").unwrap())
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }
}
