//! Tensor file format shared by the toy denoiser and the metric classifier.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "CDIF" | version | tensor count
//! per tensor: name length | UTF-8 name | rank | dims... | f32 LE data
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Tensor, TensorTable};

pub const MAGIC: [u8; 4] = *b"CDIF";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(table: &TensorTable) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(table.tensors().len() as u32).to_le_bytes());
    for t in table.tensors() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorTable> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Truncated("file shorter than header".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, supported: FORMAT_VERSION });
    }
    let count = cur.u32("tensor count")?;
    let mut table = TensorTable::default();
    for i in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| Error::Malformed(format!("tensor {i} name is not UTF-8")))?
            .to_owned();
        let rank = cur.u32("rank")? as usize;
        let dims = (0..rank).map(|_| cur.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Malformed(format!("tensor `{name}` is too large")))?;
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::Malformed("tensor too large".into()))?, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        table.push(Tensor::from_data(name, dims, data));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(table)
}

pub fn save(path: &Path, table: &TensorTable) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, encode(table))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TensorTable> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorTable {
        TensorTable::new(vec![
            Tensor::from_data("a.weight", vec![2, 3], vec![0.5, -1.0, 3.25, f32::MIN_POSITIVE, 1e-30, -0.0]),
            Tensor::from_data("meta.x", vec![1], vec![0.15]),
            Tensor::from_data("empty", vec![0], vec![]),
        ])
    }

    #[test]
    fn header_bytes() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"CDIF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &8u32.to_le_bytes());
        assert_eq!(&bytes[16..24], b"a.weight");
    }

    #[test]
    fn load_errors_are_distinct() {
        let mut bytes = encode(&sample());
        assert_eq!(decode(&bytes).unwrap(), sample());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic)));

        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode(&newer), Err(Error::Version { found: 2, supported: 1 })));

        assert!(matches!(decode(&bytes[..bytes.len() - 2]), Err(Error::Truncated(_))));
        assert!(matches!(decode(&bytes[..2]), Err(Error::Truncated(_))));
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Malformed(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/w.cdif");
        save(&path, &sample()).unwrap();
        let back = load(&path).unwrap();
        for (a, b) in back.tensors().iter().zip(sample().tensors()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<u32>(), 0..64), name in "[a-z.]{0,12}") {
            let data: Vec<f32> = values.iter().map(|&b| f32::from_bits(b)).collect();
            let table = TensorTable::new(vec![Tensor::from_data(name, vec![data.len()], data)]);
            let back = decode(&encode(&table)).unwrap();
            let bits = |t: &TensorTable| t.tensors()[0].data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&table));
        }
    }
}
