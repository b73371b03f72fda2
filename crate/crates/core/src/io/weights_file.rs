//! Binary weight file: magic "MSAW", little-endian throughout.
//!
//! ```text
//! magic   4 bytes "MSAW"
//! version u32
//! count   u32
//! entry*: name_len u32, name UTF-8, rank u32, dims u32 x rank,
//!         payload f32 x prod(dims), row-major
//! ```
//!
//! Round trips are bit-exact; trailing bytes, duplicate names and dimension
//! overflows are rejected.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::Weights;

pub const MAGIC: &[u8; 4] = b"MSAW";
pub const VERSION: u32 = 1;

pub fn save_weights(path: &Path, weights: &Weights<f32>) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    let mut buf4 = [0u8; 4];
    let mut push_u32 = |bytes: &mut Vec<u8>, v: u32| {
        LittleEndian::write_u32(&mut buf4, v);
        bytes.extend_from_slice(&buf4);
    };
    push_u32(&mut bytes, VERSION);
    push_u32(&mut bytes, weights.len() as u32);
    for (name, tensor) in weights.iter() {
        push_u32(&mut bytes, name.len() as u32);
        bytes.extend_from_slice(name.as_bytes());
        let sh = tensor.shape();
        push_u32(&mut bytes, 4);
        for d in [sh.b, sh.c, sh.h, sh.w] {
            push_u32(&mut bytes, d as u32);
        }
        let mut fbuf = [0u8; 4];
        for &v in tensor.data() {
            LittleEndian::write_f32(&mut fbuf, v);
            bytes.extend_from_slice(&fbuf);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Truncated(
                self.path.to_path_buf(),
                format!("{what}: need {n} bytes, have {}", self.data.len() - self.pos),
            ));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }
}

pub fn load_weights(path: &Path) -> Result<Weights<f32>> {
    let mut file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;

    let mut cur = Cursor {
        data: &data,
        pos: 0,
        path,
    };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf(), "MSAW"));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::MalformedHeader {
            format: "weights",
            path: path.to_path_buf(),
            detail: format!("unsupported version {version}"),
        });
    }
    let count = cur.u32("entry count")?;
    let mut weights = Weights::new();
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec()).map_err(|_| {
            Error::MalformedHeader {
                format: "weights",
                path: path.to_path_buf(),
                detail: "non-UTF-8 tensor name".into(),
            }
        })?;
        let rank = cur.u32("rank")? as usize;
        if rank != 4 {
            return Err(Error::MalformedHeader {
                format: "weights",
                path: path.to_path_buf(),
                detail: format!("unsupported rank {rank} for {name:?}"),
            });
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32("dimension")? as usize;
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (1 << 28))
            .ok_or_else(|| {
                Error::DimOverflow(path.to_path_buf(), format!("{name:?}: {dims:?}"))
            })?;
        let payload = cur.take(numel * 4, "payload")?;
        let mut values = vec![0.0f32; numel];
        LittleEndian::read_f32_into(payload, &mut values);
        let tensor = Tensor::from_vec(dims[0], dims[1], dims[2], dims[3], values)
            .expect("numel matches dims");
        if weights.contains(&name) {
            return Err(Error::DuplicateName(name, path.to_path_buf()));
        }
        weights.insert(name, tensor)?;
    }
    if cur.pos != data.len() {
        return Err(Error::TrailingBytes(path.to_path_buf()));
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("msanet-weights-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn bits(w: &Weights<f32>) -> Vec<(String, Vec<u32>)> {
        w.iter()
            .map(|(k, t)| (k.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn empty_map_round_trips() {
        let path = tmp("empty.msaw");
        save_weights(&path, &Weights::new()).unwrap();
        let back = load_weights(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn tensors_round_trip_bitwise() {
        let mut w = Weights::new();
        let mut t = Tensor::zeros(1, 1, 2, 2);
        t.data_mut().copy_from_slice(&[0.1, -2.5e-3, f32::MIN_POSITIVE, 1234.5]);
        w.insert("a.w", t).unwrap();
        w.insert("b.b", Tensor::filled(2, 3, 1, 1, -0.0)).unwrap();
        let path = tmp("rt.msaw");
        save_weights(&path, &w).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(bits(&w), bits(&back));
    }

    #[test]
    fn corruption_classes_are_distinguished() {
        let mut w = Weights::new();
        w.insert("x", Tensor::filled(1, 1, 1, 2, 0.5f32)).unwrap();
        let path = tmp("corrupt.msaw");
        save_weights(&path, &w).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::BadMagic(_, _))));

        // Truncation.
        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Truncated(_, _))));

        // Trailing bytes.
        let mut bad = good.clone();
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::TrailingBytes(_))));

        // Dimension overflow: patch the first dim field to u32::MAX.
        let mut bad = good.clone();
        let dims_at = 4 + 4 + 4 + 4 + 1 + 4;
        for i in 0..8 {
            bad[dims_at + i] = 0xFF;
        }
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::DimOverflow(_, _))));
    }

    #[test]
    fn duplicate_names_rejected() {
        // Hand-build a file with the same name twice.
        let mut w = Weights::new();
        w.insert("dup", Tensor::filled(1, 1, 1, 1, 1.0f32)).unwrap();
        let path = tmp("dup.msaw");
        save_weights(&path, &w).unwrap();
        let good = std::fs::read(&path).unwrap();
        let mut doubled = good[..12].to_vec();
        LittleEndian::write_u32(&mut doubled[8..12], 2);
        doubled.extend_from_slice(&good[12..]);
        doubled.extend_from_slice(&good[12..]);
        std::fs::write(&path, &doubled).unwrap();
        assert!(matches!(
            load_weights(&path),
            Err(Error::DuplicateName(_, _))
        ));
    }
}
