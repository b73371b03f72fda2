//! Portable FloatMap (PF, color) reading and writing.
//!
//! Scanlines are stored bottom-to-top per the format convention. The scale
//! line's sign encodes endianness; this writer always emits -1.0
//! (little-endian), the reader honors both.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_DIM: usize = 1 << 20;

/// Write a (1, 3, H, W) tensor as a color PFM.
pub fn write_pfm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let sh = image.shape();
    if sh.b != 1 || sh.c != 3 {
        return Err(Error::shape(format!(
            "write_pfm: expected (1, 3, H, W), got {sh}"
        )));
    }
    let mut bytes = format!("PF\n{} {}\n-1.0\n", sh.w, sh.h).into_bytes();
    let mut buf = [0u8; 4];
    for y in (0..sh.h).rev() {
        for x in 0..sh.w {
            for c in 0..3 {
                LittleEndian::write_f32(&mut buf, image.at(0, c, y, x));
                bytes.extend_from_slice(&buf);
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a color PFM into a (1, 3, H, W) tensor.
pub fn read_pfm(path: &Path) -> Result<Tensor<f32>> {
    let mut file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;

    let malformed = |detail: String| Error::MalformedHeader {
        format: "PFM",
        path: path.to_path_buf(),
        detail,
    };

    if data.len() < 2 || &data[..2] != b"PF" {
        if data.len() >= 2 && &data[..2] == b"Pf" {
            return Err(malformed("grayscale Pf not supported".into()));
        }
        return Err(Error::BadMagic(path.to_path_buf(), "PF"));
    }
    // Three newline-terminated header lines: magic, dims, scale.
    let mut pos = 2;
    let next_line = |pos: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < data.len() && data[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= data.len() {
            return Err(malformed("unterminated header".into()));
        }
        let line = String::from_utf8_lossy(&data[start..*pos]).trim().to_string();
        *pos += 1;
        Ok(line)
    };
    next_line(&mut pos)?; // rest of the magic line
    let dims = next_line(&mut pos)?;
    let mut it = dims.split_whitespace();
    let w: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| malformed("missing width".into()))?;
    let h: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| malformed("missing height".into()))?;
    if w == 0 || h == 0 || w > MAX_DIM || h > MAX_DIM {
        return Err(Error::DimOverflow(path.to_path_buf(), format!("{w}x{h}")));
    }
    let scale: f32 = next_line(&mut pos)?
        .parse()
        .map_err(|_| malformed("unparseable scale".into()))?;
    if scale == 0.0 {
        return Err(malformed("zero scale".into()));
    }
    let little_endian = scale < 0.0;

    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(12))
        .ok_or_else(|| Error::DimOverflow(path.to_path_buf(), format!("{w}x{h}")))?;
    if data.len() - pos < need {
        return Err(Error::Truncated(
            path.to_path_buf(),
            format!("need {need} payload bytes, have {}", data.len() - pos),
        ));
    }
    if data.len() - pos > need {
        return Err(Error::TrailingBytes(path.to_path_buf()));
    }

    let payload = &data[pos..];
    let mut out = Tensor::zeros(1, 3, h, w);
    let mut i = 0;
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            for c in 0..3 {
                let v = if little_endian {
                    LittleEndian::read_f32(&payload[i..i + 4])
                } else {
                    BigEndian::read_f32(&payload[i..i + 4])
                };
                out.set(0, c, y, x, v);
                i += 4;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("msanet-pfm-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut img = Tensor::zeros(1, 3, 4, 3);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i as f32 * 0.377).sin() * 3.0;
        }
        let path = tmp("rt.pfm");
        write_pfm(&path, &img).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn rejects_corruptions() {
        let path = tmp("bad.pfm");
        std::fs::write(&path, b"PX\n1 1\n-1.0\n............").unwrap();
        assert!(matches!(read_pfm(&path), Err(Error::BadMagic(_, _))));
        std::fs::write(&path, b"PF\n2 2\n-1.0\nshort").unwrap();
        assert!(matches!(read_pfm(&path), Err(Error::Truncated(_, _))));
        let mut ok = b"PF\n1 1\n-1.0\n".to_vec();
        ok.extend([0u8; 12]);
        ok.extend([1u8]);
        std::fs::write(&path, &ok).unwrap();
        assert!(matches!(read_pfm(&path), Err(Error::TrailingBytes(_))));
    }

    #[test]
    fn reads_big_endian_scale() {
        let path = tmp("be.pfm");
        let mut bytes = b"PF\n1 1\n1.0\n".to_vec();
        let mut buf = [0u8; 4];
        for v in [1.5f32, -2.0, 0.25] {
            BigEndian::write_f32(&mut buf, v);
            bytes.extend_from_slice(&buf);
        }
        std::fs::write(&path, bytes).unwrap();
        let img = read_pfm(&path).unwrap();
        assert_eq!(img.data(), &[1.5, -2.0, 0.25]);
    }
}
