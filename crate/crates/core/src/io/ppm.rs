//! Binary PPM (P6) reading and writing, 8-bit三-channel, maxval 255.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_DIM: usize = 1 << 20;

/// Write a (1, 3, H, W) tensor in [0, 1] as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let sh = image.shape();
    if sh.b != 1 || sh.c != 3 {
        return Err(Error::shape(format!(
            "write_ppm: expected (1, 3, H, W), got {sh}"
        )));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", sh.w, sh.h).into_bytes();
    for y in 0..sh.h {
        for x in 0..sh.w {
            for c in 0..3 {
                let v = image.at(0, c, y, x).clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct TokenReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> TokenReader<'a> {
    /// Next whitespace-delimited token, skipping `#` comments.
    fn token(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.data.len() && self.data[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.data.len() && self.data[self.pos] == b'#' {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.data.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Some(&self.data[start..self.pos])
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    Ok(data)
}

/// Read a binary PPM into a (1, 3, H, W) tensor scaled to [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let data = read_file(path)?;
    if data.len() < 2 || &data[..2] != b"P6" {
        return Err(Error::BadMagic(path.to_path_buf(), "P6"));
    }
    let mut reader = TokenReader {
        data: &data,
        pos: 2,
    };
    let header = |what: &str, tok: Option<&[u8]>| -> Result<usize> {
        let tok = tok.ok_or_else(|| Error::MalformedHeader {
            format: "PPM",
            path: path.to_path_buf(),
            detail: format!("missing {what}"),
        })?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::MalformedHeader {
                format: "PPM",
                path: path.to_path_buf(),
                detail: format!("unparseable {what}"),
            })
    };
    let w = header("width", reader.token())?;
    let h = header("height", reader.token())?;
    let maxval = header("maxval", reader.token())?;
    if w == 0 || h == 0 || w > MAX_DIM || h > MAX_DIM || w.checked_mul(h).is_none() {
        return Err(Error::DimOverflow(
            path.to_path_buf(),
            format!("{w}x{h}"),
        ));
    }
    if maxval != 255 {
        return Err(Error::MalformedHeader {
            format: "PPM",
            path: path.to_path_buf(),
            detail: format!("unsupported maxval {maxval}"),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    let payload_start = reader.pos + 1;
    let need = w * h * 3;
    if data.len() < payload_start || data.len() - payload_start < need {
        return Err(Error::Truncated(
            path.to_path_buf(),
            format!(
                "need {need} payload bytes, have {}",
                data.len().saturating_sub(payload_start)
            ),
        ));
    }
    let payload = &data[payload_start..payload_start + need];
    let mut out = Tensor::zeros(1, 3, h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.set(0, c, y, x, payload[(y * w + x) * 3 + c] as f32 / 255.0);
            }
        }
    }
    Ok(out)
}
