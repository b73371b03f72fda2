//! Sample directory layout: three LDR captures, their exposure values,
//! and the ground-truth HDR image.
//!
//! ```text
//! <dir>/ldr_0.ppm   low exposure
//!       ldr_1.ppm   reference (medium)
//!       ldr_2.ppm   high exposure
//!       exposures.txt   one EV per line, strictly increasing, reference 0
//!       gt.pfm      ground-truth radiance, aligned with the reference
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{pfm, ppm};
use crate::preprocess::{ev_to_time, ExposureStack};
use crate::tensor::Tensor;

pub const LDR_NAMES: [&str; 3] = ["ldr_0.ppm", "ldr_1.ppm", "ldr_2.ppm"];
pub const EXPOSURES_NAME: &str = "exposures.txt";
pub const GT_NAME: &str = "gt.pfm";

/// Read the three EVs from exposures.txt.
pub fn read_exposures(path: &Path) -> Result<[f32; 3]> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    let values: Vec<f32> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f32>().map_err(|_| Error::MalformedHeader {
                format: "exposures",
                path: path.to_path_buf(),
                detail: format!("unparseable EV {l:?}"),
            })
        })
        .collect::<Result<_>>()?;
    if values.len() != 3 {
        return Err(Error::MalformedHeader {
            format: "exposures",
            path: path.to_path_buf(),
            detail: format!("expected 3 EVs, found {}", values.len()),
        });
    }
    if !(values[0] < values[1] && values[1] < values[2]) {
        return Err(Error::EvOrdering(path.to_path_buf()));
    }
    Ok([values[0], values[1], values[2]])
}

/// Load one sample directory into an exposure stack and its ground truth.
pub fn read_sample(dir: &Path) -> Result<(ExposureStack<f32>, Tensor<f32>)> {
    let images: Vec<Tensor<f32>> = LDR_NAMES
        .iter()
        .map(|name| ppm::read_ppm(&dir.join(name)))
        .collect::<Result<_>>()?;
    let evs = read_exposures(&dir.join(EXPOSURES_NAME))?;
    let gt = pfm::read_pfm(&dir.join(GT_NAME))?;

    let sh = images[0].shape();
    for (name, img) in LDR_NAMES.iter().zip(&images).skip(1) {
        if img.shape() != sh {
            return Err(Error::DimMismatch {
                path: dir.join(name),
                detail: format!("{} vs {}", img.shape(), sh),
            });
        }
    }
    if gt.shape() != sh {
        return Err(Error::DimMismatch {
            path: dir.join(GT_NAME),
            detail: format!("{} vs {}", gt.shape(), sh),
        });
    }
    if gt.data().iter().any(|&v| v < 0.0) {
        return Err(Error::domain(format!(
            "negative ground-truth radiance in {}",
            dir.join(GT_NAME).display()
        )));
    }
    let times = evs.map(ev_to_time);
    let stack = ExposureStack::new(
        [images[0].clone(), images[1].clone(), images[2].clone()],
        times,
    )?;
    Ok((stack, gt))
}

/// Write one sample directory.
pub fn write_sample(
    dir: &Path,
    ldrs: &[Tensor<f32>; 3],
    evs: [f32; 3],
    gt: &Tensor<f32>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, img) in LDR_NAMES.iter().zip(ldrs) {
        ppm::write_ppm(&dir.join(name), img)?;
    }
    fs::write(
        dir.join(EXPOSURES_NAME),
        format!("{}\n{}\n{}\n", evs[0], evs[1], evs[2]),
    )?;
    pfm::write_pfm(&dir.join(GT_NAME), gt)?;
    Ok(())
}

/// Sample subdirectories of a dataset directory, sorted by name.
pub fn list_samples(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() && entry.path().join(EXPOSURES_NAME).exists() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("msanet-sample-tests").join(name);
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn gradient_image(h: usize, w: usize, scale: f32) -> Tensor<f32> {
        let mut t = Tensor::zeros(1, 3, h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    t.set(0, c, y, x, ((y * w + x) as f32 * scale) % 1.0);
                }
            }
        }
        t
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tmp("rt");
        let ldrs = [
            gradient_image(4, 4, 0.01),
            gradient_image(4, 4, 0.02),
            gradient_image(4, 4, 0.03),
        ];
        let gt = gradient_image(4, 4, 0.005);
        write_sample(&dir, &ldrs, [-2.0, 0.0, 2.0], &gt).unwrap();
        let (stack, gt_back) = read_sample(&dir).unwrap();
        assert_eq!(stack.exposure_times, [0.25, 1.0, 4.0]);
        assert_eq!(gt_back.shape(), gt.shape());
        // 8-bit quantization is the only loss on LDRs; PFM is exact.
        for (a, b) in stack.images[0].data().iter().zip(ldrs[0].data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(gt_back.data(), gt.data());
    }

    #[test]
    fn non_increasing_evs_rejected() {
        let dir = tmp("ev");
        let ldrs = [
            gradient_image(2, 2, 0.1),
            gradient_image(2, 2, 0.1),
            gradient_image(2, 2, 0.1),
        ];
        write_sample(&dir, &ldrs, [-2.0, 0.0, 2.0], &gradient_image(2, 2, 0.1)).unwrap();
        fs::write(dir.join(EXPOSURES_NAME), "2\n0\n-2\n").unwrap();
        assert!(matches!(read_sample(&dir), Err(Error::EvOrdering(_))));
    }

    #[test]
    fn dim_mismatch_detected() {
        let dir = tmp("dims");
        let ldrs = [
            gradient_image(2, 2, 0.1),
            gradient_image(2, 2, 0.1),
            gradient_image(2, 2, 0.1),
        ];
        write_sample(&dir, &ldrs, [-2.0, 0.0, 2.0], &gradient_image(2, 2, 0.1)).unwrap();
        ppm::write_ppm(&dir.join("ldr_2.ppm"), &gradient_image(2, 3, 0.1)).unwrap();
        assert!(matches!(read_sample(&dir), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn missing_file_detected() {
        let dir = tmp("missing");
        assert!(matches!(read_sample(&dir), Err(Error::MissingFile(_))));
    }
}
