//! PSNR and SSIM in the tone-mapped and linear domains.
//!
//! Tone-mapped variants apply the mu-law compressor to both images first.
//! SSIM uses the standard 11x11 Gaussian window (sigma 1.5, k1 0.01,
//! k2 0.03, unit dynamic range), evaluated on fully interior windows and
//! averaged over pixels and channels. All accumulation is in f64.

use crate::error::{Error, Result};
use crate::preprocess;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio against a unit peak; identical inputs give
/// positive infinity.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "psnr: shape mismatch {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut sum = 0.0;
    for y in -half..=half {
        for x in -half..=half {
            let v = (-((y * y + x * x) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w.push(v);
            sum += v;
        }
    }
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Mean structural similarity over all interior windows and channels.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "ssim: shape mismatch {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let sh = a.shape();
    if sh.h < SSIM_WINDOW || sh.w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim: input {}x{} smaller than the {SSIM_WINDOW}-pixel window",
            sh.h, sh.w
        )));
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (oh, ow) = (sh.h - SSIM_WINDOW + 1, sh.w - SSIM_WINDOW + 1);

    let mut acc = 0.0f64;
    let mut count = 0usize;
    for bi in 0..sh.b {
        for c in 0..sh.c {
            let pa = a.plane(bi, c);
            let pb = b.plane(bi, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut mu_x = 0.0;
                    let mut mu_y = 0.0;
                    let mut xx = 0.0;
                    let mut yy = 0.0;
                    let mut xy = 0.0;
                    let mut wi = 0;
                    for dy in 0..SSIM_WINDOW {
                        let row = (oy + dy) * sh.w + ox;
                        for dx in 0..SSIM_WINDOW {
                            let w = window[wi];
                            wi += 1;
                            let x = pa[row + dx].as_f64();
                            let y = pb[row + dx].as_f64();
                            mu_x += w * x;
                            mu_y += w * y;
                            xx += w * x * x;
                            yy += w * y * y;
                            xy += w * x * y;
                        }
                    }
                    let var_x = xx - mu_x * mu_x;
                    let var_y = yy - mu_y * mu_y;
                    let cov = xy - mu_x * mu_y;
                    let num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2);
                    let den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2);
                    acc += num / den;
                    count += 1;
                }
            }
        }
    }
    Ok(acc / count as f64)
}

/// Quality scores of one prediction against its ground truth.
#[derive(Clone, Copy, Debug)]
pub struct SampleScores {
    pub psnr_mu: f64,
    pub psnr_l: f64,
    pub ssim_mu: f64,
    pub ssim_l: f64,
}

/// Compute all four scores. Inputs are linear-domain images in [0, 1].
pub fn evaluate_pair<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mu: f64) -> Result<SampleScores> {
    let tp = preprocess::tone_map(pred, mu)?;
    let tg = preprocess::tone_map(gt, mu)?;
    Ok(SampleScores {
        psnr_mu: psnr(&tp, &tg)?,
        psnr_l: psnr(pred, gt)?,
        ssim_mu: ssim(&tp, &tg)?,
        ssim_l: ssim(pred, gt)?,
    })
}

/// Per-sample scores plus their arithmetic means.
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub samples: Vec<(String, SampleScores)>,
}

impl EvalReport {
    pub fn push(&mut self, name: impl Into<String>, scores: SampleScores) {
        self.samples.push((name.into(), scores));
    }

    pub fn mean(&self) -> SampleScores {
        let n = self.samples.len().max(1) as f64;
        let mut m = SampleScores {
            psnr_mu: 0.0,
            psnr_l: 0.0,
            ssim_mu: 0.0,
            ssim_l: 0.0,
        };
        for (_, s) in &self.samples {
            m.psnr_mu += s.psnr_mu / n;
            m.psnr_l += s.psnr_l / n;
            m.ssim_mu += s.ssim_mu / n;
            m.ssim_l += s.ssim_l / n;
        }
        m
    }

    /// Key/value text, one record per sample, mean last. Infinities are
    /// serialized as "inf".
    pub fn to_text(&self) -> String {
        fn num(v: f64) -> String {
            if v.is_infinite() {
                "inf".to_string()
            } else {
                format!("{v:.6}")
            }
        }
        let mut out = String::new();
        for (name, s) in &self.samples {
            out.push_str(&format!(
                "sample={name} psnr_mu={} psnr_l={} ssim_mu={} ssim_l={}\n",
                num(s.psnr_mu),
                num(s.psnr_l),
                num(s.ssim_mu),
                num(s.ssim_l)
            ));
        }
        let m = self.mean();
        out.push_str(&format!(
            "mean psnr_mu={} psnr_l={} ssim_mu={} ssim_l={}\n",
            num(m.psnr_mu),
            num(m.psnr_l),
            num(m.ssim_mu),
            num(m.ssim_l)
        ));
        out
    }
}
