//! PSNR and SSIM on a dynamic range of 1.
//!
//! SR-style evaluation computes both on the BT.601 Y channel; deblur-style
//! evaluation uses the RGB planes directly. SSIM follows the original
//! windowed formulation: 11x11 Gaussian window with sigma 1.5, K1 = 0.01,
//! K2 = 0.03, averaged over fully interior window positions.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::image::Image;
use crate::Result;

/// Channel space the metrics are computed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    /// BT.601 luma, the SR/derain convention.
    Y,
    /// Plain RGB, the deblur convention.
    Rgb,
}

impl std::str::FromStr for ChannelMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "y" | "Y" => Ok(ChannelMode::Y),
            "rgb" | "RGB" => Ok(ChannelMode::Rgb),
            other => Err(CoreError::Config {
                key: "channel_mode".into(),
                reason: format!("unknown mode `{other}` (expected y|rgb)"),
            }),
        }
    }
}

impl std::fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChannelMode::Y => "y",
            ChannelMode::Rgb => "rgb",
        })
    }
}

/// PSNR/SSIM pair for one comparison. `psnr_db` may be `+inf` for identical
/// images; [`MetricResult::reported_psnr`] caps it for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub psnr_db: f64,
    pub ssim: f64,
    pub channel_mode: ChannelMode,
}

/// Reporting cap for infinite PSNR.
pub const PSNR_CAP_DB: f64 = 100.0;

impl MetricResult {
    pub fn reported_psnr(&self) -> f64 {
        self.psnr_db.min(PSNR_CAP_DB)
    }
}

fn check_pair(context: &str, a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(CoreError::shape(
            context,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

fn planes(img: &Image, mode: ChannelMode) -> Result<Vec<Array2<f64>>> {
    let (h, w, c) = img.shape();
    match mode {
        ChannelMode::Y => {
            let y = img.luma()?;
            Ok(vec![Array2::from_shape_fn((h, w), |(r, cc)| y.data()[[r, cc, 0]])])
        }
        ChannelMode::Rgb => Ok((0..c)
            .map(|ch| Array2::from_shape_fn((h, w), |(r, cc)| img.data()[[r, cc, ch]]))
            .collect()),
    }
}

/// Peak signal-to-noise ratio in dB over the selected channel
/// representation; `+inf` for identical inputs.
pub fn psnr(a: &Image, b: &Image, mode: ChannelMode) -> Result<f64> {
    check_pair("psnr", a, b)?;
    let pa = planes(a, mode)?;
    let pb = planes(b, mode)?;
    let mut sq = 0.0;
    let mut n = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        for (u, v) in x.iter().zip(y.iter()) {
            let d = u - v;
            sq += d * d;
            n += 1;
        }
    }
    let mse = sq / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|i| {
            let dy = (i / SSIM_WINDOW) as f64 - r;
            let dx = (i % SSIM_WINDOW) as f64 - r;
            (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn ssim_plane(a: &Array2<f64>, b: &Array2<f64>, window: &[f64]) -> f64 {
    let (h, w) = a.dim();
    let c1 = (SSIM_K1 * SSIM_K1) as f64;
    let c2 = (SSIM_K2 * SSIM_K2) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let wgt = window[ky * SSIM_WINDOW + kx];
                    let va = a[[y0 + ky, x0 + kx]];
                    let vb = b[[y0 + ky, x0 + kx]];
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Mean local SSIM over interior 11x11 windows. Requires dims >= 11.
pub fn ssim(a: &Image, b: &Image, mode: ChannelMode) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let (h, w, _) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::param(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let window = ssim_window();
    let pa = planes(a, mode)?;
    let pb = planes(b, mode)?;
    let mut acc = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        acc += ssim_plane(x, y, &window);
    }
    Ok(acc / pa.len() as f64)
}

/// Evaluate both metrics on clamped copies of the inputs.
pub fn evaluate(restored: &Image, gt: &Image, mode: ChannelMode) -> Result<MetricResult> {
    let r = restored.clamped();
    let g = gt.clamped();
    Ok(MetricResult {
        psnr_db: psnr(&r, &g, mode)?,
        ssim: ssim(&r, &g, mode)?,
        channel_mode: mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| ((y * 13 + x * 29 + c * 7) % 31) as f64 / 31.0)
    }

    #[test]
    fn psnr_uniform_difference_oracles() {
        // |a - b| = 0.1 everywhere -> MSE = 0.01 -> 20 dB.
        let a = Image::constant(16, 16, 3, 0.5);
        let b = Image::constant(16, 16, 3, 0.6);
        let db = psnr(&a, &b, ChannelMode::Rgb).unwrap();
        assert!((db - 20.0).abs() < 0.01, "{db}");
        // |a - b| = 1/255 -> 20*log10(255) = 48.1308 dB.
        let c = Image::constant(16, 16, 3, 0.5 + 1.0 / 255.0);
        let db = psnr(&a, &c, ChannelMode::Rgb).unwrap();
        assert!((db - 20.0 * 255f64.log10()).abs() < 1e-9, "{db}");
        assert!((db - 48.13).abs() < 0.01, "{db}");
    }

    #[test]
    fn psnr_identical_is_infinite_and_capped() {
        let a = textured(12, 12);
        let db = psnr(&a, &a, ChannelMode::Y).unwrap();
        assert!(db.is_infinite());
        let res = MetricResult { psnr_db: db, ssim: 1.0, channel_mode: ChannelMode::Y };
        assert_eq!(res.reported_psnr(), 100.0);
    }

    #[test]
    fn psnr_decreases_with_uniform_error() {
        let a = Image::constant(16, 16, 3, 0.2);
        let mut last = f64::INFINITY;
        for off in [0.05, 0.1, 0.2, 0.4] {
            let b = Image::constant(16, 16, 3, 0.2 + off);
            let db = psnr(&a, &b, ChannelMode::Rgb).unwrap();
            assert!(db < last, "psnr should fall as error grows");
            last = db;
        }
    }

    #[test]
    fn y_and_rgb_modes_differ_on_chromatic_errors() {
        let a = Image::constant(16, 16, 3, 0.5);
        // Perturb so the luma error is tiny but RGB error is not.
        let b = Image::from_fn(16, 16, 3, |_, _, c| match c {
            0 => 0.5 + 0.114,
            2 => 0.5 - 0.299,
            _ => 0.5,
        });
        let py = psnr(&a, &b, ChannelMode::Y).unwrap();
        let prgb = psnr(&a, &b, ChannelMode::Rgb).unwrap();
        assert!(py > prgb + 20.0, "y {py} rgb {prgb}");
    }

    #[test]
    fn ssim_self_is_exactly_one() {
        let a = textured(16, 16);
        assert_eq!(ssim(&a, &a, ChannelMode::Y).unwrap(), 1.0);
        assert_eq!(ssim(&a, &a, ChannelMode::Rgb).unwrap(), 1.0);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = textured(16, 16);
        let b = Image::from_fn(16, 16, 3, |y, x, c| ((y * 5 + x * 3 + c) % 17) as f64 / 17.0);
        let ab = ssim(&a, &b, ChannelMode::Y).unwrap();
        let ba = ssim(&b, &a, ChannelMode::Y).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    /// Independent nested-loop SSIM on a single window position.
    fn ssim_naive_11(a: &Image, b: &Image) -> f64 {
        let w = ssim_window();
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut out = 0.0;
        for ch in 0..1 {
            let (mut mu_a, mut mu_b, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in 0..11 {
                for x in 0..11 {
                    let wgt = w[y * 11 + x];
                    let va = a.data()[[y, x, ch]];
                    let vb = b.data()[[y, x, ch]];
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            out = (2.0 * mu_a * mu_b + c1) * (2.0 * (ab - mu_a * mu_b) + c2)
                / ((mu_a * mu_a + mu_b * mu_b + c1) * ((aa - mu_a * mu_a) + (bb - mu_b * mu_b) + c2));
        }
        out
    }

    #[test]
    fn ssim_on_inverted_binary_pattern_is_low() {
        // Mid-gray-free binary pattern vs its inversion: covariance is
        // strongly negative, so SSIM collapses.
        let a = Image::from_fn(11, 11, 3, |y, x, _| ((y + x) % 2) as f64);
        let inv = Image::from_fn(11, 11, 3, |y, x, _| 1.0 - ((y + x) % 2) as f64);
        let value = ssim(&a, &inv, ChannelMode::Y).unwrap();
        let oracle = ssim_naive_11(&a.luma().unwrap(), &inv.luma().unwrap());
        assert!((value - oracle).abs() < 1e-12, "impl {value} vs oracle {oracle}");
        assert!(value < 0.5, "expected strongly degraded ssim, got {value}");
        assert!(value < 0.0, "structure term should be negative, got {value}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::constant(8, 8, 3, 0.5);
        assert!(ssim(&a, &a, ChannelMode::Y).is_err());
    }

    #[test]
    fn metric_shape_mismatch_is_structural() {
        let a = Image::zeros(12, 12, 3);
        let b = Image::zeros(12, 14, 3);
        assert!(psnr(&a, &b, ChannelMode::Y).is_err());
        assert!(ssim(&a, &b, ChannelMode::Y).is_err());
    }
}
