//! Dense H×W×C image container and the pixel-level helpers shared by the
//! degradation operators, the data pipeline, and the metrics.
//!
//! Pixel data is `f64` throughout. Inputs to the pipeline live in `[0, 1]`;
//! model outputs are *not* clamped during training, so `Image` does not
//! enforce the range — clamping happens explicitly at metric/export time.

use ndarray::{Array3, Zip};

use crate::error::CoreError;
use crate::Result;

/// BT.601 luma coefficients, the convention used by the SR evaluation
/// literature.
pub const BT601: [f64; 3] = [0.299, 0.587, 0.114];

/// An H×W×C image with `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Array3<f64>);

impl Image {
    pub fn new(data: Array3<f64>) -> Self {
        Image(data)
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Image(Array3::zeros((h, w, c)))
    }

    pub fn from_fn(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        Image(Array3::from_shape_fn((h, w, c), |(y, x, ch)| f(y, x, ch)))
    }

    /// Constant-valued image.
    pub fn constant(h: usize, w: usize, c: usize, value: f64) -> Self {
        Image(Array3::from_elem((h, w, c), value))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    /// (height, width, channels)
    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.0.dim();
        (d.0, d.1, d.2)
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    pub fn channels(&self) -> usize {
        self.0.dim().2
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Copy with every sample clamped to `[0, 1]`.
    pub fn clamped(&self) -> Image {
        Image(self.0.mapv(|v| v.clamp(0.0, 1.0)))
    }

    pub fn clamp_in_place(&mut self) {
        self.0.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    /// BT.601 luma plane as an H×W×1 image. Requires 3 channels.
    pub fn luma(&self) -> Result<Image> {
        let (h, w, c) = self.shape();
        if c != 3 {
            return Err(CoreError::shape("luma", "3 channels", format!("{c} channels")));
        }
        let mut out = Array3::zeros((h, w, 1));
        Zip::indexed(&mut out).for_each(|(y, x, _), v| {
            *v = BT601[0] * self.0[[y, x, 0]] + BT601[1] * self.0[[y, x, 1]] + BT601[2] * self.0[[y, x, 2]];
        });
        Ok(Image(out))
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.0.dim() == other.0.dim()
    }

    /// Max absolute difference; used by tests and the distinctness checks.
    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Aligned crop of size `ph`×`pw` starting at (y0, x0).
    pub fn crop(&self, y0: usize, x0: usize, ph: usize, pw: usize) -> Result<Image> {
        let (h, w, _) = self.shape();
        if y0 + ph > h || x0 + pw > w {
            return Err(CoreError::param(
                "crop",
                format!("window {ph}x{pw}@({y0},{x0}) exceeds image {h}x{w}"),
            ));
        }
        Ok(Image(
            self.0
                .slice(ndarray::s![y0..y0 + ph, x0..x0 + pw, ..])
                .to_owned(),
        ))
    }

    pub fn flip_h(&self) -> Image {
        let (h, w, c) = self.shape();
        Image(Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            self.0[[y, w - 1 - x, ch]]
        }))
    }

    pub fn flip_v(&self) -> Image {
        let (h, w, c) = self.shape();
        Image(Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            self.0[[h - 1 - y, x, ch]]
        }))
    }

    /// Transpose spatial axes (requires a square image to compose cleanly
    /// with the flip augmentations).
    pub fn transpose(&self) -> Image {
        let (h, w, c) = self.shape();
        Image(Array3::from_shape_fn((w, h, c), |(y, x, ch)| {
            self.0[[x, y, ch]]
        }))
    }
}

/// Bilinear resample to `(out_h, out_w)` with half-pixel centers and edge
/// clamping. Same-size calls return an exact copy; constant images stay
/// constant because each output sample is a nested lerp.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let (h, w, c) = img.shape();
    if out_h == 0 || out_w == 0 {
        return Err(CoreError::param("resize", "target dims must be >= 1"));
    }
    if out_h == h && out_w == w {
        return Ok(img.clone());
    }
    let src = img.data();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array3::zeros((out_h, out_w, c));
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let a = src[[y0, x0, ch]];
                let b = src[[y0, x1, ch]];
                let d = src[[y1, x0, ch]];
                let e = src[[y1, x1, ch]];
                let top = a + (b - a) * tx;
                let bot = d + (e - d) * tx;
                out[[oy, ox, ch]] = top + (bot - top) * ty;
            }
        }
    }
    Ok(Image(out))
}
