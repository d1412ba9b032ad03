//! Stochastic degradation operators applied to the low-quality input before
//! the history model: Gaussian blur, additive Gaussian noise, and a
//! down/upsample resize, plus a mixed policy that picks one of the three.
//!
//! Every operator preserves shape and the `[0, 1]` range and is
//! deterministic given its parameters and seed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::image::{resize_bilinear, Image};
use crate::Result;

/// Which operator a spec applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum DegradationKind {
    /// Gaussian blur with kernel sigma in pixels.
    Blur(f64),
    /// Additive zero-mean Gaussian noise with the given std (normalized intensity).
    Noise(f64),
    /// Bilinear downsample to the given scale fraction, then upsample back.
    Resize(f64),
}

/// Sampling policy for [`sample_spec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationPolicy {
    Blur,
    Noise,
    Resize,
    Mix,
}

impl Default for DegradationPolicy {
    /// Random noise is the default: it is the best-performing degradation.
    fn default() -> Self {
        DegradationPolicy::Noise
    }
}

impl std::str::FromStr for DegradationPolicy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur" => Ok(DegradationPolicy::Blur),
            "noise" => Ok(DegradationPolicy::Noise),
            "resize" => Ok(DegradationPolicy::Resize),
            "mix" => Ok(DegradationPolicy::Mix),
            other => Err(CoreError::Config {
                key: "degradation_policy".into(),
                reason: format!("unknown policy `{other}` (expected blur|noise|resize|mix)"),
            }),
        }
    }
}

impl std::fmt::Display for DegradationPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DegradationPolicy::Blur => "blur",
            DegradationPolicy::Noise => "noise",
            DegradationPolicy::Resize => "resize",
            DegradationPolicy::Mix => "mix",
        };
        f.write_str(s)
    }
}

/// Parameter ranges the sampler draws from. The defaults are mild
/// corruptions: negatives should be worse than the student anchor but not
/// destroyed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationRanges {
    pub blur_sigma: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub resize_scale: (f64, f64),
}

impl Default for DegradationRanges {
    fn default() -> Self {
        DegradationRanges {
            blur_sigma: (0.5, 2.0),
            noise_sigma: (5.0 / 255.0, 30.0 / 255.0),
            resize_scale: (0.5, 0.9),
        }
    }
}

impl DegradationRanges {
    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, (lo, hi): (f64, f64)| {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(CoreError::param(name, format!("bad range [{lo}, {hi}]")));
            }
            Ok(())
        };
        ordered("blur_sigma", self.blur_sigma)?;
        ordered("noise_sigma", self.noise_sigma)?;
        ordered("resize_scale", self.resize_scale)?;
        if self.blur_sigma.0 <= 0.0 {
            return Err(CoreError::param("blur_sigma", "must be > 0"));
        }
        if self.noise_sigma.0 < 0.0 {
            return Err(CoreError::param("noise_sigma", "must be >= 0"));
        }
        if self.resize_scale.0 <= 0.0 || self.resize_scale.1 >= 1.0 {
            return Err(CoreError::param("resize_scale", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// A fully determined degradation: kind, parameters, and the seed that makes
/// it reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub seed: u64,
}

impl DegradationSpec {
    /// Apply the degradation. Same spec on the same image gives a
    /// bit-identical result.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        match self.kind {
            DegradationKind::Blur(sigma) => apply_blur(img, sigma),
            DegradationKind::Noise(sigma) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                apply_noise(img, sigma, &mut rng)
            }
            DegradationKind::Resize(scale) => apply_resize(img, scale),
        }
    }
}

/// Normalized 1-D Gaussian taps truncated at radius ceil(3 sigma).
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

fn reflect(idx: isize, len: usize) -> usize {
    // Reflect-101-style border without repeating the edge sample twice,
    // except for len 1 which maps everything to 0.
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut i = idx.rem_euclid(period);
    if i >= len as isize {
        i = period - i;
    }
    i as usize
}

/// Gaussian blur with a normalized, ceil(3 sigma)-truncated kernel and
/// reflect padding. Separable; identical to the full 2-D product kernel.
pub fn apply_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0) {
        return Err(CoreError::param("blur sigma", format!("must be > 0, got {sigma}")));
    }
    let taps = gaussian_taps(sigma);
    let radius = taps.len() / 2;
    let (h, w, c) = img.shape();
    let src = img.data();
    // Horizontal pass.
    let mut tmp = ndarray::Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let sx = reflect(x as isize + k as isize - radius as isize, w);
                    acc += t * src[[y, sx, ch]];
                }
                tmp[[y, x, ch]] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = ndarray::Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let sy = reflect(y as isize + k as isize - radius as isize, h);
                    acc += t * tmp[[sy, x, ch]];
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    let mut result = Image::new(out);
    result.clamp_in_place();
    Ok(result)
}

/// Additive i.i.d. zero-mean Gaussian noise, clamped to `[0, 1]`.
pub fn apply_noise(img: &Image, sigma: f64, rng: &mut impl Rng) -> Result<Image> {
    if sigma < 0.0 {
        return Err(CoreError::param("noise sigma", format!("must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked above");
    let mut out = img.clone();
    for v in out.data_mut().iter_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Bilinear downsample to `(floor(s*H), floor(s*W))`, then bilinear upsample
/// back to the original size.
pub fn apply_resize(img: &Image, scale: f64) -> Result<Image> {
    if !(scale > 0.0 && scale < 1.0) {
        return Err(CoreError::param("resize scale", format!("must be in (0, 1), got {scale}")));
    }
    let (h, w, _) = img.shape();
    let dh = (scale * h as f64).floor() as usize;
    let dw = (scale * w as f64).floor() as usize;
    if dh < 1 || dw < 1 {
        return Err(CoreError::param(
            "resize scale",
            format!("intermediate dims {dh}x{dw} collapse below 1 pixel"),
        ));
    }
    let down = resize_bilinear(img, dh, dw)?;
    let mut up = resize_bilinear(&down, h, w)?;
    up.clamp_in_place();
    Ok(up)
}

/// Draw a degradation spec under the given policy. Parameters come uniformly
/// from the configured range; `mix` first picks a kind uniformly.
pub fn sample_spec(
    policy: DegradationPolicy,
    ranges: &DegradationRanges,
    rng: &mut impl Rng,
) -> DegradationSpec {
    let kind = match policy {
        DegradationPolicy::Mix => match rng.gen_range(0..3u8) {
            0 => DegradationPolicy::Blur,
            1 => DegradationPolicy::Noise,
            _ => DegradationPolicy::Resize,
        },
        p => p,
    };
    let uniform = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    };
    let kind = match kind {
        DegradationPolicy::Blur => DegradationKind::Blur(uniform(rng, ranges.blur_sigma)),
        DegradationPolicy::Noise => DegradationKind::Noise(uniform(rng, ranges.noise_sigma)),
        DegradationPolicy::Resize => DegradationKind::Resize(uniform(rng, ranges.resize_scale)),
        DegradationPolicy::Mix => unreachable!("mix resolved above"),
    };
    DegradationSpec { kind, seed: rng.gen() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn test_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| ((y * 17 + x * 5 + c * 11) % 23) as f64 / 23.0)
    }

    /// Full 2-D nested-loop Gaussian blur, the independent oracle.
    fn blur_naive(img: &Image, sigma: f64) -> Image {
        let radius = (3.0 * sigma).ceil() as isize;
        let size = (2 * radius + 1) as usize;
        let mut kernel = vec![0.0; size * size];
        let mut sum = 0.0;
        for ky in 0..size {
            for kx in 0..size {
                let dy = ky as f64 - radius as f64;
                let dx = kx as f64 - radius as f64;
                let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                kernel[ky * size + kx] = v;
                sum += v;
            }
        }
        for v in &mut kernel {
            *v /= sum;
        }
        let (h, w, c) = img.shape();
        let mut out = Image::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for ky in 0..size {
                        for kx in 0..size {
                            let sy = reflect(y as isize + ky as isize - radius, h);
                            let sx = reflect(x as isize + kx as isize - radius, w);
                            acc += kernel[ky * size + kx] * img.data()[[sy, sx, ch]];
                        }
                    }
                    out.data_mut()[[y, x, ch]] = acc.clamp(0.0, 1.0);
                }
            }
        }
        out
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::constant(9, 9, 3, 0.42);
        let out = apply_blur(&img, 1.3).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn tiny_sigma_blur_is_identity() {
        // At sigma -> 0+ the off-center taps underflow to zero.
        let img = test_image(6, 6);
        let out = apply_blur(&img, 1e-3).unwrap();
        assert!(img.max_abs_diff(&out) < 1e-15);
    }

    #[test]
    fn blur_rejects_nonpositive_sigma() {
        let img = test_image(4, 4);
        assert!(apply_blur(&img, 0.0).is_err());
        assert!(apply_blur(&img, -1.0).is_err());
    }

    #[test]
    fn impulse_center_matches_kernel_center_weight() {
        // Unit impulse at the center of a 9x9 zero image, sigma = 1.
        let mut img = Image::zeros(9, 9, 1);
        img.data_mut()[[4, 4, 0]] = 1.0;
        let sigma = 1.0;
        let out = apply_blur(&img, sigma).unwrap();
        // Oracle: explicit 2-D kernel construction.
        let radius = 3usize;
        let size = 2 * radius + 1;
        let mut sum = 0.0;
        let mut center = 0.0;
        for ky in 0..size {
            for kx in 0..size {
                let dy = ky as f64 - radius as f64;
                let dx = kx as f64 - radius as f64;
                let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                sum += v;
                if ky == radius && kx == radius {
                    center = v;
                }
            }
        }
        let expected = center / sum;
        assert!((out.data()[[4, 4, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn separable_blur_matches_2d_oracle() {
        let img = test_image(8, 7);
        for &sigma in &[0.6, 1.0, 1.8] {
            let fast = apply_blur(&img, sigma).unwrap();
            let slow = blur_naive(&img, sigma);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "sigma {sigma}");
        }
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let img = test_image(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = apply_noise(&img, 0.0, &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn noise_statistics_match_law_of_large_numbers() {
        // > 1e6 samples on a 0.5-constant image with sigma small enough that
        // clamping is negligible.
        let sigma = 0.05;
        let img = Image::constant(600, 560, 3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let out = apply_noise(&img, sigma, &mut rng).unwrap();
        let n = out.data().len() as f64;
        let mean_delta: f64 = out
            .data()
            .iter()
            .zip(img.data().iter())
            .map(|(o, i)| o - i)
            .sum::<f64>()
            / n;
        let var: f64 = out
            .data()
            .iter()
            .zip(img.data().iter())
            .map(|(o, i)| {
                let d = o - i - mean_delta;
                d * d
            })
            .sum::<f64>()
            / n;
        assert!(mean_delta.abs() < 1e-3, "mean delta {mean_delta}");
        let std = var.sqrt();
        assert!((std - sigma).abs() / sigma < 0.02, "std {std} vs sigma {sigma}");
    }

    #[test]
    fn noise_is_deterministic_given_seed() {
        let img = test_image(8, 8);
        let spec = DegradationSpec { kind: DegradationKind::Noise(0.1), seed: 77 };
        let a = spec.apply(&img).unwrap();
        let b = spec.apply(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resize_preserves_constants_and_shape() {
        let img = Image::constant(10, 8, 3, 0.7);
        let out = apply_resize(&img, 0.6).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn resize_smooths_checkerboard() {
        let img = Image::from_fn(8, 8, 1, |y, x, _| ((y + x) % 2) as f64);
        let out = apply_resize(&img, 0.5).unwrap();
        let max_in = img.data().iter().cloned().fold(f64::MIN, f64::max);
        let max_out = out.data().iter().cloned().fold(f64::MIN, f64::max);
        assert!(max_out < max_in, "expected smoothing: {max_out} vs {max_in}");
    }

    #[test]
    fn resize_rejects_collapsing_scales() {
        let img = test_image(3, 3);
        assert!(apply_resize(&img, 0.1).is_err());
        assert!(apply_resize(&img, 1.0).is_err());
        assert!(apply_resize(&img, 0.0).is_err());
    }

    #[test]
    fn sample_spec_honors_policy() {
        let ranges = DegradationRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let spec = sample_spec(DegradationPolicy::Noise, &ranges, &mut rng);
            assert!(matches!(spec.kind, DegradationKind::Noise(_)));
        }
        for _ in 0..200 {
            let spec = sample_spec(DegradationPolicy::Blur, &ranges, &mut rng);
            match spec.kind {
                DegradationKind::Blur(s) => assert!((0.5..2.0).contains(&s)),
                other => panic!("expected blur, got {other:?}"),
            }
        }
    }

    #[test]
    fn mix_policy_spreads_kinds_evenly() {
        let ranges = DegradationRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 3];
        let draws = 10_000;
        for _ in 0..draws {
            match sample_spec(DegradationPolicy::Mix, &ranges, &mut rng).kind {
                DegradationKind::Blur(_) => counts[0] += 1,
                DegradationKind::Noise(_) => counts[1] += 1,
                DegradationKind::Resize(_) => counts[2] += 1,
            }
        }
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_outputs() {
        let img = test_image(12, 12);
        let ranges = DegradationRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let outputs: Vec<Image> = (0..6)
            .map(|_| {
                sample_spec(DegradationPolicy::Mix, &ranges, &mut rng)
                    .apply(&img)
                    .unwrap()
            })
            .collect();
        for i in 0..outputs.len() {
            for j in i + 1..outputs.len() {
                assert!(
                    outputs[i].max_abs_diff(&outputs[j]) > 0.0,
                    "outputs {i} and {j} identical"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn operators_preserve_shape_and_range(
            h in 4usize..12,
            w in 4usize..12,
            sigma in 0.5f64..2.0,
            noise in 0.0f64..0.2,
            scale in 0.5f64..0.9,
            seed in 0u64..1000,
        ) {
            let img = Image::from_fn(h, w, 3, |y, x, c| {
                ((y * 7 + x * 13 + c * 29 + seed as usize) % 31) as f64 / 31.0
            });
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for out in [
                apply_blur(&img, sigma).unwrap(),
                apply_noise(&img, noise, &mut rng).unwrap(),
                apply_resize(&img, scale).unwrap(),
            ] {
                prop_assert_eq!(out.shape(), img.shape());
                prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
