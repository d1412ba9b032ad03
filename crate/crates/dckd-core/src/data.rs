//! Synthetic corpus generation and paired patch sampling.
//!
//! The toy corpus stands in for the usual SR training sets: procedurally
//! generated RGB images mixing low-frequency content (gradients, smooth
//! random fields, blobs) with high-frequency content (checkerboards), all
//! deterministic from a seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::image::{resize_bilinear, Image};
use crate::parallel;
use crate::rng;
use crate::Result;

/// How a low-quality input was produced from its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PairRecord {
    /// Bilinear downsample by the integer scale factor.
    BilinearDownsample { scale: usize },
}

/// An aligned (lq, gt) training pair; gt dims are `scale` times lq dims.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub lq: Image,
    pub gt: Image,
    pub record: PairRecord,
}

fn gen_gradient(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let mut coeff = [[0.0f64; 3]; 3];
    for c in coeff.iter_mut() {
        c[0] = rng.gen_range(0.0..1.0);
        c[1] = rng.gen_range(-1.0..1.0);
        c[2] = rng.gen_range(-1.0..1.0);
    }
    let n = (size - 1).max(1) as f64;
    Image::from_fn(size, size, 3, |y, x, ch| {
        let v = coeff[ch][0] + coeff[ch][1] * (x as f64 / n) + coeff[ch][2] * (y as f64 / n);
        v.rem_euclid(1.0)
    })
}

fn gen_checkerboard(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let period = rng.gen_range(2..=8usize);
    let phase_y = rng.gen_range(0..period);
    let phase_x = rng.gen_range(0..period);
    let a: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let b: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    Image::from_fn(size, size, 3, |y, x, ch| {
        let cell = ((y + phase_y) / period + (x + phase_x) / period) % 2;
        if cell == 0 {
            a[ch]
        } else {
            b[ch]
        }
    })
}

fn gen_blobs(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let base: [f64; 3] = [rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5)];
    let count = rng.gen_range(2..=5usize);
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..count)
        .map(|_| {
            let center = [rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64)];
            let width = rng.gen_range(size as f64 / 12.0..size as f64 / 4.0);
            let amp = [
                rng.gen_range(-0.5..0.8),
                rng.gen_range(-0.5..0.8),
                rng.gen_range(-0.5..0.8),
            ];
            (center, width, amp)
        })
        .collect();
    Image::from_fn(size, size, 3, |y, x, ch| {
        let mut v = base[ch];
        for (center, width, amp) in &blobs {
            let dy = y as f64 - center[0];
            let dx = x as f64 - center[1];
            v += amp[ch] * (-(dy * dy + dx * dx) / (2.0 * width * width)).exp();
        }
        v.clamp(0.0, 1.0)
    })
}

fn gen_smooth_field(rng: &mut ChaCha8Rng, size: usize) -> Image {
    // Low-res noise upsampled bilinearly, two octaves.
    let coarse = rng.gen_range(3..=6usize);
    let fine = (coarse * 3).min(size);
    let grid_a = Image::from_fn(coarse, coarse, 3, |_, _, _| rng.gen_range(0.0..1.0));
    let grid_b = Image::from_fn(fine, fine, 3, |_, _, _| rng.gen_range(0.0..1.0));
    let up_a = resize_bilinear(&grid_a, size, size).expect("upsample");
    let up_b = resize_bilinear(&grid_b, size, size).expect("upsample");
    Image::from_fn(size, size, 3, |y, x, c| {
        (0.7 * up_a.data()[[y, x, c]] + 0.3 * up_b.data()[[y, x, c]]).clamp(0.0, 1.0)
    })
}

/// Generate `count` ground-truth images of `size` x `size` x 3, cycling
/// through the four generator families. Deterministic per (seed, index), so
/// the corpus can be built in parallel.
pub fn make_toy_corpus(seed: u64, count: usize, size: usize) -> Result<Vec<Image>> {
    if count == 0 {
        return Err(CoreError::param("corpus count", "must be >= 1"));
    }
    if size < 4 {
        return Err(CoreError::param("corpus size", "must be >= 4"));
    }
    Ok(parallel::map_range(count, |i| {
        let mut g = rng::rng(seed, rng::stream::CORPUS, i as u64);
        match i % 4 {
            0 => gen_gradient(&mut g, size),
            1 => gen_checkerboard(&mut g, size),
            2 => gen_blobs(&mut g, size),
            _ => gen_smooth_field(&mut g, size),
        }
    }))
}

/// Build the aligned low-quality input for a ground-truth image by bilinear
/// downsampling with the integer factor `scale`.
pub fn synth_pair(gt: &Image, scale: usize) -> Result<PairedSample> {
    if scale == 0 {
        return Err(CoreError::param("scale", "must be >= 1"));
    }
    let (h, w, _) = gt.shape();
    if h % scale != 0 || w % scale != 0 {
        return Err(CoreError::shape(
            "synth_pair",
            format!("dims divisible by {scale}"),
            format!("{h}x{w}"),
        ));
    }
    let lq = if scale == 1 {
        gt.clone()
    } else {
        resize_bilinear(gt, h / scale, w / scale)?
    };
    Ok(PairedSample {
        lq,
        gt: gt.clone(),
        record: PairRecord::BilinearDownsample { scale },
    })
}

/// Dihedral augmentation bits applied identically to lq and gt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub flip_h: bool,
    pub flip_v: bool,
    pub transpose: bool,
}

impl Augment {
    pub const IDENTITY: Augment = Augment { flip_h: false, flip_v: false, transpose: false };

    pub fn sample(rng: &mut impl Rng) -> Augment {
        Augment {
            flip_h: rng.gen(),
            flip_v: rng.gen(),
            transpose: rng.gen(),
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = img.clone();
        if self.flip_h {
            out = out.flip_h();
        }
        if self.flip_v {
            out = out.flip_v();
        }
        if self.transpose {
            out = out.transpose();
        }
        out
    }
}

/// A crop plan drawn by [`sample_crop_plan`]: lq-space origin plus the
/// augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPlan {
    pub y0: usize,
    pub x0: usize,
    pub patch: usize,
    pub augment: Augment,
}

/// Draw a random aligned crop + augmentation plan for the given sample.
pub fn sample_crop_plan(sample: &PairedSample, patch: usize, rng: &mut impl Rng) -> Result<CropPlan> {
    let (h, w, _) = sample.lq.shape();
    if patch > h || patch > w {
        return Err(CoreError::param(
            "patch",
            format!("patch {patch} exceeds lq dims {h}x{w}"),
        ));
    }
    let y0 = if h == patch { 0 } else { rng.gen_range(0..=h - patch) };
    let x0 = if w == patch { 0 } else { rng.gen_range(0..=w - patch) };
    Ok(CropPlan { y0, x0, patch, augment: Augment::sample(rng) })
}

/// Execute a crop plan: aligned square crops (gt at scale-multiplied
/// coordinates) with the same flips/rotation on both sides.
pub fn apply_crop_plan(sample: &PairedSample, plan: &CropPlan) -> Result<PairedSample> {
    let PairRecord::BilinearDownsample { scale } = sample.record;
    let lq = sample.lq.crop(plan.y0, plan.x0, plan.patch, plan.patch)?;
    let gt = sample.gt.crop(
        plan.y0 * scale,
        plan.x0 * scale,
        plan.patch * scale,
        plan.patch * scale,
    )?;
    Ok(PairedSample {
        lq: plan.augment.apply(&lq),
        gt: plan.augment.apply(&gt),
        record: sample.record,
    })
}

/// Random aligned crop and augmentation in one call.
pub fn crop_augment(sample: &PairedSample, patch: usize, rng: &mut impl Rng) -> Result<PairedSample> {
    let plan = sample_crop_plan(sample, patch, rng)?;
    apply_crop_plan(sample, &plan)
}
