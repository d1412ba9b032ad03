//! Frozen multi-scale feature encoder.
//!
//! A fixed stack of 3x3 conv stages with tanh between: stage 1 keeps the
//! input resolution, every later stage halves it, so level `i` has spatial
//! dims `input / 2^(i-1)`. The encoder is immutable after construction —
//! nothing in the crate can update its weights — but it stays differentiable
//! with respect to its *input*, which is what the contrastive and
//! distribution losses need.
//!
//! The shipped desk-scale encoder is five stages deep with a pinned seed-0
//! initialization, standing in for a pretrained feature backbone. External
//! weights can be loaded from the documented JSON schema instead.

use ndarray::{Array1, Array3, Array4, ArrayD, Ix1, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::CoreError;
use crate::image::Image;
use crate::models::conv::{conv2d, conv2d_backward_input, tanh, tanh_backward};
use crate::rng;
use crate::Result;

const KERNEL: usize = 3;
const PAD: usize = 1;

/// Per-level balancing weights for the default 5-level pyramid.
pub const DEFAULT_LEVEL_WEIGHTS: [f64; 5] = [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0];

/// Channel widths of the shipped desk-scale encoder, shallowest to deepest.
pub const DESK_CHANNELS: [usize; 5] = [8, 16, 16, 32, 32];

/// L feature maps with their per-level weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Array3<f64>>,
    pub weights: Vec<f64>,
}

impl FeaturePyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn deepest(&self) -> &Array3<f64> {
        self.levels.last().expect("pyramid has at least one level")
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(|l| l.iter().all(|v| v.is_finite()))
    }
}

/// Multi-scale feature extractor interface shared by the conv encoder and
/// the identity encoder used in oracles.
pub trait FeatureEncoder {
    /// Activation cache consumed by [`FeatureEncoder::input_gradient`].
    type Tape;

    fn num_levels(&self) -> usize;
    fn level_weights(&self) -> &[f64];

    /// Extract the pyramid. Deterministic; frozen weights.
    fn encode(&self, img: &Image) -> Result<FeaturePyramid>;

    /// Extract the pyramid and keep what the backward pass needs.
    fn encode_with_tape(&self, img: &Image) -> Result<(FeaturePyramid, Self::Tape)>;

    /// Pull per-level cotangents back to an input-image cotangent.
    fn input_gradient(&self, tape: &Self::Tape, level_grads: &[Array3<f64>]) -> Array3<f64>;

    /// Deepest level only, used by the distribution mapping module.
    fn deepest_features(&self, img: &Image) -> Result<Array3<f64>> {
        Ok(self.encode(img)?.levels.pop_last())
    }
}

// Small helper so `deepest_features` can move the last level out.
trait PopLast<T> {
    fn pop_last(self) -> T;
}

impl<T> PopLast<T> for Vec<T> {
    fn pop_last(mut self) -> T {
        self.pop().expect("non-empty")
    }
}

struct EncoderStage {
    weight: Array4<f64>,
    bias: Array1<f64>,
    stride: usize,
}

/// The frozen strided-conv encoder.
pub struct ConvEncoder {
    stages: Vec<EncoderStage>,
    level_weights: Vec<f64>,
    in_channels: usize,
}

/// Activation cache from [`ConvEncoder::encode_with_tape`]: post-tanh
/// outputs plus the input dims of every stage.
pub struct ConvEncoderTape {
    outputs: Vec<Array3<f64>>,
    input_dims: Vec<(usize, usize)>,
}

impl ConvEncoder {
    /// Build an encoder with the given channel progression. Stage 1 has
    /// stride 1; all later stages have stride 2.
    pub fn new_seeded(
        in_channels: usize,
        channels: &[usize],
        level_weights: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(CoreError::param("encoder channels", "need at least one stage"));
        }
        if level_weights.len() != channels.len() {
            return Err(CoreError::param(
                "level weights",
                format!("{} weights for {} stages", level_weights.len(), channels.len()),
            ));
        }
        if level_weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(CoreError::param("level weights", "must be nonnegative and finite"));
        }
        let mut stages = Vec::with_capacity(channels.len());
        let mut cin = in_channels;
        for (i, &cout) in channels.iter().enumerate() {
            let mut srng = rng::rng(seed, rng::stream::ENCODER_INIT, i as u64);
            let bound = (1.0 / (KERNEL * KERNEL * cin) as f64).sqrt();
            let weight = Array4::from_shape_fn((KERNEL, KERNEL, cin, cout), |_| {
                srng.gen_range(-bound..bound)
            });
            let bias = Array1::zeros(cout);
            stages.push(EncoderStage {
                weight,
                bias,
                stride: if i == 0 { 1 } else { 2 },
            });
            cin = cout;
        }
        Ok(ConvEncoder { stages, level_weights, in_channels })
    }

    /// The shipped 5-level desk-scale encoder: seed-0 weights, deepest
    /// dimension 32, level weights (1/32, 1/16, 1/8, 1/4, 1).
    pub fn desk_default() -> Self {
        ConvEncoder::new_seeded(3, &DESK_CHANNELS, DEFAULT_LEVEL_WEIGHTS.to_vec(), 0)
            .expect("desk encoder config is valid")
    }

    /// Channel count of the deepest level (the codebook dimension d).
    pub fn deepest_dim(&self) -> usize {
        self.stages.last().expect("non-empty").weight.dim().3
    }

    /// Spatial dims must be divisible by the product of all strides.
    pub fn required_multiple(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        let (h, w, c) = img.shape();
        if c != self.in_channels {
            return Err(CoreError::shape(
                "encode",
                format!("{} channels", self.in_channels),
                format!("{c} channels"),
            ));
        }
        let m = self.required_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(CoreError::shape(
                "encode",
                format!("spatial dims divisible by {m}"),
                format!("{h}x{w}"),
            ));
        }
        Ok(())
    }

    /// Bitwise digest of the weights; used by the freeze checks.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for s in &self.stages {
            s.weight.iter().for_each(|&v| eat(v));
            s.bias.iter().for_each(|&v| eat(v));
        }
        self.level_weights.iter().for_each(|&v| eat(v));
        h
    }

    /// Write the weights in the documented JSON schema.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = EncoderFile {
            format: ENCODER_FORMAT.into(),
            in_channels: self.in_channels,
            level_weights: self.level_weights.clone(),
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| EncoderStageFile {
                    stride: s.stride,
                    weight: named_array(&format!("stage{i}.weight"), &s.weight.clone().into_dyn()),
                    bias: named_array(&format!("stage{i}.bias"), &s.bias.clone().into_dyn()),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }
}

impl FeatureEncoder for ConvEncoder {
    type Tape = ConvEncoderTape;

    fn num_levels(&self) -> usize {
        self.stages.len()
    }

    fn level_weights(&self) -> &[f64] {
        &self.level_weights
    }

    fn encode(&self, img: &Image) -> Result<FeaturePyramid> {
        self.check_input(img)?;
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut x = img.data().clone();
        for s in &self.stages {
            let z = conv2d(&x, &s.weight.view(), &s.bias, s.stride, PAD);
            x = tanh(&z);
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels, weights: self.level_weights.clone() })
    }

    fn encode_with_tape(&self, img: &Image) -> Result<(FeaturePyramid, ConvEncoderTape)> {
        self.check_input(img)?;
        let mut outputs = Vec::with_capacity(self.stages.len());
        let mut input_dims = Vec::with_capacity(self.stages.len());
        let mut x = img.data().clone();
        for s in &self.stages {
            let d = x.dim();
            input_dims.push((d.0, d.1));
            let z = conv2d(&x, &s.weight.view(), &s.bias, s.stride, PAD);
            x = tanh(&z);
            outputs.push(x.clone());
        }
        let pyramid = FeaturePyramid {
            levels: outputs.clone(),
            weights: self.level_weights.clone(),
        };
        Ok((pyramid, ConvEncoderTape { outputs, input_dims }))
    }

    fn input_gradient(&self, tape: &ConvEncoderTape, level_grads: &[Array3<f64>]) -> Array3<f64> {
        assert_eq!(level_grads.len(), self.stages.len(), "one cotangent per level");
        let last = self.stages.len() - 1;
        let mut g = level_grads[last].clone();
        for i in (0..self.stages.len()).rev() {
            let gz = tanh_backward(&tape.outputs[i], &g);
            let (h, w) = tape.input_dims[i];
            let gin = conv2d_backward_input(&gz, &self.stages[i].weight.view(), self.stages[i].stride, PAD, h, w);
            if i == 0 {
                return gin;
            }
            g = gin + &level_grads[i - 1];
        }
        unreachable!("loop returns at stage 0")
    }
}

/// Pixel-space pyramid: every level is the image itself. Used by the loss
/// oracles and available for diagnostics.
pub struct IdentityEncoder {
    weights: Vec<f64>,
}

impl IdentityEncoder {
    pub fn new(weights: Vec<f64>) -> Self {
        IdentityEncoder { weights }
    }

    pub fn single_level() -> Self {
        IdentityEncoder { weights: vec![1.0] }
    }
}

impl FeatureEncoder for IdentityEncoder {
    type Tape = ();

    fn num_levels(&self) -> usize {
        self.weights.len()
    }

    fn level_weights(&self) -> &[f64] {
        &self.weights
    }

    fn encode(&self, img: &Image) -> Result<FeaturePyramid> {
        Ok(FeaturePyramid {
            levels: vec![img.data().clone(); self.weights.len()],
            weights: self.weights.clone(),
        })
    }

    fn encode_with_tape(&self, img: &Image) -> Result<(FeaturePyramid, ())> {
        Ok((self.encode(img)?, ()))
    }

    fn input_gradient(&self, _tape: &(), level_grads: &[Array3<f64>]) -> Array3<f64> {
        let mut g = level_grads[0].clone();
        for lg in &level_grads[1..] {
            g += lg;
        }
        g
    }
}

// --- weight-file schema ---

const ENCODER_FORMAT: &str = "dckd-encoder-v1";

#[derive(Serialize, Deserialize)]
struct NamedArrayFile {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn named_array(name: &str, arr: &ArrayD<f64>) -> NamedArrayFile {
    NamedArrayFile {
        name: name.to_string(),
        shape: arr.shape().to_vec(),
        data: arr.iter().copied().collect(),
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderStageFile {
    stride: usize,
    weight: NamedArrayFile,
    bias: NamedArrayFile,
}

#[derive(Serialize, Deserialize)]
struct EncoderFile {
    format: String,
    in_channels: usize,
    level_weights: Vec<f64>,
    stages: Vec<EncoderStageFile>,
}

fn parse_array(path: &Path, f: &NamedArrayFile) -> Result<ArrayD<f64>> {
    ArrayD::from_shape_vec(ndarray::IxDyn(&f.shape), f.data.clone()).map_err(|_| CoreError::Schema {
        path: path.display().to_string(),
        reason: format!("array `{}` data length does not match shape {:?}", f.name, f.shape),
    })
}

/// Load externally supplied encoder weights. The result is frozen like the
/// shipped encoder.
pub fn load_external_encoder(path: &Path) -> Result<ConvEncoder> {
    let text = std::fs::read_to_string(path)?;
    let file: EncoderFile = serde_json::from_str(&text).map_err(|e| CoreError::Schema {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if file.format != ENCODER_FORMAT {
        return Err(CoreError::Schema {
            path: path.display().to_string(),
            reason: format!("unknown format `{}`", file.format),
        });
    }
    if file.stages.is_empty() {
        return Err(CoreError::Schema {
            path: path.display().to_string(),
            reason: "encoder needs at least one stage".into(),
        });
    }
    if file.level_weights.len() != file.stages.len() {
        return Err(CoreError::Schema {
            path: path.display().to_string(),
            reason: format!(
                "{} level weights for {} stages",
                file.level_weights.len(),
                file.stages.len()
            ),
        });
    }
    let mut stages = Vec::with_capacity(file.stages.len());
    let mut cin = file.in_channels;
    for (i, sf) in file.stages.iter().enumerate() {
        let weight = parse_array(path, &sf.weight)?
            .into_dimensionality::<Ix4>()
            .map_err(|_| CoreError::Schema {
                path: path.display().to_string(),
                reason: format!("array `{}` is not 4-d", sf.weight.name),
            })?;
        let (kh, kw, wcin, cout) = weight.dim();
        if kh != KERNEL || kw != KERNEL || wcin != cin {
            return Err(CoreError::Schema {
                path: path.display().to_string(),
                reason: format!(
                    "array `{}` has shape ({kh},{kw},{wcin},{cout}), expected ({KERNEL},{KERNEL},{cin},_)",
                    sf.weight.name
                ),
            });
        }
        let bias = parse_array(path, &sf.bias)?
            .into_dimensionality::<Ix1>()
            .map_err(|_| CoreError::Schema {
                path: path.display().to_string(),
                reason: format!("array `{}` is not 1-d", sf.bias.name),
            })?;
        if bias.len() != cout {
            return Err(CoreError::Schema {
                path: path.display().to_string(),
                reason: format!("array `{}` length {} does not match {cout} filters", sf.bias.name, bias.len()),
            });
        }
        let expected_stride = if i == 0 { 1 } else { 2 };
        if sf.stride != expected_stride {
            return Err(CoreError::Schema {
                path: path.display().to_string(),
                reason: format!("stage {i} stride {} (expected {expected_stride})", sf.stride),
            });
        }
        stages.push(EncoderStage { weight, bias, stride: sf.stride });
        cin = cout;
    }
    Ok(ConvEncoder {
        stages,
        level_weights: file.level_weights,
        in_channels: file.in_channels,
    })
}
