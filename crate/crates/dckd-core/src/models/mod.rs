//! Restoration networks used as teacher, student, and history model.
//!
//! A model is a stack of 3x3 same-size conv layers with leaky-ReLU between
//! them, followed by pixel-shuffle upsampling when the upscale factor is
//! greater than one. Parameters live in a [`ParamVector`] — an ordered list
//! of named arrays — so snapshotting and EMA blending work uniformly across
//! architectures.

pub mod conv;

use ndarray::{Array1, Array4, ArrayD, ArrayView1, ArrayView4, Ix1, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::CoreError;
use crate::image::Image;
use crate::Result;

use conv::{
    conv2d, conv2d_backward_input, conv2d_backward_params, leaky_relu, leaky_relu_backward,
    pixel_shuffle, pixel_shuffle_backward,
};

const KERNEL: usize = 3;
const PAD: usize = 1;

/// Architecture description: conv depth, hidden width, upscale factor, and
/// image channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Number of conv layers; 0 is the identity pass-through (upscale 1 only).
    pub depth: usize,
    /// Output channels of every non-final conv layer.
    pub width: usize,
    /// Spatial upscale factor r; outputs are (rH, rW, C).
    pub upscale: usize,
    /// Image channels, normally 3.
    pub channels: usize,
}

impl ArchSpec {
    pub fn new(depth: usize, width: usize, upscale: usize, channels: usize) -> Result<Self> {
        let spec = ArchSpec { depth, width, upscale, channels };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.upscale == 0 || self.channels == 0 {
            return Err(CoreError::param("arch", "upscale and channels must be positive"));
        }
        if self.depth == 0 && self.upscale != 1 {
            return Err(CoreError::param("arch", "identity model requires upscale = 1"));
        }
        if self.depth > 0 && self.width == 0 && self.depth > 1 {
            return Err(CoreError::param("arch", "width must be positive for depth > 1"));
        }
        Ok(())
    }

    /// (in, out) channels of conv layer `i`.
    fn layer_io(&self, i: usize) -> (usize, usize) {
        let cin = if i == 0 { self.channels } else { self.width };
        let cout = if i + 1 == self.depth {
            self.channels * self.upscale * self.upscale
        } else {
            self.width
        };
        (cin, cout)
    }

    pub fn param_count(&self) -> usize {
        (0..self.depth)
            .map(|i| {
                let (cin, cout) = self.layer_io(i);
                KERNEL * KERNEL * cin * cout + cout
            })
            .sum()
    }
}

/// Ordered collection of named parameter arrays.
///
/// Two vectors from the same [`ArchSpec`] have identical names, order, and
/// shapes; `extract -> inject` is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl ParamVector {
    pub fn from_entries(entries: Vec<(String, ArrayD<f64>)>) -> Self {
        ParamVector { entries }
    }

    pub fn entries(&self) -> &[(String, ArrayD<f64>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, ArrayD<f64>)] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Verify that `other` has the same names, order, and shapes.
    pub fn check_structure(&self, other: &ParamVector) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(CoreError::Structure {
                entry: "<count>".into(),
                reason: format!("{} entries vs {}", self.entries.len(), other.entries.len()),
            });
        }
        for ((na, aa), (nb, ab)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(CoreError::Structure {
                    entry: na.clone(),
                    reason: format!("name mismatch: expected `{na}`, got `{nb}`"),
                });
            }
            if aa.shape() != ab.shape() {
                return Err(CoreError::Structure {
                    entry: na.clone(),
                    reason: format!("shape mismatch: {:?} vs {:?}", aa.shape(), ab.shape()),
                });
            }
        }
        Ok(())
    }

    /// Elementwise combine with a same-structure vector.
    pub fn zip_map(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
        self.check_structure(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((name, a), (_, b))| {
                let mut out = a.clone();
                out.zip_mut_with(b, |x, &y| *x = f(*x, y));
                (name.clone(), out)
            })
            .collect();
        Ok(ParamVector { entries })
    }

    /// FNV-1a over the raw f64 bits; used for bitwise freeze checks.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        for (name, arr) in &self.entries {
            for b in name.bytes() {
                eat(b);
            }
            for v in arr.iter() {
                for b in v.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }
}

/// A parametric image-to-image restoration network.
#[derive(Debug, Clone)]
pub struct RestorationModel {
    spec: ArchSpec,
    params: ParamVector,
    trainable: bool,
}

/// Activation cache from [`RestorationModel::forward_with_tape`].
pub struct ModelTape {
    /// Input to each conv layer.
    layer_inputs: Vec<ndarray::Array3<f64>>,
    /// Pre-activation output of each conv layer.
    preacts: Vec<ndarray::Array3<f64>>,
}

impl RestorationModel {
    /// Fan-in-scaled uniform initialization from an explicit seed.
    pub fn new_seeded(spec: ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed_u64(seed);
        let mut entries = Vec::new();
        for i in 0..spec.depth {
            let (cin, cout) = spec.layer_io(i);
            let bound = (1.0 / (KERNEL * KERNEL * cin) as f64).sqrt();
            let weight = Array4::from_shape_fn((KERNEL, KERNEL, cin, cout), |_| {
                rng.gen_range(-bound..bound)
            });
            let bias = Array1::<f64>::zeros(cout);
            entries.push((format!("conv{i}.weight"), weight.into_dyn()));
            entries.push((format!("conv{i}.bias"), bias.into_dyn()));
        }
        Ok(RestorationModel {
            spec,
            params: ParamVector::from_entries(entries),
            trainable: true,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn upscale(&self) -> usize {
        self.spec.upscale
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Mark the model frozen; the trainer never updates frozen models.
    pub fn freeze(&mut self) {
        self.trainable = false;
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Deep copy of the parameters; later training does not mutate it.
    pub fn extract_params(&self) -> ParamVector {
        self.params.clone()
    }

    /// Replace the parameters. Names and shapes must match the architecture.
    pub fn inject_params(&mut self, params: &ParamVector) -> Result<()> {
        self.params.check_structure(params)?;
        self.params = params.clone();
        Ok(())
    }

    pub fn params_digest(&self) -> u64 {
        self.params.digest()
    }

    fn layer_weight(&self, i: usize) -> ArrayView4<'_, f64> {
        self.params.entries[2 * i]
            .1
            .view()
            .into_dimensionality::<Ix4>()
            .expect("weight entry is 4-d")
    }

    fn layer_bias(&self, i: usize) -> ArrayView1<'_, f64> {
        self.params.entries[2 * i + 1]
            .1
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias entry is 1-d")
    }

    fn check_input(&self, input: &Image) -> Result<()> {
        let (_, _, c) = input.shape();
        if c != self.spec.channels {
            return Err(CoreError::shape(
                "model forward",
                format!("{} channels", self.spec.channels),
                format!("{c} channels"),
            ));
        }
        Ok(())
    }

    /// Restore an image: (H, W, C) -> (rH, rW, C). Output values are finite
    /// but deliberately not clamped; clamping happens at metric/export time.
    pub fn forward(&self, input: &Image) -> Result<Image> {
        self.check_input(input)?;
        if self.spec.depth == 0 {
            return Ok(input.clone());
        }
        let mut x = input.data().clone();
        for i in 0..self.spec.depth {
            let z = conv2d(&x, &self.layer_weight(i), &self.layer_bias(i).to_owned(), 1, PAD);
            x = if i + 1 < self.spec.depth { leaky_relu(&z) } else { z };
        }
        let out = if self.spec.upscale > 1 {
            pixel_shuffle(&x, self.spec.upscale)
        } else {
            x
        };
        Ok(Image::new(out))
    }

    /// Forward pass that caches activations for [`RestorationModel::backward`].
    pub fn forward_with_tape(&self, input: &Image) -> Result<(Image, ModelTape)> {
        self.check_input(input)?;
        let mut layer_inputs = Vec::with_capacity(self.spec.depth);
        let mut preacts = Vec::with_capacity(self.spec.depth);
        if self.spec.depth == 0 {
            return Ok((input.clone(), ModelTape { layer_inputs, preacts }));
        }
        let mut x = input.data().clone();
        for i in 0..self.spec.depth {
            layer_inputs.push(x.clone());
            let z = conv2d(&x, &self.layer_weight(i), &self.layer_bias(i).to_owned(), 1, PAD);
            preacts.push(z.clone());
            x = if i + 1 < self.spec.depth { leaky_relu(&z) } else { z };
        }
        let out = if self.spec.upscale > 1 {
            pixel_shuffle(&x, self.spec.upscale)
        } else {
            x
        };
        Ok((Image::new(out), ModelTape { layer_inputs, preacts }))
    }

    /// Backpropagate an output cotangent to parameter gradients.
    pub fn backward(&self, tape: &ModelTape, grad_out: &ndarray::Array3<f64>) -> ParamVector {
        let mut entries: Vec<(String, ArrayD<f64>)> = self
            .params
            .entries
            .iter()
            .map(|(n, a)| (n.clone(), ArrayD::zeros(a.raw_dim())))
            .collect();
        if self.spec.depth == 0 {
            return ParamVector::from_entries(entries);
        }
        let mut g = if self.spec.upscale > 1 {
            pixel_shuffle_backward(grad_out, self.spec.upscale)
        } else {
            grad_out.clone()
        };
        for i in (0..self.spec.depth).rev() {
            let (dw, db) = conv2d_backward_params(&tape.layer_inputs[i], &g, KERNEL, KERNEL, 1, PAD);
            entries[2 * i].1 = dw.into_dyn();
            entries[2 * i + 1].1 = db.into_dyn();
            if i > 0 {
                let (h, w, _) = tape.layer_inputs[i].dim();
                let gin = conv2d_backward_input(&g, &self.layer_weight(i), 1, PAD, h, w);
                g = leaky_relu_backward(&tape.preacts[i - 1], &gin);
            }
        }
        ParamVector::from_entries(entries)
    }

    /// In-place parameter update, entry-aligned with [`extract_params`].
    /// No-op on frozen models.
    pub fn update_params(&mut self, f: impl FnMut(usize, &mut ArrayD<f64>)) {
        if !self.trainable {
            return;
        }
        let mut f = f;
        for (i, (_, arr)) in self.params.entries.iter_mut().enumerate() {
            f(i, arr);
        }
    }
}

// rand 0.8's SeedableRng::seed_from_u64 lives on the trait; tiny shim so the
// constructor above reads cleanly.
trait SeedFromU64 {
    fn from_seed_u64(seed: u64) -> Self;
}

impl SeedFromU64 for rand_chacha::ChaCha8Rng {
    fn from_seed_u64(seed: u64) -> Self {
        <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed)
    }
}

/// Checkpoint metadata persisted next to the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct NamedArrayFile {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    arch: ArchSpec,
    meta: CheckpointMeta,
    trainable: bool,
    params: Vec<NamedArrayFile>,
}

const CHECKPOINT_FORMAT: &str = "dckd-checkpoint-v1";

/// Write a checkpoint. JSON floats round-trip bit-exactly.
pub fn save_checkpoint(model: &RestorationModel, meta: CheckpointMeta, path: &Path) -> Result<()> {
    let params = model
        .params
        .entries
        .iter()
        .map(|(name, arr)| NamedArrayFile {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            data: arr.iter().copied().collect(),
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        arch: model.spec,
        meta,
        trainable: model.trainable,
        params,
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(RestorationModel, CheckpointMeta)> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| CoreError::Schema {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(CoreError::Schema {
            path: path.display().to_string(),
            reason: format!("unknown format `{}`", file.format),
        });
    }
    let mut model = RestorationModel::new_seeded(file.arch, 0)?;
    let entries: Vec<(String, ArrayD<f64>)> = file
        .params
        .into_iter()
        .map(|p| {
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&p.shape), p.data).map_err(|_| {
                CoreError::Schema {
                    path: path.display().to_string(),
                    reason: format!("entry `{}` data does not match its shape", p.name),
                }
            })?;
            Ok((p.name, arr))
        })
        .collect::<Result<_>>()?;
    model.inject_params(&ParamVector::from_entries(entries))?;
    model.trainable = file.trainable;
    Ok((model, file.meta))
}
