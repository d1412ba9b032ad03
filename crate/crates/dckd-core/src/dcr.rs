//! Dynamic contrastive regularization: the EMA history-model schedule, the
//! dynamic negative-sample generator, and the dynamic contrastive loss.
//!
//! The history model is a lagged copy of the student, refreshed by an EMA
//! blend every `step` iterations with the interval growing geometrically.
//! Negatives are history-model reconstructions of randomly degraded inputs;
//! they anchor the lower bound of the solution space while the teacher
//! output anchors the upper bound.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::degradation::{sample_spec, DegradationPolicy, DegradationRanges, DegradationSpec};
use crate::encoder::FeatureEncoder;
use crate::error::CoreError;
use crate::image::Image;
use crate::models::{ArchSpec, ParamVector, RestorationModel};
use crate::parallel;
use crate::Result;

/// History-model parameters plus the growing-interval EMA schedule.
#[derive(Debug, Clone)]
pub struct EmaState {
    history_params: ParamVector,
    alpha: f64,
    step: u64,
    step_growth: f64,
    step_cap: u64,
    last_update_iter: u64,
}

/// Scheduling knobs for [`EmaState`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaSchedule {
    /// Attenuation rate: history <- alpha * history + (1 - alpha) * student.
    pub alpha: f64,
    /// Initial refresh interval s.
    pub initial_step: u64,
    /// Interval multiplier applied after every refresh.
    pub step_growth: f64,
    /// Upper bound on the interval.
    pub step_cap: u64,
}

impl EmaState {
    /// Start the schedule with the history initialized to a copy of the
    /// student at iteration 0.
    pub fn new(student_params: ParamVector, schedule: EmaSchedule) -> Result<Self> {
        if !(0.0..=1.0).contains(&schedule.alpha) {
            return Err(CoreError::param("dcr.alpha", "must lie in [0, 1]"));
        }
        if schedule.initial_step == 0 {
            return Err(CoreError::param("dcr.initial_step", "must be >= 1"));
        }
        if schedule.step_growth < 1.0 {
            return Err(CoreError::param("dcr.step_growth", "must be >= 1"));
        }
        if schedule.step_cap < schedule.initial_step {
            return Err(CoreError::param(
                "dcr.step_cap",
                "must be >= the initial step",
            ));
        }
        Ok(EmaState {
            history_params: student_params,
            alpha: schedule.alpha,
            step: schedule.initial_step,
            step_growth: schedule.step_growth,
            step_cap: schedule.step_cap,
            last_update_iter: 0,
        })
    }

    pub fn history_params(&self) -> &ParamVector {
        &self.history_params
    }

    /// Current refresh interval s; never decreases over a run.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn last_update_iter(&self) -> u64 {
        self.last_update_iter
    }

    /// Refresh the history model if `step` iterations have elapsed since the
    /// last refresh: `history <- alpha * history + (1 - alpha) * student`,
    /// then grow the interval. Returns whether a refresh fired.
    ///
    /// The interval is measured from the last refresh, so with s doubling
    /// from 1000 the refreshes land at t = 1000, 3000, 7000, ...
    pub fn maybe_ema_update(&mut self, student_params: &ParamVector, t: u64) -> Result<bool> {
        self.history_params.check_structure(student_params)?;
        if t == 0 || t - self.last_update_iter < self.step {
            return Ok(false);
        }
        let alpha = self.alpha;
        self.history_params = self
            .history_params
            .zip_map(student_params, |h, s| alpha * h + (1.0 - alpha) * s)?;
        let grown = (self.step as f64 * self.step_growth).ceil() as u64;
        self.step = grown.max(self.step).min(self.step_cap);
        self.last_update_iter = t;
        Ok(true)
    }

    /// Materialize the frozen history model for negative generation.
    pub fn history_model(&self, spec: &ArchSpec) -> Result<RestorationModel> {
        let mut model = RestorationModel::new_seeded(*spec, 0)?;
        model.inject_params(&self.history_params)?;
        model.freeze();
        Ok(model)
    }
}

/// N negative images plus the degradation specs that produced them. The
/// images are plain values with no gradient linkage to the live student.
#[derive(Debug, Clone)]
pub struct NegativeBatch {
    pub images: Vec<Image>,
    pub specs: Vec<DegradationSpec>,
}

impl NegativeBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Generate N negatives: sample a degradation per negative, corrupt the
/// low-quality input, and reconstruct with the history model. The forwards
/// run in parallel after the specs are drawn sequentially.
pub fn generate_negatives(
    state: &EmaState,
    student_spec: &ArchSpec,
    lq: &Image,
    n: usize,
    policy: DegradationPolicy,
    ranges: &DegradationRanges,
    rng: &mut impl rand::Rng,
) -> Result<NegativeBatch> {
    if n == 0 {
        return Err(CoreError::param("dcr.num_negatives", "must be >= 1"));
    }
    let history = state.history_model(student_spec)?;
    let specs: Vec<DegradationSpec> = (0..n).map(|_| sample_spec(policy, ranges, rng)).collect();
    let images: Vec<Result<Image>> = parallel::map_collect(&specs, |spec| {
        let dirty = spec.apply(lq)?;
        history.forward(&dirty)
    });
    let images = images.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(NegativeBatch { images, specs })
}

fn check_contrastive_inputs(anchor: &Image, positive: &Image, negatives: &NegativeBatch, eps: f64) -> Result<()> {
    if negatives.is_empty() {
        return Err(CoreError::param("negatives", "need at least one negative"));
    }
    if !(eps > 0.0) {
        return Err(CoreError::param("dcr.eps", "must be > 0"));
    }
    let shape = anchor.shape();
    if positive.shape() != shape {
        return Err(CoreError::shape("dcl positive", format!("{shape:?}"), format!("{:?}", positive.shape())));
    }
    for (j, img) in negatives.images.iter().enumerate() {
        if img.shape() != shape {
            return Err(CoreError::shape(
                format!("dcl negative {j}"),
                format!("{shape:?}"),
                format!("{:?}", img.shape()),
            ));
        }
    }
    Ok(())
}

fn l1_sum(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}

/// Dynamic contrastive loss over the encoder pyramid:
/// sum_i  w_i * |f_i(anchor) - f_i(positive)|_1
///            / (sum_j |f_i(anchor) - f_i(negative_j)|_1 + eps).
///
/// Gradients flow through the anchor branch only; positives and negatives
/// are treated as constants.
pub fn dynamic_contrastive_loss<E: FeatureEncoder>(
    anchor: &Image,
    positive: &Image,
    negatives: &NegativeBatch,
    encoder: &E,
    eps: f64,
) -> Result<f64> {
    check_contrastive_inputs(anchor, positive, negatives, eps)?;
    let anc = encoder.encode(anchor)?;
    let pos = encoder.encode(positive)?;
    let negs: Vec<_> = negatives
        .images
        .iter()
        .map(|img| encoder.encode(img))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    for i in 0..encoder.num_levels() {
        let num = l1_sum(&anc.levels[i], &pos.levels[i]);
        let den: f64 = negs.iter().map(|n| l1_sum(&anc.levels[i], &n.levels[i])).sum();
        loss += encoder.level_weights()[i] * num / (den + eps);
    }
    Ok(loss)
}

/// Loss value plus its gradient with respect to the anchor image.
pub fn dynamic_contrastive_loss_with_grad<E: FeatureEncoder>(
    anchor: &Image,
    positive: &Image,
    negatives: &NegativeBatch,
    encoder: &E,
    eps: f64,
) -> Result<(f64, Array3<f64>)> {
    check_contrastive_inputs(anchor, positive, negatives, eps)?;
    let (anc, tape) = encoder.encode_with_tape(anchor)?;
    let pos = encoder.encode(positive)?;
    let negs: Vec<_> = negatives
        .images
        .iter()
        .map(|img| encoder.encode(img))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut level_grads: Vec<Array3<f64>> = Vec::with_capacity(encoder.num_levels());
    for i in 0..encoder.num_levels() {
        let w = encoder.level_weights()[i];
        let fa = &anc.levels[i];
        let fp = &pos.levels[i];
        let num = l1_sum(fa, fp);
        let den: f64 = negs.iter().map(|n| l1_sum(fa, &n.levels[i])).sum();
        let denom = den + eps;
        loss += w * num / denom;

        // d(term)/d(fa) = w * [sign(fa - fp) / denom
        //                      - num / denom^2 * sum_j sign(fa - fn_j)]
        let mut grad = Array3::<f64>::zeros(fa.raw_dim());
        {
            let g = grad.as_slice_mut().expect("standard layout");
            let fa_s = fa.as_slice().expect("standard layout");
            let fp_s = fp.as_slice().expect("standard layout");
            let scale_num = w / denom;
            for (gi, (a, p)) in g.iter_mut().zip(fa_s.iter().zip(fp_s)) {
                *gi = scale_num * (a - p).signum_or_zero();
            }
            let scale_den = w * num / (denom * denom);
            for neg in &negs {
                let fn_s = neg.levels[i].as_slice().expect("standard layout");
                for (gi, (a, nv)) in g.iter_mut().zip(fa_s.iter().zip(fn_s)) {
                    *gi -= scale_den * (a - nv).signum_or_zero();
                }
            }
        }
        level_grads.push(grad);
    }
    let input_grad = encoder.input_gradient(&tape, &level_grads);
    Ok((loss, input_grad))
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    /// Subgradient of |x| with the 0 -> 0 convention.
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}
