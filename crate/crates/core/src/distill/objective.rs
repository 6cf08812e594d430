//! Teacher/student distributions, cross-entropy terms and their gradients
//! with respect to student logits.
//!
//! Loss terms that have nothing to average over are reported as `None`
//! ("inactive") rather than zero, and are skipped in the weighted total.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::encoder::Mat;
use crate::error::{Error, Result};
use crate::encoder::ParamStore;

/// Lower clip for student probabilities inside the log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub tau_student: f64,
    pub tau_teacher: f64,
    /// EMA momentum of the teacher at step 0.
    pub momentum: f64,
    /// Momentum reached at the last step under the cosine ramp; equal to
    /// `momentum` for a constant schedule.
    pub momentum_final: f64,
    pub lambda_local: f64,
    pub lambda_mask: f64,
    pub lambda_temp: f64,
    pub center_rate: f64,
    /// Teacher sees the foreground-union view; `false` gives it the
    /// unmasked view (control setting).
    pub teacher_masking: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau_student: 0.1,
            tau_teacher: 0.04,
            momentum: 0.996,
            momentum_final: 0.996,
            lambda_local: 1.0,
            lambda_mask: 0.5,
            lambda_temp: 0.5,
            center_rate: 0.9,
            teacher_masking: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tau_student > 0.0 && self.tau_teacher > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(0.0..=1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.momentum_final) {
            return bad("EMA momentum must lie in [0, 1]");
        }
        if self.lambda_local < 0.0 || self.lambda_mask < 0.0 || self.lambda_temp < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.center_rate) {
            return bad("center rate must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Everything the objective carries between steps besides the encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillState {
    pub center: Vec<f64>,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub center_rate: f64,
}

impl DistillState {
    pub fn new(config: &DistillConfig, dim: usize) -> Self {
        DistillState {
            center: vec![0.0; dim],
            tau_student: config.tau_student,
            tau_teacher: config.tau_teacher,
            momentum: config.momentum,
            weights: LossWeights {
                local: config.lambda_local,
                mask: config.lambda_mask,
                temp: config.lambda_temp,
            },
            center_rate: config.center_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub local: f64,
    pub mask: f64,
    pub temp: f64,
}

fn softmax(z: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = z.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

/// `softmax((z - c) / tau)`; used as a constant target.
pub fn teacher_distribution(logits: &[f64], center: &[f64], tau: f64) -> Vec<f64> {
    debug_assert_eq!(logits.len(), center.len());
    softmax(logits.iter().zip(center).map(|(z, c)| (z - c) / tau))
}

/// `softmax(z / tau)`.
pub fn student_distribution(logits: &[f64], tau: f64) -> Vec<f64> {
    softmax(logits.iter().map(|z| z / tau))
}

/// `H(q, p) = -sum q log max(p, eps)`.
pub fn cross_entropy(q: &[f64], p: &[f64]) -> f64 {
    -q.iter()
        .zip(p)
        .map(|(qu, pu)| qu * pu.max(PROB_EPS).ln())
        .sum::<f64>()
}

pub fn entropy(q: &[f64]) -> f64 {
    -q.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(qu, _)| **qu > 0.0)
        .map(|(qu, pu)| qu * (qu.ln() - pu.max(PROB_EPS).ln()))
        .sum()
}

/// Adds `scale * dH(q, softmax(z / tau)) / dz` into `out`.
fn add_cross_entropy_grad(q: &[f64], p: &[f64], tau: f64, scale: f64, out: &mut [f64]) {
    let active_mass: f64 = q.iter().zip(p).filter(|(_, pu)| **pu > PROB_EPS).map(|(qu, _)| qu).sum();
    for ((o, qu), pu) in out.iter_mut().zip(q).zip(p) {
        let own = if *pu > PROB_EPS { *qu } else { 0.0 };
        *o += scale * (pu * active_mass - own) / tau;
    }
}

fn target<'a>(teacher: &'a BTreeMap<usize, Vec<f64>>, t: usize) -> Result<&'a [f64]> {
    teacher
        .get(&t)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Data(format!("no teacher target for frame {t}")))
}

/// Mean of `H(q_t, p_{t,k})` over every masked view.
pub fn loss_mask(
    teacher: &BTreeMap<usize, Vec<f64>>,
    student_masked: &[((usize, usize), Vec<f64>)],
) -> Result<Option<f64>> {
    if student_masked.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for ((t, _), p) in student_masked {
        sum += cross_entropy(target(teacher, *t)?, p);
    }
    Ok(Some(sum / student_masked.len() as f64))
}

/// Cross-time positives `(t, k, t')` of one tube.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PositivePairSet {
    pub pairs: Vec<(usize, usize, usize)>,
}

impl PositivePairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Every `(t, k, t')` with `t' != t`, `t'` a valid teacher frame, and some
/// object at `t'` sharing the track id of `(t, k)`. Sorted.
pub fn build_positive_set(
    track_ids: &BTreeMap<(usize, usize), u32>,
    valid_teacher_frames: &BTreeSet<usize>,
) -> PositivePairSet {
    let mut frames_of: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for (&(t, _), &id) in track_ids {
        frames_of.entry(id).or_default().insert(t);
    }
    let mut pairs = Vec::new();
    for (&(t, k), id) in track_ids {
        for &t2 in &frames_of[id] {
            if t2 != t && valid_teacher_frames.contains(&t2) {
                pairs.push((t, k, t2));
            }
        }
    }
    pairs.sort_unstable();
    PositivePairSet { pairs }
}

/// Mean of `H(q_{t'}, p_{t,k})` over the positive set.
pub fn loss_temp(
    teacher: &BTreeMap<usize, Vec<f64>>,
    student_masked: &BTreeMap<(usize, usize), Vec<f64>>,
    pairs: &PositivePairSet,
) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for &(t, k, t2) in &pairs.pairs {
        let p = student_masked
            .get(&(t, k))
            .ok_or_else(|| Error::Data(format!("no masked view for ({t}, {k})")))?;
        sum += cross_entropy(target(teacher, t2)?, p);
    }
    Ok(Some(sum / pairs.len() as f64))
}

/// Mean of `H(q_t, p_{t,r})` over every local view.
pub fn loss_local(
    teacher: &BTreeMap<usize, Vec<f64>>,
    locals: &[((usize, usize), Vec<f64>)],
) -> Result<Option<f64>> {
    if locals.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for ((t, _), p) in locals {
        sum += cross_entropy(target(teacher, *t)?, p);
    }
    Ok(Some(sum / locals.len() as f64))
}

/// Weighted sum of the active terms.
pub fn total_loss(local: Option<f64>, mask: Option<f64>, temp: Option<f64>, w: &LossWeights) -> f64 {
    [(local, w.local), (mask, w.mask), (temp, w.temp)]
        .iter()
        .filter_map(|(v, l)| v.map(|v| v * l))
        .sum()
}

/// `teacher <- mu * teacher + (1 - mu) * student`.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, momentum: f64) -> Result<()> {
    teacher.check_congruent(student)?;
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        ndarray::Zip::from(&mut t.value)
            .and(&s.value)
            .for_each(|tv, &sv| *tv = momentum * *tv + (1.0 - momentum) * sv);
    }
    Ok(())
}

/// `c <- rate * c + (1 - rate) * mean(rows)`; unchanged for an empty batch.
pub fn update_center(center: &mut [f64], teacher_logits: &Mat, rate: f64) {
    if teacher_logits.nrows() == 0 {
        return;
    }
    let n = teacher_logits.nrows() as f64;
    for (j, c) in center.iter_mut().enumerate() {
        let mean = teacher_logits.column(j).sum() / n;
        *c = rate * *c + (1.0 - rate) * mean;
    }
}

/// Student views of one tube, identified by frame and slot.
#[derive(Debug, Clone, Default)]
pub struct TubeStudentIndex {
    /// `(t, k)` of each row of the masked-view logits.
    pub masked: Vec<(usize, usize)>,
    /// `(t, r)` of each row of the local-view logits.
    pub local: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TubeLoss {
    pub local: Option<f64>,
    pub mask: Option<f64>,
    pub temp: Option<f64>,
    pub total: f64,
    /// d total / d masked logits.
    pub grad_masked: Mat,
    /// d total / d local logits.
    pub grad_local: Mat,
}

/// Loss of one tube and its gradient with respect to the student logits.
///
/// `teacher` maps frames to their (constant) target distributions.
pub fn tube_objective(
    teacher: &BTreeMap<usize, Vec<f64>>,
    index: &TubeStudentIndex,
    masked_logits: &Mat,
    local_logits: &Mat,
    pairs: &PositivePairSet,
    state: &DistillState,
) -> Result<TubeLoss> {
    if masked_logits.nrows() != index.masked.len() || local_logits.nrows() != index.local.len() {
        return Err(Error::shape(
            format!("{} masked / {} local rows", index.masked.len(), index.local.len()),
            format!("{} / {}", masked_logits.nrows(), local_logits.nrows()),
        ));
    }
    let tau = state.tau_student;
    let w = &state.weights;
    let p_masked: Vec<Vec<f64>> = masked_logits
        .rows()
        .into_iter()
        .map(|r| student_distribution(r.as_slice().expect("standard layout"), tau))
        .collect();
    let p_local: Vec<Vec<f64>> = local_logits
        .rows()
        .into_iter()
        .map(|r| student_distribution(r.as_slice().expect("standard layout"), tau))
        .collect();

    let masked_pairs: Vec<((usize, usize), Vec<f64>)> =
        index.masked.iter().copied().zip(p_masked.iter().cloned()).collect();
    let local_pairs: Vec<((usize, usize), Vec<f64>)> =
        index.local.iter().copied().zip(p_local.iter().cloned()).collect();
    let masked_map: BTreeMap<(usize, usize), Vec<f64>> = masked_pairs.iter().cloned().collect();
    let row_of: BTreeMap<(usize, usize), usize> =
        index.masked.iter().enumerate().map(|(i, tk)| (*tk, i)).collect();

    let mask = loss_mask(teacher, &masked_pairs)?;
    let temp = loss_temp(teacher, &masked_map, pairs)?;
    let local = loss_local(teacher, &local_pairs)?;
    let total = total_loss(local, mask, temp, w);

    let mut grad_masked = Mat::zeros(masked_logits.dim());
    let mut grad_local = Mat::zeros(local_logits.dim());
    if mask.is_some() && w.mask != 0.0 {
        let scale = w.mask / index.masked.len() as f64;
        for (i, &(t, _)) in index.masked.iter().enumerate() {
            let out = grad_masked.row_mut(i).into_slice().expect("standard layout");
            add_cross_entropy_grad(target(teacher, t)?, &p_masked[i], tau, scale, out);
        }
    }
    if temp.is_some() && w.temp != 0.0 {
        let scale = w.temp / pairs.len() as f64;
        for &(t, k, t2) in &pairs.pairs {
            let i = row_of[&(t, k)];
            let out = grad_masked.row_mut(i).into_slice().expect("standard layout");
            add_cross_entropy_grad(target(teacher, t2)?, &p_masked[i], tau, scale, out);
        }
    }
    if local.is_some() && w.local != 0.0 {
        let scale = w.local / index.local.len() as f64;
        for (i, &(t, _)) in index.local.iter().enumerate() {
            let out = grad_local.row_mut(i).into_slice().expect("standard layout");
            add_cross_entropy_grad(target(teacher, t)?, &p_local[i], tau, scale, out);
        }
    }
    Ok(TubeLoss {
        local,
        mask,
        temp,
        total,
        grad_masked,
        grad_local,
    })
}
