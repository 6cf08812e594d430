use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::objective::{
    build_positive_set, ema_update, entropy, teacher_distribution, tube_objective, update_center,
    DistillConfig, DistillState, PositivePairSet, TubeLoss, TubeStudentIndex,
};
use super::optim::{clip_grad_norm, momentum_at, AdamW, OptimConfig};
use crate::encoder::{Encoder, Mat, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::viewgen::ViewBatch;

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub distill: DistillState,
    pub optim: AdamW,
    pub step: usize,
}

impl TrainState {
    /// Teacher starts as a copy of the student.
    pub fn new(student: ParamStore, config: &DistillConfig, output_dim: usize) -> Self {
        TrainState {
            teacher: student.clone(),
            optim: AdamW::new(&student),
            distill: DistillState::new(config, output_dim),
            student,
            step: 0,
        }
    }
}

/// Result of one tube's forward/backward pass.
#[derive(Debug, Clone)]
pub struct TubePass {
    pub loss: TubeLoss,
    /// d total / d student params, in [`ParamStore`] order.
    pub student_grads: Vec<Mat>,
    /// Whatever reached the teacher leaves; always `None`.
    pub teacher_grads: Vec<Option<Mat>>,
    /// One row per teacher view, in frame order.
    pub teacher_logits: Mat,
    pub pairs: PositivePairSet,
    /// Mean entropy of the teacher targets.
    pub teacher_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub local: Option<f64>,
    pub mask: Option<f64>,
    pub temp: Option<f64>,
    pub total: f64,
    pub momentum: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tubes: usize,
    /// Mean teacher-target entropy; `ln(dim)` signals a collapsed teacher.
    pub teacher_entropy: f64,
}

fn accumulate(into: &mut [Mat], grads: &[Option<Mat>]) {
    for (acc, g) in into.iter_mut().zip(grads) {
        if let Some(g) = g {
            *acc += g;
        }
    }
}

/// Teacher and student passes of one tube recorded on a single tape. The
/// teacher leaves never require gradients. Student families whose loss
/// weight is zero are not evaluated.
pub fn tube_pass(
    encoder: &Encoder,
    student: &ParamStore,
    teacher: &ParamStore,
    state: &DistillState,
    batch: &ViewBatch,
) -> Result<TubePass> {
    let mut tape = Tape::new();
    let t_images: Vec<&Image> = batch.teacher_views.iter().map(|v| &v.image).collect();
    let tv = encoder.forward_batch(teacher, &mut tape, &t_images, false)?;
    let teacher_logits = tape.value(tv.logits).clone();
    let mut targets = BTreeMap::new();
    for (row, view) in teacher_logits.rows().into_iter().zip(&batch.teacher_views) {
        let z = row.to_vec();
        targets.insert(view.t, teacher_distribution(&z, &state.center, state.tau_teacher));
    }
    let teacher_entropy = targets.values().map(|q| entropy(q)).sum::<f64>() / targets.len().max(1) as f64;
    let valid: BTreeSet<usize> = batch.active_frames().into_iter().collect();
    let pairs = build_positive_set(&batch.track_ids, &valid);

    let w = &state.weights;
    let dim = teacher_logits.ncols();
    let mut index = TubeStudentIndex::default();
    let mut seeds = Vec::new();
    let mut param_vars = Vec::new();

    let want_masked = (w.mask > 0.0 || w.temp > 0.0) && !batch.student_masked_views.is_empty();
    let masked = if want_masked {
        let imgs: Vec<&Image> = batch.student_masked_views.iter().map(|v| &v.image).collect();
        let fv = encoder.forward_batch(student, &mut tape, &imgs, true)?;
        index.masked = batch.student_masked_views.iter().map(|v| (v.t, v.k)).collect();
        param_vars.push(fv.params.clone());
        Some(fv.logits)
    } else {
        None
    };
    let want_local = w.local > 0.0 && !batch.local_views.is_empty();
    let local = if want_local {
        let imgs: Vec<&Image> = batch.local_views.iter().map(|v| &v.image).collect();
        let fv = encoder.forward_batch(student, &mut tape, &imgs, true)?;
        index.local = batch.local_views.iter().map(|v| (v.t, v.r)).collect();
        param_vars.push(fv.params.clone());
        Some(fv.logits)
    } else {
        None
    };
    let masked_logits = masked.map_or_else(|| Mat::zeros((0, dim)), |v| tape.value(v).clone());
    let local_logits = local.map_or_else(|| Mat::zeros((0, dim)), |v| tape.value(v).clone());
    let pairs = if want_masked { pairs } else { PositivePairSet::default() };
    let loss = tube_objective(&targets, &index, &masked_logits, &local_logits, &pairs, state)?;

    if let Some(v) = masked {
        seeds.push((v, loss.grad_masked.clone()));
    }
    if let Some(v) = local {
        seeds.push((v, loss.grad_local.clone()));
    }
    let mut student_grads: Vec<Mat> = student.params.iter().map(|p| Mat::zeros(p.value.dim())).collect();
    let mut teacher_grads = vec![None; teacher.len()];
    if !seeds.is_empty() {
        let grads = tape.backward(&seeds);
        for pv in &param_vars {
            let g: Vec<Option<Mat>> = pv.iter().map(|v| grads[v.index()].clone()).collect();
            accumulate(&mut student_grads, &g);
        }
        teacher_grads = tv.params.iter().map(|v| grads[v.index()].clone()).collect();
    }
    Ok(TubePass {
        loss,
        student_grads,
        teacher_grads,
        teacher_logits,
        pairs,
        teacher_entropy,
    })
}

/// Optimisation driver for one encoder architecture.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub encoder: Encoder,
    pub distill: DistillConfig,
    pub optim: OptimConfig,
    pub total_steps: usize,
}

fn mean_active(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Trainer {
    /// One optimisation step over `batches` (the effective batch).
    /// Gradients and losses are averaged over tubes in a fixed order, so the
    /// result does not depend on thread scheduling.
    pub fn train_step(&self, state: &mut TrainState, batches: &[ViewBatch]) -> Result<StepStats> {
        if batches.is_empty() {
            return Err(Error::Data("empty training batch".into()));
        }
        let lr = self.optim.lr_at(state.step, self.total_steps);
        let mu = momentum_at(
            self.distill.momentum,
            self.distill.momentum_final,
            state.step,
            self.total_steps,
        );
        state.distill.momentum = mu;

        let passes: Vec<TubePass> = batches
            .par_iter()
            .map(|b| tube_pass(&self.encoder, &state.student, &state.teacher, &state.distill, b))
            .collect::<Result<_>>()?;

        for (i, p) in passes.iter().enumerate() {
            let finite_grads = p.student_grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
            if !p.loss.total.is_finite() || !finite_grads {
                return Err(Error::Numeric(format!(
                    "step {} tube {i}: local {:?} mask {:?} temp {:?} total {} (finite grads: {finite_grads})",
                    state.step, p.loss.local, p.loss.mask, p.loss.temp, p.loss.total
                )));
            }
        }

        let n = passes.len() as f64;
        let mut grads: Vec<Mat> = state.student.params.iter().map(|p| Mat::zeros(p.value.dim())).collect();
        for p in &passes {
            for (acc, g) in grads.iter_mut().zip(&p.student_grads) {
                *acc += g;
            }
        }
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v / n);
        }
        let grad_norm = clip_grad_norm(&mut grads, self.optim.grad_clip);
        state.optim.update(&mut state.student, &grads, lr, &self.optim)?;
        ema_update(&mut state.teacher, &state.student, mu)?;

        let rows: usize = passes.iter().map(|p| p.teacher_logits.nrows()).sum();
        let dim = state.distill.center.len();
        let mut all = Mat::zeros((rows, dim));
        let mut r = 0;
        for p in &passes {
            let k = p.teacher_logits.nrows();
            all.slice_mut(ndarray::s![r..r + k, ..]).assign(&p.teacher_logits);
            r += k;
        }
        let rate = state.distill.center_rate;
        update_center(&mut state.distill.center, &all, rate);

        let stats = StepStats {
            step: state.step,
            local: mean_active(passes.iter().map(|p| p.loss.local)),
            mask: mean_active(passes.iter().map(|p| p.loss.mask)),
            temp: mean_active(passes.iter().map(|p| p.loss.temp)),
            total: passes.iter().map(|p| p.loss.total).sum::<f64>() / n,
            momentum: mu,
            lr,
            grad_norm,
            tubes: passes.len(),
            teacher_entropy: passes.iter().map(|p| p.teacher_entropy).sum::<f64>() / n,
        };
        state.step += 1;
        Ok(stats)
    }
}
