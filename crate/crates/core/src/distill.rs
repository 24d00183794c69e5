//! The progressive self-distillation objective and one optimizer step.
//!
//! For a batch `x` with labels `y` and `m` self-distillations the objective is
//!
//! ```text
//! L = L_g(x, y) + Σ_{i=1..m} ( ω_l · L_l(x̄_{i−1}, y) + ω_d · L_d(x, x̄_i) ),   x̄_0 = x
//! ```
//!
//! where `L_g` is teacher cross-entropy on the clean image, `L_l` trains the
//! class-response head on detached features, and `L_d` is the KL divergence
//! from the teacher's distribution on `x` to the student's on `x̄_i`. Each
//! `x̄_i` is `x̄_{i−1}` with its top-η response cells erased.

use serde::{Deserialize, Serialize};

use crate::error::{PsdError, Result};
use crate::graph::{Graph, Var};
use crate::masking::{next_stage, MaskedImage};
use crate::model::{crm_logits, forward_head, BoundModel, ModelBundle};
use crate::optim::Sgd;
use crate::tensor::Tensor;

/// Distillation weight for epoch `epoch`: `α·exp(−5(1 − e/β)²)` before `β`,
/// `α` afterwards.
pub fn ramp_up(epoch: usize, alpha: f64, beta: usize) -> f64 {
    if epoch >= beta {
        return alpha;
    }
    let r = 1.0 - epoch as f64 / beta as f64;
    alpha * (-5.0 * r * r).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub alpha: f64,
    pub beta: usize,
    pub omega_l: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 5,
            omega_l: 1.0,
        }
    }
}

impl Schedule {
    pub fn omega_d(&self, epoch: usize) -> f64 {
        ramp_up(epoch, self.alpha, self.beta)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_g: f64,
    /// `l_l[i]` is computed on `x̄_i`, `i = 0..m−1`.
    pub l_l: Vec<f64>,
    /// `l_d[i]` compares `x` with `x̄_{i+1}`.
    pub l_d: Vec<f64>,
    pub omega_d: f64,
    pub omega_l: f64,
    /// Per-stage distillation weights actually applied (differs from
    /// `omega_d` only for the step-by-step variant).
    pub stage_omega_d: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// `l_g + Σ (ω_l·l_l[i] + ω_d,i·l_d[i])` recomputed from the parts.
    pub fn recompose(&self) -> f64 {
        let mut t = self.l_g;
        for (i, l) in self.l_l.iter().enumerate() {
            t += self.omega_l * l;
            if let (Some(d), Some(w)) = (self.l_d.get(i), self.stage_omega_d.get(i)) {
                t += w * d;
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Configuration of the self-distillation objective.
#[derive(Clone, Debug, PartialEq)]
pub struct PsdObjective {
    pub m: usize,
    pub eta: f64,
    pub schedule: Schedule,
    /// Per-channel value written into erased pixels.
    pub fill: Vec<f64>,
    /// Step-by-step variant: total epochs split evenly across stages, only the
    /// current stage's distillation term is active.
    pub step_by_step: Option<usize>,
}

impl PsdObjective {
    pub fn new(m: usize, eta: f64, schedule: Schedule) -> Self {
        Self {
            m,
            eta,
            schedule,
            fill: vec![0.0; 3],
            step_by_step: None,
        }
    }

    /// Distillation weight applied to stage `stage` (1-based) at `epoch`.
    pub fn stage_weight(&self, stage: usize, epoch: usize) -> f64 {
        let w = self.schedule.omega_d(epoch);
        match self.step_by_step {
            Some(total) if total > 0 => {
                let active = (epoch * self.m / total).min(self.m - 1) + 1;
                if stage == active {
                    w
                } else {
                    0.0
                }
            }
            _ => w,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// `L_g + ω_l·L_l(x)`; the class-response head still learns so that the
    /// baseline has a response map to inspect.
    CrossEntropy { omega_l: f64 },
    Psd(PsdObjective),
}

/// A batch of images sharing one size.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Vec<MaskedImage>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Vec<MaskedImage>, labels: Vec<usize>) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(PsdError::shape(format!(
                "batch needs matching non-empty images/labels, got {}/{}",
                images.len(),
                labels.len()
            )));
        }
        let (c, h, w) = (images[0].channels, images[0].h, images[0].w);
        if images.iter().any(|im| (im.channels, im.h, im.w) != (c, h, w)) {
            return Err(PsdError::shape("batch images differ in size"));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        stack(&self.images)
    }
}

pub fn stack(images: &[MaskedImage]) -> Tensor {
    let first = &images[0];
    let mut data = Vec::with_capacity(images.len() * first.pixels.len());
    for im in images {
        data.extend_from_slice(&im.pixels);
    }
    Tensor::new(&[images.len(), first.channels, first.h, first.w], data).expect("uniform batch")
}

/// `L_g`: teacher cross-entropy on the original image.
pub fn classification_loss(g: &mut Graph, model: &BoundModel, x: Var, labels: &[usize]) -> Result<Var> {
    let emb = model.embed(g, x)?;
    let logits = forward_head(g, &model.teacher, emb.s_final)?;
    g.cross_entropy(logits, labels)
}

/// `L_l`: cross-entropy of `GAP(stop_gradient(S_tap))·Θ` on `x̄`.
pub fn locating_loss(g: &mut Graph, model: &BoundModel, x_bar: Var, labels: &[usize]) -> Result<Var> {
    let emb = model.embed(g, x_bar)?;
    let z = crm_logits(g, model.theta, emb.s_tap)?;
    g.cross_entropy(z, labels)
}

/// `L_d`: KL from the teacher on `x` to the student on `x̄`.
pub fn distillation_loss(g: &mut Graph, model: &BoundModel, x: Var, x_bar: Var) -> Result<Var> {
    if g.shape(x) != g.shape(x_bar) {
        return Err(PsdError::shape("distillation inputs differ in shape"));
    }
    let et = model.embed(g, x)?;
    let t = forward_head(g, &model.teacher, et.s_final)?;
    let es = model.embed(g, x_bar)?;
    let s = forward_head(g, &model.student, es.s_final)?;
    g.kl_div(t, s)
}

/// Graph output of [`objective_loss`].
pub struct LossGraph {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub teacher_logits: Var,
    /// Masked images `x̄_1 … x̄_m` per stage (empty for cross-entropy).
    pub chain: Vec<Vec<MaskedImage>>,
}

/// Records the full objective on `g`. Each stage's forward pass serves both
/// its own loss terms and the response map that builds the next stage.
pub fn objective_loss(
    g: &mut Graph,
    model: &BoundModel,
    batch: &Batch,
    objective: &Objective,
    epoch: usize,
) -> Result<LossGraph> {
    let x = g.constant(&batch.to_tensor());
    let emb = model.embed(g, x)?;
    let teacher_logits = forward_head(g, &model.teacher, emb.s_final)?;
    let l_g = g.cross_entropy(teacher_logits, &batch.labels)?;
    let mut breakdown = LossBreakdown {
        l_g: g.scalar_value(l_g),
        ..LossBreakdown::default()
    };
    let mut total = l_g;
    let mut chain = Vec::new();

    match objective {
        Objective::CrossEntropy { omega_l } => {
            let z = crm_logits(g, model.theta, emb.s_tap)?;
            let l_l = g.cross_entropy(z, &batch.labels)?;
            breakdown.l_l.push(g.scalar_value(l_l));
            breakdown.omega_l = *omega_l;
            let term = g.scale(l_l, *omega_l);
            total = g.add(total, term)?;
        }
        Objective::Psd(psd) => {
            if psd.m == 0 {
                return Err(PsdError::config("m", "need at least one self-distillation"));
            }
            let omega_l = psd.schedule.omega_l;
            breakdown.omega_l = omega_l;
            breakdown.omega_d = psd.schedule.omega_d(epoch);
            let theta = g.tensor(model.theta);
            let mut prev_images = batch.images.clone();
            let mut prev_tap = emb.s_tap;
            for stage in 1..=psd.m {
                let z = crm_logits(g, model.theta, prev_tap)?;
                let l_l = g.cross_entropy(z, &batch.labels)?;

                let tap_shape = g.shape(prev_tap).to_vec();
                let (fh, fw) = (tap_shape[2], tap_shape[3]);
                let per = tap_shape[1] * fh * fw;
                let taps = g.value(prev_tap);
                let next: Vec<MaskedImage> = prev_images
                    .iter()
                    .zip(&batch.labels)
                    .enumerate()
                    .map(|(b, (im, &y))| {
                        next_stage(im, &taps[b * per..(b + 1) * per], fh, fw, &theta, y, psd.eta, &psd.fill)
                            .map(|(n, _, _)| n)
                    })
                    .collect::<Result<_>>()?;

                let xs = g.constant(&stack(&next));
                let emb_s = model.embed(g, xs)?;
                let student_logits = forward_head(g, &model.student, emb_s.s_final)?;
                let l_d = g.kl_div(teacher_logits, student_logits)?;

                let w_d = psd.stage_weight(stage, epoch);
                breakdown.l_l.push(g.scalar_value(l_l));
                breakdown.l_d.push(g.scalar_value(l_d));
                breakdown.stage_omega_d.push(w_d);

                let tl = g.scale(l_l, omega_l);
                let td = g.scale(l_d, w_d);
                let both = g.add(tl, td)?;
                total = g.add(total, both)?;

                prev_tap = emb_s.s_tap;
                chain.push(next.clone());
                prev_images = next;
            }
        }
    }
    breakdown.total = g.scalar_value(total);
    Ok(LossGraph {
        loss: total,
        breakdown,
        teacher_logits,
        chain,
    })
}

/// Convenience wrapper: the objective's breakdown without applying an update.
pub fn total_loss(bundle: &mut ModelBundle, batch: &Batch, objective: &Objective, epoch: usize) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = bundle.bind(&mut g);
    Ok(objective_loss(&mut g, &bound, batch, objective, epoch)?.breakdown)
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    /// Teacher top-1 hits on the clean batch, measured before the update.
    pub correct: usize,
    /// Masked images `x̄_1 … x̄_m` built during the step, per stage.
    pub chain: Vec<Vec<MaskedImage>>,
}

/// Clears gradients, records the objective, back-propagates and applies one
/// SGD update to every parameter of the bundle.
pub fn train_step(
    bundle: &mut ModelBundle,
    batch: &Batch,
    opt: &mut Sgd,
    objective: &Objective,
    epoch: usize,
) -> Result<StepOutcome> {
    bundle.zero_grad();
    let (losses, correct, chain) = {
        let mut g = Graph::new();
        let bound = bundle.bind(&mut g);
        let out = objective_loss(&mut g, &bound, batch, objective, epoch)?;
        let c = g.shape(out.teacher_logits)[1];
        let correct = g
            .value(out.teacher_logits)
            .chunks(c)
            .zip(&batch.labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        if !out.breakdown.is_finite() {
            return Err(PsdError::Numeric {
                epoch,
                batch: 0,
                message: format!("loss breakdown {:?}", out.breakdown),
            });
        }
        g.backward(out.loss)?;
        (out.breakdown, correct, out.chain)
    };
    opt.step(bundle.params_mut());
    Ok(StepOutcome { losses, correct, chain })
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
