//! Stepping stones and the full block-wise distillation objective.
//!
//! Stone `i` feeds the student's block-`i` feature through connector `C_i`
//! into the frozen teacher's remaining blocks and classifier:
//!
//! ```text
//! N_i = T_c ∘ T_n ∘ … ∘ T_{i+1} ∘ C_i ∘ S_i ∘ … ∘ S_1
//! ```
//!
//! During training the student's features are computed once and reused by
//! every stone. The objective is
//!
//! ```text
//! L_task    = CE(Y^S) + Σ_i c_i·CE(Y^{N_i})
//! L_distill = d(Y^S, Y^T) + Σ_i c_i·d(Y^{N_i}, Y^T)
//! L_cross   = d(Y^S, Y^ens) + Σ_i c_i·d(Y^{N_i}, Y^ens)
//! L         = α·L_task + w(e)·β·L_distill + w(e)·γ·L_cross
//! ```
//!
//! with `c_i = 2^{i−n}`, `Y^ens` the (detached) mean of the active stone
//! logits, and `w(e)` the linear warmup factor.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{task_loss, LogitDistance, Targets};
use crate::nn::{CompositeNet, Connector, FactoryPair, Mode};
use crate::tensor::Tensor;

/// Which objective terms take part. `L^S_task` is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub student_distill: bool,
    pub stone_task: bool,
    pub stone_distill: bool,
    pub cross: bool,
}

impl Default for ObjectiveTerms {
    fn default() -> Self {
        ObjectiveTerms {
            student_distill: true,
            stone_task: true,
            stone_distill: true,
            cross: true,
        }
    }
}

/// Loss weights, temperature, stone selection and warmup.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillPlan {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    n_blocks: usize,
    active: BTreeSet<usize>,
    pub warmup_epochs: usize,
    pub terms: ObjectiveTerms,
    /// Scale stone terms inside `L_cross` by `2^{i−n}` as well.
    pub cross_coefficients: bool,
}

impl DistillPlan {
    /// Plan with every stone active and all weights 1.
    pub fn new(n_blocks: usize, temperature: f64) -> Result<DistillPlan> {
        DistillPlan::with_stones(n_blocks, temperature, 1..=n_blocks)
    }

    pub fn with_stones(n_blocks: usize, temperature: f64, stones: impl IntoIterator<Item = usize>) -> Result<DistillPlan> {
        if n_blocks == 0 {
            return Err(Error::Config("plan needs at least one block".into()));
        }
        let plan = DistillPlan {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            temperature,
            n_blocks,
            active: BTreeSet::new(),
            warmup_epochs: 0,
            terms: ObjectiveTerms::default(),
            cross_coefficients: true,
        };
        plan.prune_stones(&stones.into_iter().collect())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite nonnegative weight, got {v}")));
            }
        }
        LogitDistance::kl(self.temperature)?;
        if let Some(&bad) = self.active.iter().find(|&&i| i == 0 || i > self.n_blocks) {
            return Err(Error::Config(format!("stone {bad} outside 1..={}", self.n_blocks)));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn active_stones(&self) -> &BTreeSet<usize> {
        &self.active
    }

    /// `2^{i−n}`: the last stone has weight 1, each earlier one half the next.
    pub fn stone_coefficient(&self, i: usize) -> f64 {
        2f64.powi(i as i32 - self.n_blocks as i32)
    }

    pub fn stone_coefficients(&self) -> BTreeMap<usize, f64> {
        self.active.iter().map(|&i| (i, self.stone_coefficient(i))).collect()
    }

    /// Keep only the stones in `keep`; coefficients of kept stones are
    /// unchanged.
    #[must_use = "returns a new plan"]
    pub fn prune_stones(&self, keep: &BTreeSet<usize>) -> Result<DistillPlan> {
        if let Some(&bad) = keep.iter().find(|&&i| i == 0 || i > self.n_blocks) {
            return Err(Error::Config(format!("stone {bad} outside 1..={}", self.n_blocks)));
        }
        Ok(DistillPlan { active: keep.clone(), ..self.clone() })
    }

    /// Stones whose logits enter the objective. Active stones drop out when
    /// every term that would use them is switched off.
    pub fn stones_in_use(&self) -> BTreeSet<usize> {
        let terms = self.terms;
        let used = terms.stone_task || (self.beta > 0.0 && terms.stone_distill) || self.effective_gamma() > 0.0;
        if used {
            self.active.clone()
        } else {
            BTreeSet::new()
        }
    }

    /// Weight actually applied to `L_cross`: zero when no stone is active.
    pub fn effective_gamma(&self) -> f64 {
        if self.active.is_empty() || !self.terms.cross {
            0.0
        } else {
            self.gamma
        }
    }
}

/// `min(1, epoch / warmup_epochs)`, or 1 when warmup is disabled.
pub fn warmup_factor(epoch: usize, warmup_epochs: usize) -> f64 {
    if warmup_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / warmup_epochs as f64).min(1.0)
    }
}

/// Borrowed teacher/student/connector bundle.
#[derive(Clone, Copy)]
pub struct Nets<'a> {
    pub teacher: &'a CompositeNet,
    pub student: &'a CompositeNet,
    pub connectors: &'a [Connector],
}

impl FactoryPair {
    pub fn nets(&self) -> Nets<'_> {
        Nets {
            teacher: &self.teacher,
            student: &self.student,
            connectors: &self.connectors,
        }
    }
}

impl<'a> Nets<'a> {
    fn connector(&self, i: usize) -> Result<&'a Connector> {
        self.connectors
            .iter()
            .find(|c| c.index == i)
            .ok_or_else(|| Error::Usage(format!("no connector for stone {i}")))
    }

    pub fn stone(&self, i: usize) -> Result<SteppingStone<'a>> {
        if i == 0 || i > self.student.n_blocks() || self.student.n_blocks() != self.teacher.n_blocks() {
            return Err(Error::Usage(format!("stone {i} outside 1..={}", self.student.n_blocks())));
        }
        Ok(SteppingStone {
            index: i,
            student: self.student,
            connector: self.connector(i)?,
            teacher: self.teacher,
        })
    }
}

/// Hybrid model `N_i`. Holds references only; the teacher tail is the
/// frozen teacher itself.
pub struct SteppingStone<'a> {
    pub index: usize,
    pub student: &'a CompositeNet,
    pub connector: &'a Connector,
    pub teacher: &'a CompositeNet,
}

impl SteppingStone<'_> {
    /// Full forward from the input, without any feature reuse.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let f = self.student.forward_head(self.index, x, mode)?;
        self.forward_from_feature(&f, mode)
    }

    /// `T_c ∘ … ∘ T_{i+1} ∘ C_i` applied to a student block-`i` feature.
    pub fn forward_from_feature(&self, f_student: &Tensor, mode: Mode) -> Result<Tensor> {
        let projected = self.connector.apply(f_student, mode)?;
        self.teacher.forward_tail(self.index, &projected, Mode::Eval)
    }

    /// The shared projector `M_i^P = T_c ∘ … ∘ T_{i+1}` on a teacher-shaped
    /// feature.
    pub fn teacher_tail(&self, f: &Tensor) -> Result<Tensor> {
        self.teacher.forward_tail(self.index, f, Mode::Eval)
    }
}

/// Logits of every stone in `active`, reusing precomputed student features.
pub fn stone_logits(
    nets: Nets<'_>,
    student_features: &[Tensor],
    active: &BTreeSet<usize>,
    mode: Mode,
) -> Result<BTreeMap<usize, Tensor>> {
    let mut out = BTreeMap::new();
    for &i in active {
        let f = student_features
            .get(i.wrapping_sub(1))
            .ok_or_else(|| Error::Usage(format!("no student feature for stone {i}")))?;
        out.insert(i, nets.stone(i)?.forward_from_feature(f, mode)?);
    }
    Ok(out)
}

/// Elementwise mean of the stone logits, detached.
pub fn ensemble_logits(stones: &BTreeMap<usize, Tensor>) -> Result<Tensor> {
    let mut iter = stones.values();
    let first = iter
        .next()
        .ok_or_else(|| Error::Usage("ensemble of an empty stone set is undefined; disable L_cross".into()))?;
    let mut acc = first.to_vec();
    for t in iter {
        if t.shape() != first.shape() {
            return Err(Error::Dimension {
                op: "ensemble_logits",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        acc.iter_mut().zip(t.data().iter()).for_each(|(a, v)| *a += v);
    }
    let n = stones.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Tensor::new(first.shape(), acc)
}

/// `d(Y^S, Y^ens) + Σ_i d(Y^{N_i}, Y^ens)` with the ensemble as a constant
/// target. Returns 0 for an empty stone set.
pub fn cross_loss(y_s: &Tensor, stones: &BTreeMap<usize, Tensor>, y_ens: &Tensor, d: &LogitDistance) -> Result<Tensor> {
    Ok(cross_terms(y_s, stones, y_ens, d, |_| 1.0)?.0)
}

/// Cross loss with a per-stone weight, plus the unweighted stone terms.
fn cross_terms(
    y_s: &Tensor,
    stones: &BTreeMap<usize, Tensor>,
    y_ens: &Tensor,
    d: &LogitDistance,
    weight: impl Fn(usize) -> f64,
) -> Result<(Tensor, f64, BTreeMap<usize, f64>)> {
    if stones.is_empty() {
        return Ok((Tensor::scalar(0.0), 0.0, BTreeMap::new()));
    }
    let target = y_ens.detach();
    let student_term = d.distance(y_s, &target)?;
    let student_value = student_term.item();
    let mut total = student_term;
    let mut per_stone = BTreeMap::new();
    for (&i, y) in stones {
        let term = d.distance(y, &target)?;
        per_stone.insert(i, term.item());
        total = total.add(&term.scale(weight(i)))?;
    }
    Ok((total, student_value, per_stone))
}

/// Every term of the objective for one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub warmup: f64,
    pub total: f64,
    /// Combined terms (stone parts already scaled by their coefficients).
    pub task: f64,
    pub distill: f64,
    pub cross: f64,
    pub task_student: f64,
    pub distill_student: f64,
    pub cross_student: f64,
    /// Unscaled per-stone terms, indexed by stone.
    pub task_stone: BTreeMap<usize, f64>,
    pub distill_stone: BTreeMap<usize, f64>,
    pub cross_stone: BTreeMap<usize, f64>,
}

impl LossBreakdown {
    /// Accumulate `other` with weight `w` (used to average over batches).
    pub fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.warmup += w * other.warmup;
        self.total += w * other.total;
        self.task += w * other.task;
        self.distill += w * other.distill;
        self.cross += w * other.cross;
        self.task_student += w * other.task_student;
        self.distill_student += w * other.distill_student;
        self.cross_student += w * other.cross_student;
        for (dst, src) in [
            (&mut self.task_stone, &other.task_stone),
            (&mut self.distill_stone, &other.distill_stone),
            (&mut self.cross_stone, &other.cross_stone),
        ] {
            for (&i, &v) in src {
                *dst.entry(i).or_insert(0.0) += w * v;
            }
        }
    }
}

/// Output of [`total_loss`]: the differentiable scalar, its breakdown, and
/// the student's logits for accuracy bookkeeping.
pub struct ObjectiveValue {
    pub loss: Tensor,
    pub breakdown: LossBreakdown,
    pub student_logits: Tensor,
}

/// The full objective for one batch at a given (0-based) epoch.
pub fn total_loss(
    x: &Tensor,
    targets: &Targets,
    nets: Nets<'_>,
    plan: &DistillPlan,
    epoch: usize,
    mode: Mode,
) -> Result<ObjectiveValue> {
    total_loss_with_teacher(x, targets, nets, plan, epoch, mode, None)
}

/// [`total_loss`] with the teacher's logits for `x` supplied by the caller.
/// The teacher is frozen, so a run can compute them once per sample.
pub fn total_loss_with_teacher(
    x: &Tensor,
    targets: &Targets,
    nets: Nets<'_>,
    plan: &DistillPlan,
    epoch: usize,
    mode: Mode,
    teacher_logits: Option<&Tensor>,
) -> Result<ObjectiveValue> {
    plan.validate()?;
    if !nets.teacher.is_frozen() {
        return Err(Error::Usage("total_loss requires a frozen teacher".into()));
    }
    if plan.n_blocks() != nets.student.n_blocks() {
        return Err(Error::Config(format!(
            "plan is for {} blocks, student has {}",
            plan.n_blocks(),
            nets.student.n_blocks()
        )));
    }
    let d = LogitDistance::kl(plan.temperature)?;
    let w = warmup_factor(epoch, plan.warmup_epochs);
    let terms = plan.terms;
    let coef = plan.stone_coefficients();
    let mut bd = LossBreakdown { warmup: w, ..Default::default() };

    let out = nets.student.forward_with_features(x, mode)?;
    let y_s = out.logits;

    let use_student_distill = plan.beta > 0.0 && terms.student_distill;
    let use_stone_distill = plan.beta > 0.0 && terms.stone_distill;
    let use_cross = plan.effective_gamma() > 0.0;
    let need_stones = !plan.active_stones().is_empty() && (terms.stone_task || use_stone_distill || use_cross);
    let need_teacher = use_student_distill || (use_stone_distill && need_stones);

    let stones = if need_stones {
        stone_logits(nets, &out.features, plan.active_stones(), mode)?
    } else {
        BTreeMap::new()
    };
    let y_t = match (need_teacher, teacher_logits) {
        (false, _) => None,
        (true, Some(y)) => Some(y.detach()),
        (true, None) => Some(nets.teacher.forward(x, Mode::Eval)?.detach()),
    };

    // L_task
    let student_task = task_loss(&y_s, targets)?;
    bd.task_student = student_task.item();
    let mut l_task = student_task;
    if terms.stone_task {
        for (&i, y) in &stones {
            let t = task_loss(y, targets)?;
            bd.task_stone.insert(i, t.item());
            l_task = l_task.add(&t.scale(coef[&i]))?;
        }
    }
    bd.task = l_task.item();
    let mut total = l_task.scale(plan.alpha);

    // L_distill
    if let Some(y_t) = &y_t {
        let mut l_distill: Option<Tensor> = None;
        if use_student_distill {
            let t = d.distance(&y_s, y_t)?;
            bd.distill_student = t.item();
            l_distill = Some(t);
        }
        if use_stone_distill {
            for (&i, y) in &stones {
                let t = d.distance(y, y_t)?;
                bd.distill_stone.insert(i, t.item());
                let scaled = t.scale(coef[&i]);
                l_distill = Some(match l_distill {
                    Some(acc) => acc.add(&scaled)?,
                    None => scaled,
                });
            }
        }
        if let Some(l) = l_distill {
            bd.distill = l.item();
            total = total.add(&l.scale(w * plan.beta))?;
        }
    }

    // L_cross
    if use_cross && !stones.is_empty() {
        let y_ens = ensemble_logits(&stones)?;
        let weight = |i: usize| if plan.cross_coefficients { coef[&i] } else { 1.0 };
        let (l_cross, student_value, per_stone) = cross_terms(&y_s, &stones, &y_ens, &d, weight)?;
        bd.cross_student = student_value;
        bd.cross_stone = per_stone;
        bd.cross = l_cross.item();
        total = total.add(&l_cross.scale(w * plan.gamma))?;
    }

    bd.total = total.item();
    Ok(ObjectiveValue { loss: total, breakdown: bd, student_logits: y_s })
}

#[cfg(test)]
mod tests;
