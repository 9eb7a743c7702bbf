//! SGD with momentum, the multi-step schedule, and training runs.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{task_loss, Targets};
use crate::nn::{build_connectors, validate_pair, ArchSpec, CompositeNet, Connector, Mode, NetArch};
use crate::rng::substream;
use crate::stones::{total_loss_with_teacher, DistillPlan, LossBreakdown, Nets, ObjectiveValue};
use crate::tensor::Tensor;

/// Momentum buffers plus hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], lr: f64, momentum: f64, weight_decay: f64) -> OptimizerState {
        OptimizerState {
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            lr,
            momentum,
            weight_decay,
        }
    }
}

/// `v ← m·v + (g + wd·p); p ← p − lr·v` for every parameter.
pub fn sgd_step(params: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != state.velocity.len() {
        return Err(Error::Training(format!(
            "optimizer tracks {} parameters, got {}",
            state.velocity.len(),
            params.len()
        )));
    }
    // Check every gradient before touching any parameter.
    let grads = params
        .iter()
        .map(|p| {
            p.grad()
                .ok_or_else(|| Error::Training(format!("parameter '{}' has no gradient", p.name())))
        })
        .collect::<Result<Vec<_>>>()?;
    for ((p, g), v) in params.iter().zip(grads).zip(state.velocity.iter_mut()) {
        if v.len() != g.len() {
            return Err(Error::Training(format!("velocity of '{}' has the wrong shape", p.name())));
        }
        let mut data = p.data_mut();
        for ((x, gi), vi) in data.iter_mut().zip(&g).zip(v.iter_mut()) {
            *vi = state.momentum * *vi + (gi + state.weight_decay * *x);
            *x -= state.lr * *vi;
        }
    }
    Ok(())
}

/// Step decay: `base · decay^{#milestones ≤ epoch}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    #[serde(default = "default_decay")]
    pub decay: f64,
}

fn default_decay() -> f64 {
    0.1
}

impl Schedule {
    pub fn new(base_lr: f64, mut milestones: Vec<usize>) -> Schedule {
        milestones.sort_unstable();
        Schedule { base_lr, milestones, decay: 0.1 }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Scratch,
    Kd,
    BlockKd,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(TrainMode::Scratch),
            "kd" => Ok(TrainMode::Kd),
            "blockkd" => Ok(TrainMode::BlockKd),
            other => Err(Error::Config(format!("unknown mode '{other}' (expected scratch, kd or blockkd)"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Scratch => "scratch",
            TrainMode::Kd => "kd",
            TrainMode::BlockKd => "blockkd",
        })
    }
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            epochs: 240,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![150, 180, 210],
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        for (name, v) in [("lr", self.lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.lr, self.milestones.clone())
    }
}

/// One metrics row. Row 0 is the evaluation before any step; row `e ≥ 1`
/// summarizes training epoch `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub train_acc: f64,
    pub test_acc: f64,
    pub ms_per_batch: f64,
}

pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    /// The trained student alone; stones and connectors are not part of it.
    pub student: CompositeNet,
    pub connectors: Vec<Connector>,
    pub n_blocks: usize,
}

impl fmt::Debug for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainReport")
            .field("epochs", &self.rows.len().saturating_sub(1))
            .field("final_test_acc", &self.final_test_acc())
            .field("n_blocks", &self.n_blocks)
            .finish_non_exhaustive()
    }
}

impl TrainReport {
    pub fn final_test_acc(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.test_acc)
    }

    /// Mean wall-clock milliseconds per training batch over all epochs.
    pub fn mean_ms_per_batch(&self) -> f64 {
        let trained: Vec<f64> = self.rows.iter().filter(|r| r.epoch > 0).map(|r| r.ms_per_batch).collect();
        if trained.is_empty() {
            0.0
        } else {
            trained.iter().sum::<f64>() / trained.len() as f64
        }
    }
}

/// Batch size used for evaluation passes.
const EVAL_BATCH: usize = 256;

/// Top-1 accuracy in eval mode.
pub fn evaluate(net: &CompositeNet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Evaluation("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, t) = data.batch(chunk)?;
        let logits = net.forward(&x, Mode::Eval)?.detach();
        correct += count_correct(&logits, &t);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Eval-mode logits for every sample, row-major `[N × K]`.
pub fn predict(net: &CompositeNet, data: &Dataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len() * net.arch.classes);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk)?;
        out.extend_from_slice(&net.forward(&x, Mode::Eval)?.data());
    }
    Ok(out)
}

/// Rows whose argmax (first maximum on ties) equals the target.
pub fn count_correct(logits: &Tensor, targets: &Targets) -> usize {
    let k = logits.shape().last().copied().unwrap_or(1);
    let data = logits.data();
    data.chunks(k)
        .zip(&targets.0)
        .filter(|(row, &t)| {
            let best = row.iter().enumerate().fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
            best == t
        })
        .count()
}

/// Shuffled batches for one epoch. A trailing batch of one sample is folded
/// into the previous batch, since batch norm needs two samples.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut crate::rng::SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(tail);
    }
    batches
}

fn check_data(arch: &NetArch, train: &Dataset, test: &Dataset) -> Result<()> {
    let volume: usize = arch.input.iter().product();
    for ds in [train, test] {
        if ds.sample_volume() != volume {
            return Err(Error::Config(format!(
                "dataset samples {:?} do not fit network input {:?}",
                ds.sample_shape(),
                arch.input
            )));
        }
        if ds.classes > arch.classes {
            return Err(Error::Config(format!("dataset has {} classes, network has {}", ds.classes, arch.classes)));
        }
    }
    if train.len() < 2 {
        return Err(Error::Config("training set needs at least 2 samples".into()));
    }
    Ok(())
}

/// The per-batch objective of a run.
enum Objective<'a> {
    /// Task loss only (scratch students, teachers).
    Task { alpha: f64 },
    Distill {
        teacher: &'a CompositeNet,
        plan: &'a DistillPlan,
        /// Teacher logits for every training sample, `[N × K]`.
        cached: Vec<f64>,
    },
}

impl Objective<'_> {
    #[allow(clippy::too_many_arguments)]
    fn eval(
        &self,
        x: &Tensor,
        t: &Targets,
        idx: &[usize],
        net: &CompositeNet,
        connectors: &[Connector],
        epoch: usize,
        mode: Mode,
    ) -> Result<ObjectiveValue> {
        match self {
            Objective::Task { alpha } => {
                let logits = net.forward(x, mode)?;
                let l = task_loss(&logits, t)?;
                let task = l.item();
                let loss = l.scale(*alpha);
                let breakdown = LossBreakdown {
                    warmup: 1.0,
                    total: loss.item(),
                    task,
                    task_student: task,
                    ..Default::default()
                };
                Ok(ObjectiveValue { loss, breakdown, student_logits: logits })
            }
            Objective::Distill { teacher, plan, cached } => {
                let k = teacher.arch.classes;
                let mut rows = Vec::with_capacity(idx.len() * k);
                for &i in idx {
                    rows.extend_from_slice(&cached[i * k..(i + 1) * k]);
                }
                let y_t = Tensor::new(&[idx.len(), k], rows)?;
                let nets = Nets { teacher, student: net, connectors };
                total_loss_with_teacher(x, t, nets, plan, epoch, mode, Some(&y_t))
            }
        }
    }
}

/// Seeded loop shared by teacher and student training.
/// Connectors are optimized only when their stone is in `trained`.
#[allow(clippy::too_many_arguments)]
fn fit(
    net: &CompositeNet,
    connectors: &[Connector],
    trained: &BTreeSet<usize>,
    objective: &Objective<'_>,
    optim: &OptimConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<Vec<EpochRow>> {
    let mut params = net.parameters();
    for c in connectors.iter().filter(|c| trained.contains(&c.index)) {
        params.extend(c.parameters());
    }
    let schedule = optim.schedule();
    let mut state = OptimizerState::new(&params, schedule.lr_at(0), optim.momentum, optim.weight_decay);
    let mut order_rng = substream(seed, "batch-order");

    let mut rows = Vec::with_capacity(optim.epochs + 1);
    rows.push(initial_row(net, connectors, objective, optim, train, test, schedule.lr_at(0))?);

    for epoch in 1..=optim.epochs {
        let lr = schedule.lr_at(epoch - 1);
        state.lr = lr;
        let batches = epoch_batches(train.len(), optim.batch_size, &mut order_rng);
        let mut sum = LossBreakdown::default();
        let mut correct = 0usize;
        let started = Instant::now();
        for idx in &batches {
            let (x, t) = train.batch(idx)?;
            let value = objective.eval(&x, &t, idx, net, connectors, epoch - 1, Mode::Train)?;
            if !value.loss.item().is_finite() {
                return Err(Error::Training(format!("loss diverged at epoch {epoch}: {}", value.loss.item())));
            }
            params.iter().for_each(Tensor::zero_grad);
            value.loss.backward()?;
            sgd_step(&params, &mut state)?;
            sum.add_scaled(&value.breakdown, idx.len() as f64 / train.len() as f64);
            correct += count_correct(&value.student_logits, &t);
        }
        let ms_per_batch = started.elapsed().as_secs_f64() * 1e3 / batches.len() as f64;
        rows.push(EpochRow {
            epoch,
            lr,
            losses: sum,
            train_acc: correct as f64 / train.len() as f64,
            test_acc: evaluate(net, test)?,
            ms_per_batch,
        });
    }
    Ok(rows)
}

/// Epoch-0 row: objective and accuracy in eval mode, no parameter updates.
fn initial_row(
    net: &CompositeNet,
    connectors: &[Connector],
    objective: &Objective<'_>,
    optim: &OptimConfig,
    train: &Dataset,
    test: &Dataset,
    lr: f64,
) -> Result<EpochRow> {
    let indices: Vec<usize> = (0..train.len()).collect();
    let mut sum = LossBreakdown::default();
    let mut correct = 0usize;
    for chunk in indices.chunks(optim.batch_size.max(EVAL_BATCH)) {
        let (x, t) = train.batch(chunk)?;
        let value = objective.eval(&x, &t, chunk, net, connectors, 0, Mode::Eval)?;
        sum.add_scaled(&value.breakdown, chunk.len() as f64 / train.len() as f64);
        correct += count_correct(&value.student_logits, &t);
    }
    Ok(EpochRow {
        epoch: 0,
        lr,
        losses: sum,
        train_acc: correct as f64 / train.len() as f64,
        test_acc: evaluate(net, test)?,
        ms_per_batch: 0.0,
    })
}

/// Train a teacher from scratch with the task loss only.
pub fn train_teacher(
    arch: &NetArch,
    optim: &OptimConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<(CompositeNet, Vec<EpochRow>)> {
    optim.validate()?;
    check_data(arch, train, test)?;
    let net = CompositeNet::new(arch, &mut substream(seed, "teacher-init"))?;
    let rows = fit(&net, &[], &BTreeSet::new(), &Objective::Task { alpha: 1.0 }, optim, train, test, seed)?;
    Ok((net, rows))
}

/// Build the plan a mode implies: scratch and kd drop every stone and the
/// cross term; blockkd keeps `plan` as given.
pub fn plan_for_mode(mode: TrainMode, plan: &DistillPlan) -> DistillPlan {
    match mode {
        TrainMode::BlockKd => plan.clone(),
        TrainMode::Kd | TrainMode::Scratch => {
            let mut p = plan.prune_stones(&BTreeSet::new()).expect("empty set is always valid");
            p.gamma = 0.0;
            if mode == TrainMode::Scratch {
                p.beta = 0.0;
            }
            p
        }
    }
}

/// Train a student. The student and connectors start from the `seed`
/// streams, so runs that differ only in mode share initialization and batch
/// order.
pub fn train_run(
    spec: &ArchSpec,
    mode: TrainMode,
    plan: &DistillPlan,
    optim: &OptimConfig,
    teacher: Option<&CompositeNet>,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<TrainReport> {
    optim.validate()?;
    plan.validate()?;
    let (t_shapes, s_shapes) = validate_pair(spec)?;
    let student_arch = spec.student_arch();
    check_data(&student_arch, train, test)?;
    if plan.n_blocks() != spec.blocks() {
        return Err(Error::Config(format!("plan has {} blocks, architecture has {}", plan.n_blocks(), spec.blocks())));
    }
    let student = CompositeNet::new(&student_arch, &mut substream(seed, "student-init"))?;
    let connectors = build_connectors(&t_shapes, &s_shapes, &mut substream(seed, "connector-init"));
    let effective = plan_for_mode(mode, plan);

    let rows = match mode {
        TrainMode::Scratch => fit(&student, &[], &BTreeSet::new(), &Objective::Task { alpha: effective.alpha }, optim, train, test, seed)?,
        TrainMode::Kd | TrainMode::BlockKd => {
            let teacher = teacher.ok_or_else(|| Error::Config(format!("mode {mode} needs a teacher")))?;
            if teacher.arch != spec.teacher_arch() {
                return Err(Error::Config("teacher checkpoint does not match the configured teacher architecture".into()));
            }
            if !teacher.is_frozen() {
                return Err(Error::Usage("teacher must be frozen before distillation".into()));
            }
            let cached = predict(teacher, train)?;
            let objective = Objective::Distill { teacher, plan: &effective, cached };
            fit(&student, &connectors, &effective.stones_in_use(), &objective, optim, train, test, seed)?
        }
    };
    Ok(TrainReport { rows, student, connectors, n_blocks: spec.blocks() })
}

/// Header of the metrics CSV for `n` blocks.
pub fn metrics_header(n_blocks: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch", "lr", "warmup", "L_total", "L_task", "L_distill", "L_cross", "L_task_S", "L_distill_S", "L_cross_S",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for i in 1..=n_blocks {
        h.push(format!("L_task_N{i}"));
        h.push(format!("L_distill_N{i}"));
        h.push(format!("L_cross_N{i}"));
    }
    h.push("train_acc".into());
    h.push("test_acc".into());
    h
}

/// Write every deterministic column. Wall-clock time lives in a separate
/// file so that reruns produce identical bytes here.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[EpochRow], n_blocks: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(metrics_header(n_blocks))?;
    for r in rows {
        let l = &r.losses;
        let mut rec = vec![
            r.epoch.to_string(),
            r.lr.to_string(),
            l.warmup.to_string(),
            l.total.to_string(),
            l.task.to_string(),
            l.distill.to_string(),
            l.cross.to_string(),
            l.task_student.to_string(),
            l.distill_student.to_string(),
            l.cross_student.to_string(),
        ];
        for i in 1..=n_blocks {
            for m in [&l.task_stone, &l.distill_stone, &l.cross_stone] {
                rec.push(m.get(&i).copied().unwrap_or(0.0).to_string());
            }
        }
        rec.push(r.train_acc.to_string());
        rec.push(r.test_acc.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing_csv<W: Write>(out: W, rows: &[EpochRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "ms_per_batch"])?;
    for r in rows.iter().filter(|r| r.epoch > 0) {
        w.write_record([r.epoch.to_string(), format!("{:.4}", r.ms_per_batch)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
