//! Tape gradients against central finite differences, for every primitive
//! and every composite loss.
//!
//! Each case builds fresh random inputs from a seed, reduces the output to a
//! scalar with random weights, and compares the tape gradient with respect to
//! all leaves with central differences. Linear and bilinear maps are held to a tighter
//! tolerance since their central differences are exact up to rounding.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::losses::{kl_logit_distance, task_loss, LogitDistance, Targets};
use crate::nn::{build_factory_pair, ArchSpec, Mode, NetSpec};
use crate::numdiff::{central_gradient, rel_err, DEFAULT_STEP};
use crate::rng::{substream, uniform_sym, SeededRng};
use crate::stones::{cross_loss, ensemble_logits, stone_logits, total_loss, warmup_factor, DistillPlan, Nets};
use crate::tensor::{BnMode, RunningStats, Tensor};

pub const LINEAR_TOLERANCE: f64 = 1e-6;
pub const NONLINEAR_TOLERANCE: f64 = 1e-4;

/// Step for checks through whole networks: smaller, so that a perturbation
/// rarely carries a ReLU input across zero.
const NETWORK_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Linear,
    Nonlinear,
}

impl Kind {
    pub fn tolerance(self) -> f64 {
        match self {
            Kind::Linear => LINEAR_TOLERANCE,
            Kind::Nonlinear => NONLINEAR_TOLERANCE,
        }
    }
}

type CaseFn = fn(&mut SeededRng) -> Result<f64>;

/// Name, tolerance class and check of every case.
pub const CASES: [(&str, Kind, CaseFn); 23] = [
    ("matmul", Kind::Linear, matmul),
    ("conv2d_s1", Kind::Linear, conv_s1),
    ("conv2d_s2", Kind::Linear, conv_s2),
    ("add", Kind::Linear, add),
    ("sub", Kind::Linear, sub),
    ("mul", Kind::Linear, mul),
    ("scale", Kind::Linear, scale),
    ("add_bias", Kind::Linear, add_bias),
    ("sum", Kind::Linear, sum),
    ("mean", Kind::Linear, mean),
    ("reshape", Kind::Linear, reshape),
    ("avgpool_global", Kind::Linear, avgpool),
    ("batchnorm_eval", Kind::Linear, bn_eval),
    ("relu", Kind::Nonlinear, relu),
    ("softmax", Kind::Nonlinear, softmax),
    ("log_softmax", Kind::Nonlinear, log_softmax),
    ("batchnorm_train", Kind::Nonlinear, bn_train),
    ("task_loss", Kind::Nonlinear, task),
    ("logit_distance", Kind::Nonlinear, distance),
    ("stone_objective", Kind::Nonlinear, stone_objective),
    ("cross_loss", Kind::Nonlinear, cross),
    ("total_loss", Kind::Nonlinear, total_no_cross),
    ("total_loss_with_cross", Kind::Nonlinear, total_with_cross),
];

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub kind: Kind,
    pub worst: f64,
    pub worst_seed: u64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.kind.tolerance()
    }
}

/// Every case over seeds `0..seeds`, keeping the worst error per case.
pub fn run_suite(seeds: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::with_capacity(CASES.len());
    for (name, kind, f) in CASES {
        let mut r = CaseResult { name, kind, worst: 0.0, worst_seed: 0 };
        for seed in 0..seeds {
            let err = f(&mut substream(seed, name))?;
            if err > r.worst || err.is_nan() {
                r.worst = err;
                r.worst_seed = seed;
            }
        }
        out.push(r);
    }
    Ok(out)
}

fn values(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| uniform_sym(rng, 1.0)).collect()
}

fn leaf(rng: &mut SeededRng, shape: &[usize]) -> Result<Tensor> {
    Tensor::param(shape, values(rng, shape.iter().product()))
}

/// [`check_scalar`] on `Σ r ⊙ f()` with random weights `r`.
pub fn check<F>(rng: &mut SeededRng, inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    let probe = f()?;
    let weights = Tensor::new(probe.shape(), values(rng, probe.numel()))?;
    let loss = || -> Result<Tensor> { Ok(f()?.mul(&weights)?.sum()) };
    check_scalar(inputs, h, loss)
}

/// Relative error of the gradient of a scalar-valued `f` with respect to
/// all of `inputs`, taken as one concatenated vector.
pub fn check_scalar<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    inputs.iter().for_each(Tensor::zero_grad);
    f()?.backward()?;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for t in inputs {
        analytic.extend(t.grad().unwrap_or_else(|| vec![0.0; t.numel()]));
        numeric.extend(central_gradient(t, h, || Ok(f()?.item()))?);
    }
    Ok(rel_err(&analytic, &numeric))
}

fn matmul(rng: &mut SeededRng) -> Result<f64> {
    let (a, b) = (leaf(rng, &[3, 4])?, leaf(rng, &[4, 5])?);
    check(rng, &[a.clone(), b.clone()], DEFAULT_STEP, || a.matmul(&b))
}

fn conv(rng: &mut SeededRng, stride: usize) -> Result<f64> {
    let (x, w) = (leaf(rng, &[2, 2, 5, 5])?, leaf(rng, &[3, 2, 3, 3])?);
    check(rng, &[x.clone(), w.clone()], DEFAULT_STEP, || x.conv2d(&w, stride, 1))
}

fn conv_s1(rng: &mut SeededRng) -> Result<f64> {
    conv(rng, 1)
}

fn conv_s2(rng: &mut SeededRng) -> Result<f64> {
    conv(rng, 2)
}

fn add(rng: &mut SeededRng) -> Result<f64> {
    let (a, b) = (leaf(rng, &[3, 4])?, leaf(rng, &[3, 4])?);
    check(rng, &[a.clone(), b.clone()], DEFAULT_STEP, || a.add(&b))
}

fn sub(rng: &mut SeededRng) -> Result<f64> {
    let (a, b) = (leaf(rng, &[3, 4])?, leaf(rng, &[3, 4])?);
    check(rng, &[a.clone(), b.clone()], DEFAULT_STEP, || a.sub(&b))
}

fn mul(rng: &mut SeededRng) -> Result<f64> {
    let (a, b) = (leaf(rng, &[3, 4])?, leaf(rng, &[3, 4])?);
    check(rng, &[a.clone(), b.clone()], DEFAULT_STEP, || a.mul(&b))
}

fn scale(rng: &mut SeededRng) -> Result<f64> {
    let a = leaf(rng, &[3, 4])?;
    let s = uniform_sym(rng, 2.0);
    check(rng, &[a.clone()], DEFAULT_STEP, || Ok(a.scale(s)))
}

fn add_bias(rng: &mut SeededRng) -> Result<f64> {
    let (a, b) = (leaf(rng, &[3, 4])?, leaf(rng, &[4])?);
    check(rng, &[a.clone(), b.clone()], DEFAULT_STEP, || a.add_bias(&b))
}

fn sum(rng: &mut SeededRng) -> Result<f64> {
    let a = leaf(rng, &[2, 3, 2])?;
    check(rng, &[a.clone()], DEFAULT_STEP, || Ok(a.sum()))
}

fn mean(rng: &mut SeededRng) -> Result<f64> {
    let a = leaf(rng, &[2, 3, 2])?;
    check(rng, &[a.clone()], DEFAULT_STEP, || Ok(a.mean()))
}

fn reshape(rng: &mut SeededRng) -> Result<f64> {
    let a = leaf(rng, &[2, 3, 2])?;
    check(rng, &[a.clone()], DEFAULT_STEP, || a.reshape(&[3, 4]))
}

fn avgpool(rng: &mut SeededRng) -> Result<f64> {
    let a = leaf(rng, &[2, 3, 3, 3])?;
    check(rng, &[a.clone()], DEFAULT_STEP, || a.avgpool_global())
}

fn bn_inputs(rng: &mut SeededRng) -> Result<(Tensor, Tensor, Tensor, RunningStats)> {
    let x = leaf(rng, &[3, 2, 2, 2])?;
    let gamma = Tensor::param(&[2], values(rng, 2).iter().map(|v| 1.0 + 0.5 * v).collect())?;
    let beta = leaf(rng, &[2])?;
    let mut stats = RunningStats::new(2);
    stats.mean = values(rng, 2);
    stats.var = values(rng, 2).iter().map(|v| 1.0 + 0.5 * v).collect();
    Ok((x, gamma, beta, stats))
}

fn bn_eval(rng: &mut SeededRng) -> Result<f64> {
    let (x, g, b, stats) = bn_inputs(rng)?;
    let stats = std::cell::RefCell::new(stats);
    check(rng, &[x.clone(), g.clone(), b.clone()], DEFAULT_STEP, || {
        x.batchnorm(&g, &b, BnMode::Eval, &mut stats.borrow_mut())
    })
}

fn bn_train(rng: &mut SeededRng) -> Result<f64> {
    let (x, g, b, stats) = bn_inputs(rng)?;
    let stats = std::cell::RefCell::new(stats);
    check(rng, &[x.clone(), g.clone(), b.clone()], DEFAULT_STEP, || {
        x.batchnorm(&g, &b, BnMode::Train, &mut stats.borrow_mut())
    })
}

fn relu(rng: &mut SeededRng) -> Result<f64> {
    // keep every input at least 0.05 from the kink
    let data = values(rng, 12).iter().map(|v| v + 0.05 * v.signum()).collect();
    let a = Tensor::param(&[3, 4], data)?;
    check(rng, &[a.clone()], DEFAULT_STEP, || Ok(a.relu()))
}

fn softmax(rng: &mut SeededRng) -> Result<f64> {
    let a = leaf(rng, &[3, 5])?;
    check(rng, &[a.clone()], DEFAULT_STEP, || a.scale(3.0).softmax())
}

fn log_softmax(rng: &mut SeededRng) -> Result<f64> {
    let a = leaf(rng, &[3, 5])?;
    check(rng, &[a.clone()], DEFAULT_STEP, || a.scale(3.0).log_softmax())
}

fn targets(rng: &mut SeededRng, b: usize, k: usize) -> Targets {
    Targets((0..b).map(|_| ((uniform_sym(rng, 1.0) + 1.0) / 2.0 * k as f64) as usize % k).collect())
}

fn task(rng: &mut SeededRng) -> Result<f64> {
    let y = leaf(rng, &[4, 5])?.scale(3.0).detach();
    let y = Tensor::param(y.shape(), y.to_vec())?;
    let t = targets(rng, 4, 5);
    check_scalar(&[y.clone()], DEFAULT_STEP, || task_loss(&y, &t))
}

fn distance(rng: &mut SeededRng) -> Result<f64> {
    let y_s = leaf(rng, &[4, 5])?;
    let y_t = Tensor::new(&[4, 5], values(rng, 20).iter().map(|v| 3.0 * v).collect())?;
    let tau = 1.0 + 4.0 * (uniform_sym(rng, 1.0) + 1.0);
    check_scalar(&[y_s.clone()], DEFAULT_STEP, || kl_logit_distance(&y_s.scale(3.0), &y_t, tau))
}

fn cross(rng: &mut SeededRng) -> Result<f64> {
    let y_s = leaf(rng, &[3, 4])?;
    let stones: BTreeMap<usize, Tensor> = (1..=3).map(|i| Ok((i, leaf(rng, &[3, 4])?))).collect::<Result<_>>()?;
    let ens = ensemble_logits(&stones)?;
    let d = LogitDistance::kl(2.0)?;
    let mut inputs = vec![y_s.clone()];
    inputs.extend(stones.values().cloned());
    check_scalar(&inputs, DEFAULT_STEP, || cross_loss(&y_s, &stones, &ens, &d))
}

/// Small three-block pair: input 1×4×4, three classes.
pub fn tiny_spec() -> ArchSpec {
    let net = |widths: &[usize]| NetSpec { widths: widths.to_vec(), strides: vec![1, 2, 2], depth: 1, kernel: 3 };
    ArchSpec { input: [1, 4, 4], classes: 3, teacher: net(&[3, 4, 5]), student: net(&[2, 3, 3]) }
}

struct Setup {
    teacher: crate::nn::CompositeNet,
    student: crate::nn::CompositeNet,
    connectors: Vec<crate::nn::Connector>,
    x: Tensor,
    t: Targets,
}

impl Setup {
    fn new(rng: &mut SeededRng) -> Result<Setup> {
        let spec = tiny_spec();
        let seed = (uniform_sym(rng, 1.0).abs() * 1e6) as u64;
        let pair = build_factory_pair(&spec, seed)?;
        let x = Tensor::new(&[3, 1, 4, 4], values(rng, 48))?;
        let t = targets(rng, 3, 3);
        Ok(Setup { teacher: pair.teacher.freeze(), student: pair.student, connectors: pair.connectors, x, t })
    }

    fn nets(&self) -> Nets<'_> {
        Nets { teacher: &self.teacher, student: &self.student, connectors: &self.connectors }
    }

    fn params(&self) -> Vec<Tensor> {
        let mut p = self.student.parameters();
        self.connectors.iter().for_each(|c| p.extend(c.parameters()));
        p
    }
}

/// Per-stone `CE(Y^{N_i}) + d(Y^{N_i}, Y^T)` through student, connector and
/// frozen teacher tail.
fn stone_objective(rng: &mut SeededRng) -> Result<f64> {
    let s = Setup::new(rng)?;
    let d = LogitDistance::kl(4.0)?;
    let y_t = s.teacher.forward(&s.x, Mode::Eval)?;
    let mut worst: f64 = 0.0;
    for i in 1..=3 {
        let stone = s.nets().stone(i)?;
        let mut inputs = s.student.parameters();
        inputs.extend(stone.connector.parameters());
        let err = check_scalar(&inputs, NETWORK_STEP, || {
            let y = stone.forward(&s.x, Mode::Train)?;
            task_loss(&y, &s.t)?.add(&d.distance(&y, &y_t)?)
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn plan_for(rng: &mut SeededRng) -> Result<DistillPlan> {
    let mut plan = DistillPlan::new(3, 2.0 + 3.0 * uniform_sym(rng, 1.0).abs())?;
    plan.alpha = 1.0 + 0.5 * uniform_sym(rng, 1.0);
    plan.beta = 1.0 + 0.5 * uniform_sym(rng, 1.0);
    plan.gamma = 1.0 + 0.5 * uniform_sym(rng, 1.0);
    plan.warmup_epochs = 4;
    Ok(plan)
}

fn total_no_cross(rng: &mut SeededRng) -> Result<f64> {
    let s = Setup::new(rng)?;
    let mut plan = plan_for(rng)?;
    plan.terms.cross = false;
    check_scalar(&s.params(), NETWORK_STEP, || Ok(total_loss(&s.x, &s.t, s.nets(), &plan, 2, Mode::Train)?.loss))
}

/// With the cross term on, the ensemble target is a stop-gradient. The
/// oracle therefore differentiates the same objective with the ensemble
/// frozen at its value at the unperturbed point.
fn total_with_cross(rng: &mut SeededRng) -> Result<f64> {
    let s = Setup::new(rng)?;
    let plan = plan_for(rng)?;
    let epoch = 2;
    let params = s.params();
    params.iter().for_each(Tensor::zero_grad);
    total_loss(&s.x, &s.t, s.nets(), &plan, epoch, Mode::Train)?.loss.backward()?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect();

    let ens = {
        let out = s.student.forward_with_features(&s.x, Mode::Train)?;
        ensemble_logits(&stone_logits(s.nets(), &out.features, plan.active_stones(), Mode::Train)?)?
    };
    let mut no_cross = plan.clone();
    no_cross.terms.cross = false;
    let d = LogitDistance::kl(plan.temperature)?;
    let w = warmup_factor(epoch, plan.warmup_epochs);
    let frozen = || -> Result<f64> {
        let base = total_loss(&s.x, &s.t, s.nets(), &no_cross, epoch, Mode::Train)?.loss.item();
        let out = s.student.forward_with_features(&s.x, Mode::Train)?;
        let stones = stone_logits(s.nets(), &out.features, plan.active_stones(), Mode::Train)?;
        let mut cross = d.distance(&out.logits, &ens)?.item();
        for (&i, y) in &stones {
            let c = if plan.cross_coefficients { plan.stone_coefficient(i) } else { 1.0 };
            cross += c * d.distance(y, &ens)?.item();
        }
        Ok(base + w * plan.gamma * cross)
    };
    let mut numeric = Vec::new();
    for p in &params {
        numeric.extend(central_gradient(p, NETWORK_STEP, frozen)?);
    }
    Ok(rel_err(&analytic.concat(), &numeric))
}
