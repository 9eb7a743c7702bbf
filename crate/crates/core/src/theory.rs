//! Numerical checks of the gradient analysis behind stepping stones.
//!
//! Two approximations are examined:
//!
//! 1. At high temperature, with logits zero-meaned separately, the
//!    per-sample KL gradient `(1/τ)(softmax(y_s/τ) − softmax(y_t/τ))`
//!    approaches `(y_s − y_t)/(τ²K)`.
//! 2. Through a frozen tail `M`, expanding `M(F^T)` to first order at `F^P`
//!    turns the distillation gradient on the feature into
//!    `c · Jᵀ·C·J·(F^P − F^T)` with `J = ∂M/∂F` at `F^P` and `C` the
//!    centering matrix. So the tail pulls `F^P` toward `F^T` in the metric
//!    `JᵀCJ`.
//!
//! Loss convention: the distance carries `τ²`, so its per-sample gradient is
//! `τ²` times the expression in (1), and the constant in (2) is `c = 1/K`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::losses::{kd_gradient_wrt_student_logits, kl_logit_distance};
use crate::numdiff::{jacobian, norm, DEFAULT_STEP};
use crate::rng::{seeded, substream, uniform_sym, SeededRng};
use crate::tensor::{softmax_rows, BnMode, RunningStats, Tensor};

/// A frozen map from a `[1, …]` feature to `[1, K]` logits.
pub type Tail<'a> = dyn Fn(&Tensor) -> Result<Tensor> + 'a;

/// Multiples of `max|logit|` scanned by the high-temperature check.
pub const TAU_MULTIPLES: [f64; 5] = [1.0, 5.0, 20.0, 50.0, 200.0];
pub const MIN_SCAN_LEN: usize = 5;
/// `τ / max|logit|` at which the approximation must be within tolerance.
pub const HIGH_TAU_MULTIPLE: f64 = 50.0;
pub const HIGH_TAU_TOLERANCE: f64 = 0.05;
/// Tolerance for the linear tail at high temperature.
pub const LINEAR_TAIL_TOLERANCE: f64 = 1e-3;
/// Allowed ratio between errors at successive ε a decade apart.
pub const FIRST_ORDER_RATIO: (f64, f64) = (0.05, 0.5);
pub const TAYLOR_EPS: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// `‖a − b‖ / ‖a‖`, defined as 0 when both vanish.
fn rel_to(reference: &[f64], other: &[f64]) -> f64 {
    let diff: Vec<f64> = reference.iter().zip(other).map(|(a, b)| a - b).collect();
    match (norm(reference), norm(&diff)) {
        (_, d) if d == 0.0 => 0.0,
        (r, d) if r == 0.0 => d,
        (r, d) => d / r,
    }
}

fn check_zero_mean(y: &[f64], which: &str) -> Result<()> {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if mean.abs() > 1e-12 * scale {
        return Err(Error::Precondition(format!(
            "{which} logits must be zero-mean (mean is {mean:e}); the approximation assumes it"
        )));
    }
    Ok(())
}

/// Subtract the mean.
pub fn zero_mean(y: &[f64]) -> Vec<f64> {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| v - m).collect()
}

/// Exact versus high-temperature gradient over a temperature scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxReport {
    pub taus: Vec<f64>,
    pub exact_norm: Vec<f64>,
    pub approx_norm: Vec<f64>,
    pub rel_err: Vec<f64>,
    /// Largest absolute logit of either input.
    pub max_logit: f64,
}

impl ApproxReport {
    /// Errors strictly decrease across scanned temperatures `≥ tau_min`.
    /// Exactly-zero errors (identical inputs) count as decreasing.
    pub fn strictly_decreasing_from(&self, tau_min: f64) -> bool {
        let errs: Vec<f64> = self.taus.iter().zip(&self.rel_err).filter(|(t, _)| **t >= tau_min).map(|(_, e)| *e).collect();
        errs.windows(2).all(|w| w[1] < w[0] || (w[0] == 0.0 && w[1] == 0.0))
    }

    pub fn monotone(&self) -> bool {
        self.strictly_decreasing_from(self.max_logit)
    }

    pub fn error_at(&self, tau: f64) -> Option<f64> {
        self.taus.iter().position(|&t| t == tau).map(|i| self.rel_err[i])
    }
}

/// Compare `(1/τ)(softmax(y_s/τ) − softmax(y_t/τ))` with `(y_s − y_t)/(τ²K)`
/// for every `τ` in `taus`.
pub fn check_high_temp_gradient(y_s: &[f64], y_t: &[f64], taus: &[f64]) -> Result<ApproxReport> {
    if y_s.len() != y_t.len() || y_s.len() < 2 {
        return Err(Error::Dimension { op: "check_high_temp_gradient", lhs: vec![y_s.len()], rhs: vec![y_t.len()] });
    }
    check_zero_mean(y_s, "student")?;
    check_zero_mean(y_t, "teacher")?;
    if let Some(bad) = taus.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive and finite, got {bad}")));
    }
    let lo = taus.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = taus.iter().cloned().fold(0.0, f64::max);
    if taus.len() < MIN_SCAN_LEN || hi < 100.0 * lo {
        return Err(Error::Config(format!(
            "temperature scan needs at least {MIN_SCAN_LEN} values spanning two decades, got {taus:?}"
        )));
    }
    let k = y_s.len();
    let mut report = ApproxReport {
        taus: taus.to_vec(),
        exact_norm: Vec::new(),
        approx_norm: Vec::new(),
        rel_err: Vec::new(),
        max_logit: y_s.iter().chain(y_t).fold(0.0f64, |m, v| m.max(v.abs())),
    };
    for &tau in taus {
        let scaled = |y: &[f64]| y.iter().map(|v| v / tau).collect::<Vec<_>>();
        let p_s = softmax_rows(&scaled(y_s), k);
        let p_t = softmax_rows(&scaled(y_t), k);
        let exact: Vec<f64> = p_s.iter().zip(&p_t).map(|(a, b)| (a - b) / tau).collect();
        let approx: Vec<f64> = y_s.iter().zip(y_t).map(|(a, b)| (a - b) / (tau * tau * k as f64)).collect();
        report.exact_norm.push(norm(&exact));
        report.approx_norm.push(norm(&approx));
        report.rel_err.push(rel_to(&exact, &approx));
    }
    Ok(report)
}

/// Exact and first-order gradients of `d(M(f_p), M(f_t))` with respect to
/// `f_p`.
pub struct TaylorGradients {
    pub exact: Vec<f64>,
    pub approx: Vec<f64>,
}

/// Autodiff gradient against `(1/K)·Jᵀ·C·J·(f_p − f_t)`, where `J` is the
/// finite-difference Jacobian of the tail at `f_p`.
pub fn taylor_gradients(tail: &Tail<'_>, f_p: &Tensor, f_t: &Tensor, tau: f64) -> Result<TaylorGradients> {
    if f_p.shape() != f_t.shape() || f_p.shape().first() != Some(&1) {
        return Err(Error::Dimension { op: "taylor_gradients", lhs: f_p.shape().to_vec(), rhs: f_t.shape().to_vec() });
    }
    let fp = Tensor::param(f_p.shape(), f_p.to_vec())?;
    let y_t = tail(&f_t.detach())?.detach();
    kl_logit_distance(&tail(&fp)?, &y_t, tau)?.backward()?;
    let exact = fp.grad().unwrap_or_else(|| vec![0.0; fp.numel()]);

    let (k, jac) = jacobian_at(tail, f_p)?;
    let n = f_p.numel();
    let delta: Vec<f64> = f_p.data().iter().zip(f_t.data().iter()).map(|(p, t)| p - t).collect();
    let jd: Vec<f64> = (0..k).map(|i| (0..n).map(|j| jac[i * n + j] * delta[j]).sum()).collect();
    let jd = zero_mean(&jd);
    let approx = (0..n).map(|j| (0..k).map(|i| jac[i * n + j] * jd[i]).sum::<f64>() / k as f64).collect();
    Ok(TaylorGradients { exact, approx })
}

/// `[K × n]` Jacobian of the tail at `f`, one directional difference per
/// input coordinate.
pub fn jacobian_at(tail: &Tail<'_>, f: &Tensor) -> Result<(usize, Vec<f64>)> {
    let shape = f.shape().to_vec();
    jacobian(&f.to_vec(), DEFAULT_STEP, |x| Ok(tail(&Tensor::new(&shape, x.to_vec())?)?.to_vec()))
}

/// Relative error of the first-order expression at each `ε`, with
/// `f_t = f_p + ε·direction/‖direction‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorReport {
    pub eps: Vec<f64>,
    pub rel_err: Vec<f64>,
}

impl TaylorReport {
    /// `err(ε_{j+1}) / err(ε_j)`.
    pub fn ratios(&self) -> Vec<f64> {
        self.rel_err.windows(2).map(|w| if w[0] == 0.0 { 0.0 } else { w[1] / w[0] }).collect()
    }

    pub fn first_order(&self) -> bool {
        let (lo, hi) = FIRST_ORDER_RATIO;
        self.ratios().iter().all(|r| (lo..=hi).contains(r))
    }

    pub fn max_err(&self) -> f64 {
        self.rel_err.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn check_taylor_feature_gradient(
    tail: &Tail<'_>,
    f_p: &Tensor,
    direction: &[f64],
    eps: &[f64],
    tau: f64,
) -> Result<TaylorReport> {
    if let Some(bad) = eps.iter().find(|e| !(**e > 0.0)) {
        return Err(Error::Config(format!("perturbation scale must be positive, got {bad}")));
    }
    let dn = norm(direction);
    if direction.len() != f_p.numel() || dn == 0.0 {
        return Err(Error::Config("direction must be a nonzero vector of the feature's size".into()));
    }
    let mut rel_err = Vec::with_capacity(eps.len());
    for &e in eps {
        let f_t: Vec<f64> = f_p.data().iter().zip(direction).map(|(p, d)| p + e * d / dn).collect();
        let g = taylor_gradients(tail, f_p, &Tensor::new(f_p.shape(), f_t)?, tau)?;
        rel_err.push(rel_to(&g.exact, &g.approx));
    }
    Ok(TaylorReport { eps: eps.to_vec(), rel_err })
}

/// Gradient descent on `f_p` alone against the frozen target `M(f_t)`.
/// Returns `‖f_p − f_t‖` before each step and after the last.
pub fn alignment_pull_demo(tail: &Tail<'_>, f_p: &Tensor, f_t: &Tensor, steps: usize, lr: f64, tau: f64) -> Result<Vec<f64>> {
    let y_t = tail(f_t)?.detach();
    let target = f_t.to_vec();
    let fp = Tensor::param(f_p.shape(), f_p.to_vec())?;
    let dist = |v: &[f64]| v.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(dist(&fp.data()));
    for _ in 0..steps {
        fp.zero_grad();
        kl_logit_distance(&tail(&fp)?, &y_t, tau)?.backward()?;
        let g = fp.grad().unwrap_or_else(|| vec![0.0; fp.numel()]);
        fp.data_mut().iter_mut().zip(&g).for_each(|(x, gi)| *x -= lr * gi);
        trace.push(dist(&fp.data()));
    }
    Ok(trace)
}

/// Outcome of a seeded check suite: report rows, a summary, and any
/// threshold violations.
#[derive(Debug, Default)]
pub struct SuiteOutcome {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    pub failures: Vec<String>,
    pub summary: String,
}

impl SuiteOutcome {
    fn new(header: &[&'static str]) -> SuiteOutcome {
        SuiteOutcome { header: header.to_vec(), ..Default::default() }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn random_vec(rng: &mut SeededRng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| uniform_sym(rng, bound)).collect()
}

/// Zero-mean `K = 10` logit pairs in `[−1, 1]`, one per seed.
pub fn hightemp_logits(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = substream(seed, "theory-hightemp");
    (zero_mean(&random_vec(&mut rng, 10, 1.0)), zero_mean(&random_vec(&mut rng, 10, 1.0)))
}

/// High-temperature scan on `seeds` random pairs, plus the closed-form
/// gradient against autodiff on each pair.
pub fn hightemp_suite(seeds: u64) -> Result<SuiteOutcome> {
    let mut out = SuiteOutcome::new(&["seed", "tau", "exact_norm", "approx_norm", "rel_err"]);
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let (y_s, y_t) = hightemp_logits(seed);
        let m = y_s.iter().chain(&y_t).fold(0.0f64, |a, v| a.max(v.abs()));
        let taus: Vec<f64> = TAU_MULTIPLES.iter().map(|k| k * m).collect();
        let r = check_high_temp_gradient(&y_s, &y_t, &taus)?;
        let high = r.error_at(HIGH_TAU_MULTIPLE * m).expect("scanned");
        worst = worst.max(high);
        if high > HIGH_TAU_TOLERANCE {
            out.failures.push(format!("seed {seed}: rel err {high:.4} at tau = {HIGH_TAU_MULTIPLE}·max|logit|"));
        }
        if !r.strictly_decreasing_from(m) {
            out.failures.push(format!("seed {seed}: error not strictly decreasing over {:?}", r.rel_err));
        }
        // closed form × τ² against the tape, B = 1
        let tau = 4.0;
        let ys = Tensor::param(&[1, 10], y_s.clone())?;
        let yt = Tensor::new(&[1, 10], y_t.clone())?;
        kl_logit_distance(&ys, &yt, tau)?.backward()?;
        let closed: Vec<f64> =
            kd_gradient_wrt_student_logits(&ys, &yt, tau)?.to_vec().iter().map(|g| g * tau * tau).collect();
        let auto = ys.grad().expect("student logits get a gradient");
        let diff = closed.iter().zip(&auto).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if diff > 1e-10 {
            out.failures.push(format!("seed {seed}: closed-form gradient off by {diff:e}"));
        }
        for i in 0..r.taus.len() {
            out.rows.push(vec![
                seed.to_string(),
                r.taus[i].to_string(),
                r.exact_norm[i].to_string(),
                r.approx_norm[i].to_string(),
                r.rel_err[i].to_string(),
            ]);
        }
    }
    out.summary = format!("hightemp: {seeds} seeds, worst rel err at 50·max|logit| = {worst:.5}");
    Ok(out)
}

/// Feature shape used by the toy tails: `[1, C, H, W]`.
pub const TOY_FEATURE: [usize; 4] = [1, 6, 4, 4];
pub const TOY_CLASSES: usize = 4;

fn fan_in_param(rng: &mut SeededRng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, random_vec(rng, n, 1.0 / (fan_in as f64).sqrt()))
}

/// Global pooling plus a dense layer: exactly linear.
pub struct LinearTail {
    weight: Tensor,
    bias: Tensor,
}

impl LinearTail {
    pub fn new(seed: u64, channels: usize, classes: usize) -> Result<LinearTail> {
        let mut rng = substream(seed, "theory-linear-tail");
        Ok(LinearTail {
            weight: fan_in_param(&mut rng, &[channels, classes], channels)?,
            bias: fan_in_param(&mut rng, &[classes], channels)?,
        })
    }

    pub fn apply(&self, f: &Tensor) -> Result<Tensor> {
        f.avgpool_global()?.matmul(&self.weight)?.add_bias(&self.bias)
    }
}

/// One smooth block (3×3 conv, eval-mode batch norm, squaring) followed by
/// pooling and a dense layer. Squaring stands in for the activation so that
/// the tail is twice differentiable everywhere; a ReLU tail is piecewise
/// linear and has no first-order residual away from its kinks.
pub struct SmoothTail {
    conv: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: std::cell::RefCell<RunningStats>,
    head: LinearTail,
}

impl SmoothTail {
    pub fn new(seed: u64, channels: usize, classes: usize) -> Result<SmoothTail> {
        let mut rng = substream(seed, "theory-smooth-tail");
        let conv = fan_in_param(&mut rng, &[channels, channels, 3, 3], 9 * channels)?;
        let mut stats = RunningStats::new(channels);
        stats.mean = random_vec(&mut rng, channels, 0.1);
        stats.var = (0..channels).map(|_| 1.0 + uniform_sym(&mut rng, 0.5)).collect();
        Ok(SmoothTail {
            conv,
            gamma: Tensor::new(&[channels], (0..channels).map(|_| 1.0 + uniform_sym(&mut rng, 0.2)).collect())?,
            beta: Tensor::new(&[channels], random_vec(&mut rng, channels, 0.2))?,
            stats: std::cell::RefCell::new(stats),
            head: LinearTail::new(seed, channels, classes)?,
        })
    }

    pub fn apply(&self, f: &Tensor) -> Result<Tensor> {
        let h = f.conv2d(&self.conv, 1, 1)?.batchnorm(&self.gamma, &self.beta, BnMode::Eval, &mut self.stats.borrow_mut())?;
        self.head.apply(&h.mul(&h)?)
    }
}

fn toy_feature(rng: &mut SeededRng) -> Result<Tensor> {
    Tensor::new(&TOY_FEATURE, random_vec(rng, TOY_FEATURE.iter().product(), 1.0))
}

/// Temperature for the linear-tail check, as a multiple of `1 + max|logit|`.
pub const LINEAR_TAU_MULTIPLE: f64 = 1e4;
/// Temperature for the smooth-tail check; high enough that the softmax
/// linearization error sits far below the Taylor residual.
pub const SMOOTH_TAU_MULTIPLE: f64 = 1e6;

/// Linear tail at high temperature, then the ε scan on a smooth tail.
pub fn taylor_suite(seeds: u64) -> Result<SuiteOutcome> {
    let mut out = SuiteOutcome::new(&["seed", "tail", "tau", "eps", "rel_err"]);
    let push = |out: &mut SuiteOutcome, seed: u64, tail: &str, tau: f64, r: &TaylorReport| {
        for (e, err) in r.eps.iter().zip(&r.rel_err) {
            out.rows.push(vec![seed.to_string(), tail.to_string(), tau.to_string(), e.to_string(), err.to_string()]);
        }
    };
    let mut worst_linear = 0.0f64;
    let mut ratio_range = (f64::INFINITY, 0.0f64);
    for seed in 0..seeds {
        let mut rng = substream(seed, "theory-taylor");
        let f_p = toy_feature(&mut rng)?;
        let dir = random_vec(&mut rng, f_p.numel(), 1.0);

        let lin = LinearTail::new(seed, TOY_FEATURE[1], TOY_CLASSES)?;
        let tail = |f: &Tensor| lin.apply(f);
        let scale = 1.0 + lin.apply(&f_p)?.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tau = LINEAR_TAU_MULTIPLE * scale;
        let r = check_taylor_feature_gradient(&tail, &f_p, &dir, &TAYLOR_EPS, tau)?;
        push(&mut out, seed, "linear", tau, &r);
        worst_linear = worst_linear.max(r.max_err());
        if r.max_err() > LINEAR_TAIL_TOLERANCE {
            out.failures.push(format!("seed {seed}: linear tail rel err {:e} > {LINEAR_TAIL_TOLERANCE}", r.max_err()));
        }

        let smooth = SmoothTail::new(seed, TOY_FEATURE[1], TOY_CLASSES)?;
        let tail = |f: &Tensor| smooth.apply(f);
        let scale = 1.0 + smooth.apply(&f_p)?.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tau = SMOOTH_TAU_MULTIPLE * scale;
        let r = check_taylor_feature_gradient(&tail, &f_p, &dir, &TAYLOR_EPS, tau)?;
        push(&mut out, seed, "smooth", tau, &r);
        for q in r.ratios() {
            ratio_range = (ratio_range.0.min(q), ratio_range.1.max(q));
        }
        if !r.first_order() {
            out.failures.push(format!("seed {seed}: smooth tail error ratios {:?} outside {FIRST_ORDER_RATIO:?}", r.ratios()));
        }
    }
    out.summary = format!(
        "taylor: {seeds} seeds, worst linear-tail rel err = {worst_linear:.2e}, smooth-tail ratios in [{:.3}, {:.3}]",
        ratio_range.0, ratio_range.1
    );
    Ok(out)
}

/// Descent on the feature through a linear tail: the distance to the
/// target feature must not grow over the first ten steps and must end below
/// where it started.
pub fn pull_suite(seeds: u64) -> Result<SuiteOutcome> {
    let mut out = SuiteOutcome::new(&["seed", "step", "distance"]);
    for seed in 0..seeds {
        let mut rng = substream(seed, "theory-pull");
        let f_t = toy_feature(&mut rng)?;
        let f_p = toy_feature(&mut rng)?;
        let lin = LinearTail::new(seed, TOY_FEATURE[1], TOY_CLASSES)?;
        let tail = |f: &Tensor| lin.apply(f);
        let trace = alignment_pull_demo(&tail, &f_p, &f_t, 100, 1e-2, 4.0)?;
        if trace.iter().take(11).collect::<Vec<_>>().windows(2).any(|w| w[1] > w[0]) {
            out.failures.push(format!("seed {seed}: distance grew during the first 10 steps"));
        }
        if !(trace[100] < trace[0]) {
            out.failures.push(format!("seed {seed}: final distance {} not below initial {}", trace[100], trace[0]));
        }
        out.rows.extend(trace.iter().enumerate().map(|(i, d)| vec![seed.to_string(), i.to_string(), d.to_string()]));
    }
    out.summary = format!("pull: {seeds} seeds");
    Ok(out)
}

/// Reproducible random logits for examples and tests.
pub fn random_logits(seed: u64, k: usize, bound: f64) -> Vec<f64> {
    random_vec(&mut seeded(seed), k, bound)
}
