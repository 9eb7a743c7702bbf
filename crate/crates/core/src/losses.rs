//! Task loss and temperature-softened logit distance.
//!
//! Conventions:
//! - Both losses reduce by the mean over the batch.
//! - The logit distance is `τ² · KL(p_t ‖ p_s)` with `p = softmax(y / τ)`:
//!   the target distribution is the reference, so minimizing it pulls the
//!   student toward the target. The `τ²` keeps gradient magnitude roughly
//!   independent of temperature.
//! - Targets are always detached; no gradient reaches them.

use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Tensor};

/// Temperature used by the reference experiments.
pub const DEFAULT_TEMPERATURE: f64 = 4.0;

/// Ground-truth class indices, one per batch row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Targets(pub Vec<usize>);

impl Targets {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// One-hot `[B×K]` constant, validating every index.
    pub fn one_hot(&self, classes: usize) -> Result<Tensor> {
        let mut data = vec![0.0; self.0.len() * classes];
        for (row, &t) in self.0.iter().enumerate() {
            if t >= classes {
                return Err(Error::Data {
                    row,
                    detail: format!("target {t} outside [0, {classes})"),
                });
            }
            data[row * classes + t] = 1.0;
        }
        Tensor::new(&[self.0.len(), classes], data)
    }
}

fn as_rows(y: &Tensor) -> Result<(usize, usize)> {
    match y.shape() {
        [k] => Ok((1, *k)),
        [b, k] => Ok((*b, *k)),
        other => Err(Error::Dimension {
            op: "logits",
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Mean cross-entropy `−log softmax(logits)[target]` over the batch.
pub fn task_loss(logits: &Tensor, targets: &Targets) -> Result<Tensor> {
    let (b, k) = as_rows(logits)?;
    if targets.len() != b {
        return Err(Error::Dimension {
            op: "task_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let mask = targets.one_hot(k)?.reshape(logits.shape())?;
    Ok(logits.log_softmax()?.mul(&mask)?.sum().scale(-1.0 / b as f64))
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive and finite, got {tau}")));
    }
    Ok(())
}

/// `mean_b τ² · KL(softmax(y_t/τ) ‖ softmax(y_s/τ))`. Gradient flows to
/// `y_s` only.
pub fn kl_logit_distance(y_s: &Tensor, y_t: &Tensor, tau: f64) -> Result<Tensor> {
    check_temperature(tau)?;
    if y_s.shape() != y_t.shape() {
        return Err(Error::Dimension {
            op: "kl_logit_distance",
            lhs: y_s.shape().to_vec(),
            rhs: y_t.shape().to_vec(),
        });
    }
    let (b, _) = as_rows(y_s)?;
    let log_p_t = y_t.detach().scale(1.0 / tau).log_softmax()?;
    let p_t = Tensor::new(y_t.shape(), log_p_t.data().iter().map(|v| v.exp()).collect())?;
    let log_p_s = y_s.scale(1.0 / tau).log_softmax()?;
    // Σ p_t (log p_t − log p_s); exactly zero when the rows coincide
    let kl = log_p_t.sub(&log_p_s)?.mul(&p_t)?.sum();
    Ok(kl.scale(tau * tau / b as f64))
}

/// Closed-form `∂/∂y_s` of the per-sample, un-`τ²`-scaled KL:
/// `(1/τ)(softmax(y_s/τ) − softmax(y_t/τ))`, row by row.
///
/// The gradient of [`kl_logit_distance`] (batch mean, `τ²` applied) is this
/// value times `τ² / B`.
pub fn kd_gradient_wrt_student_logits(y_s: &Tensor, y_t: &Tensor, tau: f64) -> Result<Tensor> {
    check_temperature(tau)?;
    if y_s.shape() != y_t.shape() {
        return Err(Error::Dimension {
            op: "kd_gradient",
            lhs: y_s.shape().to_vec(),
            rhs: y_t.shape().to_vec(),
        });
    }
    let (_, k) = as_rows(y_s)?;
    let scaled = |y: &Tensor| y.data().iter().map(|v| v / tau).collect::<Vec<_>>();
    let p_s = softmax_rows(&scaled(y_s), k);
    let p_t = softmax_rows(&scaled(y_t), k);
    let g = p_s.iter().zip(&p_t).map(|(a, b)| (a - b) / tau).collect();
    Tensor::new(y_s.shape(), g)
}

/// User-supplied logit distance (e.g. a decoupled KD variant).
pub trait LogitDistanceFn {
    fn name(&self) -> &str;
    /// Scalar distance; must treat `y_t` as a constant.
    fn distance(&self, y_s: &Tensor, y_t: &Tensor) -> Result<Tensor>;
}

/// The logit distance `d^L` used by every distillation term.
#[derive(Clone)]
pub enum LogitDistance {
    Kl { temperature: f64 },
    Plugin(Rc<dyn LogitDistanceFn>),
}

impl fmt::Debug for LogitDistance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogitDistance::Kl { temperature } => write!(f, "kl_kd(τ={temperature})"),
            LogitDistance::Plugin(p) => write!(f, "plugin({})", p.name()),
        }
    }
}

impl LogitDistance {
    pub fn kl(temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(LogitDistance::Kl { temperature })
    }

    pub fn distance(&self, y_s: &Tensor, y_t: &Tensor) -> Result<Tensor> {
        match self {
            LogitDistance::Kl { temperature } => kl_logit_distance(y_s, y_t, *temperature),
            LogitDistance::Plugin(p) => p.distance(y_s, &y_t.detach()),
        }
    }
}
