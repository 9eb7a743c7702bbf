//! Central finite differences. Uses only forward evaluation, so it serves as
//! an oracle for the tape's backward rules and as a Jacobian estimator.

use crate::error::Result;
use crate::tensor::Tensor;

/// Default step for 64-bit central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Estimate `∂f/∂t` for every entry of `t` by perturbing it in place.
/// `f` must rebuild its value from the current contents of `t`.
pub fn central_gradient<F>(t: &Tensor, h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut() -> Result<f64>,
{
    let n = t.numel();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let orig = t.data()[i];
        t.data_mut()[i] = orig + h;
        let plus = f()?;
        t.data_mut()[i] = orig - h;
        let minus = f()?;
        t.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Directional derivative of a vector-valued map: `(g(x + h·v) − g(x − h·v)) / 2h`.
pub fn directional<G>(x: &[f64], v: &[f64], h: f64, mut g: G) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let gp = g(&plus)?;
    let gm = g(&minus)?;
    Ok(gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * h)).collect())
}

/// Jacobian `[out × in]` (row-major) of `g` at `x`, one column per unit direction.
pub fn jacobian<G>(x: &[f64], h: f64, mut g: G) -> Result<(usize, Vec<f64>)>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        cols.push(directional(x, &e, h, &mut g)?);
        e[j] = 0.0;
    }
    let m = cols.first().map_or(0, Vec::len);
    let mut jac = vec![0.0; m * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            jac[i * n + j] = *v;
        }
    }
    Ok((m, jac))
}

/// Relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}
