use crate::error::Result;

use super::{Graph, Scalar, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences at `point` and returns the largest elementwise relative
/// error `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
///
/// `f` receives a fresh graph and the trainable leaf holding the point, and
/// must return a scalar node. It must be deterministic (no dropout).
pub fn grad_check<'a, T, F>(mut f: F, point: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Graph<'a, T>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let x = g.param_owned(point.clone());
        let loss = f(&mut g, x)?;
        let mut grads = g.backward(loss)?;
        grads.take(x).expect("point is a trainable leaf")
    };

    let mut eval = |p: &Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let loss = f(&mut g, x)?;
        Ok(g.value(loss).item()?.to_f64().unwrap_or(f64::NAN))
    };

    let hh = T::from_f64_lossy(h);
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + hh;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - hh;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i].to_f64().unwrap_or(f64::NAN);
        let denom = a.abs().max(numeric.abs()).max(1e-3);
        let err = (a - numeric).abs() / denom;
        if err.is_nan() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
