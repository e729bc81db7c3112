//! Fixed-step classical Runge-Kutta integration over `t ∈ [0, 1]`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Integrates `dx/dt = field(x, t)` from `t = 0` to `t = 1` in `steps` equal
/// RK4 steps. `x0` holds one state per row.
pub fn rk4<S, F>(x0: Array2<S>, steps: usize, mut field: F) -> Result<Array2<S>>
where
    S: Scalar,
    F: FnMut(&Array2<S>, S) -> Result<Array2<S>>,
{
    if steps == 0 {
        return Err(Error::Range("RK4 needs at least one step".into()));
    }
    let h = S::one() / S::c(steps as f64);
    let half = h / S::c(2.0);
    let sixth = h / S::c(6.0);
    let two = S::c(2.0);
    let mut x = x0;
    for i in 0..steps {
        let t = S::c(i as f64) * h;
        let k1 = field(&x, t)?;
        let k2 = field(&(&x + &(&k1 * half)), t + half)?;
        let k3 = field(&(&x + &(&k2 * half)), t + half)?;
        let k4 = field(&(&x + &(&k3 * h)), t + h)?;
        x = x + (k1 + (k2 + k3) * two + k4) * sixth;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("state became non-finite at step {i}")));
        }
    }
    Ok(x)
}
