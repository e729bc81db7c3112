//! Maximum mean discrepancy with a multiscale inverse-multiquadratic kernel
//! `k(x, y) = Σ_s s² / (s² + ‖x − y‖²)`.
//!
//! Both estimators are the biased V-statistic
//! `mean k(a, a') + mean k(b, b') − 2 mean k(a, b)`.

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::nn::Var;
use crate::scalar::Scalar;

pub const MMD_SCALES: [f64; 3] = [0.05, 0.2, 0.9];

fn kernel_mean<S: Scalar>(a: ArrayView2<'_, S>, b: ArrayView2<'_, S>) -> S {
    let scales = MMD_SCALES.map(|s| S::c(s * s));
    let mut total = S::zero();
    for ra in a.outer_iter() {
        for rb in b.outer_iter() {
            let d = ra
                .iter()
                .zip(rb.iter())
                .fold(S::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
            for &s2 in &scales {
                total += s2 / (s2 + d);
            }
        }
    }
    total / S::c((a.nrows() * b.nrows()) as f64)
}

/// Squared MMD between two sample sets (rows are samples).
pub fn mmd<S: Scalar>(a: ArrayView2<'_, S>, b: ArrayView2<'_, S>) -> Result<S> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Empty("MMD needs two non-empty sample sets".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "MMD sample dimensions differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let kaa = kernel_mean(a, a);
    let kbb = kernel_mean(b, b);
    let kab = kernel_mean(a, b);
    Ok(kaa + kbb - (kab + kab))
}

fn kernel_mean_var<'t, S: Scalar>(a: Var<'t, S>, b: Var<'t, S>) -> Var<'t, S> {
    let d = a.sq_dist(b);
    let mut total: Option<Var<'t, S>> = None;
    for s in MMD_SCALES {
        let s2 = S::c(s * s);
        let k = d.add_scalar(s2).recip().scale(s2);
        total = Some(match total {
            Some(t) => t.add(k),
            None => k,
        });
    }
    total.expect("at least one scale").mean()
}

/// Differentiable squared MMD on a tape.
pub fn mmd_var<'t, S: Scalar>(a: Var<'t, S>, b: Var<'t, S>) -> Result<Var<'t, S>> {
    let (na, da) = a.shape();
    let (nb, db) = b.shape();
    if na == 0 || nb == 0 {
        return Err(Error::Empty("MMD needs two non-empty sample sets".into()));
    }
    if da != db {
        return Err(Error::Shape(format!("MMD sample dimensions differ: {da} vs {db}")));
    }
    let kab = kernel_mean_var(a, b);
    Ok(kernel_mean_var(a, a)
        .add(kernel_mean_var(b, b))
        .sub(kab.scale(S::c(2.0))))
}
