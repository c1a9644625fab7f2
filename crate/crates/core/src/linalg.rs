//! Tridiagonal solvers used by the spline fit and the semi-implicit
//! parabolic step.

use crate::error::{Error, Result};

/// Thomas algorithm for `sub[i] x[i-1] + diag[i] x[i] + sup[i] x[i+1] = rhs[i]`.
/// `sub[0]` and `sup[n-1]` are ignored.
pub fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if sub.len() != n || sup.len() != n || rhs.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: sub.len().min(sup.len()).min(rhs.len()),
        });
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(Error::NotDiagonallyDominant { row: 0 });
    }
    c[0] = if n > 1 { sup[0] / denom } else { 0.0 };
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - sub[i] * c[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::NotDiagonallyDominant { row: i });
        }
        c[i] = if i + 1 < n { sup[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / denom;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    Ok(x)
}

/// Cyclic tridiagonal solve via Sherman-Morrison. Row `i` couples
/// `x[i-1]`, `x[i]`, `x[i+1]` with periodic wrap-around. Requires weak
/// diagonal dominance with at least one strict row.
pub fn solve_periodic_tridiagonal(
    sub: &[f64],
    diag: &[f64],
    sup: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let n = diag.len();
    if n < 3 {
        return Err(Error::InvalidInput("periodic system needs n >= 3".into()));
    }
    let mut strict = false;
    for i in 0..n {
        let off = sub[i].abs() + sup[i].abs();
        if diag[i].abs() < off * (1.0 - 1e-14) {
            return Err(Error::NotDiagonallyDominant { row: i });
        }
        strict |= diag[i].abs() > off;
    }
    if !strict {
        return Err(Error::NotDiagonallyDominant { row: 0 });
    }
    let alpha = sup[n - 1];
    let beta = sub[0];
    let gamma = -diag[0];
    let mut b = diag.to_vec();
    b[0] -= gamma;
    b[n - 1] -= alpha * beta / gamma;
    let x = solve_tridiagonal(sub, &b, sup, rhs)?;
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = alpha;
    let z = solve_tridiagonal(sub, &b, sup, &u)?;
    let fact = (x[0] + beta * x[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma);
    Ok(x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect())
}
