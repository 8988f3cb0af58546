//! Bisection root finding.

use crate::error::{Error, Result};

/// Find a root of `f` inside `bracket` by bisection. The bracket must
/// straddle a sign change; returns the midpoint once the bracket width is
/// below `tol`.
pub fn find_root<F: Fn(f64) -> f64>(f: F, bracket: (f64, f64), tol: f64) -> Result<f64> {
    let (mut lo, mut hi) = bracket;
    assert!(lo <= hi, "bracket out of order");
    assert!(tol > 0.0, "tolerance must be positive");
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo * fhi > 0.0 {
        return Err(Error::NoSignChange { lo, hi, flo, fhi });
    }
    while hi - lo >= tol {
        let mid = 0.5 * (lo + hi);
        let fmid = f(mid);
        if fmid == 0.0 {
            return Ok(mid);
        }
        if flo * fmid < 0.0 {
            hi = mid;
        } else {
            lo = mid;
            flo = fmid;
        }
    }
    Ok(0.5 * (lo + hi))
}
