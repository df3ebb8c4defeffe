use crate::{Error, Result};

/// Smallest argument of the principal branch: −1/e rounded to f64.
const NEG_INV_E: f64 = -0.36787944117144233;

/// Principal branch W₀ of the Lambert W function.
///
/// Solves `w·exp(w) = x` for `w ≥ −1`, defined on `x ≥ −1/e`. Uses a
/// region-dependent seed (branch-point series near −1/e, `log(1+x)` in the
/// bulk, two-term asymptotic for large x) followed by Halley iteration,
/// which converges cubically — a handful of steps reach f64 round-off.
pub fn lambert_w0(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("lambert_w0: non-finite argument {x}")));
    }
    if x < NEG_INV_E {
        return Err(Error::Domain(format!(
            "lambert_w0: argument {x} below −1/e ≈ {NEG_INV_E}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }

    // q = e·x + 1 measures the distance to the branch point; clamp the tiny
    // negative values that rounding can produce at x = −1/e exactly.
    let q = (std::f64::consts::E * x + 1.0).max(0.0);
    let p = (2.0 * q).sqrt();
    if p < 1e-5 {
        // Branch-point series: w = −1 + p − p²/3 + 11p³/72 − 43p⁴/540 + O(p⁵).
        // For p this small the truncation error is below f64 resolution and
        // Halley would divide by w+1 ≈ 0, so return the series directly.
        return Ok(-1.0 + p - p * p / 3.0 + 11.0 * p * p * p / 72.0
            - 43.0 * p * p * p * p / 540.0);
    }

    let mut w = if x < -0.25 {
        -1.0 + p - p * p / 3.0 + 11.0 * p * p * p / 72.0
    } else if x <= 3.0 {
        x.ln_1p()
    } else {
        // w ≈ L1 − L2 + L2/L1 with L1 = ln x, L2 = ln ln x.
        let l1 = x.ln();
        let l2 = l1.ln();
        l1 - l2 + l2 / l1
    };

    for _ in 0..40 {
        let ew = w.exp();
        let f = w * ew - x;
        if f == 0.0 {
            break;
        }
        let wp1 = w + 1.0;
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let dw = f / denom;
        w -= dw;
        if dw.abs() <= 1e-16 * (1.0 + w.abs()) {
            break;
        }
    }
    Ok(w)
}
