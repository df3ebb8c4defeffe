//! Closed-form fixed points and the starvation derivative.
//!
//! Everything here lives in the log-barrier regime of the dual flow,
//! where stationarity conditions reduce to Lambert-W evaluations. Two
//! exactly solvable families (all features equally strong, and features
//! decoupled one per example) anchor the general picture; a rotation of
//! a two-feature spectrum is then treated perturbatively to first order
//! in the mixing parameter δ, ending in the closed-form derivative that
//! shows a strong feature draining the response of a weak one.
//!
//! All formulas are cross-checked in tests against the dynamics module,
//! which finds the same fixed points numerically without using any
//! closed form.

use ndarray::{Array1, Array2};

use crate::numerics::{lambert_w0, solve};
use crate::{Error, Result};

/// Two-feature mixing matrix [[√(1−δ²), −δ], [δ, √(1−δ²)]].
///
/// δ = 0 is the identity; δ = 1 is a quarter turn (accepted, though the
/// perturbative results below assume δ strictly below one).
pub fn rotation_u(delta: f64) -> Result<Array2<f64>> {
    if !(delta.is_finite() && (0.0..=1.0).contains(&delta)) {
        return Err(Error::Domain(format!("delta = {delta} must lie in [0, 1]")));
    }
    let c = (1.0 - delta * delta).sqrt();
    Ok(ndarray::array![[c, -delta], [delta, c]])
}

/// Shift convention inside the Lambert-W argument of the equal-strength
/// fixed point. The two coincide at λ = 1; only the unit shift solves
/// the stationarity condition for general λ, but both circulate, so both
/// are kept and the tests record which one the flow actually reaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WArgument {
    /// W(λ⁻¹s² + λ)
    ShiftByLambda,
    /// W(λ⁻¹s² + 1)
    ShiftByOne,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Domain(format!("lambda = {lambda} must be positive")));
    }
    Ok(())
}

fn check_orthonormal(u: &Array2<f64>) -> Result<()> {
    let n = u.nrows();
    if u.ncols() != n {
        return Err(Error::Shape(format!("U must be square, got {}×{}", n, u.ncols())));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("U has non-finite entries".into()));
    }
    let gram = u.t().dot(u);
    for i in 0..n {
        for j in 0..n {
            let expect = if i == j { 1.0 } else { 0.0 };
            if (gram[[i, j]] - expect).abs() > 1e-8 {
                return Err(Error::Domain(format!(
                    "U is not orthonormal: (UᵀU)[{i},{j}] = {}",
                    gram[[i, j]]
                )));
            }
        }
    }
    Ok(())
}

/// Fixed point when every feature has the same strength s².
///
/// α is constant across examples, α* = λ·W(arg)/(s² + λ) with the
/// argument chosen by `arg`; the response is z*ⱼ = s²·W(λ⁻¹s² + 1)/
/// (s² + λ)·Σᵢ uᵢⱼ, always with the unit shift, which is the value the
/// flow converges to.
pub fn shared_strength_fixed_point(
    s_sq: f64,
    lambda: f64,
    u: &Array2<f64>,
    arg: WArgument,
) -> Result<(Array1<f64>, Array1<f64>)> {
    check_lambda(lambda)?;
    if !(s_sq.is_finite() && s_sq >= 0.0) {
        return Err(Error::Domain(format!("s² = {s_sq} must be nonnegative")));
    }
    check_orthonormal(u)?;
    let n = u.nrows();
    let w_arg = match arg {
        WArgument::ShiftByLambda => s_sq / lambda + lambda,
        WArgument::ShiftByOne => s_sq / lambda + 1.0,
    };
    let alpha = Array1::from_elem(n, lambda * lambert_w0(w_arg)? / (s_sq + lambda));
    let scale = s_sq * lambert_w0(s_sq / lambda + 1.0)? / (s_sq + lambda);
    let z = Array1::from_shape_fn(n, |j| scale * u.column(j).sum());
    Ok((alpha, z))
}

/// Fixed point when each feature belongs to exactly one example, so the
/// coordinates never interact: αᵢ* = λ·W(λ⁻¹sᵢ² + 1)/(sᵢ² + λ) and
/// zᵢ* = sᵢ²·αᵢ*/λ.
pub fn decoupled_fixed_point(s: &Array1<f64>, lambda: f64) -> Result<(Array1<f64>, Array1<f64>)> {
    check_lambda(lambda)?;
    if s.is_empty() {
        return Err(Error::Shape("empty spectrum".into()));
    }
    if s.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
        return Err(Error::Domain(format!("singular values must be nonnegative, got {s}")));
    }
    let mut alpha = Array1::zeros(s.len());
    let mut z = Array1::zeros(s.len());
    for (i, &si) in s.iter().enumerate() {
        let s_sq = si * si;
        let a = lambda * lambert_w0(s_sq / lambda + 1.0)? / (s_sq + lambda);
        alpha[i] = a;
        z[i] = s_sq * a / lambda;
    }
    Ok((alpha, z))
}

/// Scalar baseline fed into the linearization of [`perturbative_fixed_point`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Solve each coordinate against the diagonal of the coupling matrix
    /// A = λ⁻¹·U·(S² + λI)·Uᵀ, keeping the rotation's diagonal weight.
    DiagonalOfA,
    /// Solve each coordinate against its own bare strength, dropping the
    /// rotation entirely. Coincides with `DiagonalOfA` when U = I.
    BareSpectrum,
}

/// First-order fixed point of the log-barrier flow under a weak
/// coupling: linearize the field around the scalar baseline α* and solve
/// α̃* = [A + diag(1/α*)]⁻¹·(1 − log α*).
pub fn perturbative_fixed_point(
    u: &Array2<f64>,
    s: &Array1<f64>,
    lambda: f64,
    baseline: Baseline,
) -> Result<Array1<f64>> {
    check_lambda(lambda)?;
    check_orthonormal(u)?;
    let n = u.nrows();
    if s.len() != n {
        return Err(Error::Shape(format!("U is {n}×{n}, spectrum has {} entries", s.len())));
    }
    if s.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
        return Err(Error::Domain(format!("singular values must be nonnegative, got {s}")));
    }
    let a_mat = Array2::from_shape_fn((n, n), |(i, k)| {
        let mut acc = 0.0;
        for j in 0..n {
            acc += u[[i, j]] * (s[j] * s[j] + lambda) * u[[k, j]];
        }
        acc / lambda
    });
    let mut bracket = a_mat.clone();
    let mut rhs = Array1::zeros(n);
    for i in 0..n {
        let c = match baseline {
            Baseline::DiagonalOfA => a_mat[[i, i]],
            Baseline::BareSpectrum => (s[i] * s[i] + lambda) / lambda,
        };
        // The scalar stationarity −log α = c·α has the root α = W(c)/c.
        let alpha_i = lambert_w0(c)? / c;
        bracket[[i, i]] += 1.0 / alpha_i;
        rhs[i] = 1.0 - alpha_i.ln();
    }
    solve(&bracket, &rhs)
}

/// A rotated two-feature spectrum: strengths s₁² ≥ s₂² > 0 mixed by
/// [`rotation_u`] with parameter δ ∈ [0, 1).
#[derive(Debug, Clone, Copy)]
pub struct TwoFeatureConfig {
    pub s1_sq: f64,
    pub s2_sq: f64,
    pub lambda: f64,
    pub delta: f64,
}

impl TwoFeatureConfig {
    pub fn new(s1_sq: f64, s2_sq: f64, lambda: f64, delta: f64) -> Result<Self> {
        if !(s2_sq.is_finite() && s2_sq > 0.0 && s1_sq.is_finite() && s1_sq >= s2_sq) {
            return Err(Error::Domain(format!(
                "need s₁² ≥ s₂² > 0, got s₁² = {s1_sq}, s₂² = {s2_sq}"
            )));
        }
        check_lambda(lambda)?;
        if !(delta.is_finite() && (0.0..1.0).contains(&delta)) {
            return Err(Error::Domain(format!("delta = {delta} must lie in [0, 1)")));
        }
        Ok(TwoFeatureConfig { s1_sq, s2_sq, lambda, delta })
    }
}

/// W((λ + s²)/λ), its exponential, and the recurring denominator
/// λ + λe^W + s², which factors as λ·e^W·(W + 1).
struct WTerms {
    w: f64,
    e: f64,
    d: f64,
}

fn w_terms(s_sq: f64, lambda: f64) -> Result<WTerms> {
    let w = lambert_w0((lambda + s_sq) / lambda)?;
    let e = w.exp();
    Ok(WTerms { w, e, d: lambda + lambda * e + s_sq })
}

/// Steady-state feature response of the rotated two-feature system to
/// first order in δ. At δ = 0 it reduces exactly to the decoupled
/// responses of s₁ and s₂.
pub fn perturbative_response(cfg: &TwoFeatureConfig) -> Result<(f64, f64)> {
    let TwoFeatureConfig { s1_sq, s2_sq, lambda, delta } = *cfg;
    let t1 = w_terms(s1_sq, lambda)?;
    let t2 = w_terms(s2_sq, lambda)?;
    let den = t1.d * t2.d;
    let z1 = (delta * s1_sq * (t2.w + 1.0) * (lambda + lambda * t1.e + s2_sq)
        + lambda * s1_sq * t2.e * (t1.w + 1.0) * (t2.w + 1.0))
        / den;
    let z2 = (lambda * s2_sq * t1.e * (t1.w + 1.0) * (t2.w + 1.0)
        - delta * s2_sq * (t1.w + 1.0) * (lambda + lambda * t2.e + s1_sq))
        / den;
    Ok((z1, z2))
}

/// d z₂*/d s₁²: how the weak feature's steady response moves when the
/// strong feature gets stronger. Strictly negative for δ > 0 and
/// s₁² > s₂² (e^W is increasing), zero when δ = 0 or the strengths tie.
pub fn starvation_derivative(cfg: &TwoFeatureConfig) -> Result<f64> {
    let TwoFeatureConfig { s1_sq, s2_sq, lambda, delta } = *cfg;
    let t1 = w_terms(s1_sq, lambda)?;
    let t2 = w_terms(s2_sq, lambda)?;
    Ok(-delta * lambda * s2_sq * (t1.e - t2.e) * (t1.w + 1.0) / (t1.d * t1.d * t2.d))
}
