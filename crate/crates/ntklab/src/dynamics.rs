//! Primal gradient descent and the dual autonomous system.
//!
//! Gradient ascent on the Legendre-dual objective turns training into an
//! autonomous flow on the variational parameters α. Three vector fields
//! are implemented: the exact field with its entropy barrier, a
//! log-barrier approximation whose fixed points have closed forms, and
//! the decoupled field induced by the spectral penalty, which acts on
//! each coordinate independently. All fields are written without the
//! learning rate: η is folded into the integrator's step size so the
//! model stays separate from the numerics.
//!
//! Conventions: α is a column vector, fields are the transpose of any
//! row-vector expressions elsewhere; dual simulations start from
//! α₀ = 0.5·1 unless a caller provides a state, matching the zero-logit
//! start of primal training where the optimal α is exactly one half;
//! states are clamped into (ε, 1−ε) with ε = 1e−12 after every step and
//! the clamp count is reported, never hidden.

use std::io::Write;

use ndarray::{Array1, Array2};

use crate::model::{Dataset, LinearizedModel, ParamVector};
use crate::numerics::{solve, symmetric_eig, OdeConfig, OdeMethod};
use crate::objectives::{
    binary_entropy, feature_decomposition, feature_response, sigmoid, total_loss, FeatureBasis,
    LossKind,
};
use crate::{Error, Result};

/// Clamp margin for the variational parameters.
pub const ALPHA_CLAMP: f64 = 1e-12;

/// Which dual vector field drives a simulation or fixed-point solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    /// Entropy barrier plus the spectral coupling term.
    Exact,
    /// Log barrier with the spectrum shifted by λ; coordinatewise
    /// closed-form fixed points.
    Approx,
    /// The decoupled field of the spectral penalty; ignores the
    /// spectrum entirely.
    Sd,
}

/// Variational parameters and penalty strength of a dual flow. The
/// feature basis travels alongside as a separate argument so that one
/// basis can serve many states.
#[derive(Debug, Clone)]
pub struct DualState {
    pub alpha: Array1<f64>,
    pub lambda: f64,
}

impl DualState {
    pub fn new(alpha: Array1<f64>, lambda: f64) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Shape("empty state".into()));
        }
        if alpha.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::Domain(format!(
                "alpha must lie strictly inside (0,1), got {alpha}"
            )));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Domain(format!("lambda = {lambda} must be positive")));
        }
        Ok(DualState { alpha, lambda })
    }

    /// The default start: α₀ = 0.5 everywhere, the maximum-entropy point
    /// and the image of a zero-logit network.
    pub fn uniform(n: usize, lambda: f64) -> Result<Self> {
        DualState::new(Array1::from_elem(n, 0.5), lambda)
    }
}

fn check_alpha(alpha: &Array1<f64>) -> Result<()> {
    if alpha.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::Domain(format!(
            "alpha must lie strictly inside (0,1), got {alpha}"
        )));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<f64> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Domain(format!("lambda = {lambda} must be positive")));
    }
    Ok(lambda)
}

/// U·diag(S²)·Uᵀ·α without materializing the n×n coupling matrix.
fn coupling(basis: &FeatureBasis, alpha: &Array1<f64>) -> Array1<f64> {
    let mut ut_a = basis.u.t().dot(alpha);
    for (c, &s) in ut_a.iter_mut().zip(&basis.s) {
        *c *= s * s;
    }
    basis.u.dot(&ut_a)
}

/// The exact ascent field: −log α + log(1−α) − (1/λ)·U·diag(S²)·Uᵀ·α.
/// The two logs act as a barrier keeping trajectories inside (0,1)ⁿ.
pub fn dual_field(alpha: &Array1<f64>, basis: &FeatureBasis, lambda: f64) -> Result<Array1<f64>> {
    check_alpha(alpha)?;
    check_lambda(lambda)?;
    if alpha.len() != basis.n() {
        return Err(Error::Shape(format!(
            "alpha has {} entries, basis has {}",
            alpha.len(),
            basis.n()
        )));
    }
    let coupled = coupling(basis, alpha);
    Ok(Array1::from_shape_fn(alpha.len(), |i| {
        let a = alpha[i];
        -a.ln() + (1.0 - a).ln() - coupled[i] / lambda
    }))
}

/// The approximate field: −log α − (1/λ)·U·(diag(S²)+λI)·Uᵀ·α. Near
/// α = 0 it agrees with the exact field to O(α²) per coordinate.
pub fn approx_dual_field(
    alpha: &Array1<f64>,
    basis: &FeatureBasis,
    lambda: f64,
) -> Result<Array1<f64>> {
    check_alpha(alpha)?;
    check_lambda(lambda)?;
    if alpha.len() != basis.n() {
        return Err(Error::Shape(format!(
            "alpha has {} entries, basis has {}",
            alpha.len(),
            basis.n()
        )));
    }
    let coupled = coupling(basis, alpha);
    Ok(Array1::from_shape_fn(alpha.len(), |i| {
        -alpha[i].ln() - coupled[i] / lambda - alpha[i]
    }))
}

/// The decoupled field of the spectral penalty:
/// −log α + log(1−α) − α/λ, coordinate by coordinate. The spectrum never
/// appears, which is the whole point.
pub fn sd_dual_field(alpha: &Array1<f64>, lambda: f64) -> Result<Array1<f64>> {
    check_alpha(alpha)?;
    check_lambda(lambda)?;
    Ok(alpha.mapv(|a| -a.ln() + (1.0 - a).ln() - a / lambda))
}

/// The shifted spectral penalty (λᵢ/2)(ŷᵢ − yᵢγᵢ)² anchors each margin at
/// ω = γᵢ + αᵢ/λᵢ instead of ω = αᵢ/λ. Coordinate i reads only (λᵢ, γᵢ),
/// so the field stays spectrum-free and decouples exactly like the
/// unshifted penalty. λ and γ are per coordinate; callers expand
/// per-class values to per-example vectors.
pub fn sd_shift_dual_field(
    alpha: &Array1<f64>,
    lambdas: &Array1<f64>,
    gammas: &Array1<f64>,
) -> Result<Array1<f64>> {
    check_alpha(alpha)?;
    check_shift(alpha.len(), lambdas, gammas)?;
    Ok(Array1::from_shape_fn(alpha.len(), |i| {
        let a = alpha[i];
        -a.ln() + (1.0 - a).ln() - a / lambdas[i] - gammas[i]
    }))
}

/// Fixed point of the shifted field: the unique root per coordinate of
/// log((1−α)/α) = α/λᵢ + γᵢ. The left side falls from +∞ to −∞ while the
/// right side rises, so bisection cannot miss.
pub fn sd_shift_fixed_point(
    lambdas: &Array1<f64>,
    gammas: &Array1<f64>,
) -> Result<Array1<f64>> {
    check_shift(lambdas.len(), lambdas, gammas)?;
    Ok(Array1::from_shape_fn(lambdas.len(), |i| {
        let g = |a: f64| ((1.0 - a) / a).ln() - a / lambdas[i] - gammas[i];
        let (mut lo, mut hi) = (ALPHA_CLAMP, 1.0 - ALPHA_CLAMP);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }))
}

/// Margins induced by the shifted penalty at a given α: ωᵢ = γᵢ + αᵢ/λᵢ.
/// Project onto a basis with Uᵀω for the per-feature view.
pub fn sd_shift_response(
    alpha: &Array1<f64>,
    lambdas: &Array1<f64>,
    gammas: &Array1<f64>,
) -> Result<Array1<f64>> {
    check_alpha(alpha)?;
    check_shift(alpha.len(), lambdas, gammas)?;
    Ok(Array1::from_shape_fn(alpha.len(), |i| {
        gammas[i] + alpha[i] / lambdas[i]
    }))
}

fn check_shift(n: usize, lambdas: &Array1<f64>, gammas: &Array1<f64>) -> Result<()> {
    if lambdas.len() != n || gammas.len() != n {
        return Err(Error::Shape(format!(
            "shift parameters sized {}/{} against {} coordinates",
            lambdas.len(),
            gammas.len(),
            n
        )));
    }
    for &l in lambdas {
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::Domain(format!("shift lambda {l} must be positive")));
        }
    }
    for &g in gammas {
        if !g.is_finite() {
            return Err(Error::Domain(format!("shift gamma {g} must be finite")));
        }
    }
    Ok(())
}

fn eval_field(
    alpha: &Array1<f64>,
    basis: &FeatureBasis,
    lambda: f64,
    kind: FieldKind,
) -> Result<Array1<f64>> {
    match kind {
        FieldKind::Exact => dual_field(alpha, basis, lambda),
        FieldKind::Approx => approx_dual_field(alpha, basis, lambda),
        FieldKind::Sd => sd_dual_field(alpha, lambda),
    }
}

/// The scalar objective each field ascends. Useful as the "loss" column
/// of a dual trajectory and for the monotonicity property tests.
pub fn dual_objective(
    alpha: &Array1<f64>,
    basis: &FeatureBasis,
    lambda: f64,
    kind: FieldKind,
) -> Result<f64> {
    check_alpha(alpha)?;
    check_lambda(lambda)?;
    let quad = |shift: f64| -> f64 {
        let mut acc = 0.0;
        let ut_a = basis.u.t().dot(alpha);
        for (c, &s) in ut_a.iter().zip(&basis.s) {
            acc += (s * s + shift) * c * c;
        }
        acc / (2.0 * lambda)
    };
    match kind {
        FieldKind::Exact => {
            let mut h = 0.0;
            for &a in alpha {
                h += binary_entropy(a)?;
            }
            Ok(h - quad(0.0))
        }
        FieldKind::Approx => {
            let mut lead = 0.0;
            for &a in alpha {
                lead += a - a * a.ln();
            }
            Ok(lead - quad(lambda))
        }
        FieldKind::Sd => {
            let mut h = 0.0;
            for &a in alpha {
                h += binary_entropy(a)?;
            }
            Ok(h - alpha.dot(alpha) / (2.0 * lambda))
        }
    }
}

/// Jacobian of the chosen field at α; symmetric for every kind.
fn field_jacobian(
    alpha: &Array1<f64>,
    basis: &FeatureBasis,
    lambda: f64,
    kind: FieldKind,
) -> Array2<f64> {
    let n = alpha.len();
    let mut j = Array2::zeros((n, n));
    match kind {
        FieldKind::Exact | FieldKind::Approx => {
            for r in 0..n {
                for c in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += basis.u[[r, k]] * basis.s[k] * basis.s[k] * basis.u[[c, k]];
                    }
                    j[[r, c]] = -acc / lambda;
                }
            }
            for i in 0..n {
                let a = alpha[i];
                j[[i, i]] += match kind {
                    FieldKind::Exact => -1.0 / (a * (1.0 - a)),
                    FieldKind::Approx => -1.0 / a - 1.0,
                    FieldKind::Sd => unreachable!(),
                };
            }
        }
        FieldKind::Sd => {
            for i in 0..n {
                let a = alpha[i];
                j[[i, i]] = -1.0 / (a * (1.0 - a)) - 1.0 / lambda;
            }
        }
    }
    j
}

/// Feature response along a dual trajectory: the exact and approximate
/// flows predict ẑ = (1/λ)·diag(S²)·Uᵀ·α, the decoupled flow predicts
/// ẑ = (1/λ)·Uᵀ·α.
pub fn dual_response(
    alpha: &Array1<f64>,
    basis: &FeatureBasis,
    lambda: f64,
    kind: FieldKind,
) -> Array1<f64> {
    let mut z = basis.u.t().dot(alpha);
    match kind {
        FieldKind::Exact | FieldKind::Approx => {
            for (v, &s) in z.iter_mut().zip(&basis.s) {
                *v *= s * s / lambda;
            }
        }
        FieldKind::Sd => {
            z.mapv_inplace(|v| v / lambda);
        }
    }
    z
}

/// A recorded flow: α snapshots with their feature responses and
/// objective values. Primal flows record the induced α = σ(−yᵢŷᵢ) so
/// that one schema serves both kinds of dynamics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Array1<f64>>,
    pub z_series: Vec<Array1<f64>>,
    pub loss_series: Vec<f64>,
    pub converged: bool,
    /// Steps taken by the integrator (snapshots may be sparser).
    pub steps: usize,
    /// Coordinates pushed back into (ε, 1−ε) across the whole run.
    pub clamp_count: u64,
}

impl Trajectory {
    pub fn last_state(&self) -> &Array1<f64> {
        self.states.last().expect("trajectory has at least one snapshot")
    }

    pub fn last_z(&self) -> &Array1<f64> {
        self.z_series.last().expect("trajectory has at least one snapshot")
    }

    pub fn last_loss(&self) -> f64 {
        *self.loss_series.last().expect("trajectory has at least one snapshot")
    }

    /// Export as CSV: `t,alpha_1..alpha_n,z_1..z_n,loss`, one row per
    /// snapshot, full float precision.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let n = self.states.first().map_or(0, |s| s.len());
        let mut header = String::from("t");
        for i in 1..=n {
            header.push_str(&format!(",alpha_{i}"));
        }
        for i in 1..=n {
            header.push_str(&format!(",z_{i}"));
        }
        header.push_str(",loss");
        writeln!(out, "{header}")?;
        for k in 0..self.times.len() {
            let mut row = format!("{}", self.times[k]);
            for &a in &self.states[k] {
                row.push_str(&format!(",{a}"));
            }
            for &z in &self.z_series[k] {
                row.push_str(&format!(",{z}"));
            }
            row.push_str(&format!(",{}", self.loss_series[k]));
            writeln!(out, "{row}")?;
        }
        Ok(())
    }
}

fn clamp_state(alpha: &mut Array1<f64>) -> u64 {
    let mut clamped = 0;
    for a in alpha.iter_mut() {
        if *a < ALPHA_CLAMP {
            *a = ALPHA_CLAMP;
            clamped += 1;
        } else if *a > 1.0 - ALPHA_CLAMP {
            *a = 1.0 - ALPHA_CLAMP;
            clamped += 1;
        }
    }
    clamped
}

/// Clamp only for evaluating a field at an intermediate integrator
/// stage; does not count as a state clamp.
fn stage_point(alpha: &Array1<f64>) -> Array1<f64> {
    alpha.mapv(|a| a.clamp(ALPHA_CLAMP, 1.0 - ALPHA_CLAMP))
}

/// Integrate the chosen dual field from `state0`.
///
/// The step size plays the role of η·Δt. Snapshots are recorded at step
/// zero, every `record_every` steps, and at the end. The run converges
/// when the field's sup norm falls below the config tolerance; it errors
/// with a divergence if any state goes non-finite.
pub fn simulate_dual(
    state0: &DualState,
    basis: &FeatureBasis,
    kind: FieldKind,
    cfg: &OdeConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if state0.alpha.len() != basis.n() {
        return Err(Error::Shape(format!(
            "state has {} entries, basis has {}",
            state0.alpha.len(),
            basis.n()
        )));
    }
    let lambda = state0.lambda;
    let h = cfg.step_size;
    let mut alpha = state0.alpha.clone();
    let mut clamp_count = clamp_state(&mut alpha);

    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        z_series: Vec::new(),
        loss_series: Vec::new(),
        converged: false,
        steps: 0,
        clamp_count: 0,
    };
    let mut record = |t: f64, a: &Array1<f64>| -> Result<()> {
        traj.times.push(t);
        traj.states.push(a.clone());
        traj.z_series.push(dual_response(a, basis, lambda, kind));
        traj.loss_series.push(dual_objective(a, basis, lambda, kind)?);
        Ok(())
    };
    record(0.0, &alpha)?;

    let mut step = 0usize;
    let mut last_recorded = 0usize;
    let mut converged = false;
    while step < cfg.max_steps {
        let f = eval_field(&alpha, basis, lambda, kind)?;
        let sup = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !sup.is_finite() {
            return Err(Error::Divergence {
                what: "dual field".into(),
                step,
            });
        }
        if sup < cfg.convergence_tol {
            converged = true;
            break;
        }
        match cfg.method {
            OdeMethod::Euler => {
                alpha.scaled_add(h, &f);
            }
            OdeMethod::Rk4 => {
                let k1 = f;
                let k2 = eval_field(&stage_point(&(&alpha + &(0.5 * h * &k1))), basis, lambda, kind)?;
                let k3 = eval_field(&stage_point(&(&alpha + &(0.5 * h * &k2))), basis, lambda, kind)?;
                let k4 = eval_field(&stage_point(&(&alpha + &(h * &k3))), basis, lambda, kind)?;
                alpha = &alpha + &((h / 6.0) * &(&k1 + &(2.0 * &k2) + &(2.0 * &k3) + &k4));
            }
        }
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                what: "dual state".into(),
                step,
            });
        }
        clamp_count += clamp_state(&mut alpha);
        step += 1;
        if step % cfg.record_every == 0 {
            record(step as f64 * h, &alpha)?;
            last_recorded = step;
        }
    }
    if last_recorded != step {
        record(step as f64 * h, &alpha)?;
    }
    traj.converged = converged;
    traj.steps = step;
    traj.clamp_count = clamp_count;
    Ok(traj)
}

/// Find an interior zero of the chosen field: damped Newton first, a
/// long integration as fallback, and a hard ‖field‖∞ < 1e−10 exit bar.
pub fn find_fixed_point(
    basis: &FeatureBasis,
    lambda: f64,
    kind: FieldKind,
) -> Result<Array1<f64>> {
    check_lambda(lambda)?;
    const TOL: f64 = 1e-10;
    const MARGIN: f64 = 1e-10;
    let n = basis.n();
    let mut alpha = Array1::from_elem(n, 0.5);

    let sup =
        |v: &Array1<f64>| -> f64 { v.iter().fold(0.0f64, |m, x| m.max(x.abs())) };

    let newton = |alpha: &mut Array1<f64>| -> Result<bool> {
        for _ in 0..80 {
            let f = eval_field(alpha, basis, lambda, kind)?;
            let f_norm = sup(&f);
            if f_norm < TOL {
                return Ok(true);
            }
            let jac = field_jacobian(alpha, basis, lambda, kind);
            let dir = solve(&jac, &(-&f))?;
            // Backtrack until the step stays interior and shrinks the
            // residual; the barrier blows up outside (0,1)ⁿ.
            let mut t = 1.0;
            let mut accepted = false;
            while t >= 1e-8 {
                let cand = alpha.clone() + &(t * &dir);
                let interior = cand.iter().all(|&a| a > MARGIN && a < 1.0 - MARGIN);
                if interior {
                    let f_new = eval_field(&cand, basis, lambda, kind)?;
                    if sup(&f_new) < f_norm {
                        *alpha = cand;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                return Ok(false);
            }
        }
        Ok(false)
    };

    if newton(&mut alpha)? {
        return Ok(alpha);
    }

    // Fallback: ride the flow toward the attractor, then polish.
    let state = DualState::uniform(n, lambda)?;
    let cfg = OdeConfig {
        method: OdeMethod::Rk4,
        step_size: 5e-3,
        max_steps: 400_000,
        convergence_tol: 1e-11,
        record_every: 400_000,
    };
    let traj = simulate_dual(&state, basis, kind, &cfg)?;
    alpha = traj.last_state().clone();
    if newton(&mut alpha)? {
        return Ok(alpha);
    }
    let residual = sup(&eval_field(&alpha, basis, lambda, kind)?);
    if residual < TOL {
        return Ok(alpha);
    }
    Err(Error::NoConvergence {
        what: format!("fixed point of {kind:?} field (residual {residual:.3e})"),
        steps: cfg.max_steps,
    })
}

/// Stability Jacobian of the exact flow at a fixed point, scaled by the
/// learning rate: J = η(−diag(1/(αᵢ(1−αᵢ))) − (1/λ)·U·diag(S²)·Uᵀ).
/// Returns the matrix together with its eigenvalues (it is symmetric, so
/// they are real); every eigenvalue negative means the point attracts.
pub fn stability_jacobian(
    alpha_star: &Array1<f64>,
    basis: &FeatureBasis,
    lambda: f64,
    eta: f64,
) -> Result<(Array2<f64>, Array1<f64>)> {
    check_alpha(alpha_star)?;
    check_lambda(lambda)?;
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::Domain(format!("eta = {eta} must be positive")));
    }
    if alpha_star.len() != basis.n() {
        return Err(Error::Shape(format!(
            "alpha has {} entries, basis has {}",
            alpha_star.len(),
            basis.n()
        )));
    }
    let mut j = field_jacobian(alpha_star, basis, lambda, FieldKind::Exact);
    j.mapv_inplace(|v| eta * v);
    let (eigs, _) = symmetric_eig(&j)?;
    Ok((j, eigs))
}

/// Full-batch gradient descent on the tangent model's total loss.
///
/// Records the induced α, the feature response z = Uᵀ·Y·(ŷ − ŷ₀) against
/// the initialization's basis, and the loss. Returns the trajectory with
/// that basis so downstream comparisons use identical coordinates.
pub fn primal_flow(
    model: &LinearizedModel,
    data: &Dataset,
    loss: LossKind,
    cfg: &OdeConfig,
) -> Result<(Trajectory, FeatureBasis)> {
    cfg.validate()?;
    loss.validate()?;
    let n = data.n();
    if model.y0.len() != n {
        return Err(Error::Shape(format!(
            "model anchors {} examples, dataset has {n}",
            model.y0.len()
        )));
    }
    let m = model.phi0.ncols();
    let basis = feature_decomposition(&model.phi0, &data.y)?;
    let h = cfg.step_size;
    let mut theta = Array1::zeros(m);

    let grad = |theta: &Array1<f64>| -> Result<(Array1<f64>, Array1<f64>)> {
        let y_hat = model.predict(&ParamVector(theta.clone()))?;
        let mut dy = Array1::zeros(n);
        for i in 0..n {
            let yi = data.y[i];
            let mut g = -yi * sigmoid(-yi * y_hat[i]);
            match loss {
                LossKind::Sd { lambda } => g += lambda * y_hat[i],
                LossKind::SdShift { neg, pos } => {
                    let c = if yi > 0.0 { pos } else { neg };
                    g += c.lambda * (y_hat[i] - c.gamma);
                }
                LossKind::Ce | LossKind::RidgeCe { .. } => {}
            }
            dy[i] = g;
        }
        let mut g_theta = model.phi0.t().dot(&dy);
        if let LossKind::RidgeCe { lambda } = loss {
            g_theta += &(lambda * theta);
        }
        Ok((g_theta, y_hat))
    };

    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        z_series: Vec::new(),
        loss_series: Vec::new(),
        converged: false,
        steps: 0,
        clamp_count: 0,
    };
    let mut record = |t: f64, theta: &Array1<f64>, y_hat: &Array1<f64>| -> Result<()> {
        let induced = Array1::from_shape_fn(n, |i| sigmoid(-data.y[i] * y_hat[i]));
        let r = Array1::from_shape_fn(n, |i| data.y[i] * (y_hat[i] - model.y0[i]));
        traj.times.push(t);
        traj.states.push(induced);
        traj.z_series.push(feature_response(&basis, &r)?);
        traj.loss_series
            .push(total_loss(y_hat, &data.y, theta, loss)?);
        Ok(())
    };

    let (mut g, mut y_hat) = grad(&theta)?;
    record(0.0, &theta, &y_hat)?;
    let mut step = 0usize;
    let mut last_recorded = 0usize;
    let mut converged = false;
    while step < cfg.max_steps {
        let sup = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !sup.is_finite() {
            return Err(Error::Divergence {
                what: "primal gradient".into(),
                step,
            });
        }
        if sup < cfg.convergence_tol {
            converged = true;
            break;
        }
        match cfg.method {
            OdeMethod::Euler => {
                theta.scaled_add(-h, &g);
            }
            OdeMethod::Rk4 => {
                let k1 = g.clone();
                let k2 = grad(&(&theta - &(0.5 * h * &k1)))?.0;
                let k3 = grad(&(&theta - &(0.5 * h * &k2)))?.0;
                let k4 = grad(&(&theta - &(h * &k3)))?.0;
                theta = &theta - &((h / 6.0) * &(&k1 + &(2.0 * &k2) + &(2.0 * &k3) + &k4));
            }
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                what: "primal parameters".into(),
                step,
            });
        }
        step += 1;
        let refreshed = grad(&theta)?;
        g = refreshed.0;
        y_hat = refreshed.1;
        if step % cfg.record_every == 0 {
            record(step as f64 * h, &theta, &y_hat)?;
            last_recorded = step;
        }
    }
    if last_recorded != step {
        record(step as f64 * h, &theta, &y_hat)?;
    }
    traj.converged = converged;
    traj.steps = step;
    Ok((traj, basis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{integrate, lambert_w0};
    use ndarray::array;

    fn basis_1d(s: f64) -> FeatureBasis {
        FeatureBasis::from_spectrum(Array2::eye(1), array![s]).unwrap()
    }

    fn rotation(delta: f64) -> Array2<f64> {
        let c = (1.0 - delta * delta).sqrt();
        array![[c, -delta], [delta, c]]
    }

    /// Scalar root of a monotone function by bisection; the oracle for
    /// every 1-D fixed-point claim.
    fn bisect_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        assert!(f(lo) > 0.0 && f(hi) < 0.0, "root not bracketed");
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn slow_cfg() -> OdeConfig {
        OdeConfig {
            method: OdeMethod::Rk4,
            step_size: 5e-3,
            max_steps: 200_000,
            convergence_tol: 1e-11,
            record_every: 1000,
        }
    }

    #[test]
    fn exact_field_acts_as_a_barrier() {
        let basis = basis_1d(1.0);
        let near_zero = dual_field(&array![1e-10], &basis, 1.0).unwrap();
        assert!(near_zero[0] > 20.0);
        let near_one = dual_field(&array![1.0 - 1e-10], &basis, 1.0).unwrap();
        assert!(near_one[0] < -20.0);
        assert!(dual_field(&array![0.0], &basis, 1.0).is_err());
        assert!(dual_field(&array![1.0], &basis, 1.0).is_err());
    }

    #[test]
    fn zero_spectrum_fixes_one_half_exactly() {
        let basis = basis_1d(0.0);
        let f = dual_field(&array![0.5], &basis, 1.0).unwrap();
        assert_eq!(f[0], 0.0);
        let star = find_fixed_point(&basis, 1.0, FieldKind::Exact).unwrap();
        assert!((star[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn scalar_exact_fixed_point_matches_bisection_oracle() {
        for (s_sq, lambda) in [(4.0f64, 1.0), (9.0, 0.5), (0.25, 2.0)] {
            let basis = basis_1d(s_sq.sqrt());
            let oracle = bisect_root(
                |a| -a.ln() + (1.0 - a).ln() - s_sq * a / lambda,
                1e-9,
                1.0 - 1e-9,
            );
            let star = find_fixed_point(&basis, lambda, FieldKind::Exact).unwrap();
            assert!(
                (star[0] - oracle).abs() < 1e-9,
                "s² = {s_sq}, λ = {lambda}: {} vs oracle {oracle}",
                star[0]
            );
        }
    }

    #[test]
    fn scalar_approx_fixed_point_matches_its_closed_form() {
        // α* = λ·W(λ⁻¹s² + 1)/(s² + λ); at s² = 4, λ = 1 this is W(5)/5.
        let basis = basis_1d(2.0);
        let star = find_fixed_point(&basis, 1.0, FieldKind::Approx).unwrap();
        let w5 = lambert_w0(5.0).unwrap();
        assert!((star[0] - w5 / 5.0).abs() < 1e-9);
        assert!((star[0] - 0.265345).abs() < 1e-6);
    }

    #[test]
    fn sd_unit_penalty_fixed_point_is_the_frozen_constant() {
        let basis = basis_1d(3.0);
        let oracle = bisect_root(|a| ((1.0 - a) / a).ln() - a, 0.1, 0.9);
        let star = find_fixed_point(&basis, 1.0, FieldKind::Sd).unwrap();
        assert!((star[0] - oracle).abs() < 1e-10);
        assert!((star[0] - 0.401058).abs() < 5e-6);
    }

    #[test]
    fn sd_shift_fixed_point_matches_frozen_bisection_values() {
        // mpmath roots of log((1−α)/α) = α/λ + γ.
        let lambdas = array![1.0, 0.5];
        let gammas = array![1.0, 2.0];
        let star = sd_shift_fixed_point(&lambdas, &gammas).unwrap();
        assert!((star[0] - 0.22675064483434808).abs() < 1e-12);
        assert!((star[1] - 0.099788483970447107).abs() < 1e-12);
        let field = sd_shift_dual_field(&star, &lambdas, &gammas).unwrap();
        for &f in &field {
            assert!(f.abs() < 1e-10, "field residual {f}");
        }
    }

    #[test]
    fn sd_shift_with_zero_gamma_reduces_to_the_plain_penalty() {
        let alpha = array![0.3, 0.7];
        let lambdas = array![0.8, 0.8];
        let gammas = Array1::zeros(2);
        let shifted = sd_shift_dual_field(&alpha, &lambdas, &gammas).unwrap();
        let plain = sd_dual_field(&alpha, 0.8).unwrap();
        assert_eq!(shifted, plain);
        let star = sd_shift_fixed_point(&array![1.0, 1.0], &Array1::zeros(2)).unwrap();
        assert!((star[0] - 0.401058).abs() < 5e-6);
    }

    #[test]
    fn sd_shift_response_agrees_with_margin_self_consistency() {
        // At the fixed point ω = γ + α/λ and α = σ(−ω) must both hold.
        let lambdas = array![0.088, 0.012];
        let gammas = array![0.44, 2.5];
        let star = sd_shift_fixed_point(&lambdas, &gammas).unwrap();
        let omega = sd_shift_response(&star, &lambdas, &gammas).unwrap();
        for i in 0..2 {
            let sigma = 1.0 / (1.0 + omega[i].exp());
            assert!((star[i] - sigma).abs() < 1e-10);
        }
    }

    #[test]
    fn sd_shift_trajectories_ignore_the_spectrum_bitwise() {
        // The decoupling contract: integrating the shifted field against
        // any two spectra gives bit-identical α paths.
        let lambdas = array![0.1, 0.1];
        let gammas = array![1.5, -0.5];
        let cfg = OdeConfig {
            method: OdeMethod::Rk4,
            step_size: 1e-2,
            max_steps: 5_000,
            convergence_tol: 1e-14,
            record_every: 50,
        };
        let mut paths = Vec::new();
        for s1 in [2.0, 6.0] {
            let _basis =
                FeatureBasis::from_spectrum(rotation(0.3), array![s1, 1.0]).unwrap();
            let x0 = array![0.5, 0.5];
            let sol = crate::numerics::integrate(
                |a: &Array1<f64>| {
                    let safe = a.mapv(|v| v.clamp(ALPHA_CLAMP, 1.0 - ALPHA_CLAMP));
                    sd_shift_dual_field(&safe, &lambdas, &gammas).unwrap()
                },
                &x0,
                &cfg,
            )
            .unwrap();
            paths.push(sol.states);
        }
        assert_eq!(paths[0], paths[1]);
    }

    #[test]
    fn sd_shift_rejects_bad_parameters() {
        let alpha = array![0.5, 0.5];
        assert!(sd_shift_dual_field(&alpha, &array![1.0], &array![0.0, 0.0]).is_err());
        assert!(sd_shift_dual_field(&alpha, &array![1.0, -1.0], &array![0.0, 0.0]).is_err());
        assert!(
            sd_shift_dual_field(&alpha, &array![1.0, 1.0], &array![0.0, f64::NAN]).is_err()
        );
    }

    #[test]
    fn approx_field_tracks_exact_field_near_zero() {
        let u = rotation(0.3);
        let basis = FeatureBasis::from_spectrum(u, array![2.0, 1.0]).unwrap();
        let alpha = array![1e-4, 1e-4];
        let exact = dual_field(&alpha, &basis, 1.0).unwrap();
        let approx = approx_dual_field(&alpha, &basis, 1.0).unwrap();
        for i in 0..2 {
            let rel = (exact[i] - approx[i]).abs() / exact[i].abs();
            assert!(rel < 1e-3, "coordinate {i}: relative gap {rel}");
        }
    }

    #[test]
    fn zero_spectrum_flow_climbs_monotonically_to_one_half() {
        let basis = FeatureBasis::from_spectrum(Array2::eye(2), array![0.0, 0.0]).unwrap();
        let state = DualState::new(array![0.9, 0.1], 1.0).unwrap();
        let cfg = OdeConfig {
            method: OdeMethod::Euler,
            step_size: 1e-2,
            max_steps: 20_000,
            convergence_tol: 1e-10,
            record_every: 1,
        };
        let traj = simulate_dual(&state, &basis, FieldKind::Exact, &cfg).unwrap();
        assert!(traj.converged);
        assert!((traj.last_state()[0] - 0.5).abs() < 1e-9);
        assert!((traj.last_state()[1] - 0.5).abs() < 1e-9);
        for w in traj.states.windows(2) {
            assert!(w[1][0] <= w[0][0] + 1e-15);
            assert!(w[1][1] >= w[0][1] - 1e-15);
        }
    }

    #[test]
    fn symmetric_coordinates_stay_identical() {
        let basis = FeatureBasis::from_spectrum(Array2::eye(2), array![2.0, 2.0]).unwrap();
        let state = DualState::uniform(2, 1.0).unwrap();
        let traj = simulate_dual(&state, &basis, FieldKind::Exact, &slow_cfg()).unwrap();
        for s in &traj.states {
            assert_eq!(s[0], s[1]);
        }
    }

    #[test]
    fn rotated_two_feature_sweep_starves_the_weak_feature() {
        // As the strong feature grows, its response rises while the weak
        // feature's falls, even though the weak feature never changed.
        let mut z1 = Vec::new();
        let mut z2 = Vec::new();
        for s1 in [2.0f64, 3.0, 4.0, 5.0, 6.0] {
            let basis =
                FeatureBasis::from_spectrum(rotation(0.6), array![s1, 2.0]).unwrap();
            let star = find_fixed_point(&basis, 1.0, FieldKind::Exact).unwrap();
            let z = dual_response(&star, &basis, 1.0, FieldKind::Exact);
            z1.push(z[0]);
            z2.push(z[1]);
        }
        for w in z1.windows(2) {
            assert!(w[1] > w[0], "strong response must grow: {z1:?}");
        }
        for w in z2.windows(2) {
            assert!(w[1] < w[0], "weak response must starve: {z2:?}");
        }
    }

    #[test]
    fn newton_and_integration_agree_on_a_random_basis() {
        // Two independent solvers for the same zero: damped Newton vs a
        // long integration of the flow.
        let raw = Array2::from_shape_fn((5, 5), |(i, j)| {
            ((i * 7 + j * 13 + 3) % 11) as f64 / 11.0 - 0.5
        });
        let u = crate::numerics::svd(&raw).unwrap().u;
        let s = array![2.5, 1.8, 1.2, 0.7, 0.3];
        let basis = FeatureBasis::from_spectrum(u, s).unwrap();
        for kind in [FieldKind::Exact, FieldKind::Approx, FieldKind::Sd] {
            let star = find_fixed_point(&basis, 0.7, kind).unwrap();
            let state = DualState::uniform(5, 0.7).unwrap();
            let traj = simulate_dual(&state, &basis, kind, &slow_cfg()).unwrap();
            assert!(traj.converged, "{kind:?} integration did not settle");
            for i in 0..5 {
                assert!(
                    (star[i] - traj.last_state()[i]).abs() < 1e-8,
                    "{kind:?} coordinate {i}"
                );
            }
        }
    }

    #[test]
    fn interior_starts_never_need_clamping() {
        let u = rotation(0.4);
        let basis = FeatureBasis::from_spectrum(u, array![3.0, 1.0]).unwrap();
        let cfg = OdeConfig {
            method: OdeMethod::Euler,
            step_size: 1e-2,
            max_steps: 100_000,
            convergence_tol: 1e-10,
            record_every: 500,
        };
        for alpha0 in [array![0.01, 0.01], array![0.99, 0.99], array![0.5, 0.5]] {
            let state = DualState::new(alpha0, 1.0).unwrap();
            let traj = simulate_dual(&state, &basis, FieldKind::Exact, &cfg).unwrap();
            assert_eq!(traj.clamp_count, 0);
            for s in &traj.states {
                assert!(s.iter().all(|&a| a > 0.0 && a < 1.0));
            }
        }
    }

    #[test]
    fn dual_objective_rises_along_the_exact_flow() {
        let basis = FeatureBasis::from_spectrum(rotation(0.5), array![2.0, 1.0]).unwrap();
        let state = DualState::new(array![0.12, 0.85], 1.0).unwrap();
        let cfg = OdeConfig {
            method: OdeMethod::Euler,
            step_size: 1e-2,
            max_steps: 50_000,
            convergence_tol: 1e-10,
            record_every: 1,
        };
        let traj = simulate_dual(&state, &basis, FieldKind::Exact, &cfg).unwrap();
        for w in traj.loss_series.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "objective dipped: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn decoupled_flow_ignores_the_spectrum_bit_for_bit() {
        let u = rotation(0.25);
        let narrow = FeatureBasis::from_spectrum(u.clone(), array![2.0, 2.0]).unwrap();
        let wide = FeatureBasis::from_spectrum(u, array![40.0, 2.0]).unwrap();
        let state = DualState::new(array![0.37, 0.61], 0.8).unwrap();
        let cfg = OdeConfig {
            method: OdeMethod::Euler,
            step_size: 1e-2,
            max_steps: 30_000,
            convergence_tol: 1e-11,
            record_every: 100,
        };
        let a = simulate_dual(&state, &narrow, FieldKind::Sd, &cfg).unwrap();
        let b = simulate_dual(&state, &wide, FieldKind::Sd, &cfg).unwrap();
        assert_eq!(a.states.len(), b.states.len());
        for (sa, sb) in a.states.iter().zip(&b.states) {
            assert_eq!(sa[0], sb[0]);
            assert_eq!(sa[1], sb[1]);
        }
        // Same U, same α series: the responses coincide too.
        for (za, zb) in a.z_series.iter().zip(&b.z_series) {
            assert_eq!(za[1], zb[1]);
        }
        // The exact flow, by contrast, visibly reacts to the spectrum.
        let ea = simulate_dual(&state, &narrow, FieldKind::Exact, &slow_cfg()).unwrap();
        let eb = simulate_dual(&state, &wide, FieldKind::Exact, &slow_cfg()).unwrap();
        let rel = (ea.last_z()[1] - eb.last_z()[1]).abs() / ea.last_z()[1].abs();
        assert!(rel > 0.1, "exact flow barely moved: {rel}");
    }

    #[test]
    fn stability_jacobian_reference_values() {
        let basis = FeatureBasis::from_spectrum(Array2::eye(2), array![0.0, 0.0]).unwrap();
        let (j, eigs) = stability_jacobian(&array![0.5, 0.5], &basis, 1.0, 1.0).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                let expect = if i == k { -4.0 } else { 0.0 };
                assert!((j[[i, k]] - expect).abs() < 1e-12);
            }
        }
        assert!((eigs[0] + 4.0).abs() < 1e-12);
        assert!((eigs[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_points_of_the_exact_flow_attract() {
        for (delta, s1, s2, lambda) in
            [(0.2, 2.0, 1.0, 1.0), (0.7, 4.0, 0.5, 0.3), (0.05, 1.0, 1.0, 3.0)]
        {
            let basis =
                FeatureBasis::from_spectrum(rotation(delta), array![s1, s2]).unwrap();
            let star = find_fixed_point(&basis, lambda, FieldKind::Exact).unwrap();
            let (j, eigs) = stability_jacobian(&star, &basis, lambda, 0.1).unwrap();
            assert!((j[[0, 1]] - j[[1, 0]]).abs() < 1e-12);
            assert!(
                eigs.iter().all(|&e| e < 0.0),
                "δ={delta}, s=({s1},{s2}), λ={lambda}: eigs {eigs:?}"
            );
        }
    }

    #[test]
    fn huge_ridge_pins_the_primal_flow_at_zero() {
        let model = LinearizedModel {
            y0: array![0.0, 0.0],
            phi0: array![[1.0, 0.0], [0.0, 1.0]],
        };
        let data = Dataset::new(array![[1.0, 0.0], [0.0, 1.0]], array![1.0, -1.0]).unwrap();
        let cfg = OdeConfig {
            method: OdeMethod::Euler,
            step_size: 1e-7,
            max_steps: 5_000,
            convergence_tol: 1e-9,
            record_every: 1000,
        };
        let (traj, _) =
            primal_flow(&model, &data, LossKind::RidgeCe { lambda: 1e6 }, &cfg).unwrap();
        assert!(traj.last_z().iter().all(|&z| z.abs() < 1e-3));
    }

    #[test]
    fn scalar_primal_flow_matches_the_generic_integrator() {
        // One example, one feature, zero anchor: the logit obeys the
        // scalar softplus flow. The generic integrator is the oracle;
        // both use Euler with the same step, so they agree to roundoff.
        let model = LinearizedModel {
            y0: array![0.0],
            phi0: array![[1.0]],
        };
        let data = Dataset::new(array![[1.0]], array![1.0]).unwrap();
        let cfg = OdeConfig {
            method: OdeMethod::Euler,
            step_size: 1e-2,
            max_steps: 3_000,
            convergence_tol: 1e-30,
            record_every: 3_000,
        };
        let (traj, _) = primal_flow(&model, &data, LossKind::Ce, &cfg).unwrap();
        let oracle = integrate(
            |th: &Array1<f64>| Array1::from_elem(1, sigmoid(-th[0])),
            &Array1::zeros(1),
            &OdeConfig {
                method: OdeMethod::Euler,
                step_size: 1e-2,
                max_steps: 3_000,
                convergence_tol: 1e-30,
                record_every: 3_000,
            },
        )
        .unwrap();
        // The recorded α is σ(−θ) at the endpoint.
        let theta_end = oracle.last()[0];
        let alpha_end = sigmoid(-theta_end);
        assert!((traj.last_state()[0] - alpha_end).abs() < 1e-12);
    }

    #[test]
    fn primal_and_dual_share_their_fixed_point() {
        // Ridge primal descent and exact dual ascent meet at the same
        // feature response.
        let u = array![[0.8, -0.6], [0.6, 0.8]];
        let s = array![3.0, 2.0];
        let phi = {
            let mut p = u.clone();
            for i in 0..2 {
                for j in 0..2 {
                    p[[i, j]] *= s[j];
                }
            }
            p
        };
        let lambda = 1.0;
        let model = LinearizedModel {
            y0: array![0.0, 0.0],
            phi0: phi,
        };
        let data = Dataset::new(Array2::eye(2), array![1.0, 1.0]).unwrap();
        let cfg = OdeConfig {
            method: OdeMethod::Euler,
            step_size: 5e-2,
            max_steps: 400_000,
            convergence_tol: 1e-12,
            record_every: 400_000,
        };
        let (traj, basis) =
            primal_flow(&model, &data, LossKind::RidgeCe { lambda }, &cfg).unwrap();
        assert!(traj.converged);
        let star = find_fixed_point(&basis, lambda, FieldKind::Exact).unwrap();
        let z_dual = dual_response(&star, &basis, lambda, FieldKind::Exact);
        for i in 0..2 {
            assert!(
                (traj.last_z()[i] - z_dual[i]).abs() < 1e-3,
                "component {i}: primal {} vs dual {}",
                traj.last_z()[i],
                z_dual[i]
            );
        }
    }

    #[test]
    fn trajectory_csv_has_the_promised_schema() {
        let basis = basis_1d(2.0);
        let state = DualState::uniform(1, 1.0).unwrap();
        let cfg = OdeConfig {
            method: OdeMethod::Euler,
            step_size: 1e-2,
            max_steps: 10,
            convergence_tol: 1e-14,
            record_every: 5,
        };
        let traj = simulate_dual(&state, &basis, FieldKind::Exact, &cfg).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,alpha_1,z_1,loss");
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), traj.times.len());
        for row in rows {
            assert_eq!(row.split(',').count(), 4);
            for field in row.split(',') {
                field.parse::<f64>().unwrap();
            }
        }
    }
}
