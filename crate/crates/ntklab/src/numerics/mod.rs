//! Shared numerical utilities: Lambert W, dense factorizations,
//! fixed-step ODE integration, and finite-difference gradients.
//!
//! Everything here is a pure function over immutable inputs; there is no
//! shared mutable state, so all routines are safe to call concurrently.
//! Only dense algorithms are provided — the dynamical systems in this crate
//! involve at most a few hundred coupled variables.

mod lambert;
mod linalg;
mod ode;

pub use lambert::lambert_w0;
pub use linalg::{solve, svd, symmetric_eig, Svd};
pub use ode::{integrate, OdeConfig, OdeMethod, OdeSolution};

use ndarray::Array1;

use crate::{Error, Result};

/// Central-difference gradient of a scalar function.
///
/// Component i is `(f(x+h·eᵢ) − f(x−h·eᵢ)) / (2h)`, accurate to O(h²) for
/// smooth `f`. Used throughout the test suite as the model-free oracle for
/// backpropagated gradients.
pub fn finite_diff_grad<F>(mut f: F, x: &Array1<f64>, h: f64) -> Result<Array1<f64>>
where
    F: FnMut(&Array1<f64>) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite_diff_grad: h must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Array1::zeros(x.len());
    for i in 0..x.len() {
        let xi = x[i];
        probe[i] = xi + h;
        let up = f(&probe);
        probe[i] = xi - h;
        let down = f(&probe);
        probe[i] = xi;
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}
