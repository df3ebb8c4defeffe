use ndarray::Array1;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeMethod {
    /// First-order explicit Euler; matches plain gradient descent with
    /// learning rate equal to the step size.
    Euler,
    /// Classical fourth-order Runge–Kutta; default for dual dynamics where
    /// fidelity to the continuous-time field matters.
    Rk4,
}

/// Fixed-step integration settings.
#[derive(Debug, Clone, Copy)]
pub struct OdeConfig {
    pub method: OdeMethod,
    pub step_size: f64,
    pub max_steps: usize,
    /// Stop early once `‖field(x)‖∞` drops below this.
    pub convergence_tol: f64,
    /// Sample the state every this many steps (the initial and final states
    /// are always recorded).
    pub record_every: usize,
}

impl OdeConfig {
    pub fn new(method: OdeMethod, step_size: f64, max_steps: usize, convergence_tol: f64) -> Self {
        OdeConfig { method, step_size, max_steps, convergence_tol, record_every: 1 }
    }

    pub fn with_record_every(mut self, every: usize) -> Self {
        self.record_every = every;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::Domain(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Domain(format!(
                "convergence_tol must be > 0, got {}",
                self.convergence_tol
            )));
        }
        if self.record_every == 0 {
            return Err(Error::Domain("record_every must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Sampled states from [`integrate`].
#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub states: Vec<Array1<f64>>,
    /// True when the field's sup norm dropped below `convergence_tol`.
    pub converged: bool,
    /// Steps actually taken (≤ `max_steps`).
    pub steps: usize,
}

impl OdeSolution {
    pub fn last(&self) -> &Array1<f64> {
        self.states.last().expect("solution always records the initial state")
    }
}

fn sup_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
}

/// Integrate `ẋ = field(x)` from `x0` with fixed steps.
///
/// Stops early once the field's sup norm falls below `convergence_tol`
/// (flagging `converged`), and fails with a divergence error if the state or
/// the field ever becomes non-finite. The initial state is recorded at t=0;
/// afterwards every `record_every`-th state plus the final one.
pub fn integrate<F>(mut field: F, x0: &Array1<f64>, cfg: &OdeConfig) -> Result<OdeSolution>
where
    F: FnMut(&Array1<f64>) -> Array1<f64>,
{
    cfg.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("integrate: non-finite initial state".into()));
    }

    let h = cfg.step_size;
    let mut x = x0.clone();
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    let mut converged = false;
    let mut steps = 0;
    let mut last_recorded = 0usize;

    for k in 0..cfg.max_steps {
        let k1 = field(&x);
        if k1.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { what: "field became non-finite".into(), step: k });
        }
        if sup_norm(&k1) < cfg.convergence_tol {
            converged = true;
            break;
        }

        match cfg.method {
            OdeMethod::Euler => {
                x.scaled_add(h, &k1);
            }
            OdeMethod::Rk4 => {
                let k2 = field(&(&x + &(&k1 * (h / 2.0))));
                let k3 = field(&(&x + &(&k2 * (h / 2.0))));
                let k4 = field(&(&x + &(&k3 * h)));
                let mut incr = k1;
                incr.scaled_add(2.0, &k2);
                incr.scaled_add(2.0, &k3);
                incr += &k4;
                x.scaled_add(h / 6.0, &incr);
            }
        }
        steps = k + 1;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { what: "state became non-finite".into(), step: steps });
        }
        if steps % cfg.record_every == 0 {
            times.push(steps as f64 * h);
            states.push(x.clone());
            last_recorded = steps;
        }
    }

    if !converged && cfg.max_steps > 0 && steps == cfg.max_steps {
        // Ran out of budget: check whether the endpoint happens to satisfy
        // the tolerance so callers see an accurate flag.
        let f = field(&x);
        if f.iter().all(|v| v.is_finite()) && sup_norm(&f) < cfg.convergence_tol {
            converged = true;
        }
    }
    if last_recorded != steps {
        times.push(steps as f64 * h);
        states.push(x.clone());
    }
    Ok(OdeSolution { times, states, converged, steps })
}
