//! Full-batch training of finite networks.
//!
//! One loop serves every experiment: plain gradient descent with heavy-ball
//! momentum for the two-moon runs, Adam for the colored-digits runs. Logit
//! penalties (the decoupling term and its shifted variant) can be held back
//! for a warm-up phase: before `anneal_steps` the objective is plain
//! cross-entropy, afterwards the configured loss applies unchanged.

use ndarray::Array1;

use crate::model::{Dataset, Network};
use crate::objectives::{sigmoid, total_loss, LossKind};
use crate::{Error, Result};

/// First-order update rule.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Optimizer {
    /// Gradient descent, velocity v <- momentum*v + g, params -= lr*v.
    Gd { lr: f64, momentum: f64 },
    /// Adam with the usual (0.9, 0.999) moment decays and eps 1e-8.
    Adam { lr: f64 },
}

impl Optimizer {
    fn validate(&self) -> Result<()> {
        let (lr, extra_ok) = match *self {
            Optimizer::Gd { lr, momentum } => (lr, (0.0..1.0).contains(&momentum)),
            Optimizer::Adam { lr } => (lr, true),
        };
        if !(lr.is_finite() && lr > 0.0 && extra_ok) {
            return Err(Error::Config(format!("bad optimizer {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub optimizer: Optimizer,
    pub loss: LossKind,
    /// Steps of plain cross-entropy before `loss` takes over.
    pub anneal_steps: usize,
    /// Record a curve point every this many steps; 0 records only the end.
    pub record_every: usize,
}

/// One sampled point of the training curve.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub final_loss: f64,
    pub train_accuracy: f64,
    /// Smallest y_i * logit_i over the training set; positive once every
    /// point is classified correctly.
    pub min_signed_logit: f64,
}

/// Fraction of examples with y_i * logit_i > 0.
pub fn accuracy(y_hat: &Array1<f64>, y: &Array1<f64>) -> f64 {
    let hits = y_hat
        .iter()
        .zip(y.iter())
        .filter(|(h, y)| **h * **y > 0.0)
        .count();
    hits as f64 / y.len() as f64
}

/// Mean binary prediction entropy in nats: how confident the model is,
/// averaged over examples, ignoring correctness.
pub fn mean_entropy(y_hat: &Array1<f64>) -> f64 {
    let mut total = 0.0;
    for &f in y_hat {
        let p = sigmoid(f).clamp(1e-300, 1.0 - 1e-16);
        total += -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
    }
    total / y_hat.len() as f64
}

fn active_loss(cfg: &TrainConfig, step: usize) -> LossKind {
    if step < cfg.anneal_steps {
        LossKind::Ce
    } else {
        cfg.loss
    }
}

/// Train `net` in place on `data`. Fails with a divergence error (CLI
/// exit code 2) if the parameters or the loss stop being finite.
pub fn fit(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.loss.validate()?;
    cfg.optimizer.validate()?;
    if cfg.steps == 0 {
        return Err(Error::Config("steps must be positive".into()));
    }
    let mut params = net.params().0;
    let mut velocity = Array1::<f64>::zeros(params.len());
    let mut m1 = Array1::<f64>::zeros(params.len());
    let mut m2 = Array1::<f64>::zeros(params.len());
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let loss_now = active_loss(cfg, step);
        let grad = net.loss_gradient(data, loss_now)?.0;
        match cfg.optimizer {
            Optimizer::Gd { lr, momentum } => {
                velocity = momentum * &velocity + &grad;
                params -= &(lr * &velocity);
            }
            Optimizer::Adam { lr } => {
                let t = (step + 1) as i32;
                m1 = 0.9 * &m1 + 0.1 * &grad;
                m2 = 0.999 * &m2 + 0.001 * &grad.mapv(|g| g * g);
                let c1 = 1.0 - 0.9f64.powi(t);
                let c2 = 1.0 - 0.999f64.powi(t);
                for (p, (a, b)) in params.iter_mut().zip(m1.iter().zip(m2.iter())) {
                    *p -= lr * (a / c1) / ((b / c2).sqrt() + 1e-8);
                }
            }
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                what: "network parameters left the finite range".into(),
                step,
            });
        }
        net.set_params(&crate::model::ParamVector(params.clone()))?;
        let record = cfg.record_every > 0 && step % cfg.record_every == 0;
        if record || step + 1 == cfg.steps {
            let y_hat = net.forward(&data.x)?;
            let loss_val = total_loss(&y_hat, &data.y, &params, loss_now)?;
            if !loss_val.is_finite() {
                return Err(Error::Divergence {
                    what: "training loss left the finite range".into(),
                    step,
                });
            }
            if record {
                curve.push(CurvePoint {
                    step,
                    loss: loss_val,
                    accuracy: accuracy(&y_hat, &data.y),
                });
            }
        }
    }
    let y_hat = net.forward(&data.x)?;
    let final_loss = total_loss(&y_hat, &data.y, &net.params().0, cfg.loss)?;
    let min_signed_logit = y_hat
        .iter()
        .zip(data.y.iter())
        .map(|(h, y)| h * y)
        .fold(f64::INFINITY, f64::min);
    Ok(TrainReport {
        curve,
        final_loss,
        train_accuracy: accuracy(&y_hat, &data.y),
        min_signed_logit,
    })
}
