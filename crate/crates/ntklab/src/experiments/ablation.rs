//! Regularizer comparison on the two-moon task.
//!
//! Five classical levers (weight decay, dropout, a batch-standardization
//! proxy, a small-step Adam run) and the logit decoupling penalty train
//! the same architecture from the same initializations; each trained
//! model is scored by its training accuracy and its decision-boundary
//! margin. Weight decay, Adam, and the decoupling penalty ride the
//! shared trainer. Dropout and batch standardization change the forward
//! pass itself, which the shared network deliberately does not support,
//! so a small self-contained trainer handles those two; a test pins it
//! to the shared loop in the unmodified case.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::boundary::{margin, Bounds};
use super::train::{accuracy, fit, Optimizer, TrainConfig};
use super::twomoon::{generate, TwoMoonConfig};
use crate::model::{init_network, Activation, Dataset, Network};
use crate::objectives::{sigmoid, LossKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMethod {
    /// Plain cross-entropy reference.
    None,
    /// Weight decay on the parameters.
    Wd,
    /// Inverted dropout on the hidden layer during training.
    Dropout,
    /// Per-batch standardization of hidden activations, statistics
    /// frozen from the final training batch at evaluation time.
    /// Gradients treat the batch statistics as constants.
    BatchnormProxy,
    /// Adam at a small learning rate instead of gradient descent.
    AdamLr,
    /// The logit decoupling penalty.
    Sd,
}

impl AblationMethod {
    pub const ALL: [AblationMethod; 6] = [
        AblationMethod::None,
        AblationMethod::Wd,
        AblationMethod::Dropout,
        AblationMethod::BatchnormProxy,
        AblationMethod::AdamLr,
        AblationMethod::Sd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMethod::None => "none",
            AblationMethod::Wd => "wd",
            AblationMethod::Dropout => "dropout",
            AblationMethod::BatchnormProxy => "batchnorm-proxy",
            AblationMethod::AdamLr => "adam-lr",
            AblationMethod::Sd => "sd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub data: TwoMoonConfig,
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub n_seeds: usize,
    /// Margin grid resolution over the standard two-moon window.
    pub resolution: usize,
    pub wd_lambda: f64,
    pub dropout_p: f64,
    pub adam_lr: f64,
    pub sd_lambda: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            data: TwoMoonConfig::default(),
            hidden: 500,
            steps: 5000,
            lr: 3e-3,
            momentum: 0.9,
            n_seeds: 10,
            resolution: 240,
            wd_lambda: 1e-4,
            dropout_p: 0.1,
            adam_lr: 1e-3,
            sd_lambda: 0.1,
        }
    }
}

/// One method's results across seeds.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MethodRow {
    pub method: String,
    pub margins: Vec<f64>,
    pub mean_margin: f64,
    pub train_accuracies: Vec<f64>,
    pub min_train_accuracy: f64,
}

/// Two-layer network whose forward pass can carry dropout or batch
/// standardization. Weight layout matches the shared network: w1 is
/// hidden x in, w2 is 1 x hidden, hidden activations are
/// sqrt(gamma/hidden) * relu.
struct ModifiedNet {
    w1: Array2<f64>,
    w2: Array2<f64>,
    scale: f64,
    /// Frozen (mean, std) per hidden unit for evaluation.
    stats: Option<(Array1<f64>, Array1<f64>)>,
}

const STD_EPS: f64 = 1e-5;

impl ModifiedNet {
    /// Split a freshly initialized shared network into the two layers.
    fn from_network(net: &Network) -> Result<ModifiedNet> {
        let w = net.params().0;
        let widths = net.widths();
        if widths.len() != 3 {
            return Err(Error::Config(format!(
                "modified trainer needs one hidden layer, got {widths:?}"
            )));
        }
        let (d, h) = (widths[0], widths[1]);
        let w1 = w
            .slice(ndarray::s![..h * d])
            .to_owned()
            .into_shape_with_order((h, d))
            .expect("slice sized");
        let w2 = w
            .slice(ndarray::s![h * d..])
            .to_owned()
            .into_shape_with_order((1, h))
            .expect("slice sized");
        Ok(ModifiedNet {
            w1,
            w2,
            scale: (net.gamma() / h as f64).sqrt(),
            stats: None,
        })
    }

    /// Hidden activations before any modification.
    fn hidden(&self, x: &Array2<f64>) -> Array2<f64> {
        let f1 = x.dot(&self.w1.t());
        f1.mapv(|v| self.scale * v.max(0.0))
    }

    /// Evaluation forward pass: dropout off, frozen statistics in.
    fn forward(&self, x: &Array2<f64>) -> Array1<f64> {
        let mut h = self.hidden(x);
        if let Some((mean, std)) = &self.stats {
            for mut row in h.rows_mut() {
                for j in 0..row.len() {
                    row[j] = (row[j] - mean[j]) / std[j];
                }
            }
        }
        h.dot(&self.w2.t()).index_axis(Axis(1), 0).to_owned()
    }
}

/// Train the modified network with gradient descent and momentum on
/// sum-reduced cross-entropy.
fn fit_modified(
    data: &Dataset,
    net: &mut ModifiedNet,
    steps: usize,
    lr: f64,
    momentum: f64,
    dropout_p: f64,
    standardize: bool,
    seed: u64,
) -> Result<()> {
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::Config(format!("dropout_p = {dropout_p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.n();
    let hdim = net.w1.nrows();
    let mut v1 = Array2::<f64>::zeros(net.w1.dim());
    let mut v2 = Array2::<f64>::zeros(net.w2.dim());
    for step in 0..steps {
        let f1 = data.x.dot(&net.w1.t());
        let mut h = f1.mapv(|v| net.scale * v.max(0.0));
        let mut stats = None;
        if standardize {
            let mean = h.mean_axis(Axis(0)).expect("nonempty batch");
            let mut std = Array1::zeros(hdim);
            for j in 0..hdim {
                let mut var = 0.0;
                for i in 0..n {
                    var += (h[[i, j]] - mean[j]).powi(2);
                }
                std[j] = (var / n as f64 + STD_EPS).sqrt();
            }
            for i in 0..n {
                for j in 0..hdim {
                    h[[i, j]] = (h[[i, j]] - mean[j]) / std[j];
                }
            }
            stats = Some((mean, std));
        }
        let mut mask = None;
        if dropout_p > 0.0 {
            let keep = 1.0 - dropout_p;
            let m = Array2::from_shape_fn((n, hdim), |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            h *= &m;
            mask = Some(m);
        }
        let logits = h.dot(&net.w2.t()).index_axis(Axis(1), 0).to_owned();
        // Sum-reduced CE gradient, matching the shared trainer.
        let g = Array1::from_shape_fn(n, |i| {
            let yi = data.y[i];
            -yi * sigmoid(-yi * logits[i])
        });
        let dw2 = g
            .view()
            .insert_axis(Axis(0))
            .dot(&h)
            .into_shape_with_order((1, hdim))
            .expect("row");
        let mut dh = g.view().insert_axis(Axis(1)).dot(&net.w2);
        if let Some(m) = &mask {
            dh *= m;
        }
        if let Some((_, std)) = &stats {
            for i in 0..n {
                for j in 0..hdim {
                    dh[[i, j]] /= std[j];
                }
            }
        }
        // Back through scale * relu.
        let df1 = Array2::from_shape_fn((n, hdim), |(i, j)| {
            if f1[[i, j]] > 0.0 {
                net.scale * dh[[i, j]]
            } else {
                0.0
            }
        });
        let dw1 = df1.t().dot(&data.x);
        v1 = momentum * &v1 + &dw1;
        v2 = momentum * &v2 + &dw2;
        net.w1 -= &(lr * &v1);
        net.w2 -= &(lr * &v2);
        if step + 1 == steps && standardize {
            net.stats = stats;
        }
        if net.w1.iter().any(|v| !v.is_finite()) || net.w2.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                what: "modified trainer parameters left the finite range".into(),
                step,
            });
        }
    }
    Ok(())
}

fn moon_margin<F>(predict: &F, data: &Dataset, resolution: usize) -> Result<f64>
where
    F: Fn(&Array2<f64>) -> Result<Array1<f64>>,
{
    margin(predict, &data.x, Bounds::two_moon(), resolution)
}

fn augment(pts: &Array2<f64>) -> Array2<f64> {
    let mut aug = Array2::ones((pts.nrows(), 3));
    aug.slice_mut(ndarray::s![.., ..2]).assign(pts);
    aug
}

/// Train one method on one seed; returns (margin, train accuracy).
pub fn run_method(cfg: &AblationConfig, method: AblationMethod, seed: u64) -> Result<(f64, f64)> {
    let data = generate(&cfg.data, seed)?;
    let widths = [data.dim(), cfg.hidden, 1];
    let net0 = init_network(&widths, Activation::Relu, 2.0, seed)?;
    match method {
        AblationMethod::Dropout | AblationMethod::BatchnormProxy => {
            let mut net = ModifiedNet::from_network(&net0)?;
            let (p, standardize) = match method {
                AblationMethod::Dropout => (cfg.dropout_p, false),
                _ => (0.0, true),
            };
            // Mask stream seed is offset so it never collides with the
            // weight seed.
            fit_modified(
                &data,
                &mut net,
                cfg.steps,
                cfg.lr,
                cfg.momentum,
                p,
                standardize,
                seed ^ 0x5eed_d40f,
            )?;
            let y_hat = net.forward(&data.x);
            let acc = accuracy(&y_hat, &data.y);
            let predict = |pts: &Array2<f64>| Ok(net.forward(&augment(pts)));
            Ok((moon_margin(&predict, &data, cfg.resolution)?, acc))
        }
        _ => {
            let mut net = net0;
            let (optimizer, loss) = match method {
                AblationMethod::None => (
                    Optimizer::Gd {
                        lr: cfg.lr,
                        momentum: cfg.momentum,
                    },
                    LossKind::Ce,
                ),
                AblationMethod::Wd => (
                    Optimizer::Gd {
                        lr: cfg.lr,
                        momentum: cfg.momentum,
                    },
                    LossKind::RidgeCe {
                        lambda: cfg.wd_lambda,
                    },
                ),
                AblationMethod::AdamLr => (Optimizer::Adam { lr: cfg.adam_lr }, LossKind::Ce),
                AblationMethod::Sd => (
                    Optimizer::Gd {
                        lr: cfg.lr,
                        momentum: cfg.momentum,
                    },
                    LossKind::Sd {
                        lambda: cfg.sd_lambda,
                    },
                ),
                _ => unreachable!("handled above"),
            };
            let train_cfg = TrainConfig {
                steps: cfg.steps,
                optimizer,
                loss,
                anneal_steps: 0,
                record_every: 0,
            };
            let report = fit(&mut net, &data, &train_cfg)?;
            let predict = |pts: &Array2<f64>| net.forward(&augment(pts));
            Ok((
                moon_margin(&predict, &data, cfg.resolution)?,
                report.train_accuracy,
            ))
        }
    }
}

/// Run every method over `n_seeds` seeds starting at `base_seed`.
pub fn run_ablation(cfg: &AblationConfig, base_seed: u64) -> Result<Vec<MethodRow>> {
    if cfg.n_seeds == 0 {
        return Err(Error::Config("n_seeds must be positive".into()));
    }
    let mut rows = Vec::new();
    for method in AblationMethod::ALL {
        let mut margins = Vec::new();
        let mut accs = Vec::new();
        for k in 0..cfg.n_seeds {
            let (m, a) = run_method(cfg, method, base_seed + k as u64)?;
            margins.push(m);
            accs.push(a);
        }
        let mean_margin = margins.iter().sum::<f64>() / margins.len() as f64;
        let min_train_accuracy = accs.iter().copied().fold(f64::INFINITY, f64::min);
        rows.push(MethodRow {
            method: method.name().to_string(),
            margins,
            mean_margin,
            train_accuracies: accs,
            min_train_accuracy,
        });
    }
    Ok(rows)
}
