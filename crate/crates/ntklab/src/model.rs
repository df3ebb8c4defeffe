//! Fully-connected networks, bias-free, with a single logit head.
//!
//! In the analysis parameterization a network of widths d₀..d_L applies
//! f⁽ˡ⁾ = W⁽ˡ⁾h⁽ˡ⁻¹⁾ followed by h⁽ˡ⁾ = √(γ/d_l)·ξ(f⁽ˡ⁾) on every hidden
//! layer, with weights drawn i.i.d. from a standard normal. The logit is
//! the unactivated f⁽ᴸ⁾. With γ = 2 under relu the hidden norms are
//! preserved at initialization, which is what keeps wide networks close
//! to their tangent model. The standard parameterization draws the same
//! function (He-scaled weights, plain forward); it exists because
//! per-parameter optimizers like Adam read a step size relative to the
//! weight scale, and unit-variance weights make any practical step
//! invisibly small.
//!
//! The tangent feature matrix has one row per example: the gradient of
//! that example's logit with respect to every weight, flattened in
//! layer-major, row-major order. The same flattening defines
//! [`ParamVector`], so a tangent row and a parameter vector always index
//! the same coordinates. Rows are computed by reverse-mode sweeps, one
//! per example, since the number of examples is small while the
//! parameter count may not be.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::objectives::{sigmoid, LossKind};
use crate::{Error, Result};

const CHECKPOINT_FORMAT: &str = "ntklab-net-v1";

/// Elementwise nonlinearity of the hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative at x; the relu kink at zero takes the left value 0.
    fn slope(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    /// The γ that preserves hidden norms at initialization: 2 for relu
    /// (half the pre-activation mass is clipped), 1 otherwise.
    pub fn default_gamma(self) -> f64 {
        match self {
            Activation::Relu => 2.0,
            _ => 1.0,
        }
    }
}

/// How weight scale is carried. The analysis parameterization keeps
/// unit-variance weights with √(γ/d) factors on the activations; the
/// standard one bakes the scale into the weights (He-style) and runs a
/// plain forward pass. The two draw the same function at initialization.
/// They differ in what a fixed optimizer step means relative to weight
/// scale, which is why the gradient-based experiments pick explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    Ntk,
    Standard,
}

/// Flat weights in layer-major, row-major order; length m = Σ d_l·d_{l−1}.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Array1<f64>);

impl ParamVector {
    pub fn zeros(m: usize) -> Self {
        ParamVector(Array1::zeros(m))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("parameter vector has non-finite entries".into()));
        }
        Ok(())
    }
}

/// A batch of inputs with ±1 labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!(
                "{} input rows vs {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if y.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::Domain("labels must be -1 or +1".into()));
        }
        Ok(Dataset { x, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// A fully-connected network. Immutable except through
/// [`Network::set_params`].
#[derive(Debug, Clone)]
pub struct Network {
    widths: Vec<usize>,
    weights: Vec<Array2<f64>>,
    activation: Activation,
    gamma: f64,
    seed: u64,
    parameterization: Parameterization,
}

/// Draw a fresh network in the analysis parameterization: i.i.d.
/// standard-normal weights, √(γ/d) activation factors.
///
/// `widths` lists d₀..d_L and must end in 1: the analysis is binary
/// throughout, so a single logit is the only supported head.
pub fn init_network(
    widths: &[usize],
    activation: Activation,
    gamma: f64,
    seed: u64,
) -> Result<Network> {
    init_with(widths, activation, gamma, seed, Parameterization::Ntk)
}

/// Draw a fresh network in the standard parameterization: He-scaled
/// weights (variance γ/fan-in on layers feeding the nonlinearity, 1/fan-in
/// on the output layer) and a plain forward pass.
pub fn init_standard_network(
    widths: &[usize],
    activation: Activation,
    gamma: f64,
    seed: u64,
) -> Result<Network> {
    init_with(widths, activation, gamma, seed, Parameterization::Standard)
}

fn init_with(
    widths: &[usize],
    activation: Activation,
    gamma: f64,
    seed: u64,
    parameterization: Parameterization,
) -> Result<Network> {
    if widths.len() < 2 {
        return Err(Error::Config(format!(
            "need at least input and output widths, got {widths:?}"
        )));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::Config(format!("zero width in {widths:?}")));
    }
    if *widths.last().unwrap() != 1 {
        return Err(Error::Config(format!(
            "output width must be 1 for a binary head, got {widths:?}"
        )));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Config(format!("gamma = {gamma} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer_count = widths.len() - 1;
    let weights = widths
        .windows(2)
        .enumerate()
        .map(|(l, pair)| {
            let std = match parameterization {
                Parameterization::Ntk => 1.0,
                Parameterization::Standard => {
                    let gain = if l + 1 < layer_count { gamma } else { 1.0 };
                    (gain / pair[0] as f64).sqrt()
                }
            };
            Array2::from_shape_fn((pair[1], pair[0]), |_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                std * g
            })
        })
        .collect();
    Ok(Network {
        widths: widths.to_vec(),
        weights,
        activation,
        gamma,
        seed,
        parameterization,
    })
}

/// Everything the backward sweep needs from a forward pass: the
/// pre-activations of each layer and the activations feeding each layer.
struct Tape {
    /// inputs[l] is h⁽ˡ⁾ for l = 0..L−1; inputs[0] is the data itself.
    inputs: Vec<Array2<f64>>,
    /// pres[l] is f⁽ˡ⁺¹⁾, the pre-activation produced by weights[l].
    pres: Vec<Array2<f64>>,
}

impl Network {
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of weight layers L.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|p| p[0] * p[1]).sum()
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    fn layer_scale(&self, width: usize) -> f64 {
        match self.parameterization {
            Parameterization::Ntk => (self.gamma / width as f64).sqrt(),
            Parameterization::Standard => 1.0,
        }
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.widths[0] {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.widths[0]
            )));
        }
        Ok(())
    }

    fn forward_tape(&self, x: &Array2<f64>) -> Result<(Array1<f64>, Tape)> {
        self.check_input(x)?;
        let l_count = self.weights.len();
        let mut inputs = Vec::with_capacity(l_count);
        let mut pres = Vec::with_capacity(l_count);
        let mut h = x.to_owned();
        for (l, w) in self.weights.iter().enumerate() {
            let f = h.dot(&w.t());
            inputs.push(h);
            if l + 1 < l_count {
                let scale = self.layer_scale(self.widths[l + 1]);
                h = f.mapv(|v| scale * self.activation.apply(v));
            } else {
                h = Array2::zeros((0, 0));
            }
            pres.push(f);
        }
        let logits = pres.last().unwrap().index_axis(Axis(1), 0).to_owned();
        Ok((logits, Tape { inputs, pres }))
    }

    /// Logits f⁽ᴸ⁾ for each row of `x`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward_tape(x)?.0)
    }

    /// Per-layer gradients of Σᵢ seed_i·ŷᵢ, reverse-mode through the tape.
    fn backward(&self, tape: &Tape, seed_grad: &Array1<f64>) -> Vec<Array2<f64>> {
        let l_count = self.weights.len();
        let n = seed_grad.len();
        let mut grads: Vec<Array2<f64>> = Vec::with_capacity(l_count);
        // df holds ∂/∂f⁽ˡ⁺¹⁾ while walking layers backwards.
        let mut df = seed_grad
            .view()
            .insert_axis(Axis(1))
            .to_owned()
            .into_shape_with_order((n, 1))
            .expect("column reshape");
        for l in (0..l_count).rev() {
            grads.push(df.t().dot(&tape.inputs[l]));
            if l > 0 {
                let dh = df.dot(&self.weights[l]);
                let scale = self.layer_scale(self.widths[l]);
                let mut dprev = dh;
                dprev.zip_mut_with(&tape.pres[l - 1], |g, &f| {
                    *g *= scale * self.activation.slope(f);
                });
                df = dprev;
            }
        }
        grads.reverse();
        grads
    }

    fn flatten_grads(&self, grads: &[Array2<f64>]) -> Array1<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for g in grads {
            flat.extend(g.iter().copied());
        }
        Array1::from_vec(flat)
    }

    /// Tangent feature matrix: row i is ∂ŷ(xᵢ)/∂θ in [`ParamVector`]
    /// order. One reverse sweep per example.
    pub fn ntrf(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let n = x.nrows();
        let m = self.param_count();
        let mut phi = Array2::zeros((n, m));
        for i in 0..n {
            let row = x.row(i).insert_axis(Axis(0)).to_owned();
            let (_, tape) = self.forward_tape(&row)?;
            let grads = self.backward(&tape, &Array1::ones(1));
            phi.row_mut(i).assign(&self.flatten_grads(&grads));
        }
        Ok(phi)
    }

    /// Current weights flattened in layer-major, row-major order.
    pub fn params(&self) -> ParamVector {
        let mut flat = Vec::with_capacity(self.param_count());
        for w in &self.weights {
            flat.extend(w.iter().copied());
        }
        ParamVector(Array1::from_vec(flat))
    }

    /// Replace all weights from a flat vector; the inverse of
    /// [`Network::params`].
    pub fn set_params(&mut self, p: &ParamVector) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector has length {}, network needs {}",
                p.len(),
                self.param_count()
            )));
        }
        p.validate()?;
        let mut offset = 0;
        for w in &mut self.weights {
            let len = w.len();
            let chunk = p.0.slice(ndarray::s![offset..offset + len]);
            let reshaped = chunk
                .to_owned()
                .into_shape_with_order(w.dim())
                .expect("chunk length matches layer");
            w.assign(&reshaped);
            offset += len;
        }
        Ok(())
    }

    /// Exact gradient of [`crate::objectives::total_loss`] with respect
    /// to the flattened weights.
    pub fn loss_gradient(&self, data: &Dataset, loss: LossKind) -> Result<ParamVector> {
        loss.validate()?;
        let (y_hat, tape) = self.forward_tape(&data.x)?;
        if y_hat.len() != data.y.len() {
            return Err(Error::Shape("dataset labels do not match logits".into()));
        }
        // d(total)/dŷᵢ: the cross-entropy part is −yᵢσ(−yᵢŷᵢ) and the
        // logit penalties add their own linear terms.
        let mut dy = Array1::zeros(y_hat.len());
        for i in 0..y_hat.len() {
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
        let grads = self.backward(&tape, &dy);
        let mut flat = self.flatten_grads(&grads);
        if let LossKind::RidgeCe { lambda } = loss {
            flat += &(lambda * &self.params().0);
        }
        Ok(ParamVector(flat))
    }

    /// Write a checkpoint: a versioned JSON document with widths,
    /// activation, γ, seed, and row-major weights per layer.
    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            widths: self.widths.clone(),
            activation: self.activation,
            gamma: self.gamma,
            seed: self.seed,
            parameterization: self.parameterization,
            weights: self.weights.iter().map(|w| w.iter().copied().collect()).collect(),
        };
        let file = File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), &doc)
            .map_err(|e| Error::Format(format!("checkpoint write: {e}")))
    }

    /// Read a checkpoint written by [`Network::save`].
    pub fn load(path: &Path) -> Result<Network> {
        let file = File::open(path)?;
        let doc: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Format(format!("checkpoint parse: {e}")))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                doc.format
            )));
        }
        let mut net = init_with(
            &doc.widths,
            doc.activation,
            doc.gamma,
            doc.seed,
            doc.parameterization,
        )?;
        let total: usize = doc.weights.iter().map(Vec::len).sum();
        if total != net.param_count() {
            return Err(Error::Format(format!(
                "checkpoint stores {total} weights, widths imply {}",
                net.param_count()
            )));
        }
        let flat: Vec<f64> = doc.weights.into_iter().flatten().collect();
        net.set_params(&ParamVector(Array1::from_vec(flat)))?;
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    widths: Vec<usize>,
    activation: Activation,
    gamma: f64,
    seed: u64,
    #[serde(default = "default_parameterization")]
    parameterization: Parameterization,
    weights: Vec<Vec<f64>>,
}

fn default_parameterization() -> Parameterization {
    Parameterization::Ntk
}

/// The tangent model of a network at its current parameters: ŷ₀ plus the
/// tangent features. `theta` everywhere below is a deviation from the
/// anchor parameters, not absolute weights.
#[derive(Debug, Clone)]
pub struct LinearizedModel {
    pub y0: Array1<f64>,
    pub phi0: Array2<f64>,
}

impl LinearizedModel {
    pub fn new(net0: &Network, x: &Array2<f64>) -> Result<Self> {
        Ok(LinearizedModel {
            y0: net0.forward(x)?,
            phi0: net0.ntrf(x)?,
        })
    }

    /// ŷ₀ + Φ₀·θ.
    pub fn predict(&self, theta: &ParamVector) -> Result<Array1<f64>> {
        if theta.len() != self.phi0.ncols() {
            return Err(Error::Shape(format!(
                "deviation has length {}, tangent features have {} columns",
                theta.len(),
                self.phi0.ncols()
            )));
        }
        Ok(&self.y0 + &self.phi0.dot(&theta.0))
    }
}

/// One-shot tangent prediction; see [`LinearizedModel`] to reuse the
/// features across calls.
pub fn linearized_forward(
    net0: &Network,
    theta: &ParamVector,
    x: &Array2<f64>,
) -> Result<Array1<f64>> {
    LinearizedModel::new(net0, x)?.predict(theta)
}

/// Mean linearization gap of single-hidden-layer relu nets at several
/// widths, probed with random parameter deviations of L2 norm `radius`.
///
/// For each width the gap is the worst absolute difference between the
/// tangent prediction and the true forward pass after the deviation,
/// averaged over `trials` directions: one direction is far too noisy to
/// expose the 1/√width trend that makes the tangent model trustworthy.
/// Everything is seeded from the width and trial index, so the sweep is
/// reproducible.
pub fn mean_linearization_gaps(
    x: &Array2<f64>,
    widths: &[usize],
    trials: u64,
    radius: f64,
) -> Result<Vec<f64>> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::Config(format!("probe radius {radius} must be positive")));
    }
    let d = x.ncols();
    let mut gaps = Vec::with_capacity(widths.len());
    for &w in widths {
        let net = init_network(&[d, w, 1], Activation::Relu, 2.0, 99 + w as u64)?;
        let model = LinearizedModel::new(&net, x)?;
        let m = net.param_count();
        let base = net.params().0;
        let mut total = 0.0;
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(1_000_003 * w as u64 + t);
            let dir = Array1::from_shape_fn(m, |_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g
            });
            let norm = dir.dot(&dir).sqrt();
            let theta = ParamVector((radius / norm) * &dir);
            let lin = model.predict(&theta)?;
            let mut moved = net.clone();
            moved.set_params(&ParamVector(&base + &theta.0))?;
            let full = moved.forward(x)?;
            total += lin
                .iter()
                .zip(&full)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
        }
        gaps.push(total / trials as f64);
    }
    Ok(gaps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use crate::objectives::ClassShift;
    use ndarray::array;
    use rand::Rng;

    fn random_inputs(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn init_shapes_and_param_count() {
        let net = init_network(&[2, 500, 1], Activation::Relu, 2.0, 7).unwrap();
        assert_eq!(net.depth(), 2);
        assert_eq!(net.param_count(), 1500);
        assert_eq!(net.params().len(), 1500);
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let a = init_network(&[3, 8, 1], Activation::Tanh, 1.0, 42).unwrap();
        let b = init_network(&[3, 8, 1], Activation::Tanh, 1.0, 42).unwrap();
        let c = init_network(&[3, 8, 1], Activation::Tanh, 1.0, 43).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn init_rejects_bad_configs() {
        assert!(init_network(&[4], Activation::Relu, 2.0, 0).is_err());
        assert!(init_network(&[4, 0, 1], Activation::Relu, 2.0, 0).is_err());
        assert!(init_network(&[4, 5, 2], Activation::Relu, 2.0, 0).is_err());
        assert!(init_network(&[4, 5, 1], Activation::Relu, 0.0, 0).is_err());
        assert!(init_network(&[4, 5, 1], Activation::Relu, f64::NAN, 0).is_err());
    }

    #[test]
    fn standard_forward_is_the_plain_composition() {
        // 2→2→1 relu with hand-set weights and no hidden scaling.
        let mut net = init_standard_network(&[2, 2, 1], Activation::Relu, 2.0, 0).unwrap();
        net.set_params(&ParamVector(array![1.0, -1.0, 0.5, 2.0, 3.0, -1.0]))
            .unwrap();
        let x = array![[1.0, 2.0]];
        // f¹ = (1·1 − 1·2, 0.5·1 + 2·2) = (−1, 4.5); h = (0, 4.5);
        // logit = 3·0 − 1·4.5 = −4.5.
        let out = net.forward(&x).unwrap();
        assert!((out[0] + 4.5).abs() < 1e-12);
    }

    #[test]
    fn standard_init_scales_match_he_variances() {
        let net = init_standard_network(&[100, 400, 1], Activation::Relu, 2.0, 11).unwrap();
        let p = net.params().0;
        let first = p.slice(ndarray::s![..40_000]);
        let last = p.slice(ndarray::s![40_000..]);
        let var = |v: ndarray::ArrayView1<f64>| v.dot(&v) / v.len() as f64;
        let v1 = var(first);
        let v2 = var(last);
        assert!((v1 - 2.0 / 100.0).abs() < 0.2 * (2.0 / 100.0), "hidden var {v1}");
        assert!((v2 - 1.0 / 400.0).abs() < 0.2 * (1.0 / 400.0), "output var {v2}");
    }

    #[test]
    fn standard_gradient_matches_finite_differences() {
        let net = init_standard_network(&[3, 6, 6, 1], Activation::Relu, 2.0, 21).unwrap();
        let x = random_inputs(31, 5, 3);
        let y = array![1.0, -1.0, 1.0, 1.0, -1.0];
        let data = Dataset::new(x, y).unwrap();
        let loss = LossKind::Sd { lambda: 0.3 };
        let grad = net.loss_gradient(&data, loss).unwrap();
        let base = net.params().0;
        let fd = finite_diff_grad(
            |p| {
                let mut probe = net.clone();
                probe.set_params(&ParamVector(p.clone())).unwrap();
                let y_hat = probe.forward(&data.x).unwrap();
                crate::objectives::total_loss(&y_hat, &data.y, p, loss).unwrap()
            },
            &base,
            1e-5,
        )
        .unwrap();
        for i in 0..base.len() {
            let denom = fd[i].abs().max(1e-8);
            assert!(
                (grad.0[i] - fd[i]).abs() / denom < 1e-5,
                "weight {i}: backprop {} vs fd {}",
                grad.0[i],
                fd[i]
            );
        }
    }

    #[test]
    fn checkpoint_keeps_the_parameterization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("std.json");
        let net = init_standard_network(&[4, 8, 1], Activation::Relu, 2.0, 3).unwrap();
        net.save(&path).unwrap();
        let back = Network::load(&path).unwrap();
        assert_eq!(back.parameterization(), Parameterization::Standard);
        assert_eq!(back.params(), net.params());
        let x = random_inputs(17, 4, 4);
        assert_eq!(back.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn relu_maps_zero_input_to_zero_logit() {
        let net = init_network(&[3, 16, 16, 1], Activation::Relu, 2.0, 5).unwrap();
        let x = Array2::zeros((2, 3));
        let out = net.forward(&x).unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn identity_network_is_a_scaled_matrix_product() {
        let mut net = init_network(&[2, 2, 1], Activation::Identity, 1.0, 1).unwrap();
        // W1 = [[1, 2], [3, 4]], W2 = [[5, 6]].
        net.set_params(&ParamVector(array![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        let x = array![[1.0, -1.0]];
        // h1 = (1/√2)·W1·x = (1/√2)·(−1, −1); ŷ = W2·h1 = (1/√2)(−5 − 6).
        let expect = (1.0 / 2f64.sqrt()) * (-11.0);
        let got = net.forward(&x).unwrap()[0];
        assert!((got - expect).abs() < 1e-12);
    }

    /// Plain per-example recursion with scalar loops, sharing no code
    /// with the batched forward.
    fn forward_oracle(net: &Network, x: &Array2<f64>) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..x.nrows() {
            let mut h: Vec<f64> = x.row(i).iter().copied().collect();
            for l in 0..net.weights.len() {
                let w = &net.weights[l];
                let mut f = vec![0.0; w.nrows()];
                for r in 0..w.nrows() {
                    for c in 0..w.ncols() {
                        f[r] += w[[r, c]] * h[c];
                    }
                }
                if l + 1 < net.weights.len() {
                    let s = (net.gamma / net.widths[l + 1] as f64).sqrt();
                    h = f.iter().map(|&v| s * net.activation.apply(v)).collect();
                } else {
                    h = f;
                }
            }
            out.push(h[0]);
        }
        out
    }

    #[test]
    fn forward_matches_scalar_recursion_oracle() {
        let net = init_network(&[4, 7, 6, 1], Activation::Relu, 2.0, 19).unwrap();
        let x = random_inputs(3, 3, 4);
        let batched = net.forward(&x).unwrap();
        let oracle = forward_oracle(&net, &x);
        for i in 0..3 {
            assert!((batched[i] - oracle[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn ntrf_matches_symbolic_jacobian_of_linear_two_layer_net() {
        let mut net = init_network(&[3, 2, 1], Activation::Identity, 1.0, 2).unwrap();
        let w1 = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        let w2 = array![[2.0, -3.0]];
        let mut flat: Vec<f64> = w1.iter().copied().collect();
        flat.extend(w2.iter().copied());
        net.set_params(&ParamVector(Array1::from_vec(flat))).unwrap();

        let x = array![[1.0, 2.0, -1.0]];
        let phi = net.ntrf(&x).unwrap();
        // ŷ = s·W2·W1·x with s = 1/√2, so ∂ŷ/∂W1[j,k] = s·W2[j]·x[k] and
        // ∂ŷ/∂W2[j] = s·(W1·x)[j].
        let s = (0.5f64).sqrt();
        for j in 0..2 {
            for k in 0..3 {
                let expect = s * w2[[0, j]] * x[[0, k]];
                assert!((phi[[0, 3 * j + k]] - expect).abs() < 1e-12);
            }
        }
        let w1x = w1.dot(&x.row(0).to_owned());
        for j in 0..2 {
            let expect = s * w1x[j];
            assert!((phi[[0, 6 + j]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ntrf_rows_match_finite_differences() {
        for (activation, gamma, seed) in [
            (Activation::Tanh, 1.0, 11u64),
            (Activation::Relu, 2.0, 12u64),
        ] {
            let net = init_network(&[3, 6, 5, 1], activation, gamma, seed).unwrap();
            let x = random_inputs(seed + 100, 2, 3);
            let phi = net.ntrf(&x).unwrap();
            for i in 0..2 {
                let row = x.row(i).insert_axis(Axis(0)).to_owned();
                let mut probe = net.clone();
                let f = |theta: &Array1<f64>| -> f64 {
                    probe.set_params(&ParamVector(theta.clone())).unwrap();
                    probe.forward(&row).unwrap()[0]
                };
                let mut probe_f = f;
                let fd = finite_diff_grad(&mut probe_f, &net.params().0, 1e-4).unwrap();
                let worst = phi
                    .row(i)
                    .iter()
                    .zip(&fd)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(worst < 1e-5, "{activation:?} example {i}: err {worst}");
            }
        }
    }

    #[test]
    fn duplicated_input_duplicates_the_tangent_row() {
        let net = init_network(&[2, 9, 1], Activation::Relu, 2.0, 23).unwrap();
        let x = array![[0.4, -0.7], [0.4, -0.7]];
        let phi = net.ntrf(&x).unwrap();
        for k in 0..phi.ncols() {
            assert_eq!(phi[[0, k]], phi[[1, k]]);
        }
    }

    #[test]
    fn linearized_forward_at_zero_deviation_is_the_anchor_forward() {
        let net = init_network(&[2, 32, 1], Activation::Relu, 2.0, 3).unwrap();
        let x = random_inputs(8, 5, 2);
        let zero = ParamVector::zeros(net.param_count());
        let lin = linearized_forward(&net, &zero, &x).unwrap();
        let direct = net.forward(&x).unwrap();
        for i in 0..5 {
            assert_eq!(lin[i], direct[i]);
        }
    }

    #[test]
    fn linearized_forward_is_linear_in_the_deviation() {
        let net = init_network(&[2, 16, 1], Activation::Tanh, 1.0, 6).unwrap();
        let x = random_inputs(9, 4, 2);
        let model = LinearizedModel::new(&net, &x).unwrap();
        let m = net.param_count();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let ta = ParamVector(Array1::from_shape_fn(m, |_| rng.random_range(-0.1..0.1)));
        let tb = ParamVector(Array1::from_shape_fn(m, |_| rng.random_range(-0.1..0.1)));
        let sum = ParamVector(&ta.0 + &tb.0);
        let lhs = model.predict(&sum).unwrap();
        let ya = model.predict(&ta).unwrap();
        let yb = model.predict(&tb).unwrap();
        let y0 = &model.y0;
        for i in 0..4 {
            let rhs = ya[i] + yb[i] - y0[i];
            assert!((lhs[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn linearization_error_shrinks_with_width() {
        // A deviation of fixed norm applied at several widths: the gap
        // between the tangent prediction and the true forward must fall
        // monotonically as the network widens. A single random direction
        // is too noisy to show the trend, so the gap is averaged over a
        // bundle of directions per width.
        let x = random_inputs(14, 4, 2);
        let gaps = mean_linearization_gaps(&x, &[64, 256, 1024], 12, 0.29).unwrap();
        assert!(gaps[1] < gaps[0], "gaps {gaps:?}");
        assert!(gaps[2] < gaps[1], "gaps {gaps:?}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences_for_every_kind() {
        let kinds = [
            LossKind::Ce,
            LossKind::RidgeCe { lambda: 0.3 },
            LossKind::Sd { lambda: 0.5 },
            LossKind::SdShift {
                neg: ClassShift { lambda: 0.2, gamma: 1.0 },
                pos: ClassShift { lambda: 0.8, gamma: -0.5 },
            },
        ];
        let net = init_network(&[2, 5, 1], Activation::Tanh, 1.0, 33).unwrap();
        let data = Dataset::new(random_inputs(21, 3, 2), array![1.0, -1.0, 1.0]).unwrap();
        for kind in kinds {
            let grad = net.loss_gradient(&data, kind).unwrap();
            let mut probe = net.clone();
            let mut f = |theta: &Array1<f64>| -> f64 {
                probe.set_params(&ParamVector(theta.clone())).unwrap();
                let y_hat = probe.forward(&data.x).unwrap();
                crate::objectives::total_loss(&y_hat, &data.y, theta, kind).unwrap()
            };
            let fd = finite_diff_grad(&mut f, &net.params().0, 1e-5).unwrap();
            let scale = fd.iter().map(|v| v.abs()).fold(1.0f64, f64::max);
            let worst = grad
                .0
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(worst / scale < 1e-5, "{kind:?}: err {worst}");
        }
    }

    #[test]
    fn confident_correct_predictions_have_vanishing_ce_gradient() {
        let mut net = init_network(&[2, 6, 1], Activation::Tanh, 1.0, 55).unwrap();
        let x = random_inputs(56, 4, 2);
        let y0 = net.forward(&x).unwrap();
        let margin = y0.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        assert!(margin > 0.2, "seed produced near-boundary logits");
        let y = y0.mapv(|v| if v > 0.0 { 1.0 } else { -1.0 });
        let data = Dataset::new(x, y).unwrap();
        let base = net.loss_gradient(&data, LossKind::Ce).unwrap();
        let base_norm = base.0.dot(&base.0).sqrt();
        // Scaling the head by 50 scales every margin by 50, saturating
        // the softplus.
        let mut p = net.params();
        let m = net.param_count();
        for k in m - 6..m {
            p.0[k] *= 50.0;
        }
        net.set_params(&p).unwrap();
        let confident = net.loss_gradient(&data, LossKind::Ce).unwrap();
        let conf_norm = confident.0.dot(&confident.0).sqrt();
        assert!(conf_norm < 1e-3 * base_norm.max(1e-9), "norm {conf_norm}");
    }

    #[test]
    fn odd_network_gives_identical_gradients_on_mirrored_pairs() {
        let net = init_network(&[3, 7, 1], Activation::Tanh, 1.0, 61).unwrap();
        let x = array![[0.3, -1.1, 0.8]];
        let data_pos = Dataset::new(x.clone(), array![1.0]).unwrap();
        let data_neg = Dataset::new(-x, array![-1.0]).unwrap();
        let g_pos = net.loss_gradient(&data_pos, LossKind::Ce).unwrap();
        let g_neg = net.loss_gradient(&data_neg, LossKind::Ce).unwrap();
        for k in 0..g_pos.len() {
            assert!((g_pos.0[k] - g_neg.0[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_norms_stay_near_the_input_norm_at_init() {
        let net = init_network(&[10, 256, 256, 256, 1], Activation::Relu, 2.0, 17).unwrap();
        let x = random_inputs(18, 20, 10);
        // Walk the recursion manually to observe every hidden layer.
        let mut h = x.clone();
        let input_ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / 20.0;
        for l in 0..net.depth() - 1 {
            let f = h.dot(&net.weights[l].t());
            let s = net.layer_scale(net.widths[l + 1]);
            h = f.mapv(|v| s * net.activation.apply(v));
            let ms: f64 = h.iter().map(|v| v * v).sum::<f64>() / 20.0;
            let ratio = ms / input_ms;
            assert!(
                ratio > 0.5 && ratio < 2.0,
                "layer {l}: squared-norm ratio {ratio}"
            );
        }
    }

    #[test]
    fn set_params_round_trips_and_validates() {
        let mut net = init_network(&[2, 4, 1], Activation::Relu, 2.0, 71).unwrap();
        let p = net.params();
        net.set_params(&p).unwrap();
        assert_eq!(net.params(), p);
        assert!(net.set_params(&ParamVector::zeros(3)).is_err());
        let mut bad = ParamVector::zeros(net.param_count());
        bad.0[0] = f64::NAN;
        assert!(net.set_params(&bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = init_network(&[3, 12, 1], Activation::Tanh, 1.0, 91).unwrap();
        net.save(&path).unwrap();
        let back = Network::load(&path).unwrap();
        assert_eq!(net.params(), back.params());
        assert_eq!(back.activation(), Activation::Tanh);
        assert_eq!(back.gamma(), 1.0);
        assert_eq!(back.seed(), 91);
        let x = random_inputs(92, 3, 3);
        assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
    }

    #[test]
    fn checkpoint_rejects_foreign_documents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"format\":\"something-else\"}").unwrap();
        assert!(Network::load(&path).is_err());
        std::fs::write(&path, "not json at all").unwrap();
        assert!(Network::load(&path).is_err());
    }
}
