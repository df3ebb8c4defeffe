//! Config resolution, experiment dispatch, and run persistence.
//!
//! A run is: one experiment name, one resolved [`RunConfig`], one seed.
//! The dispatcher executes it and returns the metrics as JSON; when an
//! output directory is given it also writes a run bundle:
//!
//! * `manifest.json`: experiment name, seed, crate version, resolved config
//! * `metrics.json`: the same JSON the CLI prints
//! * `trajectory_*.csv`: training curves or dual flows
//! * `boundary_*.pgm`: decision-function rasters (two-moon only)
//!
//! Runs are single threaded and fully seeded, so re-running the same
//! config and seed reproduces `metrics.json` byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde_json::{json, Value};

use super::ablation::{run_ablation, AblationConfig};
use super::boundary::{margin, sample_boundary, write_pgm, Bounds};
use super::cmnist::{
    build_colored, evaluate, make_environment, worst_group_accuracy, ColoredDataset, Environment,
};
use super::digits::synth_corpus;
use super::idx::read_idx_file;
use super::train::{fit, CurvePoint, Optimizer, TrainConfig, TrainReport};
use super::twomoon::{generate, TwoMoonConfig};
use crate::dynamics::{simulate_dual, stability_jacobian, DualState, FieldKind, Trajectory};
use crate::model::{
    init_network, init_standard_network, Activation, Dataset, LinearizedModel, Network,
};
use crate::numerics::{OdeConfig, OdeMethod};
use crate::objectives::{ClassShift, FeatureBasis, LossKind};
use crate::theory::{decoupled_fixed_point, rotation_u};
use crate::{Error, Result};

/// Environment variable naming the directory that holds IDX digit files.
pub const DATA_DIR_ENV: &str = "NTKLAB_DATA_DIR";

/// The experiments the dispatcher knows how to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Twomoon,
    Toy2d,
    DualSim,
    FixedPoint,
    Cmnist,
    Ablation,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Twomoon => "twomoon",
            Experiment::Toy2d => "toy2d",
            Experiment::DualSim => "dual-sim",
            Experiment::FixedPoint => "fixed-point",
            Experiment::Cmnist => "cmnist",
            Experiment::Ablation => "ablation",
        }
    }
}

/// Which penalty a training experiment applies. The CLI exposes this
/// directly; [`CmnistRun`] and [`TwoMoonRun`] carry the coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    None,
    Wd,
    Sd,
    SdShift,
}

impl std::str::FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Regularizer> {
        match s {
            "none" => Ok(Regularizer::None),
            "wd" => Ok(Regularizer::Wd),
            "sd" => Ok(Regularizer::Sd),
            "sd-shift" => Ok(Regularizer::SdShift),
            other => Err(Error::Config(format!("unknown regularizer '{other}'"))),
        }
    }
}

/// Two-moon margin study settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoMoonRun {
    pub data: TwoMoonConfig,
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub sd_lambda: f64,
    pub anneal_steps: usize,
    pub resolution: usize,
    pub record_every: usize,
}

impl Default for TwoMoonRun {
    fn default() -> Self {
        TwoMoonRun {
            data: TwoMoonConfig::default(),
            hidden: 500,
            steps: 5000,
            lr: 3e-3,
            momentum: 0.9,
            sd_lambda: 0.1,
            anneal_steps: 0,
            resolution: 240,
            record_every: 100,
        }
    }
}

/// Colored-digits run settings. Shift gammas are per-class magnitudes:
/// the penalty anchors the logit at y times the class gamma.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmnistRun {
    pub n_train: usize,
    pub n_test: usize,
    pub train_color_flip: f64,
    pub test_color_flip: f64,
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub anneal_steps: usize,
    pub regularizer: Regularizer,
    pub wd_lambda: f64,
    pub sd_lambda: f64,
    pub shift_neg: ClassShift,
    pub shift_pos: ClassShift,
    pub record_every: usize,
}

impl Default for CmnistRun {
    fn default() -> Self {
        CmnistRun {
            n_train: 8000,
            n_test: 2000,
            train_color_flip: 0.1,
            test_color_flip: 0.9,
            hidden: 300,
            steps: 2000,
            lr: 1e-4,
            anneal_steps: 450,
            regularizer: Regularizer::None,
            wd_lambda: 0.0,
            sd_lambda: 2e-5,
            shift_neg: ClassShift {
                lambda: 2e-5,
                gamma: 0.0,
            },
            shift_pos: ClassShift {
                lambda: 2e-5,
                gamma: 0.0,
            },
            record_every: 100,
        }
    }
}

impl CmnistRun {
    /// Map the chosen regularizer onto a loss, folding the class label
    /// into the shift anchor (negative class anchors at minus gamma).
    pub fn loss(&self) -> LossKind {
        match self.regularizer {
            Regularizer::None => LossKind::Ce,
            Regularizer::Wd => LossKind::RidgeCe {
                lambda: self.wd_lambda,
            },
            Regularizer::Sd => LossKind::Sd {
                lambda: self.sd_lambda,
            },
            Regularizer::SdShift => LossKind::SdShift {
                neg: ClassShift {
                    lambda: self.shift_neg.lambda,
                    gamma: -self.shift_neg.gamma,
                },
                pos: self.shift_pos,
            },
        }
    }
}

/// Dual-flow simulation of a two-feature spectrum.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualRun {
    pub s1: f64,
    pub s2: f64,
    pub delta: f64,
    pub lambda: f64,
    pub field: FieldKind,
    pub step_size: f64,
    pub max_steps: usize,
    pub tol: f64,
    pub record_every: usize,
}

impl Default for DualRun {
    fn default() -> Self {
        DualRun {
            s1: 6.0,
            s2: 2.0,
            delta: 0.05,
            lambda: 1.0,
            field: FieldKind::Exact,
            step_size: 1e-2,
            max_steps: 2_000_000,
            tol: 1e-10,
            record_every: 200,
        }
    }
}

/// Two-example toy: primal descent on a fixed tangent model against the
/// dual flow on the same spectrum.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyRun {
    pub s1: f64,
    pub s2: f64,
    pub delta: f64,
    pub lambda: f64,
    pub step_size: f64,
    pub max_steps: usize,
    pub tol: f64,
    pub record_every: usize,
}

impl Default for ToyRun {
    fn default() -> Self {
        ToyRun {
            s1: 2.0,
            s2: 2.0,
            delta: 0.05,
            lambda: 1.0,
            step_size: 1e-3,
            max_steps: 4_000_000,
            tol: 1e-10,
            record_every: 500,
        }
    }
}

/// Closed-form and numeric fixed points for a given spectrum.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointRun {
    pub s: Vec<f64>,
    pub lambda: f64,
    /// Mixing angle for a two-feature basis; identity basis when absent.
    pub delta: Option<f64>,
}

impl Default for FixedPointRun {
    fn default() -> Self {
        FixedPointRun {
            s: vec![2.0, 1.0],
            lambda: 1.0,
            delta: None,
        }
    }
}

/// The whole configuration tree. Every key can come from a TOML file or
/// a `--set key=value` override; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory with IDX digit files; falls back to the environment
    /// variable named by [`DATA_DIR_ENV`], then to a synthetic corpus.
    pub data_dir: Option<PathBuf>,
    pub twomoon: TwoMoonRun,
    pub cmnist: CmnistRun,
    pub dual: DualRun,
    pub toy: ToyRun,
    pub fixed_point: FixedPointRun,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_dir: None,
            twomoon: TwoMoonRun::default(),
            cmnist: CmnistRun::default(),
            dual: DualRun::default(),
            toy: ToyRun::default(),
            fixed_point: FixedPointRun::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Load a config file (or start from defaults) and apply dotted-path
/// overrides like `cmnist.sd_lambda=3e-5`. Unknown keys fail.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
        let parsed = parse_toml_value(value.trim());
        set_dotted(&mut table, key.trim(), parsed)?;
    }
    RunConfig::deserialize_checked(table)
}

impl RunConfig {
    fn deserialize_checked(table: toml::Table) -> Result<RunConfig> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))
    }
}

/// Parse an override value with TOML's typing rules; anything that does
/// not parse as a TOML literal is kept as a string.
fn parse_toml_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v exists"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{part}' in '{key}' is not a table")))?;
    }
    cur.insert(parts.last().unwrap().to_string(), value);
    Ok(())
}

/// Run one experiment. Returns the metrics JSON; when `out` is given the
/// run bundle is written there.
pub fn run(experiment: Experiment, cfg: &RunConfig, out: Option<&Path>) -> Result<Value> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let metrics = match experiment {
        Experiment::Twomoon => run_twomoon(cfg, out)?,
        Experiment::Toy2d => run_toy2d(cfg, out)?,
        Experiment::DualSim => run_dual_sim(cfg, out)?,
        Experiment::FixedPoint => run_fixed_point(cfg)?,
        Experiment::Cmnist => run_cmnist(cfg, out)?,
        Experiment::Ablation => run_ablation_experiment(cfg)?,
    };
    if let Some(dir) = out {
        let manifest = json!({
            "experiment": experiment.name(),
            "seed": cfg.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "config": serde_json::to_value(cfg).expect("config serializes"),
        });
        write_json(&dir.join("manifest.json"), &manifest)?;
        write_json(&dir.join("metrics.json"), &metrics)?;
    }
    Ok(metrics)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut text = String::from("step,loss,accuracy\n");
    for p in curve {
        text.push_str(&format!("{},{},{}\n", p.step, p.loss, p.accuracy));
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut buf = Vec::new();
    traj.write_csv(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub(crate) fn augment_ones(pts: &Array2<f64>) -> Array2<f64> {
    let mut aug = Array2::ones((pts.nrows(), 3));
    aug.slice_mut(ndarray::s![.., ..2]).assign(pts);
    aug
}

fn report_json(report: &TrainReport, margin: Option<f64>) -> Value {
    let mut v = json!({
        "train_accuracy": report.train_accuracy,
        "final_loss": report.final_loss,
        "min_signed_logit": report.min_signed_logit,
    });
    if let Some(m) = margin {
        v["margin"] = json!(m);
    }
    v
}

fn run_twomoon(cfg: &RunConfig, out: Option<&Path>) -> Result<Value> {
    let tm = &cfg.twomoon;
    let data = generate(&tm.data, cfg.seed)?;
    let widths = [data.dim(), tm.hidden, 1];
    let optimizer = Optimizer::Gd {
        lr: tm.lr,
        momentum: tm.momentum,
    };
    let mut metrics = json!({ "seed": cfg.seed });
    for (name, loss) in [
        ("erm", LossKind::Ce),
        (
            "sd",
            LossKind::Sd {
                lambda: tm.sd_lambda,
            },
        ),
    ] {
        let mut net = init_network(&widths, Activation::Relu, 2.0, cfg.seed)?;
        let train_cfg = TrainConfig {
            steps: tm.steps,
            optimizer,
            loss,
            anneal_steps: tm.anneal_steps,
            record_every: tm.record_every,
        };
        let report = fit(&mut net, &data, &train_cfg)?;
        let predict = |pts: &Array2<f64>| net.forward(&augment_ones(pts));
        let m = margin(&predict, &data.x, Bounds::two_moon(), tm.resolution)?;
        metrics[name] = report_json(&report, Some(m));
        if let Some(dir) = out {
            write_curve_csv(&dir.join(format!("trajectory_{name}.csv")), &report.curve)?;
            let map = sample_boundary(&predict, Bounds::two_moon(), tm.resolution)?;
            write_pgm(&map, &dir.join(format!("boundary_{name}.pgm")))?;
        }
    }
    Ok(metrics)
}

/// Load the standard IDX quadruple from `dir`, truncated to the
/// requested sizes.
fn load_idx_corpus(
    dir: &Path,
    n_train: usize,
    n_test: usize,
) -> Result<(
    (super::idx::IdxTensor, super::idx::IdxTensor),
    (super::idx::IdxTensor, super::idx::IdxTensor),
)> {
    let file = |name: &str| read_idx_file(&dir.join(name));
    let take_images = |t: &super::idx::IdxTensor, n: usize| -> Result<super::idx::IdxTensor> {
        if t.len() < n {
            return Err(Error::Config(format!(
                "corpus has {} images, config asks for {n}",
                t.len()
            )));
        }
        let px = t.dims()[1] * t.dims()[2];
        super::idx::IdxTensor::images(n, t.dims()[1], t.dims()[2], t.data()[..n * px].to_vec())
    };
    let take_labels = |t: &super::idx::IdxTensor, n: usize| -> Result<super::idx::IdxTensor> {
        if t.len() < n {
            return Err(Error::Config(format!(
                "corpus has {} labels, config asks for {n}",
                t.len()
            )));
        }
        Ok(super::idx::IdxTensor::labels(t.data()[..n].to_vec()))
    };
    let train_x = file("train-images-idx3-ubyte")?;
    let train_y = file("train-labels-idx1-ubyte")?;
    let test_x = file("t10k-images-idx3-ubyte")?;
    let test_y = file("t10k-labels-idx1-ubyte")?;
    Ok((
        (take_images(&train_x, n_train)?, take_labels(&train_y, n_train)?),
        (take_images(&test_x, n_test)?, take_labels(&test_y, n_test)?),
    ))
}

/// Build train and test splits, from IDX files when a data directory is
/// configured (config key first, then the environment variable), and
/// from the synthetic glyph corpus otherwise.
pub fn colored_splits(cfg: &RunConfig) -> Result<(ColoredDataset, ColoredDataset, &'static str)> {
    let cm = &cfg.cmnist;
    let dir = cfg
        .data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from));
    let (train_corpus, test_corpus, source) = match dir {
        Some(d) => {
            let (tr, te) = load_idx_corpus(&d, cm.n_train, cm.n_test)?;
            (tr, te, "idx")
        }
        None => (
            synth_corpus(cm.n_train, cfg.seed.wrapping_add(11)),
            synth_corpus(cm.n_test, cfg.seed.wrapping_add(12)),
            "synthetic",
        ),
    };
    let train = build_colored(
        &train_corpus.0,
        &train_corpus.1,
        cm.train_color_flip,
        cfg.seed.wrapping_add(21),
    )?;
    let test = build_colored(
        &test_corpus.0,
        &test_corpus.1,
        cm.test_color_flip,
        cfg.seed.wrapping_add(22),
    )?;
    Ok((train, test, source))
}

/// Train one colored-digits model per the config's regularizer choice.
pub fn train_cmnist_model(
    cfg: &RunConfig,
    train: &ColoredDataset,
) -> Result<(Network, TrainReport)> {
    let cm = &cfg.cmnist;
    let widths = [super::cmnist::INPUT_DIM, cm.hidden, cm.hidden, 1];
    let mut net = init_standard_network(&widths, Activation::Relu, 2.0, cfg.seed)?;
    let data = Dataset::new(train.x.clone(), train.y.clone())?;
    let train_cfg = TrainConfig {
        steps: cm.steps,
        optimizer: Optimizer::Adam { lr: cm.lr },
        loss: cm.loss(),
        anneal_steps: cm.anneal_steps,
        record_every: cm.record_every,
    };
    let report = fit(&mut net, &data, &train_cfg)?;
    Ok((net, report))
}

fn run_cmnist(cfg: &RunConfig, out: Option<&Path>) -> Result<Value> {
    let (train, test, source) = colored_splits(cfg)?;
    let (net, report) = train_cmnist_model(cfg, &train)?;
    let train_report = evaluate(&net, &train)?;
    let test_report = evaluate(&net, &test)?;
    let mut envs = serde_json::Map::new();
    for env in Environment::ALL {
        let view = make_environment(&test, env);
        let r = evaluate(&net, &view)?;
        envs.insert(
            env.name().to_string(),
            serde_json::to_value(r).expect("report serializes"),
        );
    }
    let metrics = json!({
        "seed": cfg.seed,
        "corpus": source,
        "regularizer": cfg.cmnist.regularizer,
        "train": serde_json::to_value(train_report).expect("report serializes"),
        "test": serde_json::to_value(test_report).expect("report serializes"),
        "environments": Value::Object(envs),
        "worst_group_accuracy": worst_group_accuracy(&net, &test)?,
        "final_loss": report.final_loss,
    });
    if let Some(dir) = out {
        write_curve_csv(&dir.join("trajectory_train.csv"), &report.curve)?;
    }
    Ok(metrics)
}

fn two_feature_basis(s1: f64, s2: f64, delta: f64) -> Result<FeatureBasis> {
    FeatureBasis::from_spectrum(rotation_u(delta)?, ndarray::arr1(&[s1, s2]))
}

fn run_dual_sim(cfg: &RunConfig, out: Option<&Path>) -> Result<Value> {
    let d = &cfg.dual;
    let basis = two_feature_basis(d.s1, d.s2, d.delta)?;
    let state0 = DualState::uniform(2, d.lambda)?;
    let ode = OdeConfig::new(OdeMethod::Rk4, d.step_size, d.max_steps, d.tol)
        .with_record_every(d.record_every);
    let traj = simulate_dual(&state0, &basis, d.field, &ode)?;
    let alpha_star = traj.last_state().clone();
    let z_star = traj.last_z().clone();
    let mut metrics = json!({
        "field": d.field,
        "lambda": d.lambda,
        "s": [d.s1, d.s2],
        "delta": d.delta,
        "converged": traj.converged,
        "steps": traj.steps,
        "clamp_count": traj.clamp_count,
        "alpha_star": alpha_star.to_vec(),
        "z_star": z_star.to_vec(),
        "loss": traj.last_loss(),
    });
    if d.field == FieldKind::Exact {
        // Attach the attractivity certificate when the flow converged.
        if traj.converged {
            let (_, eigs) = stability_jacobian(&alpha_star, &basis, d.lambda, 1.0)?;
            metrics["stability_eigenvalues"] = json!(eigs.to_vec());
        }
    }
    if let Some(dir) = out {
        write_trajectory_csv(&dir.join("trajectory_dual.csv"), &traj)?;
    }
    Ok(metrics)
}

fn run_fixed_point(cfg: &RunConfig) -> Result<Value> {
    let fp = &cfg.fixed_point;
    let s = Array1::from_vec(fp.s.clone());
    let n = s.len();
    let u = match fp.delta {
        Some(delta) => {
            if n != 2 {
                return Err(Error::Config(
                    "delta mixing needs exactly two features".into(),
                ));
            }
            rotation_u(delta)?
        }
        None => Array2::eye(n),
    };
    let basis = FeatureBasis::from_spectrum(u, s.clone())?;
    let (alpha_closed, z_closed) = decoupled_fixed_point(&s, fp.lambda)?;
    let alpha_exact = crate::dynamics::find_fixed_point(&basis, fp.lambda, FieldKind::Exact)?;
    let z_exact = crate::dynamics::dual_response(&alpha_exact, &basis, fp.lambda, FieldKind::Exact);
    let alpha_sd = crate::dynamics::find_fixed_point(&basis, fp.lambda, FieldKind::Sd)?;
    let (_, eigs) = stability_jacobian(&alpha_exact, &basis, fp.lambda, 1.0)?;
    Ok(json!({
        "lambda": fp.lambda,
        "s": fp.s,
        "delta": fp.delta,
        "approx_alpha_star": alpha_closed.to_vec(),
        "approx_z_star": z_closed.to_vec(),
        "exact_alpha_star": alpha_exact.to_vec(),
        "exact_z_star": z_exact.to_vec(),
        "sd_alpha_star": alpha_sd.to_vec(),
        "stability_eigenvalues": eigs.to_vec(),
    }))
}

fn run_toy2d(cfg: &RunConfig, out: Option<&Path>) -> Result<Value> {
    let t = &cfg.toy;
    let u = rotation_u(t.delta)?;
    let s = ndarray::arr1(&[t.s1, t.s2]);
    let y = ndarray::arr1(&[1.0, -1.0]);
    // Tangent features chosen so the signed matrix diag(y)·phi0 has
    // exactly the SVD U(delta)·diag(s): the dual flow and the primal
    // descent then live on the same two-feature spectrum.
    let mut phi0 = u.dot(&Array2::from_diag(&s));
    for (i, mut row) in phi0.rows_mut().into_iter().enumerate() {
        let yi = y[i];
        row.mapv_inplace(|v| v * yi);
    }
    let model = LinearizedModel {
        y0: Array1::zeros(2),
        phi0,
    };
    let data = Dataset::new(Array2::zeros((2, 2)), y)?;
    let ode = OdeConfig::new(OdeMethod::Rk4, t.step_size, t.max_steps, t.tol)
        .with_record_every(t.record_every);
    let (primal_traj, primal_basis) = crate::dynamics::primal_flow(
        &model,
        &data,
        LossKind::RidgeCe { lambda: t.lambda },
        &ode,
    )?;
    let dual_basis = FeatureBasis::from_spectrum(rotation_u(t.delta)?, s)?;
    let state0 = DualState::uniform(2, t.lambda)?;
    let dual_traj = simulate_dual(&state0, &dual_basis, FieldKind::Exact, &ode)?;
    let zp = primal_traj.last_z().clone();
    let zd = dual_traj.last_z().clone();
    let gap = zp
        .iter()
        .zip(zd.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    // The signs of U's columns are an SVD convention; compare the basis
    // actually factored from the primal features against the one built
    // from the rotation to confirm they agree.
    let basis_gap = (&primal_basis.u.mapv(f64::abs) - &dual_basis.u.mapv(f64::abs))
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let metrics = json!({
        "s": [t.s1, t.s2],
        "delta": t.delta,
        "lambda": t.lambda,
        "primal_z_star": zp.to_vec(),
        "dual_z_star": zd.to_vec(),
        "max_z_gap": gap,
        "basis_gap": basis_gap,
        "primal_converged": primal_traj.converged,
        "dual_converged": dual_traj.converged,
    });
    if let Some(dir) = out {
        write_trajectory_csv(&dir.join("trajectory_primal.csv"), &primal_traj)?;
        write_trajectory_csv(&dir.join("trajectory_dual.csv"), &dual_traj)?;
    }
    Ok(metrics)
}

fn run_ablation_experiment(cfg: &RunConfig) -> Result<Value> {
    let rows = run_ablation(&cfg.ablation, cfg.seed)?;
    Ok(json!({
        "seed": cfg.seed,
        "rows": serde_json::to_value(&rows).expect("rows serialize"),
    }))
}
