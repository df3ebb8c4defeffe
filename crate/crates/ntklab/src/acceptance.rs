//! End-to-end checks tying the closed forms to the simulated dynamics
//! and the desk-scale experiments.
//!
//! Every check pins its thresholds locally and reports one line through
//! [`CheckResult`]; `run_all` evaluates the whole battery in a fixed
//! order. The `acceptance` integration test asserts each line and
//! `ntklab verify` prints them from the command line. The colored-digits
//! trainings are the expensive part, so the three models are trained
//! once in a shared cell and every check reads from it.

use std::sync::OnceLock;

use ndarray::{arr1, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::{
    dual_response, find_fixed_point, sd_shift_dual_field, sd_shift_fixed_point,
    sd_shift_response, simulate_dual, stability_jacobian, DualState, FieldKind,
};
use crate::experiments::boundary::{margin, Bounds};
use crate::experiments::cmnist::{evaluate, make_environment, Environment};
use crate::experiments::runner::{
    augment_ones, colored_splits, train_cmnist_model, Regularizer, RunConfig, TwoMoonRun,
};
use crate::experiments::train::{fit, Optimizer, TrainConfig};
use crate::experiments::twomoon::generate;
use crate::model::{
    init_network, mean_linearization_gaps, Activation, Dataset, LinearizedModel, ParamVector,
};
use crate::numerics::{finite_diff_grad, symmetric_eig, OdeConfig, OdeMethod};
use crate::objectives::{
    cross_entropy, duality_gap, legendre_dual, optimal_alpha, FeatureBasis, LossKind,
};
use crate::theory::{
    decoupled_fixed_point, perturbative_response, rotation_u, shared_strength_fixed_point,
    starvation_derivative, TwoFeatureConfig, WArgument,
};
use crate::Result;

/// Verdict of one acceptance check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    /// The one-line report format used by the test target and the CLI.
    pub fn line(&self) -> String {
        let verdict = if self.passed { "pass" } else { "FAIL" };
        format!("{:<28} {verdict}  {}", self.name, self.detail)
    }
}

fn outcome(
    name: &'static str,
    body: impl FnOnce() -> Result<(bool, String)>,
) -> CheckResult {
    match body() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn sup(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Tangent-line bound under the loss: over random margins the gap is
/// positive, below 1e-8, and no grid point beats the closed-form
/// maximizer sigma(-omega).
pub fn legendre_duality() -> CheckResult {
    outcome("legendre duality", || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let omega = rng.random_range(-20.0..20.0);
            let gap = duality_gap(omega)?;
            if !(gap > 0.0) {
                return Ok((false, format!("gap {gap} not positive at omega {omega}")));
            }
            worst = worst.max(gap);
        }
        // Coarse grid cross-check that the analytic maximizer dominates.
        for omega in [-18.0, -3.5, 0.0, 1.0, 7.25, 19.5] {
            let at_star = legendre_dual(omega, optimal_alpha(omega))?;
            for k in 1..2000 {
                let alpha = k as f64 / 2000.0;
                if legendre_dual(omega, alpha)? > at_star {
                    return Ok((false, format!("grid alpha {alpha} beats sigma(-{omega})")));
                }
            }
        }
        Ok((worst <= 1e-8, format!("worst gap {worst:.2e} over 1000 margins")))
    })
}

/// Random spectra attract: at the converged fixed point of the exact
/// flow every stability eigenvalue is strictly negative.
pub fn fixed_point_stability() -> CheckResult {
    outcome("fixed point stability", || {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let mut worst = f64::NEG_INFINITY;
        for trial in 0..50u64 {
            let n = 2 + (trial as usize % 7);
            let raw = Array2::from_shape_fn((n, n), |_| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            let sym = &raw + &raw.t();
            let (_, u) = symmetric_eig(&sym)?;
            let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..6.0)).collect();
            s.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
            let lambda = 10f64.powf(rng.random_range(-1.0..1.0));
            let basis = FeatureBasis::from_spectrum(u, Array1::from_vec(s))?;
            let star = find_fixed_point(&basis, lambda, FieldKind::Exact)?;
            let (_, eigs) = stability_jacobian(&star, &basis, lambda, 1.0)?;
            let top = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if top >= 0.0 {
                return Ok((false, format!("eigenvalue {top:.3e} at trial {trial}")));
            }
            worst = worst.max(top);
        }
        Ok((true, format!("top eigenvalue {worst:.3e} over 50 spectra")))
    })
}

/// Lambert-W closed forms against the integrated flow, plus the record
/// of which W argument the flow actually selects away from unit penalty.
pub fn closed_form_fixed_points() -> CheckResult {
    outcome("closed-form fixed points", || {
        let ode = OdeConfig::new(OdeMethod::Rk4, 1e-3, 2_000_000, 1e-13).with_record_every(1 << 30);
        let (mut worst_a, mut worst_z) = (0.0f64, 0.0f64);
        for i in 0..7 {
            let s_sq = 0.25 * 144f64.powf(i as f64 / 6.0);
            for j in 0..5 {
                let lambda = 0.1 * 100f64.powf(j as f64 / 4.0);
                let s = arr1(&[s_sq.sqrt()]);
                let (a_formula, z_formula) = decoupled_fixed_point(&s, lambda)?;
                let basis = FeatureBasis::from_spectrum(Array2::eye(1), s)?;
                let traj =
                    simulate_dual(&DualState::uniform(1, lambda)?, &basis, FieldKind::Approx, &ode)?;
                if !traj.converged {
                    return Ok((false, format!("flow stalled at s2 {s_sq:.3}, lambda {lambda:.3}")));
                }
                let a_ode = traj.states.last().expect("recorded");
                let z_ode = dual_response(a_ode, &basis, lambda, FieldKind::Approx);
                worst_a = worst_a.max((a_formula[0] - a_ode[0]).abs());
                worst_z = worst_z.max((z_formula[0] - z_ode[0]).abs());
            }
        }
        // The equal-strength form admits two shift conventions that agree
        // only at lambda = 1; the flow picks the unit shift.
        let u = rotation_u(0.3)?;
        let basis = FeatureBasis::from_spectrum(u.clone(), arr1(&[2.0, 2.0]))?;
        let star = find_fixed_point(&basis, 0.5, FieldKind::Approx)?;
        let (one, _) = shared_strength_fixed_point(4.0, 0.5, &u, WArgument::ShiftByOne)?;
        let (lam, _) = shared_strength_fixed_point(4.0, 0.5, &u, WArgument::ShiftByLambda)?;
        let err_one = (one[0] - star[0]).abs();
        let err_lam = (lam[0] - star[0]).abs();
        let passed = worst_a < 1e-8 && worst_z < 1e-7 && err_one < 1e-9 && err_lam > 1e-3;
        Ok((
            passed,
            format!(
                "|da| {worst_a:.1e}, |dz| {worst_z:.1e}; unit shift off by {err_one:.1e}, \
                 lambda shift off by {err_lam:.1e}"
            ),
        ))
    })
}

/// The coupling derivative is negative across the stated grid, matches a
/// finite difference of the perturbative response, and the exact flow's
/// weak-feature response falls monotonically as the strong feature grows.
pub fn starvation_theorem() -> CheckResult {
    outcome("starvation theorem", || {
        let s2_sq = 4.0;
        let mut closest = f64::NEG_INFINITY;
        for &delta in &[0.01, 0.05, 0.1] {
            for &s1_sq in &[4.4, 6.0, 9.0, 16.0, 25.0, 40.0] {
                for &lambda in &[0.1, 1.0, 10.0] {
                    let cfg = TwoFeatureConfig::new(s1_sq, s2_sq, lambda, delta)?;
                    let d = starvation_derivative(&cfg)?;
                    if !(d < 0.0) {
                        return Ok((
                            false,
                            format!("derivative {d:.3e} at delta {delta}, s1^2 {s1_sq}, lambda {lambda}"),
                        ));
                    }
                    closest = closest.max(d);
                }
            }
        }
        let cfg = TwoFeatureConfig::new(9.0, 4.0, 1.0, 0.05)?;
        let d = starvation_derivative(&cfg)?;
        let h = 1e-4;
        let hi = perturbative_response(&TwoFeatureConfig::new(9.0 + h, 4.0, 1.0, 0.05)?)?.1;
        let lo = perturbative_response(&TwoFeatureConfig::new(9.0 - h, 4.0, 1.0, 0.05)?)?.1;
        let fd = (hi - lo) / (2.0 * h);
        let rel = (d - fd).abs() / d.abs();
        if rel >= 1e-6 {
            return Ok((false, format!("finite difference off by {rel:.2e} relative")));
        }
        let mut prev = f64::INFINITY;
        for s1 in 2..=6 {
            let basis =
                FeatureBasis::from_spectrum(rotation_u(0.05)?, arr1(&[s1 as f64, 2.0]))?;
            let star = find_fixed_point(&basis, 1.0, FieldKind::Exact)?;
            let z2 = dual_response(&star, &basis, 1.0, FieldKind::Exact)[1];
            if z2 >= prev {
                return Ok((false, format!("z2 {z2:.6} fails to fall at s1 {s1}")));
            }
            prev = z2;
        }
        Ok((true, format!("derivative <= {closest:.2e} on grid, fd rel err {rel:.1e}")))
    })
}

/// Confidence-capped dynamics ignore the spectrum: sweeping the strong
/// feature leaves the weak coordinate's whole trajectory bit-identical,
/// while the exact field starves it by more than ten percent. The
/// ten-percent contrast needs a solid coupling; at delta 0.5 the exact
/// drop is 22 percent, while at 0.05 it would be under two.
pub fn sd_decoupling() -> CheckResult {
    outcome("sd decoupling", || {
        let ode = OdeConfig::new(OdeMethod::Rk4, 1e-2, 400_000, 1e-12).with_record_every(50);
        let mut reference: Option<Vec<u64>> = None;
        let (mut z2_lo, mut z2_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut z2_exact = Vec::new();
        for s1 in 2..=6 {
            let basis =
                FeatureBasis::from_spectrum(rotation_u(0.5)?, arr1(&[s1 as f64, 2.0]))?;
            let traj = simulate_dual(&DualState::uniform(2, 1.0)?, &basis, FieldKind::Sd, &ode)?;
            if !traj.converged {
                return Ok((false, format!("capped flow stalled at s1 {s1}")));
            }
            let bits: Vec<u64> = traj.states.iter().map(|a| a[1].to_bits()).collect();
            match &reference {
                None => reference = Some(bits),
                Some(r) => {
                    if r != &bits {
                        return Ok((false, format!("alpha2 trajectory moved at s1 {s1}")));
                    }
                }
            }
            let z2 = traj.z_series.last().expect("recorded")[1];
            z2_lo = z2_lo.min(z2);
            z2_hi = z2_hi.max(z2);
            let star = find_fixed_point(&basis, 1.0, FieldKind::Exact)?;
            z2_exact.push(dual_response(&star, &basis, 1.0, FieldKind::Exact)[1]);
        }
        let capped_spread = z2_hi - z2_lo;
        let drop = (z2_exact[0] - z2_exact[4]) / z2_exact[0];
        let passed = capped_spread <= 1e-12 && drop > 0.10;
        Ok((
            passed,
            format!("capped z2 spread {capped_spread:.1e}, exact z2 drops {:.1}%", drop * 100.0),
        ))
    })
}

/// Ridge-penalized descent on the tangent model lands on the dual
/// field's fixed point: the feature responses agree to 1e-3 across the
/// strong-feature sweep.
pub fn primal_dual_agreement() -> CheckResult {
    outcome("primal-dual agreement", || {
        let ode = OdeConfig::new(OdeMethod::Euler, 1e-2, 2_000_000, 1e-9).with_record_every(1 << 30);
        let y = arr1(&[1.0, -1.0]);
        let mut worst = 0.0f64;
        for s1 in 2..=6 {
            let u = rotation_u(0.05)?;
            let s = [s1 as f64, 2.0];
            let phi0 = Array2::from_shape_fn((2, 2), |(i, j)| y[i] * u[[i, j]] * s[j]);
            let model = LinearizedModel { y0: Array1::zeros(2), phi0 };
            let data = Dataset::new(Array2::zeros((2, 2)), y.clone())?;
            let (traj, basis) =
                crate::dynamics::primal_flow(&model, &data, LossKind::RidgeCe { lambda: 1.0 }, &ode)?;
            if !traj.converged {
                return Ok((false, format!("primal descent stalled at s1 {s1}")));
            }
            let z_primal = traj.z_series.last().expect("recorded");
            let star = find_fixed_point(&basis, 1.0, FieldKind::Exact)?;
            let z_dual = dual_response(&star, &basis, 1.0, FieldKind::Exact);
            for i in 0..2 {
                worst = worst.max((z_primal[i] - z_dual[i]).abs());
            }
        }
        Ok((worst < 1e-3, format!("max |z gap| {worst:.2e} over the sweep")))
    })
}

/// Both trainings separate the moons; the capped one keeps the boundary
/// farther from the data in at least nine of ten seeds.
pub fn two_moon_margins() -> CheckResult {
    outcome("two-moon margins", || {
        let tm = TwoMoonRun::default();
        let optimizer = Optimizer::Gd { lr: tm.lr, momentum: tm.momentum };
        let mut wins = 0usize;
        let mut min_acc = 1.0f64;
        for seed in 0..10u64 {
            let data = generate(&tm.data, seed)?;
            let widths = [data.dim(), tm.hidden, 1];
            let mut margins = [0.0f64; 2];
            for (slot, loss) in [LossKind::Ce, LossKind::Sd { lambda: tm.sd_lambda }]
                .into_iter()
                .enumerate()
            {
                let mut net = init_network(&widths, Activation::Relu, 2.0, seed)?;
                let cfg = TrainConfig {
                    steps: tm.steps,
                    optimizer,
                    loss,
                    anneal_steps: tm.anneal_steps,
                    record_every: 0,
                };
                let report = fit(&mut net, &data, &cfg)?;
                min_acc = min_acc.min(report.train_accuracy);
                let predict = |pts: &Array2<f64>| net.forward(&augment_ones(pts));
                margins[slot] = margin(&predict, &data.x, Bounds::two_moon(), tm.resolution)?;
            }
            if margins[1] > margins[0] {
                wins += 1;
            }
        }
        let passed = min_acc >= 0.99 && wins >= 9;
        Ok((passed, format!("capped margin wins {wins}/10, min train accuracy {min_acc:.3}")))
    })
}

/// One trained model per regularizer on the shared colored-digits split.
struct TrainedArm {
    train_accuracy: f64,
    test_accuracy: f64,
    worst_group: f64,
    blank_accuracy: f64,
    blank_entropy: f64,
}

struct ColoredBench {
    erm: TrainedArm,
    sd: TrainedArm,
    shift_worst_group: f64,
}

fn train_arm(cfg: &RunConfig) -> Result<TrainedArm> {
    let (train, test, _) = colored_splits(cfg)?;
    let (net, _) = train_cmnist_model(cfg, &train)?;
    let blank = evaluate(&net, &make_environment(&test, Environment::ColoredBlank))?;
    Ok(TrainedArm {
        train_accuracy: evaluate(&net, &train)?.accuracy,
        test_accuracy: evaluate(&net, &test)?.accuracy,
        worst_group: crate::experiments::cmnist::worst_group_accuracy(&net, &test)?,
        blank_accuracy: blank.accuracy,
        blank_entropy: blank.entropy,
    })
}

fn colored_bench() -> std::result::Result<&'static ColoredBench, String> {
    static CELL: OnceLock<std::result::Result<ColoredBench, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let build = || -> Result<ColoredBench> {
            let mut cfg = RunConfig::default();
            cfg.cmnist.regularizer = Regularizer::None;
            let erm = train_arm(&cfg)?;
            cfg.cmnist.regularizer = Regularizer::Sd;
            let sd = train_arm(&cfg)?;
            cfg.cmnist.regularizer = Regularizer::SdShift;
            let shift = train_arm(&cfg)?;
            Ok(ColoredBench { erm, sd, shift_worst_group: shift.worst_group })
        };
        build().map_err(|e| e.to_string())
    })
    .as_ref()
    .map_err(Clone::clone)
}

/// Plain training rides the color shortcut while the capped run recovers
/// shape: accuracy bars on both splits plus the blank-plate probes.
pub fn colored_digit_benchmark() -> CheckResult {
    outcome("colored-digit benchmark", || {
        let bench = match colored_bench() {
            Ok(b) => b,
            Err(e) => return Ok((false, format!("bench failed: {e}"))),
        };
        let (erm, sd) = (&bench.erm, &bench.sd);
        let mut bars = Vec::new();
        let mut check = |label: &str, ok: bool| {
            if !ok {
                bars.push(label.to_string());
            }
        };
        check("erm train >= 0.85", erm.train_accuracy >= 0.85);
        check("erm test <= 0.35", erm.test_accuracy <= 0.35);
        check("sd test in [0.55, 0.75]", (0.55..=0.75).contains(&sd.test_accuracy));
        check("erm blank << 0.5", erm.blank_accuracy < 0.40);
        check("sd blank << 0.5", sd.blank_accuracy < 0.40);
        check("erm blank entropy < 0.05", erm.blank_entropy < 0.05);
        check("sd blank entropy > 0.2", sd.blank_entropy > 0.2);
        let detail = format!(
            "erm {:.3}/{:.3}, sd test {:.3}, blanks {:.3}@{:.3} vs {:.3}@{:.3}{}",
            erm.train_accuracy,
            erm.test_accuracy,
            sd.test_accuracy,
            erm.blank_accuracy,
            erm.blank_entropy,
            sd.blank_accuracy,
            sd.blank_entropy,
            if bars.is_empty() {
                String::new()
            } else {
                format!("; failed: {}", bars.join(", "))
            }
        );
        Ok((bars.is_empty(), detail))
    })
}

/// Backprop against central differences, and the tangent model's error
/// shrinking with width.
pub fn tangent_model_checks() -> CheckResult {
    outcome("gradients and tangent model", || {
        let mut rng = ChaCha8Rng::seed_from_u64(909);
        let mut worst_rel = 0.0f64;
        for widths in [&[4usize, 6, 1][..], &[3, 5, 4, 1], &[5, 8, 7, 1]] {
            let n = 6;
            let d = widths[0];
            let x = Array2::from_shape_fn((n, d), |_| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            let y = Array1::from_shape_fn(n, |i| if i % 2 == 0 { 1.0 } else { -1.0 });
            let data = Dataset::new(x.clone(), y.clone())?;
            let net = init_network(widths, Activation::Relu, 2.0, 31 + widths.len() as u64)?;
            let grad = net.loss_gradient(&data, LossKind::Ce)?;
            let mut probe = net.clone();
            let fd = finite_diff_grad(
                |p: &Array1<f64>| {
                    probe.set_params(&ParamVector(p.clone())).expect("matching length");
                    cross_entropy(&probe.forward(&x).expect("forward"), &y).expect("loss")
                },
                &net.params().0,
                1e-5,
            )?;
            let rel = sup(&(&grad.0 - &fd)) / sup(&grad.0).max(1e-12);
            worst_rel = worst_rel.max(rel);
        }
        if worst_rel >= 1e-5 {
            return Ok((false, format!("gradient off by {worst_rel:.2e} relative")));
        }
        let x = Array2::from_shape_fn((8, 3), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let gaps = mean_linearization_gaps(&x, &[256, 1024, 4096], 3, 0.5)?;
        let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
        Ok((
            monotone,
            format!(
                "gradient rel err {worst_rel:.1e}; tangent gaps {:.2e} > {:.2e} > {:.2e}",
                gaps[0], gaps[1], gaps[2]
            ),
        ))
    })
}

/// The shifted penalty inherits the decoupling (coordinate one's
/// parameters never touch coordinate two's trajectory) and buys
/// worst-group accuracy over plain training on the colored digits.
pub fn shift_penalty_checks() -> CheckResult {
    outcome("shifted penalty", || {
        let gammas_base = arr1(&[0.4, -0.2]);
        let mut reference: Option<Vec<u64>> = None;
        for (l1, g1) in [(0.3, 0.1), (0.7, 0.4), (1.5, -0.6), (2.1, 0.9)] {
            let lambdas = arr1(&[l1, 1.3]);
            let gammas = arr1(&[g1, gammas_base[1]]);
            let mut alpha = arr1(&[0.5, 0.5]);
            let mut bits = Vec::new();
            let mut converged = false;
            for step in 0..200_000usize {
                let f = sd_shift_dual_field(&alpha, &lambdas, &gammas)?;
                if sup(&f) < 1e-12 {
                    converged = true;
                    break;
                }
                alpha = &alpha + &(1e-2 * &f);
                if step % 50 == 0 {
                    bits.push(alpha[1].to_bits());
                }
            }
            if !converged {
                return Ok((false, format!("shifted flow stalled at lambda1 {l1}")));
            }
            match &reference {
                None => reference = Some(bits),
                Some(r) => {
                    if r != &bits {
                        return Ok((
                            false,
                            format!("alpha2 trajectory moved when (lambda1, gamma1) = ({l1}, {g1})"),
                        ));
                    }
                }
            }
            let star = sd_shift_fixed_point(&lambdas, &gammas)?;
            let gap = sup(&(&alpha - &star));
            if gap > 1e-10 {
                return Ok((false, format!("flow missed bisection root by {gap:.1e}")));
            }
            let omega = sd_shift_response(&star, &lambdas, &gammas)?;
            for i in 0..2 {
                let expect = gammas[i] + star[i] / lambdas[i];
                if (omega[i] - expect).abs() > 1e-12 {
                    return Ok((false, "response identity broken".into()));
                }
            }
        }
        let bench = match colored_bench() {
            Ok(b) => b,
            Err(e) => return Ok((false, format!("bench failed: {e}"))),
        };
        let improved = bench.shift_worst_group > bench.erm.worst_group;
        Ok((
            improved,
            format!(
                "trajectories decouple; worst group {:.3} vs erm {:.3}",
                bench.shift_worst_group, bench.erm.worst_group
            ),
        ))
    })
}

/// The full battery in report order.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        legendre_duality(),
        fixed_point_stability(),
        closed_form_fixed_points(),
        starvation_theorem(),
        sd_decoupling(),
        primal_dual_agreement(),
        two_moon_margins(),
        colored_digit_benchmark(),
        tangent_model_checks(),
        shift_penalty_checks(),
    ]
}
