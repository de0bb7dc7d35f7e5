//! The invariant battery behind `memedit verify`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fidelity::{
    check_geometry_discrepancy, check_inverse_perturbation, drift_sweep, fidelity_report,
    fit_through_origin, keyed_geometry, FidelityOptions,
};
use crate::linalg::{
    gaussian_matrix, gaussian_vector, random_orthogonal, random_psd, spectral_norm, sym_extremes,
    symmetrize, Matrix,
};
use crate::memory_model::{gen_model, GeometryConfig, LayerMemory, SyntheticModel};
use crate::meta_opt::{meta_loss, meta_loss_grad_w, EditRequest, StructuralGate};
use crate::solvers::{
    edit_objective, sherman_morrison_inv, solve_closed_form, solve_gradient_oracle,
    solve_projection, AllocationScheme,
};
use crate::spectral::{
    check_ball_inclusions, scan_shared_lambda, spectral_report, static_trap_witness,
    suppression_sweep, trust_region_radius,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    PreconditionViolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub status: CheckStatus,
    pub measured: BTreeMap<String, f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerificationReport {
    /// No check failed outright; precondition violations are not failures.
    pub fn all_hard_pass(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

type Measured = BTreeMap<String, f64>;

struct Check {
    ok: bool,
    measured: Measured,
    detail: String,
}

impl Check {
    fn new(ok: bool) -> Self {
        Self {
            ok,
            measured: Measured::new(),
            detail: String::new(),
        }
    }

    fn with(mut self, key: &str, value: f64) -> Self {
        self.measured.insert(key.to_owned(), value);
        self
    }

    fn note(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

fn outcome(name: &str, result: Result<Check>) -> CheckOutcome {
    match result {
        Ok(c) => CheckOutcome {
            name: name.to_owned(),
            status: if c.ok {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            },
            measured: c.measured,
            detail: c.detail,
        },
        Err(Error::PreconditionViolated(msg)) => CheckOutcome {
            name: name.to_owned(),
            status: CheckStatus::PreconditionViolated,
            measured: Measured::new(),
            detail: msg,
        },
        Err(e) => CheckOutcome {
            name: name.to_owned(),
            status: CheckStatus::Fail,
            measured: Measured::new(),
            detail: e.to_string(),
        },
    }
}

fn random_layer(rng: &mut ChaCha8Rng, d0: usize, d1: usize, ridge: f64) -> Result<LayerMemory> {
    let cols = rng.random_range(1..=2 * d0);
    LayerMemory::new(
        gaussian_matrix(d1, d0, rng),
        gaussian_vector(d0, rng),
        random_psd(d0, cols, 0.0, rng),
        ridge,
        None,
    )
}

fn attenuation(rng: &mut ChaCha8Rng, d0: usize, d1: usize) -> Result<Check> {
    let mut worst = 0.0_f64;
    for i in 0..100 {
        let ridge = [0.1, 1.0, 10.0][i % 3];
        let layer = random_layer(rng, d0, d1, ridge)?;
        let delta = gaussian_vector(d1, rng);
        let solved = solve_closed_form(&layer, &delta)?;
        let beta = spectral_report(&layer.covariance, ridge, &layer.key, 0.25)?.beta;
        worst = worst.max((&solved.delta * &layer.key - &delta * beta).norm() / delta.norm());
    }
    Ok(Check::new(worst <= 1e-8).with("max_relative_error", worst))
}

fn closed_form_vs_oracle(rng: &mut ChaCha8Rng, d0: usize, d1: usize) -> Result<Check> {
    let (mut gap, mut dist) = (f64::NEG_INFINITY, 0.0_f64);
    for _ in 0..10 {
        let layer = random_layer(rng, d0.min(8), d1.min(8), 1.0)?;
        let delta = gaussian_vector(layer.d1(), rng);
        let cf = solve_closed_form(&layer, &delta)?.delta;
        let gd = solve_gradient_oracle(&layer, &delta, 1e-9)?;
        gap = gap.max(edit_objective(&layer, &delta, &cf) - edit_objective(&layer, &delta, &gd));
        dist = dist.max((cf - gd).norm());
    }
    Ok(Check::new(gap <= 1e-6 && dist < 1e-4)
        .with("max_objective_excess", gap)
        .with("max_frobenius_distance", dist))
}

fn rank_one_inverse(rng: &mut ChaCha8Rng, d0: usize) -> Result<Check> {
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let a = random_psd(d0, 2 * d0, 0.5, rng);
        let k = gaussian_vector(d0, rng);
        let a_inv = a
            .clone()
            .try_inverse()
            .ok_or(Error::SingularGeometry("test matrix".into()))?;
        let dense = (&a + &k * k.transpose())
            .try_inverse()
            .ok_or(Error::SingularGeometry("test matrix".into()))?;
        let updated = sherman_morrison_inv(&a_inv, &k)?;
        worst = worst.max((updated - &dense).norm() / dense.norm());
    }
    Ok(Check::new(worst <= 1e-9).with("max_relative_error", worst))
}

fn projection_attenuation(rng: &mut ChaCha8Rng, d0: usize, d1: usize) -> Result<Check> {
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let q = random_orthogonal(d0, rng);
        let rank = rng.random_range(1..=d0);
        let basis = q.columns(0, rank);
        let p = symmetrize(&(basis * basis.transpose()));
        let ridge = rng.random_range(0.05..5.0);
        let k = gaussian_vector(d0, rng);
        let layer = LayerMemory::new(
            Matrix::zeros(d1, d0),
            k.clone(),
            Matrix::zeros(d0, d0),
            ridge,
            Some(p.clone()),
        )?;
        let delta = gaussian_vector(d1, rng);
        let solved = solve_projection(&layer, &delta)?;
        let energy = (&p * &k).norm_squared();
        let expected = energy / (energy + ridge);
        worst = worst.max((&solved.delta * &k - &delta * expected).norm() / delta.norm());
    }
    Ok(Check::new(worst <= 1e-8).with("max_ratio_error", worst))
}

fn suppression(cfg: &ExperimentConfig) -> Result<Check> {
    let pts = suppression_sweep(
        cfg.geometry.d0,
        cfg.geometry.ridge,
        &[10.0, 1e2, 1e4, 1e6],
        cfg.seed,
    )?;
    let bounded = pts.iter().all(|p| p.beta <= p.bound + 1e-10);
    let monotone = pts.windows(2).all(|w| w[1].beta <= w[0].beta);
    let slack = pts
        .iter()
        .map(|p| p.bound - p.beta)
        .fold(f64::INFINITY, f64::min);
    Ok(Check::new(bounded && monotone)
        .with("min_bound_slack", slack)
        .with(
            "beta_at_largest_level",
            pts.last().map_or(f64::NAN, |p| p.beta),
        ))
}

fn static_trap(cfg: &ExperimentConfig) -> Result<Check> {
    let witness = static_trap_witness(1.0, 100.0, 1.0, 1.0, 1.0, 0.2)?;
    let scan = scan_shared_lambda(&witness, 10_000)?;
    let variant = static_trap_witness(1.0, 100.0, 1.0, 1.0, 0.3, 0.2)?;
    let mut ok = !witness.feasible && scan.satisfying == 0 && variant.feasible;
    ok &= variant.easy_interval.contains(4.0) && variant.hard_interval.contains(4.0);
    // Progress thresholds m = θ/√λ_min against the configured spectrum:
    // feasible exactly when κ ≤ 1/θ².
    let kappa = cfg.geometry.kappa;
    let mut agree = 0.0;
    for theta in [0.5, 0.25, 0.125] {
        let w = static_trap_witness(1.0, kappa, 1.0, 1.0, 1.0, theta)?;
        let s = scan_shared_lambda(&w, 2_000)?;
        let expect = kappa <= 1.0 / (theta * theta);
        if w.feasible == expect && (s.satisfying > 0) == w.feasible {
            agree += 1.0;
        }
    }
    ok &= agree == 3.0;
    Ok(Check::new(ok)
        .with("witness_satisfying_points", scan.satisfying as f64)
        .with("variant_hard_lower", variant.hard_interval.lower)
        .with("geometry_cases_agreeing", agree))
}

fn radius_monotone(rng: &mut ChaCha8Rng, d0: usize) -> Result<Check> {
    let mut violations = 0;
    for _ in 0..100 {
        let h = random_psd(d0, d0, 0.0, rng);
        let g = gaussian_vector(d0, rng);
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let lambda = 10f64.powf(-3.0 + 6.0 * i as f64 / 39.0);
            let r = trust_region_radius(&h, &g, lambda)?;
            if r > prev * (1.0 + 1e-12) {
                violations += 1;
            }
            prev = r;
        }
    }
    Ok(Check::new(violations == 0).with("violations", violations as f64))
}

fn ball_inclusion(model: &SyntheticModel, seed: u64) -> Result<Check> {
    let a = model.last_layer().effective_geometry();
    let c = check_ball_inclusions(&a, 1.0, 2_000, seed)?;
    Ok(Check::new(c.holds)
        .with("gap", c.circumscribed_radius / c.inscribed_radius)
        .with("worst_inscribed_ratio", c.worst_inscribed_ratio))
}

fn random_request(model: &SyntheticModel, rng: &mut ChaCha8Rng) -> EditRequest {
    let mut r = EditRequest::at_stored_value(model, rng.random_range(0..model.vocab()));
    r.locality_keys = (0..3).map(|_| gaussian_vector(model.d0(), rng)).collect();
    r
}

fn meta_gradient(model: &SyntheticModel, rng: &mut ChaCha8Rng) -> Result<Check> {
    let (mut worst_edit, mut worst_loc) = (0.0_f64, 0.0_f64);
    let h = 1e-5;
    for _ in 0..3 {
        let r = random_request(model, rng);
        let w = &model.last_layer().weight + gaussian_matrix(model.d1(), model.d0(), rng) * 0.3;
        let g = meta_loss_grad_w(model, &w, &r)?;
        let mut fd_edit = Matrix::zeros(w.nrows(), w.ncols());
        let mut fd_loc = fd_edit.clone();
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                let mut plus = w.clone();
                plus[(i, j)] += h;
                let mut minus = w.clone();
                minus[(i, j)] -= h;
                let (lp, lm) = (
                    meta_loss(model, &plus, &r, None)?,
                    meta_loss(model, &minus, &r, None)?,
                );
                fd_edit[(i, j)] = (lp.edit_loss - lm.edit_loss) / (2.0 * h);
                fd_loc[(i, j)] = (lp.loc_loss - lm.loc_loss) / (2.0 * h);
            }
        }
        worst_edit = worst_edit.max((&g.edit - fd_edit).norm() / g.edit.norm());
        worst_loc = worst_loc.max((&g.loc - fd_loc).norm() / g.loc.norm());
    }
    Ok(Check::new(worst_edit < 1e-5 && worst_loc < 1e-5)
        .with("edit_relative_error", worst_edit)
        .with("loc_relative_error", worst_loc))
}

fn gate_attenuation(model: &SyntheticModel) -> Result<Check> {
    let layer = model.last_layer();
    let gate = StructuralGate::for_model(model)?;
    let beta = spectral_report(&layer.covariance, layer.ridge, &layer.key, 0.25)?.beta;
    let err = (gate.beta(&layer.key) - beta).abs();
    let row_err = (&gate.gate_row - gate.cached_inverse.tr_mul(&layer.key)).amax();
    Ok(Check::new(err <= 1e-10 && row_err <= 1e-12)
        .with("beta", beta)
        .with("beta_error", err))
}

fn proxy_descent(cfg: &ExperimentConfig) -> Result<Check> {
    let trials = 20;
    let (mut descent, mut bounded) = (0, 0);
    let mut min_cos = f64::INFINITY;
    for t in 0..trials {
        let geometry = GeometryConfig {
            eps_c: 0.0,
            eps_k: 0.0,
            seed: cfg.seed.wrapping_add(t as u64),
            ..cfg.geometry.clone()
        };
        let model = gen_model(&geometry)?;
        let mut rng = ChaCha8Rng::seed_from_u64(geometry.seed);
        let r = random_request(&model, &mut rng);
        let v_star = &r.v_init + gaussian_vector(model.d1(), &mut rng);
        let opts = FidelityOptions {
            scheme: AllocationScheme::LastLayer,
            ..Default::default()
        };
        let rep = fidelity_report(&model, &r, &v_star, &opts)?;
        descent += usize::from(rep.inner_product > 0.0);
        bounded += usize::from(rep.norm_bound_holds());
        min_cos = min_cos.min(rep.cosine);
    }
    let rate = descent as f64 / trials as f64;
    Ok(Check::new(rate >= 0.99 && bounded == trials)
        .with("descent_rate", rate)
        .with("norm_bound_rate", bounded as f64 / trials as f64)
        .with("min_cosine", min_cos))
}

fn geometry_discrepancy(model: &SyntheticModel) -> Result<Check> {
    let d = check_geometry_discrepancy(model)?;
    let zero_drift = d.eps_c == 0.0 && d.eps_k == 0.0;
    let ok = !zero_drift || d.max_discrepancy <= 1e-12;
    Ok(Check::new(ok)
        .with("max_discrepancy", d.max_discrepancy)
        .with("eps_c", d.eps_c)
        .with("eps_k", d.eps_k))
}

fn drift_form(cfg: &ExperimentConfig) -> Result<Check> {
    let drifts = [0.01, 0.02, 0.04, 0.08];
    let base = GeometryConfig {
        d0: cfg.geometry.d0.min(12),
        d1: cfg.geometry.d1.min(12),
        ..cfg.geometry.clone()
    };
    let points = drift_sweep(&base, &drifts, 1e-4, |m| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let r = random_request(m, &mut rng);
        let v = &r.v_init + gaussian_vector(m.d1(), &mut rng);
        Ok((r, v))
    })?;
    let gaps: Vec<f64> = points.iter().map(|p| p.max_gate_discrepancy).collect();
    let errs: Vec<f64> = points.iter().map(|p| p.error_norm).collect();
    let gf = fit_through_origin(&drifts, &gaps)?;
    let ef = fit_through_origin(&drifts, &errs)?;
    Ok(
        Check::new(gf.one_sided && ef.one_sided && gf.slope.is_finite() && ef.slope.is_finite())
            .with("gate_slope", gf.slope)
            .with("gate_ratio_spread", gf.ratio_spread)
            .with("error_slope", ef.slope)
            .with("error_ratio_spread", ef.ratio_spread),
    )
}

fn inverse_perturbation_model(model: &SyntheticModel) -> Result<Check> {
    let a = keyed_geometry(model.last_layer());
    let mut worst_slack = f64::INFINITY;
    let mut ok = true;
    for layer in &model.layers[..model.last()] {
        let e = symmetrize(&(keyed_geometry(layer) - &a));
        let r = check_inverse_perturbation(&a, &e)?;
        ok &= r.holds;
        worst_slack = worst_slack.min(r.bound - r.actual);
    }
    Ok(Check::new(ok).with("min_bound_slack", worst_slack))
}

fn inverse_perturbation_random(rng: &mut ChaCha8Rng, d0: usize) -> Result<Check> {
    let mut holds = 0;
    for _ in 0..100 {
        let a = random_psd(d0, 2 * d0, 0.5, rng);
        let (mu, _) = sym_extremes(&a);
        let e = symmetrize(&gaussian_matrix(d0, d0, rng));
        let e = &e * (0.9 * mu / spectral_norm(&e));
        holds += usize::from(check_inverse_perturbation(&a, &e)?.holds);
    }
    Ok(Check::new(holds == 100).with("holding_instances", holds as f64))
}

fn determinism(cfg: &ExperimentConfig) -> Result<Check> {
    let a = gen_model(&cfg.geometry)?;
    let b = gen_model(&cfg.geometry)?;
    let back = SyntheticModel::from_json(&a.to_json()?)?;
    Ok(Check::new(a == b && back == a).note("model regeneration and JSON round trip"))
}

/// Runs every check at the configured dimensions. Precondition violations
/// are reported as such rather than as failures.
pub fn verify_all(cfg: &ExperimentConfig) -> Result<VerificationReport> {
    cfg.validate()?;
    let (d0, d1) = (cfg.geometry.d0, cfg.geometry.d1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = gen_model(&cfg.geometry);
    let with_model = |f: &dyn Fn(&SyntheticModel) -> Result<Check>| match &model {
        Ok(m) => f(m),
        Err(e) => Err(Error::InvalidConfig(e.to_string())),
    };
    let mut checks = vec![
        outcome("attenuation_law", attenuation(&mut rng, d0, d1)),
        outcome(
            "closed_form_vs_oracle",
            closed_form_vs_oracle(&mut rng, d0, d1),
        ),
        outcome("rank_one_inverse", rank_one_inverse(&mut rng, d0)),
        outcome(
            "projection_attenuation",
            projection_attenuation(&mut rng, d0, d1),
        ),
        outcome("suppression_bound", suppression(cfg)),
        outcome("static_trap", static_trap(cfg)),
        outcome("trust_region_monotone", radius_monotone(&mut rng, d0)),
        outcome(
            "ball_ellipsoid_inclusion",
            with_model(&|m| ball_inclusion(m, cfg.seed)),
        ),
        outcome("gate_attenuation", with_model(&gate_attenuation)),
    ];
    let grad_seed = cfg.seed ^ 0x5eed;
    checks.push(outcome(
        "meta_gradient",
        with_model(&|m| meta_gradient(m, &mut ChaCha8Rng::seed_from_u64(grad_seed))),
    ));
    checks.push(outcome("proxy_descent", proxy_descent(cfg)));
    checks.push(outcome(
        "geometry_discrepancy",
        with_model(&geometry_discrepancy),
    ));
    checks.push(outcome("drift_bound_form", drift_form(cfg)));
    checks.push(outcome(
        "inverse_perturbation_model",
        with_model(&inverse_perturbation_model),
    ));
    checks.push(outcome(
        "inverse_perturbation_random",
        inverse_perturbation_random(&mut rng, d0),
    ));
    checks.push(outcome("determinism", determinism(cfg)));
    Ok(VerificationReport { checks })
}
