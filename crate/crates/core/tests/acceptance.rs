//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use memedit::fidelity::{cotangent_at, fit_through_origin, proxy_hypergradient};
use memedit::harness::{
    emit_results, read_results_csv, run_experiment, BaselineParams, EditDifficulty,
    ExperimentConfig, MetakeSettings, Method, ResultsRecord,
};
use memedit::linalg::{gaussian_matrix, gaussian_vector, random_orthogonal, random_psd};
use memedit::memory_model::WeightOverrides;
use memedit::meta_opt::{meta_loss, meta_loss_grad_w, meta_loss_with};
use memedit::solvers::{
    allocate_residual, edit_objective, sherman_morrison_inv, solve_gradient_oracle,
    solve_projection,
};
use memedit::spectral::{
    scan_shared_lambda, static_trap_witness, trust_region_radius, TrapInstance,
};
use memedit::{
    gen_model, solve_closed_form, solve_multilayer, AllocationScheme, EditRequest, GeometryConfig,
    LayerMemory, Matrix, StructuralGate, SyntheticModel, Vector,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn inverse(a: &Matrix) -> Matrix {
    a.clone().try_inverse().expect("invertible test matrix")
}

fn with_ridge(c: &Matrix, ridge: f64) -> Matrix {
    c + Matrix::identity(c.nrows(), c.ncols()) * ridge
}

fn min_eigenvalue(a: &Matrix) -> f64 {
    a.clone().symmetric_eigen().eigenvalues.min()
}

fn random_layer(r: &mut ChaCha8Rng, d0: usize, d1: usize, ridge: f64) -> LayerMemory {
    let cols = r.random_range(1..=2 * d0);
    LayerMemory::new(
        gaussian_matrix(d1, d0, r),
        gaussian_vector(d0, r),
        random_psd(d0, cols, 0.0, r),
        ridge,
        None,
    )
    .unwrap()
}

fn ensure(ok: bool, what: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("runtime {elapsed:.2?} exceeds {limit:?}"),
    )
}

fn attenuation_law() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0_f64;
    for i in 0..1000 {
        let ridge = [0.1, 1.0, 10.0][i % 3];
        let (d0, d1) = (r.random_range(1..=32), r.random_range(1..=32));
        let layer = random_layer(&mut r, d0, d1, ridge);
        let delta = gaussian_vector(d1, &mut r);
        let solved = solve_closed_form(&layer, &delta).map_err(|e| e.to_string())?;
        let a = with_ridge(&layer.covariance, ridge);
        let gamma = layer.key.dot(&a.lu().solve(&layer.key).unwrap());
        let expected = &delta * (gamma / (1.0 + gamma));
        worst = worst.max((&solved.delta * &layer.key - expected).norm() / delta.norm());
    }
    ensure(worst <= 1e-8, format!("worst relative error {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("1000 instances, worst relative error {worst:.2e}"))
}

fn independent_objective(layer: &LayerMemory, delta: &Vector, update: &Matrix) -> f64 {
    let fit = (update * &layer.key - delta).norm_squared();
    let penalty = (update * &layer.covariance * update.transpose()).trace();
    fit + penalty + layer.ridge * update.norm_squared()
}

fn closed_form_vs_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let (mut worst_gap, mut worst_dist) = (f64::NEG_INFINITY, 0.0_f64);
    for _ in 0..500 {
        let (d0, d1) = (r.random_range(1..=8), r.random_range(1..=8));
        let ridge = r.random_range(0.5..2.0);
        let layer = random_layer(&mut r, d0, d1, ridge);
        let delta = gaussian_vector(d1, &mut r);
        let closed = solve_closed_form(&layer, &delta).map_err(|e| e.to_string())?;
        let oracle = solve_gradient_oracle(&layer, &delta, 1e-10).map_err(|e| e.to_string())?;
        let f_closed = independent_objective(&layer, &delta, &closed.delta);
        let f_oracle = independent_objective(&layer, &delta, &oracle);
        let lib_gap = edit_objective(&layer, &delta, &closed.delta) - f_closed;
        ensure(
            lib_gap.abs() <= 1e-9 * f_closed.max(1.0),
            "objective mismatch",
        )?;
        worst_gap = worst_gap.max(f_closed - f_oracle);
        worst_dist = worst_dist.max((&closed.delta - &oracle).norm());
    }
    ensure(worst_gap <= 1e-6, format!("objective excess {worst_gap:e}"))?;
    ensure(
        worst_dist < 1e-4,
        format!("solution distance {worst_dist:e}"),
    )?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "500 instances, max objective excess {worst_gap:.2e}, max distance {worst_dist:.2e}"
    ))
}

fn sherman_morrison() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let d0 = r.random_range(1..=64);
        let a = random_psd(d0, 2 * d0, 0.5, &mut r);
        let k = gaussian_vector(d0, &mut r);
        let updated = sherman_morrison_inv(&inverse(&a), &k).map_err(|e| e.to_string())?;
        let direct = inverse(&(&a + &k * k.transpose()));
        worst = worst.max((updated - &direct).norm() / direct.norm());
    }
    ensure(worst <= 1e-9, format!("worst relative error {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("200 instances, worst relative error {worst:.2e}"))
}

fn projection_specialization() -> Outcome {
    let start = Instant::now();
    let mut r = rng(4);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let (d0, d1) = (r.random_range(2..=24), r.random_range(1..=24));
        let q = random_orthogonal(d0, &mut r);
        let rank = r.random_range(1..=d0);
        let basis = q.columns(0, rank);
        let p = basis * basis.transpose();
        let lambda_iso = [0.1, 1.0, 10.0][r.random_range(0..3)];
        let mut layer = random_layer(&mut r, d0, d1, lambda_iso);
        layer.projector = Some(p.clone());
        let delta = gaussian_vector(d1, &mut r);
        let solved = solve_projection(&layer, &delta).map_err(|e| e.to_string())?;
        let energy = (&p * &layer.key).norm_squared();
        let expected = energy / (energy + lambda_iso);
        let realized = &solved.delta * &p * &layer.key;
        worst = worst.max((realized - &delta * expected).norm() / delta.norm());
    }
    ensure(worst <= 1e-8, format!("worst relative error {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("200 instances, worst relative error {worst:.2e}"))
}

fn suppression_bound() -> Outcome {
    let start = Instant::now();
    let levels = [10.0, 1e2, 1e4, 1e6];
    let mut r = rng(5);
    let mut worst_excess = f64::NEG_INFINITY;
    for _ in 0..50 {
        let d0 = r.random_range(4..=16);
        let protected = r.random_range(1..d0);
        let q = random_orthogonal(d0, &mut r);
        let ridge = [1e-3, 0.1, 1.0][r.random_range(0..3)];
        let tail: Vec<f64> = (protected..d0).map(|_| r.random_range(0.01..1.0)).collect();
        let spread: Vec<f64> = (0..protected).map(|_| r.random_range(1.0..3.0)).collect();
        let coords = gaussian_vector(protected, &mut r) * r.random_range(0.2..5.0);
        let key = q.columns(0, protected) * coords;
        let mut previous = f64::INFINITY;
        for (j, &level) in levels.iter().enumerate() {
            let mut spectrum: Vec<f64> = spread.iter().map(|s| level * s).collect();
            spectrum[j % protected] = level;
            spectrum.extend(&tail);
            let c = &q * Matrix::from_diagonal(&Vector::from_vec(spectrum)) * q.transpose();
            let c = (&c + c.transpose()) * 0.5;
            let layer =
                LayerMemory::new(Matrix::zeros(3, d0), key.clone(), c, ridge, None).unwrap();
            let delta = Vector::from_vec(vec![1.0, -2.0, 0.5]);
            let solved = solve_closed_form(&layer, &delta).map_err(|e| e.to_string())?;
            let beta = (&solved.delta * &key).dot(&delta) / delta.norm_squared();
            let bound = key.norm_squared() / (key.norm_squared() + level + ridge);
            worst_excess = worst_excess.max(beta - bound);
            ensure(
                beta <= bound + 1e-10,
                format!("β {beta} above bound {bound} at level {level}"),
            )?;
            ensure(
                beta <= previous,
                format!("β rose to {beta} at level {level}"),
            )?;
            previous = beta;
        }
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "50 instances x 4 levels, max β − bound {worst_excess:.2e}, monotone"
    ))
}

/// Zero-Hessian penalized steps along the two eigen-directions of
/// `diag(λ_max, λ_min)`.
fn trap_predicates(lambda_max: f64, a: f64, b: f64, m: f64, tau: f64, lambda: f64) -> bool {
    let easy = a / lambda >= m * (1.0 - 1e-12);
    let step = b / lambda;
    let hard = lambda_max * step * step <= tau * (1.0 + 1e-12);
    easy && hard
}

fn static_trap() -> Outcome {
    let start = Instant::now();
    let (lmin, lmax, tau, a, m) = (1.0, 100.0, 1.0, 1.0, 0.2);
    let witness = static_trap_witness(lmin, lmax, tau, a, 1.0, m).map_err(|e| e.to_string())?;
    ensure(!witness.feasible, "witness reported feasible")?;
    let scan = scan_shared_lambda(&witness, 10_000).map_err(|e| e.to_string())?;
    ensure(
        scan.satisfying == 0,
        format!("{} λ values pass", scan.satisfying),
    )?;
    let own_hits = (0..10_000)
        .map(|i| (1e-6_f64.ln() + i as f64 / 9_999.0 * (1e6_f64.ln() - 1e-6_f64.ln())).exp())
        .filter(|&l| trap_predicates(lmax, a, 1.0, m, tau, l))
        .count();
    ensure(
        own_hits == 0,
        format!("{own_hits} λ values pass the direct scan"),
    )?;

    let relaxed = static_trap_witness(lmin, lmax, tau, a, 0.3, m).map_err(|e| e.to_string())?;
    let upper = relaxed.easy_interval.upper.unwrap_or(f64::INFINITY);
    ensure(
        relaxed.feasible && relaxed.hard_interval.lower <= 4.0 && 4.0 <= upper,
        "b=0.3 interval misses λ=4",
    )?;
    let inst = TrapInstance::new(&relaxed);
    let lib_ok = inst.easy_progresses(4.0).map_err(|e| e.to_string())?
        && inst.hard_feasible(4.0).map_err(|e| e.to_string())?;
    ensure(
        lib_ok && trap_predicates(lmax, a, 0.3, m, tau, 4.0),
        "λ=4 fails a predicate",
    )?;

    let mut r = rng(6);
    for _ in 0..100 {
        let d = r.random_range(1..=12);
        let h = random_psd(d, r.random_range(1..=2 * d), 0.0, &mut r);
        let g = gaussian_vector(d, &mut r);
        let mut previous = f64::INFINITY;
        for i in 0..40 {
            let lambda = 10f64.powf(-3.0 + i as f64 * 0.15);
            let radius = trust_region_radius(&h, &g, lambda).map_err(|e| e.to_string())?;
            let direct = with_ridge(&h, lambda).lu().solve(&g).unwrap().norm();
            ensure(
                (radius - direct).abs() <= 1e-9 * direct.max(1.0),
                "radius disagrees with a direct solve",
            )?;
            ensure(radius <= previous * (1.0 + 1e-12), "r(λ) increased")?;
            previous = radius;
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "empty interval over 10^4 grid, b=0.3 interval [{:.3}, {upper:.3}] ∋ 4, r(λ) monotone on 100",
        relaxed.hard_interval.lower
    ))
}

fn small_geometry(seed: u64) -> GeometryConfig {
    GeometryConfig {
        d0: 6,
        d1: 6,
        vocab: 5,
        n_layers: 3,
        seed,
        ..Default::default()
    }
}

fn random_request(model: &SyntheticModel, r: &mut ChaCha8Rng) -> EditRequest {
    let mut req = EditRequest::at_stored_value(model, r.random_range(0..model.vocab()));
    req.locality_keys = (0..3).map(|_| gaussian_vector(model.d0(), r)).collect();
    req
}

fn analytic_meta_gradient() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let (mut worst_edit, mut worst_loc) = (0.0_f64, 0.0_f64);
    for seed in 0..20 {
        let model = gen_model(&small_geometry(100 + seed)).map_err(|e| e.to_string())?;
        let mut r = rng(seed);
        let req = random_request(&model, &mut r);
        let w = &model.last_layer().weight + gaussian_matrix(model.d1(), model.d0(), &mut r) * 0.5;
        let g = meta_loss_grad_w(&model, &w, &req).map_err(|e| e.to_string())?;
        let mut fd_edit = Matrix::zeros(w.nrows(), w.ncols());
        let mut fd_loc = fd_edit.clone();
        for idx in 0..w.len() {
            let mut plus = w.clone();
            plus[idx] += h;
            let mut minus = w.clone();
            minus[idx] -= h;
            let lp = meta_loss(&model, &plus, &req, None).map_err(|e| e.to_string())?;
            let lm = meta_loss(&model, &minus, &req, None).map_err(|e| e.to_string())?;
            fd_edit[idx] = (lp.edit_loss - lm.edit_loss) / (2.0 * h);
            fd_loc[idx] = (lp.loc_loss - lm.loc_loss) / (2.0 * h);
        }
        worst_edit = worst_edit.max((&g.edit - &fd_edit).norm() / fd_edit.norm());
        worst_loc = worst_loc.max((&g.loc - &fd_loc).norm() / fd_loc.norm());
    }
    ensure(
        worst_edit <= 1e-5 && worst_loc <= 1e-5,
        format!("relative errors edit {worst_edit:e}, locality {worst_loc:e}"),
    )?;
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "20 instances, worst relative error edit {worst_edit:.2e}, locality {worst_loc:.2e}"
    ))
}

/// Edit and locality loss of the model edited toward `v` by the full
/// allocate-then-solve pipeline.
fn upper_objective(
    model: &SyntheticModel,
    req: &EditRequest,
    v: &Vector,
    scheme: AllocationScheme,
) -> f64 {
    let layers: Vec<usize> = (0..model.n_layers()).collect();
    let plan = allocate_residual(model, v, &layers, scheme).unwrap();
    let solved = solve_multilayer(model, &plan).unwrap();
    let overrides: WeightOverrides = solved
        .iter()
        .map(|(&l, s)| (l, &model.layers[l].weight + &s.delta))
        .collect();
    let loss = meta_loss_with(model, &overrides, req, None).unwrap();
    loss.edit_loss + loss.loc_loss
}

fn central_difference(
    model: &SyntheticModel,
    req: &EditRequest,
    v: &Vector,
    scheme: AllocationScheme,
) -> Vector {
    let h = 1e-5;
    Vector::from_fn(v.len(), |i, _| {
        let mut plus = v.clone();
        plus[i] += h;
        let mut minus = v.clone();
        minus[i] -= h;
        (upper_objective(model, req, &plus, scheme) - upper_objective(model, req, &minus, scheme))
            / (2.0 * h)
    })
}

fn proxy_gradient(
    model: &SyntheticModel,
    req: &EditRequest,
    v: &Vector,
    scheme: AllocationScheme,
) -> Result<(Vector, Matrix, StructuralGate), String> {
    let gate = StructuralGate::for_model(model).map_err(|e| e.to_string())?;
    let s_l = cotangent_at(model, req, v, scheme).map_err(|e| e.to_string())?;
    let g = proxy_hypergradient(&s_l, &gate).map_err(|e| e.to_string())?;
    Ok((g, s_l, gate))
}

fn proxy_descent() -> Outcome {
    let start = Instant::now();
    let trials = 200_usize;
    let (mut positive, mut bounded) = (0, 0);
    let mut min_cos = f64::INFINITY;
    for seed in 0..trials {
        let geometry = GeometryConfig {
            d0: 8,
            d1: 8,
            eps_c: 0.0,
            eps_k: 0.0,
            ..small_geometry(1000 + seed as u64)
        };
        let model = gen_model(&geometry).map_err(|e| e.to_string())?;
        let mut r = rng(seed as u64);
        let req = random_request(&model, &mut r);
        let v = &req.v_init + gaussian_vector(model.d1(), &mut r);
        let scheme = AllocationScheme::LastLayer;
        let g_true = central_difference(&model, &req, &v, scheme);
        let (g_proxy, s_l, gate) = proxy_gradient(&model, &req, &v, scheme)?;
        let inner = g_true.dot(&g_proxy);
        positive += usize::from(inner > 0.0);
        min_cos = min_cos.min(inner / (g_true.norm() * g_proxy.norm()));
        let bound = s_l.norm() * gate.gate_row.norm();
        bounded += usize::from(g_proxy.norm() <= bound * (1.0 + 1e-12));
    }
    let rate = positive as f64 / trials as f64;
    ensure(rate >= 0.99, format!("descent rate {rate}"))?;
    ensure(
        bounded == trials,
        format!("norm bound held on {bounded}/{trials}"),
    )?;
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!(
        "{trials} instances, descent rate {rate:.3}, norm bound {bounded}/{trials}, min cosine {min_cos:.4}"
    ))
}

/// `M_l = k_lᵀ(C_l + λI + k_lk_lᵀ)⁻¹` by dense inversion.
fn dense_gate(layer: &LayerMemory) -> Vector {
    let a = with_ridge(&layer.covariance, layer.ridge) + &layer.key * layer.key.transpose();
    inverse(&a).tr_mul(&layer.key)
}

fn drift_bound_form() -> Outcome {
    let start = Instant::now();
    let drifts = [0.01, 0.02, 0.04, 0.08];
    let (mut gaps, mut errs) = (Vec::new(), Vec::new());
    for &drift in &drifts {
        let geometry = GeometryConfig {
            d0: 10,
            d1: 10,
            eps_c: drift / 2.0,
            eps_k: drift / 2.0,
            ..small_geometry(77)
        };
        let model = gen_model(&geometry).map_err(|e| e.to_string())?;
        let reference = dense_gate(model.last_layer());
        let gap = model
            .layers
            .iter()
            .map(|l| (dense_gate(l) - &reference).norm())
            .fold(0.0, f64::max);
        let mut r = rng(9);
        let req = random_request(&model, &mut r);
        let v = &req.v_init + gaussian_vector(model.d1(), &mut r);
        let scheme = AllocationScheme::Uniform;
        let g_true = central_difference(&model, &req, &v, scheme);
        let (g_proxy, _, _) = proxy_gradient(&model, &req, &v, scheme)?;
        gaps.push(gap);
        errs.push((g_true - g_proxy).norm());
    }
    let gap_fit = fit_through_origin(&drifts, &gaps).map_err(|e| e.to_string())?;
    let err_fit = fit_through_origin(&drifts, &errs).map_err(|e| e.to_string())?;
    for (name, ys, fit) in [("gate", &gaps, &gap_fit), ("error", &errs, &err_fit)] {
        ensure(
            fit.slope.is_finite() && fit.one_sided,
            format!("{name} fit not one-sided"),
        )?;
        let above = drifts
            .iter()
            .zip(ys.iter())
            .any(|(x, y)| *y > fit.slope * x * (1.0 + 1e-12));
        ensure(!above, format!("{name} point above the fitted line"))?;
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "gate slope {:.3} (spread {:.2}), error slope {:.3} (spread {:.2})",
        gap_fit.slope, gap_fit.ratio_spread, err_fit.slope, err_fit.ratio_spread
    ))
}

fn inverse_perturbation() -> Outcome {
    let start = Instant::now();
    let mut r = rng(10);
    let mut min_slack = f64::INFINITY;
    for _ in 0..100 {
        let d = r.random_range(1..=24);
        let a = random_psd(d, 2 * d, 0.5, &mut r);
        let mu = min_eigenvalue(&a);
        let raw = gaussian_matrix(d, d, &mut r);
        let e = (&raw + raw.transpose()) * 0.5;
        let e_norm = e.clone().singular_values().max();
        let e = e * (0.9 * mu / e_norm);
        let e_norm = 0.9 * mu;
        let actual = (inverse(&(&a + &e)) - inverse(&a))
            .clone()
            .singular_values()
            .max();
        let bound = e_norm / (mu * (mu - e_norm));
        ensure(
            actual <= bound * (1.0 + 1e-9),
            format!("‖Δinv‖ {actual} above bound {bound}"),
        )?;
        let lib =
            memedit::fidelity::check_inverse_perturbation(&a, &e).map_err(|err| err.to_string())?;
        ensure(lib.holds, "library check reports a violation")?;
        min_slack = min_slack.min((bound - actual) / bound);
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "100 pairs at ‖E‖=0.9μ, min relative slack {min_slack:.3e}"
    ))
}

fn hard_suite(method: Method) -> ExperimentConfig {
    ExperimentConfig {
        geometry: GeometryConfig {
            kappa: 1e4,
            protected_mass: 0.99,
            ridge: 1e-3,
            spectrum_floor: 0.01,
            seed: 1,
            ..Default::default()
        },
        n_edits: 50,
        edit_difficulty: EditDifficulty::Hard,
        method,
        metake_params: MetakeSettings {
            eta: 5.0,
            steps: 50,
            reg_weight: 1e-3,
            ..Default::default()
        },
        baseline_params: BaselineParams {
            lambda_up: 1e-3,
            steps: 100,
            lr: 0.5,
        },
        seed: 5,
        ..Default::default()
    }
}

fn main_result_ordering() -> Outcome {
    let start = Instant::now();
    let mut efficacy = BTreeMap::new();
    for method in [Method::Metake, Method::StaticBaseline, Method::RidgeOnly] {
        let rec = run_experiment(&hard_suite(method)).map_err(|e| e.to_string())?;
        ensure(rec.per_edit.len() == 50, "wrong suite size")?;
        efficacy.insert(method.name(), rec.efficacy);
    }
    let (meta, stat, ridge) = (
        efficacy["metake"],
        efficacy["static_baseline"],
        efficacy["ridge_only"],
    );
    let summary = format!("efficacy metake {meta:.2}, static {stat:.2}, ridge {ridge:.2}");
    ensure(meta > stat && ridge < stat && ridge < meta, summary.clone())?;
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(summary)
}

fn record_bits(rec: &ResultsRecord) -> Vec<u64> {
    let mut bits = vec![
        rec.efficacy.to_bits(),
        rec.generalization.to_bits(),
        rec.specificity.to_bits(),
    ];
    for p in &rec.per_edit {
        bits.push(p.edit_id as u64);
        for x in [
            p.beta,
            p.efficacy,
            p.generalization,
            p.specificity,
            p.edit_loss_final,
            p.loc_loss_final,
        ] {
            bits.push(x.to_bits());
        }
    }
    bits
}

fn matrix_bits(m: &Matrix) -> Vec<u64> {
    m.iter().map(|x| x.to_bits()).collect()
}

fn determinism_and_round_trip() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        geometry: GeometryConfig {
            eps_c: 0.03,
            eps_k: 0.02,
            ..small_geometry(21)
        },
        n_edits: 12,
        seed: 99,
        ..Default::default()
    };
    let first = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let second = run_experiment(&cfg).map_err(|e| e.to_string())?;
    ensure(record_bits(&first) == record_bits(&second), "reruns differ")?;

    let model = gen_model(&cfg.geometry).map_err(|e| e.to_string())?;
    let back = SyntheticModel::from_json(&model.to_json().map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(back == model, "model JSON round trip changed values")?;
    for (a, b) in model.layers.iter().zip(&back.layers) {
        ensure(
            matrix_bits(&a.weight) == matrix_bits(&b.weight)
                && matrix_bits(&a.covariance) == matrix_bits(&b.covariance),
            "model JSON round trip is not bit exact",
        )?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("results.csv");
    emit_results(&first, &path).map_err(|e| e.to_string())?;
    let rows = read_results_csv(&path).map_err(|e| e.to_string())?;
    let reread = ResultsRecord {
        per_edit: rows,
        ..first.clone()
    };
    ensure(
        record_bits(&reread) == record_bits(&first),
        "CSV round trip is not bit exact",
    )?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok("bit-identical reruns, exact model JSON and results CSV round trips".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("attenuation law", attenuation_law),
        ("closed form vs gradient oracle", closed_form_vs_oracle),
        ("rank-one inverse update", sherman_morrison),
        ("projection specialization", projection_specialization),
        ("suppression bound", suppression_bound),
        ("static trap", static_trap),
        ("analytic meta-gradient", analytic_meta_gradient),
        ("proxy descent", proxy_descent),
        ("drift bound form", drift_bound_form),
        ("inverse perturbation", inverse_perturbation),
        ("hard-suite ordering", main_result_ordering),
        ("determinism and round trip", determinism_and_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{took:.2?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{took:.2?}]", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
