//! Checks that the single-layer proxy gradient tracks the true hypergradient
//! of the full multi-layer solve.
//!
//! The true hypergradient is measured by central finite differences of
//! `F(v*) = L(model edited by solve_multilayer(allocate_residual(v*)))`, where
//! `L` is the edit loss plus locality loss (no regularization).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    ensure_square, max_asymmetry, spectral_norm, sym_extremes, Matrix, SpdFactor, Vector,
};
use crate::memory_model::{GeometryConfig, LayerMemory, SyntheticModel, WeightOverrides};
use crate::meta_opt::{meta_loss_grad_with, meta_loss_with, EditRequest, StructuralGate};
use crate::solvers::{
    allocate_residual, solve_multilayer, AllocationScheme, EffectiveGeometry, SolveResult,
};

pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Acceptable band for the finite-difference halving ratio.
pub const RICHARDSON_BAND: (f64, f64) = (2.8, 5.2);

const MAX_FD_HALVINGS: usize = 3;

fn all_layers(model: &SyntheticModel) -> Vec<usize> {
    (0..model.n_layers()).collect()
}

fn reject_projectors(model: &SyntheticModel) -> Result<()> {
    if model.layers.iter().any(|l| l.projector.is_some()) {
        return Err(Error::PreconditionViolated(
            "fidelity checks assume covariance-solver layers; found a projector".into(),
        ));
    }
    Ok(())
}

/// Solved updates for `v_star` across every layer.
pub fn solve_for_target(
    model: &SyntheticModel,
    v_star: &Vector,
    scheme: AllocationScheme,
) -> Result<std::collections::BTreeMap<usize, SolveResult>> {
    let plan = allocate_residual(model, v_star, &all_layers(model), scheme)?;
    solve_multilayer(model, &plan)
}

fn overrides_from(
    model: &SyntheticModel,
    solved: &std::collections::BTreeMap<usize, SolveResult>,
) -> WeightOverrides {
    solved
        .iter()
        .map(|(&l, r)| (l, &model.layers[l].weight + &r.delta))
        .collect()
}

fn task_loss(
    model: &SyntheticModel,
    request: &EditRequest,
    overrides: &WeightOverrides,
) -> Result<f64> {
    let l = meta_loss_with(model, overrides, request, None)?;
    Ok(l.edit_loss + l.loc_loss)
}

/// Central-difference gradient of a scalar function of `v`.
pub fn central_gradient<F>(v: &Vector, step: f64, f: F) -> Result<Vector>
where
    F: Fn(&Vector) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let mut out = Vector::zeros(v.len());
    for i in 0..v.len() {
        let mut plus = v.clone();
        plus[i] += step;
        let mut minus = v.clone();
        minus[i] -= step;
        let (fp, fm) = (f(&plus)?, f(&minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Divergence {
                iteration: i,
                trace: None,
            });
        }
        out[i] = (fp - fm) / (2.0 * step);
    }
    Ok(out)
}

/// Finite-difference hypergradient of `objective ∘ solve ∘ allocate` at `v_star`.
pub fn true_hypergradient_with<F>(
    model: &SyntheticModel,
    v_star: &Vector,
    fd_step: f64,
    scheme: AllocationScheme,
    objective: F,
) -> Result<Vector>
where
    F: Fn(&WeightOverrides) -> Result<f64>,
{
    central_gradient(v_star, fd_step, |v| {
        let solved = solve_for_target(model, v, scheme)?;
        objective(&overrides_from(model, &solved))
    })
}

pub fn true_hypergradient(
    model: &SyntheticModel,
    request: &EditRequest,
    v_star: &Vector,
    fd_step: f64,
    scheme: AllocationScheme,
) -> Result<Vector> {
    request.validate(model)?;
    true_hypergradient_with(model, v_star, fd_step, scheme, |ov| {
        task_loss(model, request, ov)
    })
}

/// `g_proxy = s_L·M_Lᵀ`.
pub fn proxy_hypergradient(s_l: &Matrix, gate: &StructuralGate) -> Result<Vector> {
    if s_l.ncols() != gate.gate_row.len() {
        return Err(Error::DimensionMismatch {
            context: "cotangent columns",
            expected: gate.gate_row.len(),
            found: s_l.ncols(),
        });
    }
    Ok(s_l * &gate.gate_row)
}

/// `‖g_proxy‖ / (‖s_L‖_F·‖M_L‖₂)`, zero when either factor vanishes.
pub fn non_degeneracy(g_proxy: &Vector, s_l: &Matrix, gate: &StructuralGate) -> f64 {
    let denom = s_l.norm() * gate.gate_row.norm();
    if denom > 0.0 {
        g_proxy.norm() / denom
    } else {
        0.0
    }
}

/// Cotangent `∇_{W} L` at the state edited for `v_star`.
pub fn cotangent_at(
    model: &SyntheticModel,
    request: &EditRequest,
    v_star: &Vector,
    scheme: AllocationScheme,
) -> Result<Matrix> {
    let solved = solve_for_target(model, v_star, scheme)?;
    Ok(meta_loss_grad_with(model, &overrides_from(model, &solved), request)?.total())
}

/// Per-layer channels: the finite-difference gradient of `F` with every layer
/// except `l` frozen at its solved update for `v_star`.
pub fn layer_channels(
    model: &SyntheticModel,
    request: &EditRequest,
    v_star: &Vector,
    fd_step: f64,
    scheme: AllocationScheme,
) -> Result<Vec<Vector>> {
    request.validate(model)?;
    let frozen = overrides_from(model, &solve_for_target(model, v_star, scheme)?);
    (0..model.n_layers())
        .map(|l| {
            central_gradient(v_star, fd_step, |v| {
                let solved = solve_for_target(model, v, scheme)?;
                let mut ov = frozen.clone();
                ov.insert(l, &model.layers[l].weight + &solved[&l].delta);
                task_loss(model, request, &ov)
            })
        })
        .collect()
}

fn ratio_from_channels(channels: &[Vector]) -> Result<f64> {
    let (last, rest) = channels
        .split_last()
        .ok_or(Error::EmptyInput("layer channels"))?;
    let norm = last.norm();
    if norm < 1e-12 {
        return Err(Error::VanishingChannel { norm });
    }
    let tail = rest
        .iter()
        .fold(Vector::zeros(last.len()), |acc, c| acc + c);
    Ok(tail.norm() / norm)
}

/// `ρ = ‖Σ_{l≠L} channel_l‖ / ‖channel_L‖` with Euclidean norms.
pub fn dominance_ratio(
    model: &SyntheticModel,
    request: &EditRequest,
    v_star: &Vector,
    fd_step: f64,
    scheme: AllocationScheme,
) -> Result<f64> {
    ratio_from_channels(&layer_channels(model, request, v_star, fd_step, scheme)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversePerturbation {
    pub epsilon: f64,
    pub mu: f64,
    pub bound: f64,
    pub actual: f64,
    pub holds: bool,
}

/// `‖(A+E)⁻¹ − A⁻¹‖₂ ≤ ε/(μ(μ−ε))` with `ε = ‖E‖₂`, `μ = λ_min(A)`.
pub fn check_inverse_perturbation(a: &Matrix, e: &Matrix) -> Result<InversePerturbation> {
    ensure_square(a, "base matrix")?;
    ensure_square(e, "perturbation")?;
    if a.nrows() != e.nrows() {
        return Err(Error::DimensionMismatch {
            context: "perturbation size",
            expected: a.nrows(),
            found: e.nrows(),
        });
    }
    let asym = max_asymmetry(e).max(max_asymmetry(a));
    if asym > 1e-10 {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let (mu, _) = sym_extremes(a);
    if !(mu > 0.0) {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: mu });
    }
    let epsilon = spectral_norm(e);
    if epsilon >= mu {
        return Err(Error::PreconditionViolated(format!(
            "‖E‖₂ = {epsilon:e} must be below λ_min(A) = {mu:e}"
        )));
    }
    let a_inv = SpdFactor::new(a, "A")?.inverse();
    let b_inv = SpdFactor::new(&(a + e), "A + E")?.inverse();
    let actual = spectral_norm(&(b_inv - a_inv));
    let bound = epsilon / (mu * (mu - epsilon));
    Ok(InversePerturbation {
        epsilon,
        mu,
        bound,
        actual,
        holds: actual <= bound + 1e-12,
    })
}

/// `A = C + λI + kkᵀ` of one layer.
pub fn keyed_geometry(layer: &LayerMemory) -> Matrix {
    layer.effective_geometry() + &layer.key * layer.key.transpose()
}

/// Gate `M_l = k_lᵀ(C_l + λI + k_lk_lᵀ)⁻¹` of an arbitrary layer.
pub fn layer_gate(layer: &LayerMemory) -> Result<Vector> {
    let inv = EffectiveGeometry::of_layer(layer)?.inverse_with_key(&layer.key)?;
    Ok(inv.tr_mul(&layer.key))
}

/// Two-term split `M_l − M_L = (k_l−k_L)ᵀA_l⁻¹ + k_Lᵀ(A_l⁻¹−A_L⁻¹)` with the
/// bound each term obeys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyTerms {
    pub key_term: f64,
    pub geometry_term: f64,
    pub total: f64,
    /// `‖k_l−k_L‖/λ_min(A_l)`.
    pub key_bound: f64,
    /// `‖k_L‖·ε_A/(μ(μ−ε_A))` with `ε_A = ‖A_l−A_L‖₂`, `μ = λ_min(A_L)`.
    pub geometry_bound: f64,
    /// Norm of the difference between the sum of the two terms and `M_l − M_L`.
    pub split_error: f64,
}

pub fn discrepancy_terms(layer: &LayerMemory, reference: &LayerMemory) -> Result<DiscrepancyTerms> {
    let a_l = keyed_geometry(layer);
    let a_ref = keyed_geometry(reference);
    let inv_l = SpdFactor::new(&a_l, "layer keyed geometry")?.inverse();
    let inv_ref = SpdFactor::new(&a_ref, "reference keyed geometry")?.inverse();
    let key_diff = &layer.key - &reference.key;
    let key_vec = inv_l.tr_mul(&key_diff);
    let geom_vec = (&inv_l - &inv_ref).tr_mul(&reference.key);
    let gate_diff = layer_gate(layer)? - layer_gate(reference)?;
    let (mu_l, _) = sym_extremes(&a_l);
    let (mu, _) = sym_extremes(&a_ref);
    let eps_a = spectral_norm(&(&a_l - &a_ref));
    let geometry_bound = if eps_a < mu {
        reference.key.norm() * eps_a / (mu * (mu - eps_a))
    } else {
        f64::INFINITY
    };
    Ok(DiscrepancyTerms {
        key_term: key_vec.norm(),
        geometry_term: geom_vec.norm(),
        total: gate_diff.norm(),
        key_bound: key_diff.norm() / mu_l,
        geometry_bound,
        split_error: (key_vec + geom_vec - gate_diff).norm(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryDiscrepancy {
    pub per_layer: Vec<f64>,
    pub max_discrepancy: f64,
    pub eps_c: f64,
    pub eps_k: f64,
    /// `λ_min(C_L + λI)`.
    pub mu: f64,
}

/// `max_l ‖M_l − M_L‖₂`, gated on `ε_C + 2·max‖k‖·ε_k < λ_min(C_L + λI)`.
pub fn check_geometry_discrepancy(model: &SyntheticModel) -> Result<GeometryDiscrepancy> {
    reject_projectors(model)?;
    let (eps_c, eps_k) = model.measured_drift();
    let (mu, _) = sym_extremes(&model.last_layer().effective_geometry());
    let key_bound = model
        .layers
        .iter()
        .map(|l| l.key.norm())
        .fold(0.0, f64::max);
    let lhs = eps_c + 2.0 * key_bound * eps_k;
    if lhs >= mu {
        return Err(Error::PreconditionViolated(format!(
            "ε_C + 2·max‖k‖·ε_k = {lhs:e} must be below λ_min(C_L + λI) = {mu:e}"
        )));
    }
    let reference = layer_gate(model.last_layer())?;
    let per_layer = model
        .layers
        .iter()
        .map(|l| Ok((layer_gate(l)? - &reference).norm()))
        .collect::<Result<Vec<_>>>()?;
    let max_discrepancy = per_layer.iter().copied().fold(0.0, f64::max);
    Ok(GeometryDiscrepancy {
        per_layer,
        max_discrepancy,
        eps_c,
        eps_k,
        mu,
    })
}

/// One-sided line through the origin bounding `y` by `slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OriginFit {
    /// Smallest slope with every point on or below the line.
    pub slope: f64,
    /// Least-squares slope through the origin.
    pub ls_slope: f64,
    /// `max(y/x) / min(y/x)`; 1 for exactly linear data.
    pub ratio_spread: f64,
    pub one_sided: bool,
}

pub fn fit_through_origin(xs: &[f64], ys: &[f64]) -> Result<OriginFit> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::EmptyInput("fit points"));
    }
    if xs.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidConfig(
            "fit abscissae must be positive".into(),
        ));
    }
    let ratios: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| y / x).collect();
    let slope = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let low = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let one_sided = slope.is_finite()
        && xs
            .iter()
            .zip(ys)
            .all(|(x, y)| *y <= slope * x * (1.0 + 1e-12));
    Ok(OriginFit {
        slope,
        ls_slope: sxy / sxx,
        ratio_spread: if low > 0.0 {
            slope / low
        } else {
            f64::INFINITY
        },
        one_sided,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub drift: f64,
    pub eps_c_measured: f64,
    pub eps_k_measured: f64,
    pub max_gate_discrepancy: f64,
    pub error_norm: f64,
}

/// Regenerates `base` at each drift level `d` with `ε_C = ε_k = d/2`, keeping
/// the seed (and therefore the base geometry and drift directions) fixed, and
/// measures gate discrepancy and hypergradient error under uniform allocation.
/// `request_for` builds the request and `v*` on each generated model.
pub fn drift_sweep<F>(
    base: &GeometryConfig,
    drifts: &[f64],
    fd_step: f64,
    request_for: F,
) -> Result<Vec<DriftPoint>>
where
    F: Fn(&SyntheticModel) -> Result<(EditRequest, Vector)>,
{
    drifts
        .iter()
        .map(|&drift| {
            let cfg = GeometryConfig {
                eps_c: drift / 2.0,
                eps_k: drift / 2.0,
                ..base.clone()
            };
            let model = crate::memory_model::gen_model(&cfg)?;
            let geometry = check_geometry_discrepancy(&model)?;
            let (request, v_star) = request_for(&model)?;
            let scheme = AllocationScheme::Uniform;
            let g_true = true_hypergradient(&model, &request, &v_star, fd_step, scheme)?;
            let gate = StructuralGate::for_model(&model)?;
            let s_l = cotangent_at(&model, &request, &v_star, scheme)?;
            let g_proxy = proxy_hypergradient(&s_l, &gate)?;
            Ok(DriftPoint {
                drift,
                eps_c_measured: geometry.eps_c,
                eps_k_measured: geometry.eps_k,
                max_gate_discrepancy: geometry.max_discrepancy,
                error_norm: (g_true - g_proxy).norm(),
            })
        })
        .collect()
}

/// `‖g(h) − g(h/2)‖ / ‖g(h/2) − g(h/4)‖`; `None` when both differences sit at
/// roundoff level (locally quadratic objective).
pub fn richardson_ratio(g_h: &Vector, g_half: &Vector, g_quarter: &Vector) -> Option<f64> {
    let scale = g_half.norm().max(1e-300);
    let coarse = (g_h - g_half).norm();
    let fine = (g_half - g_quarter).norm();
    if coarse <= 1e-10 * scale && fine <= 1e-10 * scale {
        return None;
    }
    Some(coarse / fine)
}

fn within_band(ratio: Option<f64>) -> bool {
    ratio.is_none_or(|r| r >= RICHARDSON_BAND.0 && r <= RICHARDSON_BAND.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub g_true: Vec<f64>,
    pub g_proxy: Vec<f64>,
    pub g_last: Vec<f64>,
    pub rho: f64,
    pub alpha: f64,
    pub inner_product: f64,
    pub cosine: f64,
    pub error_norm: f64,
    pub proxy_norm_bound: f64,
    pub eps_c_measured: f64,
    pub eps_k_measured: f64,
    pub fd_step_used: f64,
    pub richardson_ratio: Option<f64>,
    pub scheme: AllocationScheme,
}

impl FidelityReport {
    /// `‖g_proxy‖ ≤ ‖s_L‖_F‖M_L‖₂` up to roundoff.
    pub fn norm_bound_holds(&self) -> bool {
        let norm = self.g_proxy.iter().map(|x| x * x).sum::<f64>().sqrt();
        norm <= self.proxy_norm_bound * (1.0 + 1e-12) + 1e-12
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityOptions {
    pub fd_step: f64,
    pub scheme: AllocationScheme,
}

impl Default for FidelityOptions {
    fn default() -> Self {
        Self {
            fd_step: DEFAULT_FD_STEP,
            scheme: AllocationScheme::Uniform,
        }
    }
}

fn cosine(a: &Vector, b: &Vector) -> f64 {
    let denom = a.norm() * b.norm();
    if denom > 0.0 {
        (a.dot(b) / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Assembles every fidelity quantity at `v_star`. The finite-difference step
/// is halved (up to three times) while the Richardson ratio falls outside
/// [`RICHARDSON_BAND`]; the step actually used is reported.
pub fn fidelity_report(
    model: &SyntheticModel,
    request: &EditRequest,
    v_star: &Vector,
    options: &FidelityOptions,
) -> Result<FidelityReport> {
    reject_projectors(model)?;
    request.validate(model)?;
    let scheme = options.scheme;
    let mut step = options.fd_step;
    let mut g_true = true_hypergradient(model, request, v_star, step, scheme)?;
    let mut ratio = None;
    for attempt in 0..=MAX_FD_HALVINGS {
        let half = true_hypergradient(model, request, v_star, step / 2.0, scheme)?;
        let quarter = true_hypergradient(model, request, v_star, step / 4.0, scheme)?;
        ratio = richardson_ratio(&g_true, &half, &quarter);
        if within_band(ratio) || attempt == MAX_FD_HALVINGS {
            break;
        }
        step /= 2.0;
        g_true = half;
    }

    let gate = StructuralGate::for_model(model)?;
    let s_l = cotangent_at(model, request, v_star, scheme)?;
    let g_proxy = proxy_hypergradient(&s_l, &gate)?;
    let channels = layer_channels(model, request, v_star, step, scheme)?;
    let g_last = channels
        .last()
        .cloned()
        .ok_or(Error::EmptyInput("layer channels"))?;
    let rho = ratio_from_channels(&channels)?;
    let (eps_c, eps_k) = model.measured_drift();
    Ok(FidelityReport {
        rho,
        alpha: non_degeneracy(&g_proxy, &s_l, &gate),
        inner_product: g_true.dot(&g_proxy),
        cosine: cosine(&g_true, &g_proxy),
        error_norm: (&g_true - &g_proxy).norm(),
        proxy_norm_bound: s_l.norm() * gate.gate_row.norm(),
        eps_c_measured: eps_c,
        eps_k_measured: eps_k,
        fd_step_used: step,
        richardson_ratio: ratio,
        scheme,
        g_true: g_true.iter().copied().collect(),
        g_proxy: g_proxy.iter().copied().collect(),
        g_last: g_last.iter().copied().collect(),
    })
}
