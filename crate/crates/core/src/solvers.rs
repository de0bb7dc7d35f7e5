//! Stage-II execution solvers.
//!
//! For a layer with key `k`, covariance `C` and ridge `λ` the update solving
//! `min ‖Δk − δ‖² + tr(ΔCΔᵀ) + λ‖Δ‖²_F` is `Δ* = δ·kᵀ(C + λI + kkᵀ)⁻¹`, and the
//! realized residual is `Δ*k = β·δ` with `β = γ/(1+γ)`, `γ = kᵀ(C + λI)⁻¹k`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_len, ensure_square, sym_extremes, Matrix, SpdFactor, Vector};
use crate::memory_model::{LayerMemory, SyntheticModel};

/// Iteration cap of the gradient-descent oracle.
pub const ORACLE_MAX_ITER: usize = 200_000;

const SM_DENOMINATOR_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub delta: Matrix,
    pub realized_residual: Vector,
    pub gamma: f64,
    pub beta: f64,
}

/// Factored effective geometry `C + λI` of one layer.
///
/// Factored once; per-key quantities come from a Sherman–Morrison update of
/// the cached inverse.
#[derive(Debug, Clone)]
pub struct EffectiveGeometry {
    factor: SpdFactor,
    inverse: Matrix,
}

impl EffectiveGeometry {
    pub fn new(covariance: &Matrix, ridge: f64) -> Result<Self> {
        ensure_square(covariance, "covariance")?;
        let mut eff = covariance.clone();
        for i in 0..eff.nrows() {
            eff[(i, i)] += ridge;
        }
        let factor = SpdFactor::new(&eff, "C + ridge·I")?;
        let inverse = factor.inverse();
        Ok(Self { factor, inverse })
    }

    pub fn of_layer(layer: &LayerMemory) -> Result<Self> {
        Self::new(&layer.covariance, layer.ridge)
    }

    /// `(C + λI)⁻¹`.
    pub fn inverse(&self) -> &Matrix {
        &self.inverse
    }

    /// `γ = kᵀ(C + λI)⁻¹k`.
    pub fn gamma(&self, k: &Vector) -> f64 {
        k.dot(&self.factor.solve(k))
    }

    /// `(C + λI + kkᵀ)⁻¹`.
    pub fn inverse_with_key(&self, k: &Vector) -> Result<Matrix> {
        sherman_morrison_inv(&self.inverse, k)
    }
}

/// `(A + kkᵀ)⁻¹` from `A⁻¹`.
pub fn sherman_morrison_inv(base_inverse: &Matrix, k: &Vector) -> Result<Matrix> {
    ensure_square(base_inverse, "base inverse")?;
    ensure_len(k, base_inverse.nrows(), "rank-one update vector")?;
    let right = base_inverse * k;
    let left = base_inverse.tr_mul(k);
    let denominator = 1.0 + k.dot(&right);
    if !(denominator > SM_DENOMINATOR_FLOOR) {
        return Err(Error::NearSingularUpdate { denominator });
    }
    Ok(base_inverse - (right * left.transpose()) / denominator)
}

/// Objective `‖Δk − δ‖² + tr(ΔCΔᵀ) + λ‖Δ‖²_F` of the single-key solve.
pub fn edit_objective(layer: &LayerMemory, target_residual: &Vector, delta: &Matrix) -> f64 {
    let fit = (delta * &layer.key - target_residual).norm_squared();
    let penalty = (delta * &layer.covariance).component_mul(delta).sum();
    fit + penalty + layer.ridge * delta.norm_squared()
}

/// Analytic gradient `2(Δk − δ)kᵀ + 2ΔC + 2λΔ` of [`edit_objective`].
pub fn edit_objective_grad(
    layer: &LayerMemory,
    target_residual: &Vector,
    delta: &Matrix,
) -> Matrix {
    let fit = (delta * &layer.key - target_residual) * layer.key.transpose();
    (fit + delta * &layer.covariance + delta * layer.ridge) * 2.0
}

fn check_residual(layer: &LayerMemory, target_residual: &Vector) -> Result<()> {
    layer.validate()?;
    ensure_len(target_residual, layer.d1(), "target residual")
}

pub fn solve_closed_form(layer: &LayerMemory, target_residual: &Vector) -> Result<SolveResult> {
    check_residual(layer, target_residual)?;
    let geometry = EffectiveGeometry::of_layer(layer)?;
    solve_with_geometry(layer, &geometry, target_residual)
}

/// Closed-form solve reusing an already factored geometry for `layer`.
pub fn solve_with_geometry(
    layer: &LayerMemory,
    geometry: &EffectiveGeometry,
    target_residual: &Vector,
) -> Result<SolveResult> {
    let k = &layer.key;
    let gamma = geometry.gamma(k);
    let gate = geometry.inverse_with_key(k)?.tr_mul(k);
    let delta = target_residual * gate.transpose();
    let realized_residual = &delta * k;
    Ok(SolveResult {
        delta,
        realized_residual,
        gamma,
        beta: gamma / (1.0 + gamma),
    })
}

/// Plain gradient descent on [`edit_objective`]; the independent check on
/// [`solve_closed_form`].
pub fn solve_gradient_oracle(
    layer: &LayerMemory,
    target_residual: &Vector,
    tol: f64,
) -> Result<Matrix> {
    solve_gradient_oracle_capped(layer, target_residual, tol, ORACLE_MAX_ITER)
}

pub fn solve_gradient_oracle_capped(
    layer: &LayerMemory,
    target_residual: &Vector,
    tol: f64,
    max_iter: usize,
) -> Result<Matrix> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "oracle tolerance must be > 0, got {tol}"
        )));
    }
    check_residual(layer, target_residual)?;
    let (_, top) = if layer.d0() > 0 {
        sym_extremes(&layer.covariance)
    } else {
        (0.0, 0.0)
    };
    let step = 1.0 / (2.0 * (top.max(0.0) + layer.ridge + layer.key.norm_squared()));
    let mut delta = Matrix::zeros(layer.d1(), layer.d0());
    let mut grad_norm = f64::INFINITY;
    for _ in 0..max_iter {
        let grad = edit_objective_grad(layer, target_residual, &delta);
        grad_norm = grad.norm();
        if grad_norm < tol {
            return Ok(delta);
        }
        delta -= grad * step;
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        grad_norm,
    })
}

/// Null-space style solve: the update acts through `ΔP`, regularized
/// isotropically on the executed channel with `λ_iso = layer.ridge`.
pub fn solve_projection(layer: &LayerMemory, target_residual: &Vector) -> Result<SolveResult> {
    check_residual(layer, target_residual)?;
    let p = layer.projector.as_ref().ok_or(Error::MissingProjector)?;
    let lambda_iso = layer.ridge;
    if !(lambda_iso > 0.0) {
        return Err(Error::SingularGeometry(
            "projection solve needs a positive isotropic coefficient".into(),
        ));
    }
    let d0 = layer.d0();
    let projected = p * &layer.key;
    let base_inverse = Matrix::identity(d0, d0) / lambda_iso;
    let gate = sherman_morrison_inv(&base_inverse, &projected)?.tr_mul(&projected);
    let executed = target_residual * gate.transpose();
    let delta = executed * p;
    let realized_residual = &delta * p * &layer.key;
    let energy = projected.norm_squared();
    Ok(SolveResult {
        delta,
        realized_residual,
        gamma: energy / lambda_iso,
        beta: energy / (energy + lambda_iso),
    })
}

/// How a meta-target's residual is split across the edited layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AllocationScheme {
    /// Every edited layer takes `δ/|edit_set|`.
    #[default]
    Uniform,
    /// The final layer takes all of `δ`; other edited layers keep their value.
    LastLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPlan {
    pub layer_targets: BTreeMap<usize, Vector>,
    pub scheme: AllocationScheme,
}

/// Splits `δ = v* − W_L·k_L` into per-layer targets `t_l = W_l·k_l + share_l`.
pub fn allocate_residual(
    model: &SyntheticModel,
    v_star: &Vector,
    edit_set: &[usize],
    scheme: AllocationScheme,
) -> Result<AllocationPlan> {
    if edit_set.is_empty() {
        return Err(Error::EmptyInput("edit set"));
    }
    ensure_len(v_star, model.d1(), "meta target")?;
    let layers: BTreeSet<usize> = edit_set.iter().copied().collect();
    let last = model.last();
    if let Some(&bad) = layers.iter().find(|&&l| l > last) {
        return Err(Error::DimensionMismatch {
            context: "edit set layer index",
            expected: model.n_layers(),
            found: bad,
        });
    }
    if !layers.contains(&last) {
        return Err(Error::InvalidConfig(format!(
            "edit set must contain the final layer {last}"
        )));
    }
    let residual = v_star - model.last_layer().stored_value();
    let share = match scheme {
        AllocationScheme::Uniform => &residual / layers.len() as f64,
        AllocationScheme::LastLayer => residual.clone(),
    };
    let layer_targets = layers
        .iter()
        .map(|&l| {
            let stored = model.layers[l].stored_value();
            let target = match scheme {
                AllocationScheme::LastLayer if l != last => stored,
                _ => stored + &share,
            };
            (l, target)
        })
        .collect();
    Ok(AllocationPlan {
        layer_targets,
        scheme,
    })
}

/// Solves every planned layer independently against its own geometry.
pub fn solve_multilayer(
    model: &SyntheticModel,
    plan: &AllocationPlan,
) -> Result<BTreeMap<usize, SolveResult>> {
    plan.layer_targets
        .iter()
        .map(|(&l, target)| {
            let layer = model.layers.get(l).ok_or(Error::DimensionMismatch {
                context: "plan layer index",
                expected: model.n_layers(),
                found: l,
            })?;
            let residual = target - layer.stored_value();
            let result = if layer.projector.is_some() {
                solve_projection(layer, &residual)?
            } else {
                solve_closed_form(layer, &residual)?
            };
            Ok((l, result))
        })
        .collect()
}

pub fn updates_of(results: &BTreeMap<usize, SolveResult>) -> BTreeMap<usize, Matrix> {
    results.iter().map(|(&l, r)| (l, r.delta.clone())).collect()
}
