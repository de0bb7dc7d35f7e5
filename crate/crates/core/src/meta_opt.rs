//! Look-ahead target optimization.
//!
//! The target `v*` for the final layer is refined by evaluating the meta-loss
//! on virtually edited weights `W_L + (v* − W_L·k_L)·M` and pulling the weight
//! gradient back through the structural gate `M = k_Lᵀ(C_L + λI + k_Lk_Lᵀ)⁻¹`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_len, log_softmax, softmax, Matrix, Vector};
use crate::memory_model::{LayerMemory, SyntheticModel, WeightOverrides};
use crate::solvers::EffectiveGeometry;

/// Gradient-norm threshold at which the loop reports convergence.
pub const CONVERGENCE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub edit_key: Vector,
    pub target_class: usize,
    pub v_init: Vector,
    pub paraphrase_keys: Vec<Vector>,
    pub locality_keys: Vec<Vector>,
    pub reg_weight: f64,
}

impl EditRequest {
    /// Request whose initial plan is the pre-edit value `W_L·k_L`.
    pub fn at_stored_value(model: &SyntheticModel, target_class: usize) -> Self {
        Self {
            edit_key: model.last_layer().key.clone(),
            target_class,
            v_init: model.last_layer().stored_value(),
            paraphrase_keys: Vec::new(),
            locality_keys: Vec::new(),
            reg_weight: 0.1,
        }
    }

    pub fn validate(&self, model: &SyntheticModel) -> Result<()> {
        let (d0, d1) = (model.d0(), model.d1());
        ensure_len(&self.edit_key, d0, "edit key")?;
        ensure_len(&self.v_init, d1, "initial target")?;
        if self.target_class >= model.vocab() {
            return Err(Error::TargetOutOfRange {
                class: self.target_class,
                classes: model.vocab(),
            });
        }
        if !(self.reg_weight >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "reg_weight must be >= 0, got {}",
                self.reg_weight
            )));
        }
        let edit_norm = self.edit_key.norm();
        for k in self.paraphrase_keys.iter().chain(&self.locality_keys) {
            ensure_len(k, d0, "auxiliary key")?;
            let cos = k.dot(&self.edit_key) / (k.norm() * edit_norm);
            if (1.0 - cos).abs() <= 1e-9 {
                return Err(Error::InvalidConfig(
                    "auxiliary key duplicates the edit key".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralGate {
    /// `M = k_Lᵀ(C_L + λI + k_Lk_Lᵀ)⁻¹`, stored as a column.
    pub gate_row: Vector,
    pub source_layer: usize,
    pub cached_inverse: Matrix,
}

impl StructuralGate {
    /// `β_L = M·k_L`.
    pub fn beta(&self, key: &Vector) -> f64 {
        self.gate_row.dot(key)
    }

    pub fn for_model(model: &SyntheticModel) -> Result<Self> {
        build_gate(model.last_layer(), model.last())
    }
}

pub fn build_gate(layer: &LayerMemory, source_layer: usize) -> Result<StructuralGate> {
    layer.validate()?;
    let geometry = EffectiveGeometry::of_layer(layer)?;
    let cached_inverse = geometry.inverse_with_key(&layer.key)?;
    let gate_row = cached_inverse.tr_mul(&layer.key);
    Ok(StructuralGate {
        gate_row,
        source_layer,
        cached_inverse,
    })
}

/// `Δ_proxy(v*) = (v* − W_L·k_L)·M`.
pub fn proxy_update(v_star: &Vector, layer: &LayerMemory, gate: &StructuralGate) -> Result<Matrix> {
    ensure_len(v_star, layer.d1(), "meta target")?;
    ensure_len(&gate.gate_row, layer.d0(), "gate row")?;
    Ok((v_star - layer.stored_value()) * gate.gate_row.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaLoss {
    pub edit_loss: f64,
    pub loc_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

fn kl(p_log: &Vector, q_log: &Vector) -> f64 {
    p_log
        .iter()
        .zip(q_log.iter())
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum()
}

/// Meta-loss with an arbitrary set of weight overrides.
///
/// `edit_loss` is the NLL of the target class at the edit key,
/// `loc_loss` sums `KL(P_pre ‖ P_post)` over the locality keys, and
/// `reg_loss = reg_weight·‖v* − v_init‖²` (zero when `v_star` is `None`).
pub fn meta_loss_with(
    model: &SyntheticModel,
    overrides: &WeightOverrides,
    request: &EditRequest,
    v_star: Option<&Vector>,
) -> Result<MetaLoss> {
    request.validate(model)?;
    let z = model.forward(&request.edit_key, Some(overrides))?;
    let edit_loss = -log_softmax(&z)[request.target_class];
    let mut loc_loss = 0.0;
    for key in &request.locality_keys {
        let pre = log_softmax(&model.forward(key, None)?);
        let post = log_softmax(&model.forward(key, Some(overrides))?);
        loc_loss += kl(&pre, &post);
    }
    let reg_loss = match v_star {
        Some(v) => {
            ensure_len(v, model.d1(), "meta target")?;
            request.reg_weight * (v - &request.v_init).norm_squared()
        }
        None => 0.0,
    };
    Ok(MetaLoss {
        edit_loss,
        loc_loss,
        reg_loss,
        total: edit_loss + loc_loss + reg_loss,
    })
}

fn last_layer_override(model: &SyntheticModel, virtual_w: &Matrix) -> Result<WeightOverrides> {
    let w = &model.last_layer().weight;
    if virtual_w.shape() != w.shape() {
        return Err(Error::DimensionMismatch {
            context: "virtual final-layer weight",
            expected: w.len(),
            found: virtual_w.len(),
        });
    }
    Ok(WeightOverrides::from([(model.last(), virtual_w.clone())]))
}

/// Meta-loss with the final-layer weight replaced by `virtual_w`.
pub fn meta_loss(
    model: &SyntheticModel,
    virtual_w: &Matrix,
    request: &EditRequest,
    v_star: Option<&Vector>,
) -> Result<MetaLoss> {
    meta_loss_with(
        model,
        &last_layer_override(model, virtual_w)?,
        request,
        v_star,
    )
}

/// Weight gradient of the edit and locality terms, kept separate.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient {
    pub edit: Matrix,
    pub loc: Matrix,
}

impl MetaGradient {
    pub fn total(&self) -> Matrix {
        &self.edit + &self.loc
    }
}

/// Gradient of `edit_loss + loc_loss` with respect to any single layer's
/// weight under `overrides`. Layers enter the hidden state additively with the
/// same input key, so the gradient is the same matrix for every layer.
pub fn meta_loss_grad_with(
    model: &SyntheticModel,
    overrides: &WeightOverrides,
    request: &EditRequest,
) -> Result<MetaGradient> {
    request.validate(model)?;
    let u = &model.readout;
    let z = model.forward(&request.edit_key, Some(overrides))?;
    let mut residual = softmax(&z);
    residual[request.target_class] -= 1.0;
    let edit = u.tr_mul(&residual) * request.edit_key.transpose();
    let mut loc = Matrix::zeros(model.d1(), model.d0());
    for key in &request.locality_keys {
        let pre = softmax(&model.forward(key, None)?);
        let post = softmax(&model.forward(key, Some(overrides))?);
        loc += u.tr_mul(&(post - pre)) * key.transpose();
    }
    Ok(MetaGradient { edit, loc })
}

pub fn meta_loss_grad_w(
    model: &SyntheticModel,
    virtual_w: &Matrix,
    request: &EditRequest,
) -> Result<MetaGradient> {
    meta_loss_grad_with(model, &last_layer_override(model, virtual_w)?, request)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// `v ← v − η·g`.
    #[default]
    Plain,
    /// Bias-corrected first/second moment accumulation.
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    pub eta: f64,
    pub steps: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Keep iterating for all `steps` even after convergence.
    #[serde(default)]
    pub full_horizon: bool,
}

impl Default for MetaParams {
    fn default() -> Self {
        Self {
            eta: 5e-3,
            steps: 15,
            optimizer: Optimizer::Plain,
            full_horizon: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub v_star: Vec<f64>,
    pub edit_loss: f64,
    pub loc_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub beta_current: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTrace {
    pub iterations: Vec<TraceStep>,
    pub converged: bool,
    pub final_v_star: Vec<f64>,
}

impl MetaTrace {
    pub fn final_v_star(&self) -> Vector {
        Vector::from_column_slice(&self.final_v_star)
    }

    /// One JSON object per iteration, newline separated.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for step in &self.iterations {
            out.push_str(&serde_json::to_string(step)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Look-ahead and correct loop for one request.
pub fn metake_run(
    model: &SyntheticModel,
    request: &EditRequest,
    params: &MetaParams,
) -> Result<MetaTrace> {
    let gate = StructuralGate::for_model(model)?;
    metake_run_with_gate(model, &gate, request, params)
}

/// As [`metake_run`] with a prebuilt gate, which can be shared by requests
/// that edit the same final layer.
pub fn metake_run_with_gate(
    model: &SyntheticModel,
    gate: &StructuralGate,
    request: &EditRequest,
    params: &MetaParams,
) -> Result<MetaTrace> {
    if !(params.eta > 0.0) || params.steps == 0 {
        return Err(Error::InvalidConfig(format!(
            "need eta > 0 and at least one step (eta={}, steps={})",
            params.eta, params.steps
        )));
    }
    request.validate(model)?;
    let layer = model.last_layer();
    let beta_current = gate.beta(&request.edit_key);
    let mut v = request.v_init.clone();
    let mut first_moment = Vector::zeros(v.len());
    let mut second_moment = Vector::zeros(v.len());
    let mut trace = MetaTrace {
        iterations: Vec::with_capacity(params.steps),
        converged: false,
        final_v_star: Vec::new(),
    };

    for t in 0..params.steps {
        let virtual_w = &layer.weight + proxy_update(&v, layer, gate)?;
        let loss = meta_loss(model, &virtual_w, request, Some(&v))?;
        let task = meta_loss_grad_w(model, &virtual_w, request)?.total();
        let g = &task * &gate.gate_row + (&v - &request.v_init) * (2.0 * request.reg_weight);
        let grad_norm = g.norm();
        trace.iterations.push(TraceStep {
            t,
            v_star: v.iter().copied().collect(),
            edit_loss: loss.edit_loss,
            loc_loss: loss.loc_loss,
            reg_loss: loss.reg_loss,
            total: loss.total,
            grad_norm,
            beta_current,
        });
        if !loss.total.is_finite() || !grad_norm.is_finite() {
            trace.final_v_star = v.iter().copied().collect();
            return Err(Error::Divergence {
                iteration: t,
                trace: Some(Box::new(trace)),
            });
        }
        if grad_norm < CONVERGENCE_TOL {
            trace.converged = true;
            if !params.full_horizon {
                break;
            }
        }
        match params.optimizer {
            Optimizer::Plain => v -= &g * params.eta,
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                first_moment = &first_moment * beta1 + &g * (1.0 - beta1);
                second_moment = &second_moment * beta2 + g.component_mul(&g) * (1.0 - beta2);
                let c1 = 1.0 - beta1.powi(t as i32 + 1);
                let c2 = 1.0 - beta2.powi(t as i32 + 1);
                for i in 0..v.len() {
                    let m_hat = first_moment[i] / c1;
                    let s_hat = second_moment[i] / c2;
                    v[i] -= params.eta * m_hat / (s_hat.sqrt() + epsilon);
                }
            }
        }
    }
    trace.final_v_star = v.iter().copied().collect();
    Ok(trace)
}

/// Hidden state at the edit key with the final layer's output removed.
fn hidden_without_last(model: &SyntheticModel, key: &Vector) -> Result<Vector> {
    let mut h = model.hidden(key, None)?;
    h -= &model.last_layer().weight * key;
    Ok(h)
}

/// Open-loop objective `−log softmax(U(h_rest + v))[o*] + (λ_up/2)‖v − v_init‖²`.
pub fn static_objective(
    model: &SyntheticModel,
    request: &EditRequest,
    lambda_up: f64,
    v: &Vector,
) -> Result<f64> {
    request.validate(model)?;
    let h = hidden_without_last(model, &request.edit_key)? + v;
    let nll = -log_softmax(&(&model.readout * h))[request.target_class];
    Ok(nll + 0.5 * lambda_up * (v - &request.v_init).norm_squared())
}

/// Stage-I baseline: minimizes [`static_objective`] over `v` directly with no
/// knowledge of the solver. The NLL term takes explicit gradient steps and the
/// isotropic penalty is applied in closed (proximal) form, so arbitrarily large
/// `lambda_up` stays stable.
pub fn static_target_baseline(
    model: &SyntheticModel,
    request: &EditRequest,
    lambda_up: f64,
    steps: usize,
    lr: f64,
) -> Result<Vector> {
    if steps == 0 || !(lr > 0.0) || !(lambda_up >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "need steps >= 1, lr > 0, lambda_up >= 0 (steps={steps}, lr={lr}, lambda_up={lambda_up})"
        )));
    }
    request.validate(model)?;
    let rest = hidden_without_last(model, &request.edit_key)?;
    let mut v = request.v_init.clone();
    let shrink = 1.0 / (1.0 + lr * lambda_up);
    for iteration in 0..steps {
        let mut residual = softmax(&(&model.readout * (&rest + &v)));
        residual[request.target_class] -= 1.0;
        let nll_grad = model.readout.tr_mul(&residual);
        v = (&v - nll_grad * lr + &request.v_init * (lr * lambda_up)) * shrink;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                iteration,
                trace: None,
            });
        }
    }
    Ok(v)
}
