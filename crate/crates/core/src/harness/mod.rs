//! Edit suites: build requests against a generated model, run one editing
//! method per request on a fresh copy, and score the edited copy.

mod output;
mod verify;

pub use output::{
    aggregate, emit_results, read_results_csv, read_summary, Aggregates, Summary, CSV_HEADER,
};
pub use verify::{verify_all, CheckOutcome, CheckStatus, VerificationReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, gaussian_vector, sym_eigen, unit_vector, Matrix, Vector};
use crate::memory_model::{
    complement_projector, gen_model, protected_count, protected_key, GeometryConfig,
    SyntheticModel, PROTECTED_FRACTION,
};
use crate::meta_opt::{
    meta_loss_with, metake_run_with_gate, static_target_baseline, EditRequest, MetaParams,
    MetaTrace, Optimizer, StructuralGate,
};
use crate::solvers::{allocate_residual, solve_multilayer, updates_of, AllocationScheme};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "MEMEDIT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditDifficulty {
    /// Keys on the lowest-variance quarter of the spectrum.
    Easy,
    /// Keys with `protected_mass` of their energy on the top-variance quarter.
    Hard,
    /// Alternates hard (even ids) and easy (odd ids).
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Metake,
    StaticBaseline,
    RidgeOnly,
    ProjectionOnly,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Metake,
        Method::StaticBaseline,
        Method::RidgeOnly,
        Method::ProjectionOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Metake => "metake",
            Method::StaticBaseline => "static_baseline",
            Method::RidgeOnly => "ridge_only",
            Method::ProjectionOnly => "projection_only",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetakeSettings {
    pub eta: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub reg_weight: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub full_horizon: bool,
}

impl Default for MetakeSettings {
    fn default() -> Self {
        let p = MetaParams::default();
        Self {
            eta: p.eta,
            steps: p.steps,
            reg_weight: 0.1,
            optimizer: p.optimizer,
            full_horizon: p.full_horizon,
        }
    }
}

impl MetakeSettings {
    pub fn params(&self) -> MetaParams {
        MetaParams {
            eta: self.eta,
            steps: self.steps,
            optimizer: self.optimizer,
            full_horizon: self.full_horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub lambda_up: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            lambda_up: 1e-2,
            steps: 100,
            lr: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub n_edits: usize,
    pub edit_difficulty: EditDifficulty,
    pub method: Method,
    #[serde(default)]
    pub metake_params: MetakeSettings,
    #[serde(default)]
    pub baseline_params: BaselineParams,
    #[serde(default)]
    pub paraphrase_count: usize,
    #[serde(default)]
    pub locality_count: usize,
    #[serde(default = "default_paraphrase_noise")]
    pub paraphrase_noise: f64,
    #[serde(default)]
    pub allocation: AllocationScheme,
    pub seed: u64,
}

fn default_paraphrase_noise() -> f64 {
    0.05
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            geometry: GeometryConfig::default(),
            n_edits: 20,
            edit_difficulty: EditDifficulty::Mixed,
            method: Method::Metake,
            metake_params: MetakeSettings::default(),
            baseline_params: BaselineParams::default(),
            paraphrase_count: 4,
            locality_count: 8,
            paraphrase_noise: default_paraphrase_noise(),
            allocation: AllocationScheme::Uniform,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.n_edits == 0 {
            return Err(Error::InvalidConfig("n_edits must be at least 1".into()));
        }
        let m = &self.metake_params;
        let b = &self.baseline_params;
        if !(m.eta > 0.0) || m.steps == 0 || !(m.reg_weight >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "metake_params need eta > 0, T >= 1, reg_weight >= 0 (got {m:?})"
            )));
        }
        if !(b.lr > 0.0) || b.steps == 0 || !(b.lambda_up >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "baseline_params need lr > 0, steps >= 1, lambda_up >= 0 (got {b:?})"
            )));
        }
        if !(self.paraphrase_noise >= 0.0) || !self.paraphrase_noise.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "paraphrase_noise must be finite and >= 0, got {}",
                self.paraphrase_noise
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerEditRecord {
    pub edit_id: usize,
    pub method: Method,
    pub beta: f64,
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub edit_loss_final: f64,
    pub loc_loss_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRecord {
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub per_edit: Vec<PerEditRecord>,
    pub config: ExperimentConfig,
}

impl ResultsRecord {
    pub fn aggregates(&self) -> Aggregates {
        aggregate(
            &self.per_edit,
            self.config.paraphrase_count,
            self.config.locality_count,
        )
    }
}

/// Everything needed to execute one edit, independent of the method.
#[derive(Debug, Clone)]
pub struct EditCase {
    pub edit_id: usize,
    pub model: SyntheticModel,
    pub request: EditRequest,
}

/// Model used by every edit of a suite; projection runs get projectors on
/// every layer.
pub fn suite_model(cfg: &ExperimentConfig) -> Result<SyntheticModel> {
    let mut model = gen_model(&cfg.geometry)?;
    if cfg.method == Method::ProjectionOnly {
        for layer in &mut model.layers {
            layer.projector = Some(complement_projector(&layer.covariance, PROTECTED_FRACTION));
        }
    }
    Ok(model)
}

/// Per-edit generator, seeded so each edit is independent of suite order.
fn edit_rng(seed: u64, edit_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(edit_id as u64 + 1);
    rng
}

fn easy_key(eigvecs: &Matrix, n: usize, norm: f64, rng: &mut ChaCha8Rng) -> Vector {
    let d0 = eigvecs.ncols();
    let low = eigvecs.columns(d0 - n, n).into_owned();
    let dir = unit_vector(n, rng);
    low * dir * norm
}

fn paraphrase(key: &Vector, noise: f64, rng: &mut ChaCha8Rng) -> Vector {
    let norm = key.norm();
    let p = key + unit_vector(key.len(), rng) * (noise * norm);
    let n = p.norm();
    p * (norm / n)
}

/// Key drawn from `N(0, C)` (the population the covariance describes),
/// rescaled to the edit key's norm and kept nearly orthogonal to it.
fn locality_key(edit_key: &Vector, cov_sqrt: &Matrix, rng: &mut ChaCha8Rng) -> Vector {
    let norm = edit_key.norm();
    loop {
        let k = cov_sqrt * gaussian_vector(edit_key.len(), rng);
        let cos = k.dot(edit_key) / (k.norm() * norm);
        if cos.abs() < 0.1 {
            return &k * (norm / k.norm());
        }
    }
}

/// Builds edit `edit_id` of the suite on `base`.
pub fn build_case(
    cfg: &ExperimentConfig,
    base: &SyntheticModel,
    edit_id: usize,
) -> Result<EditCase> {
    let mut rng = edit_rng(cfg.seed, edit_id);
    let eig = sym_eigen(&base.last_layer().covariance);
    let root = eig.values.map(|x| x.max(0.0).sqrt());
    let cov_sqrt = &eig.vectors * Matrix::from_diagonal(&root) * eig.vectors.transpose();
    let n = protected_count(base.d0(), PROTECTED_FRACTION);
    let hard = match cfg.edit_difficulty {
        EditDifficulty::Hard => true,
        EditDifficulty::Easy => false,
        EditDifficulty::Mixed => edit_id.is_multiple_of(2),
    };
    let norm = cfg.geometry.key_norm;
    let key = if hard {
        protected_key(&eig.vectors, n, cfg.geometry.protected_mass, norm, &mut rng)
    } else {
        easy_key(&eig.vectors, n, norm, &mut rng)
    };
    let model = base.rekeyed(&key)?;
    let current = argmax(&model.forward(&key, None)?);
    let pick = rng.random_range(0..model.vocab() - 1);
    let target_class = if pick >= current { pick + 1 } else { pick };
    let mut request = EditRequest::at_stored_value(&model, target_class);
    request.reg_weight = cfg.metake_params.reg_weight;
    request.paraphrase_keys = (0..cfg.paraphrase_count)
        .map(|_| paraphrase(&key, cfg.paraphrase_noise, &mut rng))
        .collect();
    request.locality_keys = (0..cfg.locality_count)
        .map(|_| locality_key(&key, &cov_sqrt, &mut rng))
        .collect();
    Ok(EditCase {
        edit_id,
        model,
        request,
    })
}

/// Target value produced by `method` before the final solve.
pub fn plan_target(
    cfg: &ExperimentConfig,
    case: &EditCase,
    gate: &StructuralGate,
) -> Result<(Vector, Option<MetaTrace>)> {
    let b = &cfg.baseline_params;
    match cfg.method {
        Method::Metake => {
            let trace = metake_run_with_gate(
                &case.model,
                gate,
                &case.request,
                &cfg.metake_params.params(),
            )?;
            Ok((trace.final_v_star(), Some(trace)))
        }
        Method::StaticBaseline => Ok((
            static_target_baseline(&case.model, &case.request, b.lambda_up, b.steps, b.lr)?,
            None,
        )),
        // One unpenalized planning step; the solver does the rest.
        Method::RidgeOnly | Method::ProjectionOnly => Ok((
            static_target_baseline(&case.model, &case.request, 0.0, 1, b.lr)?,
            None,
        )),
    }
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

/// Runs one edit on its own copy of the model.
pub fn run_case(
    cfg: &ExperimentConfig,
    case: &EditCase,
) -> Result<(PerEditRecord, Option<MetaTrace>)> {
    let model = &case.model;
    let request = &case.request;
    let gate = StructuralGate::for_model(model)?;
    let (v_star, trace) = plan_target(cfg, case, &gate)?;
    let edit_set: Vec<usize> = (0..model.n_layers()).collect();
    let plan = allocate_residual(model, &v_star, &edit_set, cfg.allocation)?;
    let solved = solve_multilayer(model, &plan)?;
    let edited = model.with_updates(&updates_of(&solved))?;

    let hit = |key: &Vector| -> Result<bool> {
        Ok(argmax(&edited.forward(key, None)?) == request.target_class)
    };
    let efficacy = if hit(&request.edit_key)? { 1.0 } else { 0.0 };
    let mut general = 0;
    for key in &request.paraphrase_keys {
        general += usize::from(hit(key)?);
    }
    let mut kept = 0;
    for key in &request.locality_keys {
        let before = argmax(&model.forward(key, None)?);
        kept += usize::from(argmax(&edited.forward(key, None)?) == before);
    }
    let overrides = edited
        .layers
        .iter()
        .map(|l| l.weight.clone())
        .enumerate()
        .collect();
    let losses = meta_loss_with(model, &overrides, request, None)?;
    if !losses.edit_loss.is_finite() || !losses.loc_loss.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            trace: None,
        });
    }
    let record = PerEditRecord {
        edit_id: case.edit_id,
        method: cfg.method,
        beta: solved[&model.last()].beta,
        efficacy,
        generalization: fraction(general, request.paraphrase_keys.len()),
        specificity: fraction(kept, request.locality_keys.len()),
        edit_loss_final: losses.edit_loss,
        loc_loss_final: losses.loc_loss,
    };
    Ok((record, trace))
}

/// Worker count from [`THREADS_ENV`], defaulting to the machine's parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs the suite and keeps the per-edit optimizer traces.
pub fn run_experiment_with_traces(
    cfg: &ExperimentConfig,
) -> Result<(ResultsRecord, Vec<Option<MetaTrace>>)> {
    cfg.validate()?;
    let base = suite_model(cfg)?;
    let run = |id: usize| -> Result<(PerEditRecord, Option<MetaTrace>)> {
        build_case(cfg, &base, id)
            .and_then(|case| run_case(cfg, &case))
            .map_err(|e| Error::Edit {
                edit_id: id,
                source: Box::new(e),
            })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let outcomes: Vec<_> = pool.install(|| {
        (0..cfg.n_edits)
            .into_par_iter()
            .map(run)
            .collect::<Result<Vec<_>>>()
    })?;
    let (per_edit, traces): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let agg = aggregate(&per_edit, cfg.paraphrase_count, cfg.locality_count);
    Ok((
        ResultsRecord {
            efficacy: agg.efficacy,
            generalization: agg.generalization,
            specificity: agg.specificity,
            per_edit,
            config: cfg.clone(),
        },
        traces,
    ))
}

/// Independent-edit protocol: each edit is applied to a fresh copy of the
/// suite model and scored there.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsRecord> {
    Ok(run_experiment_with_traces(cfg)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kappa: f64,
    pub protected_mass: f64,
    pub method: Method,
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub mean_beta: f64,
}

/// Grid over condition number × protected mass × method.
pub fn run_sweep(
    base: &ExperimentConfig,
    kappas: &[f64],
    masses: &[f64],
    methods: &[Method],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(kappas.len() * masses.len() * methods.len());
    for &kappa in kappas {
        for &protected_mass in masses {
            for &method in methods {
                let mut cfg = base.clone();
                cfg.geometry.kappa = kappa;
                cfg.geometry.protected_mass = protected_mass;
                cfg.method = method;
                let rec = run_experiment(&cfg)?;
                let n = rec.per_edit.len().max(1) as f64;
                rows.push(SweepRow {
                    kappa,
                    protected_mass,
                    method,
                    efficacy: rec.efficacy,
                    generalization: rec.generalization,
                    specificity: rec.specificity,
                    mean_beta: rec.per_edit.iter().map(|r| r.beta).sum::<f64>() / n,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            geometry: GeometryConfig {
                d0: 8,
                d1: 8,
                vocab: 5,
                seed: 3,
                ..Default::default()
            },
            n_edits: 6,
            method,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn isotropic_single_easy_edit_succeeds() {
        for method in Method::ALL {
            let mut cfg = small(method);
            cfg.geometry.kappa = 1.0;
            cfg.geometry.ridge = 1e-3;
            cfg.n_edits = 1;
            cfg.edit_difficulty = EditDifficulty::Easy;
            cfg.metake_params = MetakeSettings {
                eta: 1.0,
                steps: 50,
                ..Default::default()
            };
            cfg.baseline_params = BaselineParams {
                lambda_up: 0.0,
                steps: 200,
                lr: 1.0,
            };
            if matches!(method, Method::RidgeOnly | Method::ProjectionOnly) {
                cfg.baseline_params.lr = 20.0;
            }
            let rec = run_experiment(&cfg).unwrap();
            assert_eq!(rec.efficacy, 1.0, "{method:?}: {:?}", rec.per_edit);
        }
    }

    #[test]
    fn empty_locality_is_vacuous() {
        let mut cfg = small(Method::Metake);
        cfg.locality_count = 0;
        let rec = run_experiment(&cfg).unwrap();
        assert_eq!(rec.specificity, 1.0);
        assert!(rec.aggregates().specificity_vacuous);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let cfg = small(Method::Metake);
        assert_eq!(run_experiment(&cfg).unwrap(), run_experiment(&cfg).unwrap());
    }

    #[test]
    fn edit_order_does_not_matter() {
        let cfg = small(Method::StaticBaseline);
        let base = suite_model(&cfg).unwrap();
        let forward: Vec<_> = (0..cfg.n_edits)
            .map(|i| {
                run_case(&cfg, &build_case(&cfg, &base, i).unwrap())
                    .unwrap()
                    .0
            })
            .collect();
        let mut backward: Vec<_> = (0..cfg.n_edits)
            .rev()
            .map(|i| {
                run_case(&cfg, &build_case(&cfg, &base, i).unwrap())
                    .unwrap()
                    .0
            })
            .collect();
        backward.reverse();
        assert_eq!(forward, backward);
        let rec = run_experiment(&cfg).unwrap();
        assert_eq!(rec.per_edit, forward);
    }

    #[test]
    fn generated_keys_respect_construction() {
        let mut cfg = small(Method::Metake);
        cfg.geometry.kappa = 1e3;
        cfg.geometry.protected_mass = 0.9;
        cfg.edit_difficulty = EditDifficulty::Mixed;
        let base = suite_model(&cfg).unwrap();
        let eig = sym_eigen(&base.last_layer().covariance);
        let n = protected_count(8, PROTECTED_FRACTION);
        for id in 0..4 {
            let case = build_case(&cfg, &base, id).unwrap();
            let k = &case.request.edit_key;
            let top = eig.vectors.columns(0, n).tr_mul(k).norm_squared() / k.norm_squared();
            if id % 2 == 0 {
                assert!((top - 0.9).abs() < 1e-10);
            } else {
                assert!(top < 1e-20);
            }
            for loc in &case.request.locality_keys {
                assert!((loc.dot(k) / (loc.norm() * k.norm())).abs() < 0.1);
            }
            for p in &case.request.paraphrase_keys {
                assert!((p.norm() - k.norm()).abs() < 1e-12);
            }
            let current = argmax(&case.model.forward(k, None).unwrap());
            assert_ne!(current, case.request.target_class);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.name())
            );
        }
        assert!("alphaedit".parse::<Method>().is_err());
    }

    #[test]
    fn config_json_uses_documented_names() {
        let text = serde_json::to_string(&ExperimentConfig::default()).unwrap();
        assert!(text.contains("\"T\":15"));
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ExperimentConfig::default());
    }
}
