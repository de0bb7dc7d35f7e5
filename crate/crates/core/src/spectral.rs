//! Spectral diagnostics: attenuation in eigen-coordinates, suppression
//! bounds, penalty/trust-region radii, ball–ellipsoid mismatch and the
//! two-instance witness showing no shared isotropic penalty fits both an easy
//! and a hard request.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    ensure_len, ensure_square, max_asymmetry, psd_eigen, random_orthogonal, sym_eigen, unit_vector,
    Matrix, SpdFactor, Vector,
};
use crate::memory_model::protected_count;

const ASYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    /// Eigenvalues of `C`, descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// `(u_jᵀk)²` for each eigendirection.
    pub key_alignment: Vec<f64>,
    pub gamma: f64,
    pub beta: f64,
    pub protected_set: Vec<usize>,
    /// `‖k‖²/(‖k‖² + σ²_min,S + λ)`; valid as a bound when the key lies in S.
    pub suppression_upper_bound: f64,
    /// Fraction of `‖k‖²` carried by the protected set.
    pub protected_mass: f64,
}

pub fn spectral_report(
    c: &Matrix,
    ridge: f64,
    k: &Vector,
    protected_fraction: f64,
) -> Result<SpectralReport> {
    ensure_square(c, "covariance")?;
    ensure_len(k, c.nrows(), "key")?;
    if !(ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "ridge must be >= 0, got {ridge}"
        )));
    }
    if !(0.0..=1.0).contains(&protected_fraction) {
        return Err(Error::InvalidConfig(format!(
            "protected fraction must lie in [0,1], got {protected_fraction}"
        )));
    }
    let asym = max_asymmetry(c);
    if asym > ASYMMETRY_TOL {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let d0 = c.nrows();
    let eig = psd_eigen(c);
    let top = eig.values.iter().fold(0.0_f64, |a, &b| a.max(b)) + ridge;
    let floor = eig.values.iter().fold(f64::INFINITY, |a, &b| a.min(b)) + ridge;
    if !(floor > 1e-14 * top.max(f64::MIN_POSITIVE)) {
        return Err(Error::SingularGeometry(format!(
            "smallest effective eigenvalue {floor:e} is not positive"
        )));
    }
    let key_alignment: Vec<f64> = (0..d0)
        .map(|j| eig.vectors.column(j).dot(k).powi(2))
        .collect();
    let gamma: f64 = key_alignment
        .iter()
        .zip(eig.values.iter())
        .map(|(a, s)| a / (s + ridge))
        .sum();
    let s = protected_count(d0, protected_fraction);
    let protected_set: Vec<usize> = (0..s).collect();
    let energy = k.norm_squared();
    let sigma_min_s = if s > 0 {
        eig.values[s - 1]
    } else {
        f64::INFINITY
    };
    let suppression_upper_bound = if s > 0 {
        energy / (energy + sigma_min_s + ridge)
    } else {
        1.0
    };
    let inside: f64 = key_alignment[..s].iter().sum();
    Ok(SpectralReport {
        eigenvalues: eig.values.iter().copied().collect(),
        key_alignment,
        gamma,
        beta: gamma / (1.0 + gamma),
        protected_set,
        suppression_upper_bound,
        protected_mass: if energy > 0.0 { inside / energy } else { 0.0 },
    })
}

/// Penalized step `u*(λ) = −(H + λI)⁻¹g`.
pub fn penalized_step(h: &Matrix, g: &Vector, lambda_up: f64) -> Result<Vector> {
    ensure_square(h, "trust-region Hessian")?;
    ensure_len(g, h.nrows(), "trust-region gradient")?;
    let mut shifted = h.clone();
    for i in 0..shifted.nrows() {
        shifted[(i, i)] += lambda_up;
    }
    let factor = SpdFactor::new(&shifted, "H + λI")?;
    Ok(-factor.solve(g))
}

/// Radius `r(λ) = ‖(H + λI)⁻¹g‖₂` of the trust region equivalent to the
/// isotropic penalty `λ`.
pub fn trust_region_radius(h: &Matrix, g: &Vector, lambda_up: f64) -> Result<f64> {
    Ok(penalized_step(h, g, lambda_up)?.norm())
}

/// `A + εI` with `ε = 1e-8·λ_max(A)` when `A` is singular; `A` otherwise.
pub fn regularize_feasibility(a: &Matrix) -> Result<Matrix> {
    ensure_square(a, "feasibility matrix")?;
    let e = sym_eigen(a);
    let (lo, hi) = (e.values.min(), e.values.max());
    if hi <= 0.0 {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: lo });
    }
    if lo > 1e-12 * hi {
        return Ok(a.clone());
    }
    let eps = 1e-8 * hi;
    let mut out = a.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += eps;
    }
    Ok(out)
}

fn spd_extremes(a: &Matrix) -> Result<(f64, f64, Vector, Vector)> {
    ensure_square(a, "feasibility matrix")?;
    let asym = max_asymmetry(a);
    if asym > ASYMMETRY_TOL {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let e = sym_eigen(a);
    let n = a.nrows();
    let (hi, lo) = (e.values[0], e.values[n - 1]);
    if !(lo > 0.0) {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: lo });
    }
    Ok((
        lo,
        hi,
        e.vectors.column(n - 1).into_owned(),
        e.vectors.column(0).into_owned(),
    ))
}

/// Ratio `√(λ_max/λ_min)` between the smallest circumscribed and the largest
/// inscribed ball of `{u : uᵀAu ≤ τ}`.
pub fn ball_ellipsoid_gap(a_eps: &Matrix) -> Result<f64> {
    let (lo, hi, _, _) = spd_extremes(a_eps)?;
    Ok((hi / lo).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionCheck {
    pub inscribed_radius: f64,
    pub circumscribed_radius: f64,
    /// Largest `uᵀAu/τ` over sampled points of the shrunk inscribed sphere.
    pub worst_inscribed_ratio: f64,
    /// `uᵀAu/τ` at `√(τ/λ_min)·e_min`.
    pub extreme_point_ratio: f64,
    /// Norm range of sampled points on `∂F(τ)`.
    pub boundary_norm_min: f64,
    pub boundary_norm_max: f64,
    pub holds: bool,
}

/// Monte-Carlo check of both ball inclusions for `F(τ) = {u : uᵀAu ≤ τ}`.
pub fn check_ball_inclusions(
    a_eps: &Matrix,
    tau: f64,
    samples: usize,
    seed: u64,
) -> Result<InclusionCheck> {
    let (lo, hi, e_min, _) = spd_extremes(a_eps)?;
    if !(tau > 0.0) {
        return Err(Error::PreconditionViolated(format!(
            "τ must be > 0, got {tau}"
        )));
    }
    let n = a_eps.nrows();
    let inscribed = (tau / hi).sqrt();
    let circumscribed = (tau / lo).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quad = |u: &Vector| u.dot(&(a_eps * u));
    let shrink = 1.0 - 1e-9;
    let mut worst = 0.0_f64;
    let mut bmin = f64::INFINITY;
    let mut bmax = 0.0_f64;
    for _ in 0..samples {
        let x = unit_vector(n, &mut rng);
        worst = worst.max(quad(&(&x * (inscribed * shrink))) / tau);
        // Boundary point of F(τ) along direction x.
        let b = &x * (tau / quad(&x)).sqrt();
        bmin = bmin.min(b.norm());
        bmax = bmax.max(b.norm());
    }
    let extreme = &e_min * circumscribed;
    let extreme_point_ratio = quad(&extreme) / tau;
    let slack = 1e-9;
    let holds = worst <= 1.0
        && (extreme_point_ratio - 1.0).abs() <= slack
        && bmax <= circumscribed * (1.0 + slack)
        && bmin >= inscribed * (1.0 - slack);
    Ok(InclusionCheck {
        inscribed_radius: inscribed,
        circumscribed_radius: circumscribed,
        worst_inscribed_ratio: worst,
        extreme_point_ratio,
        boundary_norm_min: bmin,
        boundary_norm_max: bmax,
        holds,
    })
}

/// Interval of penalty strengths; `upper = None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaInterval {
    pub lower: f64,
    pub upper: Option<f64>,
}

impl LambdaInterval {
    pub fn contains(&self, lambda: f64) -> bool {
        lambda >= self.lower && self.upper.is_none_or(|u| lambda <= u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapWitness {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub tau: f64,
    pub a: f64,
    pub b: f64,
    pub m: f64,
    /// `(0, a/m]`: strengths letting the easy request progress by `m`.
    pub easy_interval: LambdaInterval,
    /// `[b·√(λ_max/τ), ∞)`: strengths keeping the hard request feasible.
    pub hard_interval: LambdaInterval,
    pub feasible: bool,
}

pub fn static_trap_witness(
    lambda_min: f64,
    lambda_max: f64,
    tau: f64,
    a: f64,
    b: f64,
    m: f64,
) -> Result<TrapWitness> {
    let positive = [lambda_min, lambda_max, tau, a, b, m]
        .iter()
        .all(|x| *x > 0.0 && !x.is_nan());
    if !positive || lambda_max < lambda_min {
        return Err(Error::PreconditionViolated(format!(
            "need positive inputs with λ_max >= λ_min (λ_min={lambda_min}, λ_max={lambda_max}, τ={tau}, a={a}, b={b}, m={m})"
        )));
    }
    let easy_upper = a / m;
    let hard_lower = b * (lambda_max / tau).sqrt();
    Ok(TrapWitness {
        lambda_min,
        lambda_max,
        tau,
        a,
        b,
        m,
        easy_interval: LambdaInterval {
            lower: 0.0,
            upper: Some(easy_upper),
        },
        hard_interval: LambdaInterval {
            lower: hard_lower,
            upper: None,
        },
        feasible: hard_lower <= easy_upper,
    })
}

/// Relative slack so the closed interval endpoints survive roundoff.
const BOUNDARY_SLACK: f64 = 1e-12;

/// The two requests of a witness instantiated on `A_ε = diag(λ_max, λ_min)`
/// with a zero local Hessian.
#[derive(Debug, Clone)]
pub struct TrapInstance {
    pub a_eps: Matrix,
    pub e_min: Vector,
    pub g_easy: Vector,
    pub g_hard: Vector,
    pub tau: f64,
    pub m: f64,
}

impl TrapInstance {
    pub fn new(w: &TrapWitness) -> Self {
        let a_eps = Matrix::from_diagonal(&Vector::from_vec(vec![w.lambda_max, w.lambda_min]));
        let e_max = Vector::from_vec(vec![1.0, 0.0]);
        let e_min = Vector::from_vec(vec![0.0, 1.0]);
        Self {
            a_eps,
            g_easy: &e_min * -w.a,
            g_hard: e_max * -w.b,
            e_min,
            tau: w.tau,
            m: w.m,
        }
    }

    /// `|e_minᵀ u_E(λ)| ≥ m`.
    pub fn easy_progresses(&self, lambda: f64) -> Result<bool> {
        let u = penalized_step(&Matrix::zeros(2, 2), &self.g_easy, lambda)?;
        Ok(self.e_min.dot(&u).abs() >= self.m * (1.0 - BOUNDARY_SLACK))
    }

    /// `u_H(λ)ᵀ A_ε u_H(λ) ≤ τ`.
    pub fn hard_feasible(&self, lambda: f64) -> Result<bool> {
        let u = penalized_step(&Matrix::zeros(2, 2), &self.g_hard, lambda)?;
        Ok(u.dot(&(&self.a_eps * &u)) <= self.tau * (1.0 + BOUNDARY_SLACK))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapScan {
    pub grid_points: usize,
    pub grid_low: f64,
    pub grid_high: f64,
    pub satisfying: usize,
    pub first_satisfying: Option<f64>,
}

/// Log-grid scan of shared penalty strengths over `(0, 10·b√(λ_max/τ)]`,
/// counting strengths that satisfy both the easy progress predicate and the
/// hard feasibility predicate.
pub fn scan_shared_lambda(w: &TrapWitness, points: usize) -> Result<TrapScan> {
    let inst = TrapInstance::new(w);
    let high = 10.0 * w.hard_interval.lower;
    let low = high * 1e-8;
    let mut satisfying = 0;
    let mut first = None;
    for i in 0..points {
        let t = if points > 1 {
            i as f64 / (points - 1) as f64
        } else {
            1.0
        };
        let lambda = (low.ln() + t * (high.ln() - low.ln())).exp();
        if inst.easy_progresses(lambda)? && inst.hard_feasible(lambda)? {
            satisfying += 1;
            first.get_or_insert(lambda);
        }
    }
    Ok(TrapScan {
        grid_points: points,
        grid_low: low,
        grid_high: high,
        satisfying,
        first_satisfying: first,
    })
}

/// Progress threshold `m = Δ/‖P_good·w‖` implied by a required logit margin.
pub fn margin_to_progress(delta_logit: f64, w_target: &Vector, p_good: &Matrix) -> Result<f64> {
    ensure_square(p_good, "progress projector")?;
    ensure_len(w_target, p_good.nrows(), "target readout row")?;
    let norm = (p_good * w_target).norm();
    if !(norm > 1e-12) {
        return Err(Error::AnnihilatedTarget { norm });
    }
    Ok(delta_logit / norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionPoint {
    pub sigma_min_protected: f64,
    pub beta: f64,
    pub bound: f64,
}

/// Attenuation of a key held inside the protected subspace while the
/// protected eigenvalues are raised through `levels`.
///
/// The basis, the unprotected spectrum and the key are fixed by `seed`; the
/// protected eigenvalues at level `s` are `s·(1 + j/|S|)` so the smallest one
/// equals `s`.
pub fn suppression_sweep(
    d0: usize,
    ridge: f64,
    levels: &[f64],
    seed: u64,
) -> Result<Vec<SuppressionPoint>> {
    if d0 < 2 {
        return Err(Error::InvalidConfig(
            "suppression sweep needs d0 >= 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = random_orthogonal(d0, &mut rng);
    let s = protected_count(d0, crate::memory_model::PROTECTED_FRACTION);
    let tail: Vec<f64> = (s..d0).map(|_| rng.random_range(0.1..1.0)).collect();
    let coords = unit_vector(s, &mut rng) * rng.random_range(0.5..2.0);
    let key = basis.columns(0, s) * coords;
    levels
        .iter()
        .map(|&level| {
            let mut spectrum = Vec::with_capacity(d0);
            spectrum.extend((0..s).map(|j| level * (1.0 + (s - 1 - j) as f64 / s as f64)));
            spectrum.extend(tail.iter().copied());
            let c = crate::linalg::symmetrize(
                &(&basis * Matrix::from_diagonal(&Vector::from_vec(spectrum)) * basis.transpose()),
            );
            let report = spectral_report(&c, ridge, &key, crate::memory_model::PROTECTED_FRACTION)?;
            let energy = key.norm_squared();
            Ok(SuppressionPoint {
                sigma_min_protected: level,
                beta: report.beta,
                bound: energy / (energy + level + ridge),
            })
        })
        .collect()
}
