//! Synthetic multi-layer linear associative memories.
//!
//! Every layer stores a value-writing matrix `W`, the frozen key `k` it was
//! located at, the uncentered covariance `C` of previously stored keys and a
//! ridge coefficient. The hidden state for an input key is the residual sum
//! `h0 + Σ_l W_l·key`, read out through a softmax head `U`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    ensure_len, ensure_square, gaussian_matrix, gaussian_vector, matrix_to_rows, max_asymmetry,
    outer, random_orthogonal, rows_to_matrix, sym_extremes, symmetrize, unit_vector, Matrix,
    Vector,
};

/// Layer index → replacement weight, used for pure what-if evaluations.
pub type WeightOverrides = BTreeMap<usize, Matrix>;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;
const PROJECTOR_TOL: f64 = 1e-10;

/// Default fraction of eigendirections treated as the protected subspace.
pub const PROTECTED_FRACTION: f64 = 0.25;

/// Size of the protected (top-eigenvalue) set for a given dimension.
pub fn protected_count(d0: usize, fraction: f64) -> usize {
    ((fraction * d0 as f64).ceil() as usize).clamp(if fraction > 0.0 { 1 } else { 0 }, d0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMemory {
    pub weight: Matrix,
    pub key: Vector,
    pub covariance: Matrix,
    pub ridge: f64,
    pub projector: Option<Matrix>,
}

impl LayerMemory {
    pub fn new(
        weight: Matrix,
        key: Vector,
        covariance: Matrix,
        ridge: f64,
        projector: Option<Matrix>,
    ) -> Result<Self> {
        let layer = Self {
            weight,
            key,
            covariance,
            ridge,
            projector,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn d0(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d1(&self) -> usize {
        self.weight.nrows()
    }

    /// `C + ridge·I`.
    pub fn effective_geometry(&self) -> Matrix {
        let mut c = self.covariance.clone();
        for i in 0..c.nrows() {
            c[(i, i)] += self.ridge;
        }
        c
    }

    /// Pre-edit value `W·k`.
    pub fn stored_value(&self) -> Vector {
        &self.weight * &self.key
    }

    pub fn validate(&self) -> Result<()> {
        let d0 = self.d0();
        ensure_len(&self.key, d0, "layer key")?;
        ensure_square(&self.covariance, "layer covariance")?;
        if self.covariance.nrows() != d0 {
            return Err(Error::DimensionMismatch {
                context: "layer covariance",
                expected: d0,
                found: self.covariance.nrows(),
            });
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "ridge must be >= 0, got {}",
                self.ridge
            )));
        }
        let asym = max_asymmetry(&self.covariance);
        if asym > SYMMETRY_TOL {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        if d0 > 0 {
            let (lo, _) = sym_extremes(&self.covariance);
            if lo < -PSD_TOL {
                return Err(Error::NotPositiveDefinite { min_eigenvalue: lo });
            }
        }
        if let Some(p) = &self.projector {
            ensure_square(p, "layer projector")?;
            if p.nrows() != d0 {
                return Err(Error::DimensionMismatch {
                    context: "layer projector",
                    expected: d0,
                    found: p.nrows(),
                });
            }
            let idem = (p * p - p).norm();
            let sym = (p - p.transpose()).norm();
            if idem > PROJECTOR_TOL || sym > PROJECTOR_TOL {
                return Err(Error::InvalidConfig(format!(
                    "projector is not an orthogonal projector (‖P²−P‖={idem:e}, ‖P−Pᵀ‖={sym:e})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub d0: usize,
    pub d1: usize,
    #[serde(alias = "V")]
    pub vocab: usize,
    pub n_layers: usize,
    pub kappa: f64,
    pub protected_mass: f64,
    #[serde(alias = "eps_C")]
    pub eps_c: f64,
    pub eps_k: f64,
    pub seed: u64,
    /// Ridge coefficient shared by every layer.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// Euclidean norm of the generated final-layer key.
    #[serde(default = "default_key_norm")]
    pub key_norm: f64,
    /// Smallest covariance eigenvalue; the largest is `kappa` times this.
    #[serde(default = "default_spectrum_floor")]
    pub spectrum_floor: f64,
}

fn default_ridge() -> f64 {
    1e-2
}

fn default_spectrum_floor() -> f64 {
    1.0
}

fn default_key_norm() -> f64 {
    1.0
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            d0: 16,
            d1: 16,
            vocab: 8,
            n_layers: 3,
            kappa: 1e2,
            protected_mass: 0.5,
            eps_c: 0.0,
            eps_k: 0.0,
            seed: 0,
            ridge: default_ridge(),
            key_norm: default_key_norm(),
            spectrum_floor: default_spectrum_floor(),
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d0 < 2 || self.d1 == 0 || self.n_layers == 0 {
            return bad(format!(
                "need d0 >= 2, d1 >= 1, n_layers >= 1 (got d0={}, d1={}, n_layers={})",
                self.d0, self.d1, self.n_layers
            ));
        }
        if self.vocab < 2 {
            return bad(format!(
                "vocabulary needs at least 2 classes, got {}",
                self.vocab
            ));
        }
        if !(self.kappa >= 1.0) || !self.kappa.is_finite() {
            return bad(format!("kappa must be >= 1, got {}", self.kappa));
        }
        if !(0.0..=1.0).contains(&self.protected_mass) {
            return bad(format!(
                "protected_mass must lie in [0,1], got {}",
                self.protected_mass
            ));
        }
        if !(self.eps_c >= 0.0) || !(self.eps_k >= 0.0) {
            return bad(format!(
                "drift magnitudes must be >= 0 (eps_c={}, eps_k={})",
                self.eps_c, self.eps_k
            ));
        }
        if !(self.spectrum_floor > 0.0) || !self.spectrum_floor.is_finite() {
            return bad(format!(
                "spectrum_floor must be finite and > 0, got {}",
                self.spectrum_floor
            ));
        }
        if !(self.ridge >= 0.0) || !(self.key_norm > 0.0) {
            return bad(format!(
                "need ridge >= 0 and key_norm > 0 (ridge={}, key_norm={})",
                self.ridge, self.key_norm
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    pub layers: Vec<LayerMemory>,
    pub readout: Matrix,
    pub base_hidden: Vector,
    pub config: Option<GeometryConfig>,
}

impl SyntheticModel {
    pub fn new(layers: Vec<LayerMemory>, readout: Matrix, base_hidden: Vector) -> Result<Self> {
        let model = Self {
            layers,
            readout,
            base_hidden,
            config: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn d0(&self) -> usize {
        self.layers[0].d0()
    }

    pub fn d1(&self) -> usize {
        self.layers[0].d1()
    }

    pub fn vocab(&self) -> usize {
        self.readout.nrows()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Index of the final (proxy) layer `L`.
    pub fn last(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn last_layer(&self) -> &LayerMemory {
        &self.layers[self.last()]
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or(Error::EmptyInput("model layers"))?;
        let (d0, d1) = (first.d0(), first.d1());
        for layer in &self.layers {
            layer.validate()?;
            if layer.d0() != d0 || layer.d1() != d1 {
                return Err(Error::DimensionMismatch {
                    context: "layer shapes",
                    expected: d0 * d1,
                    found: layer.d0() * layer.d1(),
                });
            }
        }
        if self.readout.ncols() != d1 {
            return Err(Error::DimensionMismatch {
                context: "readout columns",
                expected: d1,
                found: self.readout.ncols(),
            });
        }
        if self.readout.nrows() < 2 {
            return Err(Error::InvalidConfig(
                "readout needs at least 2 classes".into(),
            ));
        }
        ensure_len(&self.base_hidden, d1, "base hidden state")
    }

    /// Residual-stream hidden state `h0 + Σ_l W_l·key`, with overridden weights
    /// substituted where given.
    pub fn hidden(&self, key: &Vector, overrides: Option<&WeightOverrides>) -> Result<Vector> {
        ensure_len(key, self.d0(), "forward key")?;
        let mut h = self.base_hidden.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = overrides.and_then(|o| o.get(&l)).unwrap_or(&layer.weight);
            if w.shape() != layer.weight.shape() {
                return Err(Error::DimensionMismatch {
                    context: "weight override",
                    expected: layer.weight.len(),
                    found: w.len(),
                });
            }
            h.gemv(1.0, w, key, 1.0);
        }
        Ok(h)
    }

    /// Class logits `U·(h0 + Σ_l W_l·key)`.
    pub fn forward(&self, key: &Vector, overrides: Option<&WeightOverrides>) -> Result<Vector> {
        Ok(&self.readout * self.hidden(key, overrides)?)
    }

    /// Copy of the model whose final-layer key is `key`; every other layer
    /// keeps its offset `k_l − k_L`, so key drift is preserved.
    pub fn rekeyed(&self, key: &Vector) -> Result<Self> {
        ensure_len(key, self.d0(), "rekey")?;
        let old = self.last_layer().key.clone();
        let mut out = self.clone();
        for layer in &mut out.layers {
            layer.key = key + (&layer.key - &old);
        }
        Ok(out)
    }

    /// Copy with `W_l += Δ_l` for each supplied update.
    pub fn with_updates(&self, updates: &BTreeMap<usize, Matrix>) -> Result<Self> {
        let mut out = self.clone();
        for (&l, delta) in updates {
            let layer = out.layers.get_mut(l).ok_or(Error::DimensionMismatch {
                context: "update layer index",
                expected: self.layers.len(),
                found: l,
            })?;
            if delta.shape() != layer.weight.shape() {
                return Err(Error::DimensionMismatch {
                    context: "weight update",
                    expected: layer.weight.len(),
                    found: delta.len(),
                });
            }
            layer.weight += delta;
        }
        Ok(out)
    }

    /// Largest `‖C_l − C_L‖₂` and `‖k_l − k_L‖₂` over the stack.
    pub fn measured_drift(&self) -> (f64, f64) {
        let last = self.last_layer();
        self.layers
            .iter()
            .fold((0.0_f64, 0.0_f64), |(dc, dk), layer| {
                let c = crate::linalg::spectral_norm(&(&layer.covariance - &last.covariance));
                let k = (&layer.key - &last.key).norm();
                (dc.max(c), dk.max(k))
            })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        doc.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// `Σ_i k_i k_iᵀ` over the rows of `keys`.
pub fn covariance_of(keys: &Matrix) -> Result<Matrix> {
    if keys.nrows() == 0 {
        return Err(Error::EmptyInput("key set"));
    }
    Ok(symmetrize(&(keys.transpose() * keys)))
}

/// Generates a synthetic model whose geometry realizes the requested dials.
///
/// The final layer covariance is `Q·diag(σ²)·Qᵀ` with a random orthogonal `Q`
/// and eigenvalues geometrically spaced from `kappa` down to 1. The final key
/// puts exactly `protected_mass` of its energy on the top
/// `⌈d0/4⌉` eigendirections. Earlier layers get a covariance perturbation of
/// spectral norm exactly `eps_c` and a key offset of norm exactly `eps_k`.
/// Random directions are drawn in a fixed order independent of the drift
/// magnitudes, so a sweep over `eps_c`/`eps_k` shares one base geometry.
pub fn gen_model(cfg: &GeometryConfig) -> Result<SyntheticModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d0, d1) = (cfg.d0, cfg.d1);

    let basis = random_orthogonal(d0, &mut rng);
    let spectrum = geometric_spectrum(d0, cfg.kappa) * cfg.spectrum_floor;
    let cov_last = symmetrize(&(&basis * Matrix::from_diagonal(&spectrum) * basis.transpose()));

    let n_protected = protected_count(d0, PROTECTED_FRACTION);
    let key_last = protected_key(
        &basis,
        n_protected,
        cfg.protected_mass,
        cfg.key_norm,
        &mut rng,
    );

    let scale = 1.0 / (d0 as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let weight = gaussian_matrix(d1, d0, &mut rng) * scale;
        // Drift directions are always drawn so the stream is shared across sweeps.
        let drift_basis = random_orthogonal(d0, &mut rng);
        let mut signs: Vec<f64> = (0..d0).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let key_dir = unit_vector(d0, &mut rng);
        let is_last = l + 1 == cfg.n_layers;
        let (covariance, key) = if is_last {
            (cov_last.clone(), key_last.clone())
        } else {
            // Mixed-sign perturbations are kept only while they cannot break PSD.
            if cfg.eps_c >= spectrum[d0 - 1] {
                signs.iter_mut().for_each(|s| *s = s.abs());
            }
            let peak = signs
                .iter()
                .fold(0.0_f64, |a, s| a.max(s.abs()))
                .max(f64::MIN_POSITIVE);
            let diag = Vector::from_iterator(d0, signs.iter().map(|s| s / peak));
            let e = &drift_basis * Matrix::from_diagonal(&diag) * drift_basis.transpose();
            (
                symmetrize(&(&cov_last + e * cfg.eps_c)),
                &key_last + key_dir * cfg.eps_k,
            )
        };
        layers.push(LayerMemory {
            weight,
            key,
            covariance,
            ridge: cfg.ridge,
            projector: None,
        });
    }

    let mut readout = gaussian_matrix(cfg.vocab, d1, &mut rng);
    for mut row in readout.row_iter_mut() {
        let n = row.norm();
        row /= n;
    }
    let base_hidden = gaussian_vector(d1, &mut rng) * 0.1;

    let model = SyntheticModel {
        layers,
        readout,
        base_hidden,
        config: Some(cfg.clone()),
    };
    model.validate()?;
    Ok(model)
}

/// Eigenvalues `kappa^{(d−1−j)/(d−1)}`, descending from `kappa` to 1.
pub fn geometric_spectrum(d: usize, kappa: f64) -> Vector {
    if d == 1 {
        return Vector::from_element(1, 1.0);
    }
    let ln_k = kappa.ln();
    Vector::from_fn(d, |j, _| ((d - 1 - j) as f64 / (d - 1) as f64 * ln_k).exp())
}

/// Key of norm `norm` with `mass·norm²` of its energy on the first
/// `n_protected` columns of `basis` and the rest on the complement.
pub fn protected_key<R: Rng + ?Sized>(
    basis: &Matrix,
    n_protected: usize,
    mass: f64,
    norm: f64,
    rng: &mut R,
) -> Vector {
    let d0 = basis.nrows();
    let inside = unit_vector(n_protected.max(1), rng);
    let outside = unit_vector((d0 - n_protected).max(1), rng);
    let mut key = Vector::zeros(d0);
    if n_protected > 0 {
        key += basis.columns(0, n_protected) * inside * mass.sqrt();
    }
    if n_protected < d0 {
        key += basis.columns(n_protected, d0 - n_protected) * outside * (1.0 - mass).sqrt();
    }
    key * norm
}

/// Orthogonal projector onto the complement of the top-`fraction` eigenspace
/// of `covariance` (the "free" directions of a null-space editor).
pub fn complement_projector(covariance: &Matrix, fraction: f64) -> Matrix {
    let eig = crate::linalg::sym_eigen(covariance);
    let d0 = covariance.nrows();
    let s = protected_count(d0, fraction);
    let mut p = Matrix::zeros(d0, d0);
    for j in s..d0 {
        let u = eig.vectors.column(j).into_owned();
        p += outer(&u, &u);
    }
    symmetrize(&p)
}

#[derive(Debug, Serialize, Deserialize)]
struct Dims {
    d0: usize,
    d1: usize,
    vocab: usize,
    n_layers: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDocument {
    weight: Vec<Vec<f64>>,
    key: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    ridge: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    projector: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDocument {
    dims: Dims,
    layers: Vec<LayerDocument>,
    readout: Vec<Vec<f64>>,
    base_hidden: Vec<f64>,
    #[serde(default)]
    config: Option<GeometryConfig>,
}

impl From<&SyntheticModel> for ModelDocument {
    fn from(m: &SyntheticModel) -> Self {
        Self {
            dims: Dims {
                d0: m.d0(),
                d1: m.d1(),
                vocab: m.vocab(),
                n_layers: m.n_layers(),
            },
            layers: m
                .layers
                .iter()
                .map(|l| LayerDocument {
                    weight: matrix_to_rows(&l.weight),
                    key: l.key.iter().copied().collect(),
                    covariance: matrix_to_rows(&l.covariance),
                    ridge: l.ridge,
                    projector: l.projector.as_ref().map(matrix_to_rows),
                })
                .collect(),
            readout: matrix_to_rows(&m.readout),
            base_hidden: m.base_hidden.iter().copied().collect(),
            config: m.config.clone(),
        }
    }
}

impl TryFrom<ModelDocument> for SyntheticModel {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                Ok(LayerMemory {
                    weight: rows_to_matrix(&l.weight, "layer weight")?,
                    key: Vector::from_vec(l.key),
                    covariance: rows_to_matrix(&l.covariance, "layer covariance")?,
                    ridge: l.ridge,
                    projector: l
                        .projector
                        .as_deref()
                        .map(|p| rows_to_matrix(p, "layer projector"))
                        .transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = SyntheticModel {
            layers,
            readout: rows_to_matrix(&doc.readout, "readout")?,
            base_hidden: Vector::from_vec(doc.base_hidden),
            config: doc.config,
        };
        model.validate()?;
        let dims = (model.d0(), model.d1(), model.vocab(), model.n_layers());
        if dims != (doc.dims.d0, doc.dims.d1, doc.dims.vocab, doc.dims.n_layers) {
            return Err(Error::InvalidConfig(format!(
                "dims header {:?} disagrees with stored matrices {:?}",
                doc.dims, dims
            )));
        }
        Ok(model)
    }
}
