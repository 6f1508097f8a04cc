//! Unsupervised domain adaptation: trial covariances, the streaming
//! reference covariance (Euclidean or affine-invariant Riemannian EMA), the
//! whitening transform and trial alignment.
//!
//! All matrix work happens in `f64`; aligned trials are returned as `f32`.
//! The AdaBN half of adaptation lives in the batch-norm kernel
//! ([`crate::tensor::ForwardMode::AdaBn`]).

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Default EMA decay.
pub const DEFAULT_BETA: f64 = 0.9;
/// Relative ridge added to trial covariances, as a fraction of `trace / C`.
pub const RIDGE_FRACTION: f64 = 1e-6;
/// Absolute lower bound on the ridge, reached only by (near) silent trials.
pub const RIDGE_FLOOR: f64 = 1e-10;
/// Eigenvalue floor used when inverting the reference covariance.
pub const DEFAULT_EIG_FLOOR: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-6;
const EIG_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    Riemannian,
}

/// Symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

fn eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Linalg("non-finite matrix entry".into()));
    }
    SymmetricEigen::try_new(m.clone(), f64::EPSILON, EIG_MAX_ITER)
        .ok_or_else(|| Error::Linalg("symmetric eigendecomposition did not converge".into()))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `V f(Λ) Vᵀ` for a symmetric matrix.
fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let e = eigen(&symmetrize(m))?;
    let mapped = DMatrix::from_diagonal(&e.eigenvalues.map(f));
    Ok(symmetrize(&(&e.eigenvectors * mapped * e.eigenvectors.transpose())))
}

impl SpdMatrix {
    /// Validates symmetry and strict positivity.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Linalg(format!(
                "{}x{} matrix is not square",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.amax().max(1.0);
        if (&m - m.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(Error::Linalg("matrix is not symmetric".into()));
        }
        let s = Self(symmetrize(&m));
        let min = s.min_eigenvalue()?;
        if min.is_nan() || min <= 0.0 {
            return Err(Error::Linalg(format!(
                "matrix is not positive definite (min eigenvalue {min:e})"
            )));
        }
        Ok(s)
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        Self(DMatrix::identity(dim, dim) * s)
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        Ok(eigen(&self.0)?.eigenvalues.iter().copied().collect())
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(self.eigenvalues()?.into_iter().fold(f64::INFINITY, f64::min))
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Matrix power through the eigendecomposition.
    pub fn powf(&self, p: f64) -> Result<DMatrix<f64>> {
        spectral_map(&self.0, |l| l.max(f64::MIN_POSITIVE).powf(p))
    }

    fn check_dim(&self, other: &SpdMatrix) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Dim {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }
}

fn trial_dims(trial: &Tensor) -> Result<(usize, usize)> {
    match *trial.shape() {
        [c, t] => Ok((c, t)),
        _ => Err(Error::Shape {
            expected: vec![0, 0],
            got: trial.shape().to_vec(),
        }),
    }
}

/// Unregularized `(1/T) Xc Xcᵀ` with row-mean-centered `Xc`.
fn sample_covariance(trial: &Tensor) -> Result<DMatrix<f64>> {
    let (c, t) = trial_dims(trial)?;
    if t < 2 {
        return Err(Error::TooFew {
            what: "timepoints for a covariance",
            needed: 2,
            got: t,
        });
    }
    let mut x = DMatrix::<f64>::from_row_iterator(c, t, trial.data().iter().map(|&v| f64::from(v)));
    for mut row in x.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    Ok(symmetrize(&(&x * x.transpose() / t as f64)))
}

fn add_ridge(mut cov: DMatrix<f64>, eps: f64) -> Result<SpdMatrix> {
    for i in 0..cov.nrows() {
        cov[(i, i)] += eps;
    }
    SpdMatrix::new(cov)
}

/// `(1/T) Xc Xcᵀ + eps I` for a `(channels, timepoints)` trial.
pub fn trial_covariance(trial: &Tensor, eps: f64) -> Result<SpdMatrix> {
    add_ridge(sample_covariance(trial)?, eps)
}

/// Trial covariance with the default trace-relative ridge
/// `max(RIDGE_FRACTION * trace / C, RIDGE_FLOOR)`.
pub fn regularized_covariance(trial: &Tensor) -> Result<SpdMatrix> {
    let cov = sample_covariance(trial)?;
    let eps = (RIDGE_FRACTION * cov.trace() / cov.nrows() as f64).max(RIDGE_FLOOR);
    add_ridge(cov, eps)
}

/// Euclidean mean of regularized trial covariances.
pub fn mean_covariance<'a>(trials: impl IntoIterator<Item = &'a Tensor>) -> Result<SpdMatrix> {
    let mut sum: Option<DMatrix<f64>> = None;
    let mut n = 0usize;
    for t in trials {
        let c = regularized_covariance(t)?.into_matrix();
        match &mut sum {
            Some(s) if s.nrows() != c.nrows() => {
                return Err(Error::Dim {
                    expected: s.nrows(),
                    got: c.nrows(),
                })
            }
            Some(s) => *s += c,
            None => sum = Some(c),
        }
        n += 1;
    }
    let sum = sum.ok_or(Error::TooFew {
        what: "trials",
        needed: 1,
        got: 0,
    })?;
    SpdMatrix::new(sum / n as f64)
}

/// Geodesic point at parameter `s` from `a` toward `b` under the
/// affine-invariant metric: `a^½ (a^-½ b a^-½)^s a^½`.
pub fn geodesic(a: &SpdMatrix, b: &SpdMatrix, s: f64) -> Result<SpdMatrix> {
    a.check_dim(b)?;
    let e = eigen(&a.0)?;
    let sqrt = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(f64::MIN_POSITIVE).sqrt()));
    let inv_sqrt = DMatrix::from_diagonal(&e.eigenvalues.map(|l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt()));
    let v = &e.eigenvectors;
    let a_half = v * sqrt * v.transpose();
    let a_neg_half = v * inv_sqrt * v.transpose();
    let inner = &a_neg_half * &b.0 * &a_neg_half;
    let stepped = spectral_map(&inner, |l| l.max(f64::MIN_POSITIVE).powf(s))?;
    SpdMatrix::new(symmetrize(&(&a_half * stepped * &a_half)))
}

/// Streaming reference covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovReference {
    c_ref: Option<SpdMatrix>,
    pub beta: f64,
    pub metric: Metric,
    /// Eigenvalue floor applied before inverting the reference.
    pub eps: f64,
    trial_count: u64,
}

impl CovReference {
    /// Empty reference; the first update adopts that trial's covariance.
    pub fn new(beta: f64, metric: Metric) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Config(format!("EMA decay must lie in (0, 1), got {beta}")));
        }
        Ok(Self {
            c_ref: None,
            beta,
            metric,
            eps: DEFAULT_EIG_FLOOR,
            trial_count: 0,
        })
    }

    pub fn with_reference(c_ref: SpdMatrix, beta: f64, metric: Metric) -> Result<Self> {
        let mut r = Self::new(beta, metric)?;
        r.c_ref = Some(c_ref);
        Ok(r)
    }

    pub fn reference(&self) -> Option<&SpdMatrix> {
        self.c_ref.as_ref()
    }

    pub fn trial_count(&self) -> u64 {
        self.trial_count
    }

    pub fn update(&mut self, c_trial: &SpdMatrix) -> Result<()> {
        let next = match &self.c_ref {
            None => c_trial.clone(),
            Some(c) => {
                c.check_dim(c_trial)?;
                match self.metric {
                    Metric::Euclidean => SpdMatrix::new(&c.0 * self.beta + &c_trial.0 * (1.0 - self.beta))?,
                    Metric::Riemannian => geodesic(c, c_trial, 1.0 - self.beta)?,
                }
            }
        };
        self.c_ref = Some(next);
        self.trial_count += 1;
        Ok(())
    }

    /// `C_ref^{-1/2}`, with eigenvalues floored at `eps`.
    pub fn whitening(&self) -> Result<DMatrix<f64>> {
        let c = self
            .c_ref
            .as_ref()
            .ok_or_else(|| Error::Linalg("reference covariance is not initialized".into()))?;
        whitening_transform(c, self.eps)
    }
}

/// `C^{-1/2}` via the symmetric eigendecomposition, eigenvalues floored at
/// `eps` before inversion.
pub fn whitening_transform(c: &SpdMatrix, eps: f64) -> Result<DMatrix<f64>> {
    spectral_map(&c.0, |l| 1.0 / l.max(eps).sqrt())
}

/// `M X` for a `(channels, timepoints)` trial.
pub fn align_trial(m: &DMatrix<f64>, trial: &Tensor) -> Result<Tensor> {
    let (c, t) = trial_dims(trial)?;
    if m.nrows() != c || m.ncols() != c {
        return Err(Error::Dim {
            expected: c,
            got: m.ncols(),
        });
    }
    let x = DMatrix::<f64>::from_row_iterator(c, t, trial.data().iter().map(|&v| f64::from(v)));
    let y = m * x;
    let data = (0..c)
        .flat_map(|i| (0..t).map(move |j| (i, j)))
        .map(|(i, j)| y[(i, j)] as f32)
        .collect();
    Ok(Tensor::new(vec![c, t], data)?)
}
