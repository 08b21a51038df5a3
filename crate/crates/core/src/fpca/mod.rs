//! Sparse functional principal component analysis by conditional expectation.
//!
//! The fit pools all subjects: the mean curve is a local linear smooth of the
//! pooled scatter, the covariance surface a 2-D local linear smooth of the
//! off-diagonal raw covariances, and the error variance the average gap
//! between the smoothed raw variance and the surface diagonal over the middle
//! half of the domain. Eigenpairs come from the quadrature-weighted
//! eigenproblem on the grid. Scores are best linear predictors given each
//! subject's own observations.

mod smooth;

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use smooth::{candidates, select, Cells1d, Cells2d};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum FitError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("covariance surface has no positive eigenvalues")]
    DegenerateCovariance,
    #[error("conditional covariance could not be stabilised for inversion")]
    SingularConditioning,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// One subject's observations: 0-based grid indices (strictly increasing) and
/// the noisy values observed there.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SubjectObs {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SubjectObs {
    pub fn new(indices: Vec<usize>, values: Vec<f64>) -> Result<Self, FitError> {
        if indices.len() != values.len() {
            return Err(FitError::InvalidInput("index/value length mismatch".into()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FitError::InvalidInput("subject indices must be strictly increasing".into()));
        }
        Ok(SubjectObs { indices, values })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-subject observations on a shared grid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SparseDataset {
    pub grid: Vec<f64>,
    pub subjects: Vec<SubjectObs>,
}

impl SparseDataset {
    pub fn new(grid: Vec<f64>, subjects: Vec<SubjectObs>) -> Result<Self, FitError> {
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FitError::InvalidInput("grid must be strictly increasing".into()));
        }
        let v = grid.len();
        for (i, s) in subjects.iter().enumerate() {
            if s.indices.iter().any(|&j| j >= v) {
                return Err(FitError::InvalidInput(alloc::format!("subject {} has an index outside the grid", i + 1)));
            }
        }
        Ok(SparseDataset { grid, subjects })
    }

    /// Dense rows (every grid point observed).
    pub fn from_dense(grid: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self, FitError> {
        let v = grid.len();
        let subjects =
            rows.iter().map(|r| SubjectObs::new((0..v).collect(), r.clone())).collect::<Result<Vec<_>, _>>()?;
        Self::new(grid, subjects)
    }
}

/// Bandwidth policy for one smoother.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Bandwidth {
    /// Generalised cross-validation over a fixed candidate grid, falling back
    /// to a quarter of the domain when every candidate degenerates.
    Gcv,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FitOptions {
    pub mean_bandwidth: Bandwidth,
    pub cov_bandwidth: Bandwidth,
    /// Smallest component count whose fraction of variance explained reaches
    /// this threshold is retained.
    pub fve_threshold: f64,
    /// Retain exactly this many components (capped by the positive ones).
    pub fixed_components: Option<usize>,
    pub max_components: Option<usize>,
    /// Use the raw-covariance diagonal in the surface smooth. Only sensible
    /// for noiseless data.
    pub include_diagonal: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            mean_bandwidth: Bandwidth::Gcv,
            cov_bandwidth: Bandwidth::Gcv,
            fve_threshold: 0.95,
            fixed_components: None,
            max_components: None,
            include_diagonal: false,
        }
    }
}

/// Bandwidths actually used by a fit.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SmoothingInfo {
    pub mean_bandwidth: f64,
    pub cov_bandwidth: f64,
    pub variance_bandwidth: f64,
}

/// A fitted (or known) functional principal component model on a grid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FpcaModel {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    /// Covariance surface of the smooth process, `v × v` row-major.
    pub covariance: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// One vector of grid values per retained component.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub sigma_e2: f64,
    pub fve: f64,
    pub smoothing: Option<SmoothingInfo>,
}

/// Trapezoid quadrature weights on an increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let v = grid.len();
    if v < 2 {
        return alloc::vec![1.0; v];
    }
    (0..v)
        .map(|j| {
            let left = if j > 0 { grid[j] - grid[j - 1] } else { 0.0 };
            let right = if j + 1 < v { grid[j + 1] - grid[j] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// Quadrature inner product of two grid functions.
pub fn inner_product(weights: &[f64], a: &[f64], b: &[f64]) -> f64 {
    weights.iter().zip(a).zip(b).map(|((w, x), y)| w * x * y).sum()
}

impl FpcaModel {
    /// Builds a model from known components; the covariance surface is
    /// `Σ λ_m ψ_m ψ_mᵀ`.
    pub fn from_components(
        grid: Vec<f64>,
        mean: Vec<f64>,
        eigenvalues: Vec<f64>,
        eigenfunctions: Vec<Vec<f64>>,
        sigma_e2: f64,
    ) -> Result<Self, FitError> {
        let v = grid.len();
        if mean.len() != v || eigenfunctions.len() != eigenvalues.len() || eigenfunctions.iter().any(|p| p.len() != v) {
            return Err(FitError::InvalidInput("component shapes do not match the grid".into()));
        }
        if sigma_e2 < 0.0 || eigenvalues.iter().any(|&l| l < 0.0) {
            return Err(FitError::InvalidInput("variances must be non-negative".into()));
        }
        let mut covariance = alloc::vec![0.0; v * v];
        for (lam, psi) in eigenvalues.iter().zip(&eigenfunctions) {
            for j in 0..v {
                for k in 0..v {
                    covariance[j * v + k] += lam * psi[j] * psi[k];
                }
            }
        }
        Ok(FpcaModel { grid, mean, covariance, eigenvalues, eigenfunctions, sigma_e2, fve: 1.0, smoothing: None })
    }

    pub fn grid_size(&self) -> usize {
        self.grid.len()
    }

    pub fn components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn total_variance(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    pub fn covariance_at(&self, j: usize, k: usize) -> f64 {
        self.covariance[j * self.grid.len() + k]
    }

    /// Conditional covariance `Ψ Λ Ψᵀ + σ² I` of the observations at `indices`,
    /// Cholesky-factorised, with a ridge added when it is ill-conditioned.
    pub(crate) fn conditional_cholesky(
        &self,
        indices: &[usize],
    ) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, FitError> {
        let k = indices.len();
        let mut s = DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                let mut acc = 0.0;
                for (lam, psi) in self.eigenvalues.iter().zip(&self.eigenfunctions) {
                    acc += lam * psi[indices[a]] * psi[indices[b]];
                }
                s[(a, b)] = acc;
            }
            s[(a, a)] += self.sigma_e2;
        }
        stabilised_cholesky(s)
    }

    /// Conditional-expectation FPC scores of one subject.
    pub fn predict_scores(&self, subject: &SubjectObs) -> Result<Vec<f64>, FitError> {
        let m = self.components();
        if subject.indices.iter().any(|&j| j >= self.grid.len()) {
            return Err(FitError::InvalidInput("subject index outside the grid".into()));
        }
        if m == 0 || subject.is_empty() {
            return Ok(alloc::vec![0.0; m]);
        }
        let chol = self.conditional_cholesky(&subject.indices)?;
        let resid = DVector::from_iterator(
            subject.len(),
            subject.indices.iter().zip(&subject.values).map(|(&j, &u)| u - self.mean[j]),
        );
        let alpha = chol.solve(&resid);
        Ok(self
            .eigenvalues
            .iter()
            .zip(&self.eigenfunctions)
            .map(|(lam, psi)| lam * subject.indices.iter().zip(alpha.iter()).map(|(&j, a)| psi[j] * a).sum::<f64>())
            .collect())
    }

    /// `μ + Σ ξ_m ψ_m` on the grid.
    pub fn recover_trajectory(&self, scores: &[f64]) -> Result<Vec<f64>, FitError> {
        if scores.len() != self.components() {
            return Err(FitError::InvalidInput(alloc::format!(
                "expected {} scores, got {}",
                self.components(),
                scores.len()
            )));
        }
        let mut x = self.mean.clone();
        for (xi, psi) in scores.iter().zip(&self.eigenfunctions) {
            for (xj, p) in x.iter_mut().zip(psi) {
                *xj += xi * p;
            }
        }
        Ok(x)
    }
}

const CONDITION_LIMIT: f64 = 1e12;

fn stabilised_cholesky(mut s: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, FitError> {
    let k = s.nrows();
    if let Some(chol) = s.clone().cholesky() {
        if condition_estimate(&chol) <= CONDITION_LIMIT {
            return Ok(chol);
        }
    }
    let ridge = 1e-8 * s.trace() / k as f64;
    if !(ridge > 0.0) {
        return Err(FitError::SingularConditioning);
    }
    for a in 0..k {
        s[(a, a)] += ridge;
    }
    s.cholesky().ok_or(FitError::SingularConditioning)
}

/// `(max L_ii / min L_ii)^2`, a lower bound on the 2-norm condition number.
fn condition_estimate(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let d = chol.l_dirty().diagonal();
    let max = d.iter().cloned().fold(0.0f64, f64::max);
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return f64::INFINITY;
    }
    let r = max / min;
    r * r
}

/// Bandwidth candidate range for a grid: from just over one spacing to the
/// full range.
fn bandwidth_candidates(grid: &[f64]) -> Vec<f64> {
    let range = grid[grid.len() - 1] - grid[0];
    let spacing = grid.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let lo = (1.01 * spacing).min(range);
    candidates(lo, range, 16)
}

fn pick_bandwidth(policy: Bandwidth, grid: &[f64], score: impl Fn(f64) -> Option<f64>) -> f64 {
    match policy {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Gcv => {
            let range = grid[grid.len() - 1] - grid[0];
            select(&bandwidth_candidates(grid), score).unwrap_or(range / 4.0)
        }
    }
}

/// Fits the model to sparse data.
pub fn fit_pace(data: &SparseDataset, options: &FitOptions) -> Result<FpcaModel, FitError> {
    let grid = &data.grid;
    let v = grid.len();
    if data.subjects.len() < 2 {
        return Err(FitError::InsufficientData("at least two subjects are needed".into()));
    }
    if v < 2 {
        return Err(FitError::InsufficientData("grid needs at least two points".into()));
    }
    let pooled = Cells1d::from_grid(
        grid,
        data.subjects.iter().flat_map(|s| s.indices.iter().copied().zip(s.values.iter().copied())),
    );
    if pooled.x.len() < 2 {
        return Err(FitError::InsufficientData("pooled observations cover fewer than two grid points".into()));
    }

    let h_mean = pick_bandwidth(options.mean_bandwidth, grid, |h| pooled.gcv(h));
    let mean = pooled
        .smooth(grid, h_mean)
        .ok_or_else(|| FitError::InsufficientData("mean bandwidth leaves grid points without data".into()))?;

    let resid = |s: &SubjectObs, a: usize| s.values[a] - mean[s.indices[a]];
    let raw_diag = Cells1d::from_grid(
        grid,
        data.subjects.iter().flat_map(|s| (0..s.len()).map(move |a| (s.indices[a], resid(s, a) * resid(s, a)))),
    );
    let include_diag = options.include_diagonal;
    let raw_off = Cells2d::from_grid(
        grid,
        data.subjects.iter().flat_map(|s| {
            (0..s.len()).flat_map(move |a| {
                (0..s.len())
                    .filter(move |&b| include_diag || a != b)
                    .map(move |b| (s.indices[a], s.indices[b], resid(s, a) * resid(s, b)))
            })
        }),
    );
    if raw_off.is_empty() {
        return Err(FitError::InsufficientData("no subject has two observations; covariance is not estimable".into()));
    }

    let h_cov = pick_bandwidth(options.cov_bandwidth, grid, |h| {
        raw_off.smooth_surface(grid, h)?;
        raw_off.gcv(h)
    });
    let covariance = raw_off
        .smooth_surface(grid, h_cov)
        .ok_or_else(|| FitError::InsufficientData("covariance bandwidth leaves grid pairs without data".into()))?;

    let h_var = pick_bandwidth(options.mean_bandwidth, grid, |h| raw_diag.gcv(h));
    let sigma_e2 = if include_diag { 0.0 } else { error_variance(grid, &raw_diag, &raw_off, h_var, h_cov)? };

    let (eigenvalues, eigenfunctions, fve) = eigen_decompose(grid, &covariance, options)?;
    Ok(FpcaModel {
        grid: grid.clone(),
        mean,
        covariance,
        eigenvalues,
        eigenfunctions,
        sigma_e2,
        fve,
        smoothing: Some(SmoothingInfo { mean_bandwidth: h_mean, cov_bandwidth: h_cov, variance_bandwidth: h_var }),
    })
}

/// Mean of `V(t) - C(t, t)` over the middle half of the domain, clamped at 0.
fn error_variance(
    grid: &[f64],
    raw_diag: &Cells1d,
    raw_off: &Cells2d,
    h_var: f64,
    h_cov: f64,
) -> Result<f64, FitError> {
    let lo = grid[0];
    let range = grid[grid.len() - 1] - lo;
    let central: Vec<f64> =
        grid.iter().copied().filter(|&t| t >= lo + 0.25 * range - 1e-12 && t <= lo + 0.75 * range + 1e-12).collect();
    let total = raw_diag
        .smooth(&central, h_var)
        .ok_or_else(|| FitError::InsufficientData("variance smoother has empty windows".into()))?;
    let mut gap = 0.0;
    for (t, vt) in central.iter().zip(&total) {
        let ct = raw_off
            .rotated_diagonal(*t, h_cov)
            .ok_or_else(|| FitError::InsufficientData("covariance diagonal not estimable".into()))?;
        gap += vt - ct;
    }
    Ok((gap / central.len() as f64).max(0.0))
}

type Eigen = (Vec<f64>, Vec<Vec<f64>>, f64);

fn eigen_decompose(grid: &[f64], covariance: &[f64], options: &FitOptions) -> Result<Eigen, FitError> {
    let v = grid.len();
    let scale = covariance.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale <= 1e-12 {
        return Ok((Vec::new(), Vec::new(), 1.0));
    }
    let q = trapezoid_weights(grid);
    let sq: Vec<f64> = q.iter().map(|&w| libm::sqrt(w)).collect();
    let a = DMatrix::from_fn(v, v, |j, k| sq[j] * covariance[j * v + k] * sq[k]);
    let eig = a.symmetric_eigen();
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let top = eig.eigenvalues[order[0]];
    let positive: Vec<usize> =
        order.into_iter().filter(|&i| eig.eigenvalues[i] > 1e-10 * top.max(0.0) && eig.eigenvalues[i] > 0.0).collect();
    if positive.is_empty() {
        return Err(FitError::DegenerateCovariance);
    }
    let total: f64 = positive.iter().map(|&i| eig.eigenvalues[i]).sum();
    let mut m = match options.fixed_components {
        Some(fixed) => fixed.min(positive.len()),
        None => {
            let mut acc = 0.0;
            let mut m = positive.len();
            for (c, &i) in positive.iter().enumerate() {
                acc += eig.eigenvalues[i];
                if acc / total >= options.fve_threshold - 1e-12 {
                    m = c + 1;
                    break;
                }
            }
            m
        }
    };
    if let Some(cap) = options.max_components {
        m = m.min(cap);
    }
    let mut values = Vec::with_capacity(m);
    let mut functions = Vec::with_capacity(m);
    for &i in &positive[..m] {
        let mut psi: Vec<f64> = (0..v).map(|j| eig.eigenvectors[(j, i)] / sq[j]).collect();
        orient(&mut psi);
        values.push(eig.eigenvalues[i]);
        functions.push(psi);
    }
    let fve = values.iter().sum::<f64>() / total;
    Ok((values, functions, fve))
}

/// Sign convention: the first grid value is made positive; when it is tiny
/// relative to the largest magnitude, the largest-magnitude value is made
/// positive instead.
pub fn orient(psi: &mut [f64]) {
    let max = psi.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let anchor = if psi[0].abs() > 1e-2 * max {
        psi[0]
    } else {
        psi.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best })
    };
    if anchor < 0.0 {
        psi.iter_mut().for_each(|x| *x = -*x);
    }
}
