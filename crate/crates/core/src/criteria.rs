//! Design-evaluation quantities: the next-study criterion `F̂(t)`, the
//! integrated prediction error `MISE(t)`, the absolute relative error of a
//! surrogate optimum, the pilot-sample recovery error and their composite.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::fpca::{FitError, FpcaModel};
use crate::search::{search_optimal, SearchMethod};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CriterionError {
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("true criterion is zero at its optimum")]
    ZeroTrueOptimum,
    #[error("every subject has a zero-norm true trajectory ({0} excluded)")]
    ZeroNormSubject(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// A next-study individual design: strictly increasing 0-based grid indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CandidateDesign(Vec<usize>);

impl CandidateDesign {
    pub fn new(indices: Vec<usize>, v: usize) -> Result<Self, CriterionError> {
        if indices.windows(2).any(|w| w[0] >= w[1]) || indices.iter().any(|&j| j >= v) {
            return Err(CriterionError::InvalidInput(alloc::format!(
                "design {:?} is not a strictly increasing subset of the {}-point grid",
                indices,
                v
            )));
        }
        Ok(CandidateDesign(indices))
    }

    pub(crate) fn from_sorted(indices: Vec<usize>) -> Self {
        CandidateDesign(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Parses the hyphen-joined 1-based form produced by `Display`.
    pub fn parse(s: &str, v: usize) -> Result<Self, CriterionError> {
        let idx = s
            .split('-')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&x| x >= 1)
                    .map(|x| x - 1)
                    .ok_or_else(|| CriterionError::InvalidInput(alloc::format!("bad design '{}'", s)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(idx, v)
    }
}

/// Hyphen-joined 1-based indices, e.g. `1-7-13-19-25`.
impl fmt::Display for CandidateDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, j) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{}", j + 1)?;
        }
        Ok(())
    }
}

/// `F̂(t) = tr{Λ Ψ(t)ᵀ [Ψ(t) Λ Ψ(t)ᵀ + σ² I]⁻¹ Ψ(t) Λ}`, the variance of the
/// trajectory captured by the best linear predictor given observations at `t`.
pub fn f_value(model: &FpcaModel, t: &[usize]) -> Result<f64, CriterionError> {
    Evaluator::new(model).value(t)
}

/// Evaluates `F̂` for many designs of one model without reallocating.
#[derive(Debug, Clone)]
pub struct Evaluator {
    v: usize,
    /// `Ψ Λ Ψᵀ + σ² I` on the full grid, row-major.
    gram: Vec<f64>,
    /// `λ_m ψ_m` per component.
    scaled: Vec<Vec<f64>>,
    chol: Vec<f64>,
    z: Vec<f64>,
}

const CONDITION_LIMIT: f64 = 1e12;

impl Evaluator {
    pub fn new(model: &FpcaModel) -> Self {
        let v = model.grid_size();
        let mut gram = alloc::vec![0.0; v * v];
        for (lam, psi) in model.eigenvalues.iter().zip(&model.eigenfunctions) {
            for j in 0..v {
                for k in 0..v {
                    gram[j * v + k] += lam * psi[j] * psi[k];
                }
            }
        }
        for j in 0..v {
            gram[j * v + j] += model.sigma_e2;
        }
        let scaled = model
            .eigenvalues
            .iter()
            .zip(&model.eigenfunctions)
            .map(|(lam, psi)| psi.iter().map(|p| lam * p).collect())
            .collect();
        Evaluator { v, gram, scaled, chol: Vec::new(), z: Vec::new() }
    }

    pub fn grid_size(&self) -> usize {
        self.v
    }

    pub fn value(&mut self, t: &[usize]) -> Result<f64, CriterionError> {
        if t.iter().any(|&j| j >= self.v) {
            return Err(CriterionError::InvalidInput("design index outside the grid".into()));
        }
        if t.is_empty() || self.scaled.is_empty() {
            return Ok(0.0);
        }
        let k = t.len();
        if !self.factor(t, 0.0) || self.condition() > CONDITION_LIMIT {
            let trace: f64 = t.iter().map(|&j| self.gram[j * self.v + j]).sum();
            let ridge = 1e-8 * trace / k as f64;
            if !(ridge > 0.0) || !self.factor(t, ridge) {
                return Err(FitError::SingularConditioning.into());
            }
        }
        self.z.resize(k, 0.0);
        let l = &self.chol;
        let mut total = 0.0;
        for b in &self.scaled {
            for a in 0..k {
                let mut acc = b[t[a]];
                for c in 0..a {
                    acc -= l[a * k + c] * self.z[c];
                }
                self.z[a] = acc / l[a * k + a];
                total += self.z[a] * self.z[a];
            }
        }
        Ok(total)
    }

    fn factor(&mut self, t: &[usize], ridge: f64) -> bool {
        let k = t.len();
        self.chol.clear();
        self.chol.resize(k * k, 0.0);
        for a in 0..k {
            for b in 0..=a {
                let mut acc = self.gram[t[a] * self.v + t[b]];
                if a == b {
                    acc += ridge;
                }
                for c in 0..b {
                    acc -= self.chol[a * k + c] * self.chol[b * k + c];
                }
                if a == b {
                    if !(acc > 0.0) {
                        return false;
                    }
                    self.chol[a * k + a] = libm::sqrt(acc);
                } else {
                    self.chol[a * k + b] = acc / self.chol[b * k + b];
                }
            }
        }
        true
    }

    fn condition(&self) -> f64 {
        let k = libm::sqrt(self.chol.len() as f64) as usize;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for a in 0..k {
            let d = self.chol[a * k + a];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        let r = hi / lo;
        r * r
    }
}

/// `MISE(t) = tr Λ - F̂(t)`.
pub fn mise(model: &FpcaModel, t: &[usize]) -> Result<f64, CriterionError> {
    Ok(model.total_variance() - f_value(model, t)?)
}

/// Outcome of comparing a surrogate optimum against the true optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct AreOutcome {
    pub are: f64,
    pub t_opt: CandidateDesign,
    pub t_star: CandidateDesign,
    /// True criterion at the surrogate optimum.
    pub f_at_opt: f64,
    /// True criterion at the true optimum.
    pub f_at_star: f64,
}

/// `ARE = |F(t_opt) - F(t*)| / F(t*)` where `t_opt` maximises the estimated
/// criterion, `t*` the true one, and `F` is always the true criterion.
pub fn are(
    model_est: &FpcaModel,
    model_true: &FpcaModel,
    k: usize,
    method: &SearchMethod,
) -> Result<AreOutcome, CriterionError> {
    if model_est.grid_size() != model_true.grid_size() {
        return Err(CriterionError::InvalidInput("models are on different grids".into()));
    }
    let opt = search_optimal(model_est, k, method)?;
    let star = search_optimal(model_true, k, method)?;
    let f_at_opt = f_value(model_true, opt.design.indices())?;
    let f_at_star = star.value;
    are_from_values(f_at_opt, f_at_star).map(|are| AreOutcome {
        are,
        t_opt: opt.design,
        t_star: star.design,
        f_at_opt,
        f_at_star,
    })
}

pub(crate) fn are_from_values(f_at_opt: f64, f_at_star: f64) -> Result<f64, CriterionError> {
    if !(f_at_star > 0.0) {
        return Err(CriterionError::ZeroTrueOptimum);
    }
    Ok((f_at_opt - f_at_star).abs() / f_at_star)
}

/// Relative recovery error of the pilot sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RrmseOutcome {
    pub value: f64,
    /// Subjects dropped because their true values have (near) zero norm.
    pub excluded: usize,
}

const ZERO_NORM: f64 = 1e-12;

/// `sqrt( mean_i [ Σ_j (X_ij - X̂_ij)² / Σ_j X_ij² ] )` over subjects, each
/// evaluated at its own observed points.
pub fn rrmse(truth: &[Vec<f64>], fitted: &[Vec<f64>]) -> Result<RrmseOutcome, CriterionError> {
    if truth.len() != fitted.len() || truth.iter().zip(fitted).any(|(a, b)| a.len() != b.len()) {
        return Err(CriterionError::InvalidInput("truth and fitted shapes differ".into()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (x, xh) in truth.iter().zip(fitted) {
        let denom: f64 = x.iter().map(|a| a * a).sum();
        if denom < ZERO_NORM {
            continue;
        }
        let num: f64 = x.iter().zip(xh).map(|(a, b)| (a - b) * (a - b)).sum();
        sum += num / denom;
        used += 1;
    }
    let excluded = truth.len() - used;
    if used == 0 {
        return Err(CriterionError::ZeroNormSubject(excluded));
    }
    Ok(RrmseOutcome { value: libm::sqrt(sum / used as f64), excluded })
}

/// `weight · ARE + (1 - weight) · RRMSE`.
pub fn composite(are: f64, rrmse: f64, weight: f64) -> Result<f64, CriterionError> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(CriterionError::InvalidInput(alloc::format!("composite weight {} outside [0, 1]", weight)));
    }
    Ok(weight * are + (1.0 - weight) * rrmse)
}

pub const DEFAULT_COMPOSITE_WEIGHT: f64 = 0.5;

/// Both design goals for one pilot data set.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionReport {
    pub are: f64,
    pub rrmse: f64,
    pub composite: f64,
    pub t_opt: CandidateDesign,
    pub t_star: CandidateDesign,
    pub f_at_opt: f64,
    pub f_at_star: f64,
}

impl CriterionReport {
    pub fn new(outcome: AreOutcome, rrmse: f64, weight: f64) -> Result<Self, CriterionError> {
        Ok(CriterionReport {
            composite: composite(outcome.are, rrmse, weight)?,
            are: outcome.are,
            rrmse,
            t_opt: outcome.t_opt,
            t_star: outcome.t_star,
            f_at_opt: outcome.f_at_opt,
            f_at_star: outcome.f_at_star,
        })
    }
}
