//! Optimal next-study design search and threshold analysis.

use alloc::vec::Vec;

use rand::Rng;

use crate::criteria::{CandidateDesign, CriterionError, Evaluator};
use crate::fpca::FpcaModel;
use crate::subsets::{binomial, KSubsets};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SearchMethod {
    /// Every K-subset of the grid, in lexicographic order.
    Exhaustive,
    /// Random K-subsets drawn with inclusion probability proportional to the
    /// model's marginal variance `Σ̂(t, t)`.
    WeightedHeuristic { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub design: CandidateDesign,
    pub value: f64,
    pub evaluated: u64,
}

fn check_k(model: &FpcaModel, k: usize) -> Result<(), CriterionError> {
    if k == 0 || k > model.grid_size() {
        return Err(CriterionError::InvalidInput(alloc::format!(
            "design size {} must be in 1..={}",
            k,
            model.grid_size()
        )));
    }
    Ok(())
}

/// Maximises `F̂` over K-subsets. Ties resolve to the lexicographically
/// smallest design.
pub fn search_optimal(model: &FpcaModel, k: usize, method: &SearchMethod) -> Result<SearchOutcome, CriterionError> {
    check_k(model, k)?;
    match method {
        SearchMethod::Exhaustive => {
            let table = CandidateTable::build(model, k)?;
            let (i, value) = table.argmax();
            Ok(SearchOutcome { design: table.design(i), value, evaluated: table.len() as u64 })
        }
        SearchMethod::WeightedHeuristic { samples, seed } => heuristic(model, k, *samples, *seed),
    }
}

fn heuristic(model: &FpcaModel, k: usize, samples: usize, seed: u64) -> Result<SearchOutcome, CriterionError> {
    if samples == 0 {
        return Err(CriterionError::InvalidInput("heuristic needs at least one sample".into()));
    }
    let v = model.grid_size();
    let base: Vec<f64> = (0..v).map(|j| model.covariance_at(j, j).max(0.0) + 1e-12).collect();
    let mut rng = crate::stream::stream(seed, crate::stream::Purpose::Heuristic, &[k as u64]);
    let mut eval = Evaluator::new(model);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut pick = Vec::with_capacity(k);
    for _ in 0..samples {
        pick.clear();
        let mut w = base.clone();
        for _ in 0..k {
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut chosen = v - 1;
            for (j, &wj) in w.iter().enumerate() {
                if wj > 0.0 && u < wj {
                    chosen = j;
                    break;
                }
                u -= wj;
            }
            while w[chosen] == 0.0 {
                chosen -= 1;
            }
            w[chosen] = 0.0;
            pick.push(chosen);
        }
        pick.sort_unstable();
        let value = eval.value(&pick)?;
        let better = match &best {
            None => true,
            Some((d, b)) => value > *b || (value == *b && pick < *d),
        };
        if better {
            best = Some((pick.clone(), value));
        }
    }
    let (d, value) = best.expect("samples > 0");
    Ok(SearchOutcome { design: CandidateDesign::from_sorted(d), value, evaluated: samples as u64 })
}

/// `F̂` for every K-subset of the grid, in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTable {
    v: usize,
    k: usize,
    values: Vec<f64>,
}

impl CandidateTable {
    pub fn build(model: &FpcaModel, k: usize) -> Result<Self, CriterionError> {
        check_k(model, k)?;
        let v = model.grid_size();
        let mut eval = Evaluator::new(model);
        let mut values = Vec::with_capacity(binomial(v, k) as usize);
        let mut it = KSubsets::new(v, k);
        while let Some(t) = it.advance() {
            values.push(eval.value(t)?);
        }
        Ok(CandidateTable { v, k, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn design_size(&self) -> usize {
        self.k
    }

    pub fn grid_size(&self) -> usize {
        self.v
    }

    /// First index with the maximal value.
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = (0, self.values[0]);
        for (i, &x) in self.values.iter().enumerate().skip(1) {
            if x > best.1 {
                best = (i, x);
            }
        }
        best
    }

    /// The design at lexicographic position `rank`.
    pub fn design(&self, rank: usize) -> CandidateDesign {
        CandidateDesign::from_sorted(unrank(rank as u64, self.v, self.k))
    }

    pub fn value_of(&self, design: &CandidateDesign) -> Option<f64> {
        if design.len() != self.k || design.indices().iter().any(|&j| j >= self.v) {
            return None;
        }
        Some(self.values[rank(design.indices(), self.v) as usize])
    }
}

/// Lexicographic rank of a strictly increasing K-subset of `0..v`.
pub fn rank(subset: &[usize], v: usize) -> u64 {
    let k = subset.len();
    let mut r = 0;
    let mut next = 0;
    for (i, &c) in subset.iter().enumerate() {
        for j in next..c {
            r += binomial(v - 1 - j, k - 1 - i);
        }
        next = c + 1;
    }
    r
}

/// Inverse of [`rank`].
pub fn unrank(mut r: u64, v: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut j = 0;
    for i in 0..k {
        loop {
            let block = binomial(v - 1 - j, k - 1 - i);
            if r < block {
                break;
            }
            r -= block;
            j += 1;
        }
        out.push(j);
        j += 1;
    }
    out
}

/// Designs whose estimated efficiency reaches `theta`, summarised by the
/// least-favourable and median members, scored by true efficiency.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdReport {
    pub theta: f64,
    pub set_size: usize,
    pub t_worst: CandidateDesign,
    pub t_median: CandidateDesign,
    pub eff_worst: f64,
    pub eff_median: f64,
}

/// For each threshold `θ`: the set `{t : F̂(t)/F̂(t_opt) ≥ θ}`, its member with
/// the smallest `F̂` (ties lexicographic) and its lower median by `(F̂, rank)`;
/// efficiencies are `F(t)/F(t*)` under the true model.
pub fn threshold_analysis(
    estimated: &CandidateTable,
    truth: &CandidateTable,
    thetas: &[f64],
) -> Result<Vec<ThresholdReport>, CriterionError> {
    if estimated.v != truth.v || estimated.k != truth.k {
        return Err(CriterionError::InvalidInput("candidate tables differ in shape".into()));
    }
    if let Some(t) = thetas.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(CriterionError::InvalidInput(alloc::format!("threshold {} outside (0, 1]", t)));
    }
    let (_, f_opt) = estimated.argmax();
    let (_, f_star) = truth.argmax();
    if !(f_star > 0.0) {
        return Err(CriterionError::ZeroTrueOptimum);
    }
    let eff_hat = |x: f64| if f_opt > 0.0 { x / f_opt } else { 1.0 };
    thetas
        .iter()
        .map(|&theta| {
            let mut set: Vec<usize> = (0..estimated.len()).filter(|&i| eff_hat(estimated.values[i]) >= theta).collect();
            // t_opt itself always qualifies, so the set is never empty
            set.sort_by(|&a, &b| estimated.values[a].total_cmp(&estimated.values[b]).then(a.cmp(&b)));
            let worst = set[0];
            let median = set[(set.len() - 1) / 2];
            Ok(ThresholdReport {
                theta,
                set_size: set.len(),
                t_worst: estimated.design(worst),
                t_median: estimated.design(median),
                eff_worst: truth.values[worst] / f_star,
                eff_median: truth.values[median] / f_star,
            })
        })
        .collect()
}

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.99, 0.97, 0.95];
