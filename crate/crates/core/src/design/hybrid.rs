//! Hybrid snippet + near-BIBD designs.
//!
//! Subjects are placed one at a time. Subject `i` receives the 0/1 row that
//! maximises `Σ_j w_ij x_ij` with `w_ij = min(1 / r_ij, 1)`, where `r_ij` is the
//! number of earlier subjects observed at grid point `j`, subject to:
//!
//! - exactly K points;
//! - running column sums `≤ c1 + δ`, adjacent-pair counts `≤ c2 + δ` and
//!   distant-pair counts `≤ c3 + δ`;
//! - snippet rows (`i < n_s`) contain the cluster `(pos(i), pos(i) + 1)` and no
//!   other point within `Δ` grid points of it;
//! - BIBD rows (`i ≥ n_s`) contain no two adjacent points;
//! - the row differs from every row held in the store `S`.
//!
//! Each per-subject program is solved exactly by a depth-first enumeration of
//! K-subsets pruned by the pair and column caps; ties in the objective are
//! broken uniformly at random. When a subject has no feasible row, the make-up
//! process re-solves a randomly chosen earlier subject (its old row goes into
//! `S`) and then retries.
//!
//! Rows are held as `u64` bitmasks, so the grid is limited to 64 points.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{compute_target_concurrence, DesignError, DesignSpec, IncidenceMatrix, Structure, TargetConcurrence};
use crate::subsets::binomial;

const EPS: f64 = 1e-9;
const MAX_GRID: usize = 64;

/// Tuning knobs of the make-up process.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HybridOptions {
    /// Make-up iteration budget; `None` means `50 n`.
    pub max_makeup_iterations: Option<usize>,
    /// The store is emptied once it holds more than this many rows; `None`
    /// means `2 n`.
    pub store_limit: Option<usize>,
}

impl HybridOptions {
    fn iterations(&self, n: usize) -> usize {
        self.max_makeup_iterations.unwrap_or(50 * n)
    }

    fn store(&self, n: usize) -> usize {
        self.store_limit.unwrap_or(2 * n)
    }
}

/// Column pair `(pos, pos + 1)` carrying the cluster of snippet subject `i`
/// (0-based). Positions wrap after `v - 1` subjects.
pub fn snippet_position(i: usize, v: usize) -> usize {
    i % (v - 1)
}

fn bit(j: usize) -> u64 {
    1u64 << j
}

fn exclusion_mask(pos: usize, gap: usize, v: usize) -> u64 {
    let mut m = 0u64;
    for l in 1..=gap {
        if pos >= l {
            m |= bit(pos - l);
        }
        if pos + 1 + l < v {
            m |= bit(pos + 1 + l);
        }
    }
    m
}

struct Limits {
    column: f64,
    adjacent: f64,
    distant: f64,
}

impl Limits {
    fn new(t: &TargetConcurrence, delta: f64) -> Self {
        Limits { column: t.c1 + delta, adjacent: t.c2 + delta, distant: t.c3 + delta }
    }

    fn pair(&self, j: usize, k: usize) -> f64 {
        if j.abs_diff(k) == 1 {
            self.adjacent
        } else {
            self.distant
        }
    }

    fn whole(x: f64) -> u64 {
        libm::floor(x + EPS).max(0.0) as u64
    }
}

fn fits(count: u32, limit: f64) -> bool {
    count as f64 + 1.0 <= limit + EPS
}

struct Builder {
    n: usize,
    v: usize,
    k: usize,
    snippet: usize,
    gap: usize,
    limits: Limits,
    column: Vec<u32>,
    pair: Vec<u32>,
    rows: Vec<u64>,
    store: Vec<u64>,
    store_limit: usize,
}

impl Builder {
    fn apply(&mut self, mask: u64, add: bool) {
        let idx: Vec<usize> = (0..self.v).filter(|&j| mask & bit(j) != 0).collect();
        for &a in &idx {
            if add {
                self.column[a] += 1;
            } else {
                self.column[a] -= 1;
            }
            for &b in &idx {
                if a != b {
                    let p = &mut self.pair[a * self.v + b];
                    if add {
                        *p += 1;
                    } else {
                        *p -= 1;
                    }
                }
            }
        }
    }

    /// Exact solution of the per-subject program for row `i` given the
    /// current counts of all other placed rows.
    fn solve(&self, i: usize, rng: &mut ChaCha8Rng) -> Option<u64> {
        let v = self.v;
        let is_snippet = i < self.snippet;
        let mut allowed: u64 = 0;
        for j in 0..v {
            if fits(self.column[j], self.limits.column) {
                allowed |= bit(j);
            }
        }
        let mut blocked = [0u64; MAX_GRID];
        for j in 0..v {
            let mut b = 0u64;
            for k in 0..v {
                if k != j && !fits(self.pair[j * v + k], self.limits.pair(j, k)) {
                    b |= bit(k);
                }
            }
            blocked[j] = b;
        }

        let mut forced = 0u64;
        let mut free_needed = self.k;
        if is_snippet {
            let p = snippet_position(i, v);
            forced = bit(p) | bit(p + 1);
            if forced & !allowed != 0 || blocked[p] & bit(p + 1) != 0 {
                return None;
            }
            allowed &= !exclusion_mask(p, self.gap, v);
            allowed &= !blocked[p] & !blocked[p + 1] & !forced;
            free_needed -= 2;
        }

        let weights: Vec<f64> =
            self.column.iter().map(|&r| if r == 0 { 1.0 } else { (1.0 / r as f64).min(1.0) }).collect();

        let mut search = Search {
            v,
            no_adjacent: !is_snippet,
            blocked: &blocked,
            weights: &weights,
            forced,
            store: &self.store,
            best: f64::NEG_INFINITY,
            ties: Vec::new(),
        };
        search.descend(0, 0, free_needed, allowed, 0.0);
        match search.ties.len() {
            0 => None,
            1 => Some(search.ties[0]),
            t => Some(search.ties[rng.random_range(0..t)]),
        }
    }
}

struct Search<'a> {
    v: usize,
    no_adjacent: bool,
    blocked: &'a [u64; MAX_GRID],
    weights: &'a [f64],
    forced: u64,
    store: &'a [u64],
    best: f64,
    ties: Vec<u64>,
}

impl Search<'_> {
    fn descend(&mut self, start: usize, chosen: u64, remaining: usize, allowed: u64, score: f64) {
        if remaining == 0 {
            let row = chosen | self.forced;
            if self.store.contains(&row) {
                return;
            }
            if score > self.best + 1e-12 {
                self.best = score;
                self.ties.clear();
                self.ties.push(row);
            } else if score >= self.best - 1e-12 {
                self.ties.push(row);
            }
            return;
        }
        let mut candidates = allowed & (u64::MAX << start);
        while candidates != 0 {
            if (candidates.count_ones() as usize) < remaining {
                return;
            }
            let j = candidates.trailing_zeros() as usize;
            candidates &= candidates - 1;
            let mut next = allowed & !self.blocked[j];
            next &= if j + 1 < 64 { u64::MAX << (j + 1) } else { 0 };
            if self.no_adjacent && j + 1 < self.v {
                next &= !bit(j + 1);
            }
            self.descend(j + 1, chosen | bit(j), remaining - 1, next, score + self.weights[j]);
        }
    }
}

fn check_snippet_room(spec: &DesignSpec, snippet: usize) -> Result<(), DesignError> {
    if snippet == 0 {
        return Ok(());
    }
    if spec.v < 2 {
        return Err(DesignError::InfeasibleSpec("snippet clusters need v >= 2".into()));
    }
    for i in 0..snippet.min(spec.v - 1) {
        let p = snippet_position(i, spec.v);
        let excluded = exclusion_mask(p, spec.gap, spec.v).count_ones() as usize;
        let room = spec.v - 2 - excluded;
        if room < spec.k - 2 {
            return Err(DesignError::InfeasibleSpec(format!(
                "snippet cluster at points {}-{} leaves {} admissible points for the {} remaining observations (gap {})",
                p + 1,
                p + 2,
                room,
                spec.k - 2,
                spec.gap
            )));
        }
    }
    Ok(())
}

/// Necessary counting conditions on the caps. Failing one of them means no
/// design satisfies the constraints, whatever the make-up process does.
fn check_capacity(spec: &DesignSpec, snippet: usize, limits: &Limits) -> Result<(), String> {
    let (n, v, k) = (spec.n as u64, spec.v as u64, spec.k as u64);
    let col_cap = Limits::whole(limits.column);
    if n * k > col_cap * v {
        return Err(format!("column sums (c1 + delta): {} observations exceed capacity {} x {}", n * k, col_cap, v));
    }
    let bibd_rows = n - snippet as u64;
    if bibd_rows > 0 && 2 * k > v + 1 {
        return Err(format!("no-adjacency rule: {} points cannot avoid adjacency on a {}-point grid", k, v));
    }
    let pairs_per_row = binomial(spec.k, 2);
    let max_adjacent_per_snippet = if spec.k < 3 {
        1
    } else if spec.gap == 0 {
        k - 1
    } else {
        k - 2
    };
    let adjacent_capacity = Limits::whole(limits.adjacent) * (v - 1);
    if snippet as u64 > adjacent_capacity {
        return Err(format!(
            "adjacent-pair concurrence (c2 + delta): {} snippet clusters exceed capacity {}",
            snippet, adjacent_capacity
        ));
    }
    let adjacent_used = (snippet as u64 * max_adjacent_per_snippet).min(adjacent_capacity);
    let distant_needed = n * pairs_per_row - adjacent_used;
    let distant_capacity = Limits::whole(limits.distant) * binomial(spec.v - 1, 2);
    if distant_needed > distant_capacity {
        return Err(format!(
            "distant-pair concurrence (c3 + delta): at least {} distant pairs needed, capacity {} x {} = {}",
            distant_needed,
            Limits::whole(limits.distant),
            binomial(spec.v - 1, 2),
            distant_capacity
        ));
    }
    Ok(())
}

/// Builds a hybrid design. The first `n_s = round(n w)` rows form the snippet
/// portion.
pub fn generate_hybrid_design(spec: &DesignSpec, options: &HybridOptions) -> Result<IncidenceMatrix, DesignError> {
    spec.validate()?;
    if spec.v > MAX_GRID {
        return Err(DesignError::InvalidSpec(format!("hybrid designs support grids of at most {} points", MAX_GRID)));
    }
    let targets = compute_target_concurrence(spec)?;
    let snippet = spec.snippet_count();
    check_snippet_room(spec, snippet)?;
    let limits = Limits::new(&targets, spec.delta);
    if let Err(constraint) = check_capacity(spec, snippet, &limits) {
        return Err(DesignError::ConstructionFailed { placed: 0, iterations: 0, constraint });
    }

    let mut b = Builder {
        n: spec.n,
        v: spec.v,
        k: spec.k,
        snippet,
        gap: spec.gap,
        limits,
        column: alloc::vec![0; spec.v],
        pair: alloc::vec![0; spec.v * spec.v],
        rows: alloc::vec![0; spec.n],
        store: Vec::new(),
        store_limit: options.store(spec.n),
    };
    let budget = options.iterations(spec.n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut iterations = 0usize;

    let mut i = 0;
    while i < b.n {
        if let Some(row) = b.solve(i, &mut rng) {
            b.rows[i] = row;
            b.apply(row, true);
            i += 1;
            continue;
        }
        makeup(&mut b, i, budget, &mut iterations, &mut rng)?;
    }
    Ok(IncidenceMatrix::from_masks(spec.v, &b.rows, Structure::Hybrid, snippet))
}

/// Re-solves randomly chosen earlier subjects until one of them accepts a
/// new row. Earlier subjects are drawn without replacement; the pool is
/// refilled once exhausted.
fn makeup(
    b: &mut Builder,
    stuck: usize,
    budget: usize,
    iterations: &mut usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), DesignError> {
    let fail = |iterations: usize, why: &str| DesignError::ConstructionFailed {
        placed: stuck,
        iterations,
        constraint: format!("{} (consider a larger delta)", why),
    };
    if stuck == 0 {
        return Err(fail(*iterations, "first subject has no feasible row"));
    }
    let mut pool: Vec<usize> = Vec::new();
    loop {
        if *iterations >= budget {
            return Err(fail(*iterations, "make-up iteration budget exhausted"));
        }
        *iterations += 1;
        if pool.is_empty() {
            pool.extend(0..stuck);
        }
        let pick = pool.swap_remove(rng.random_range(0..pool.len()));
        let old = b.rows[pick];
        b.apply(old, false);
        b.store.push(old);
        if b.store.len() > b.store_limit {
            b.store.clear();
        }
        match b.solve(pick, rng) {
            Some(row) => {
                b.rows[pick] = row;
                b.apply(row, true);
                return Ok(());
            }
            None => b.apply(old, true),
        }
    }
}

/// A constraint of the hybrid program violated by a finished design.
#[derive(Debug, Clone, PartialEq)]
pub enum HybridViolation {
    RowSum { row: usize, sum: usize },
    ColumnSum { column: usize, count: u32 },
    AdjacentPair { column: usize, count: u32 },
    DistantPair { first: usize, second: usize, count: u32 },
    MissingCluster { row: usize, position: usize },
    ClusterExclusion { row: usize, column: usize },
    AdjacentInBibdRow { row: usize, column: usize },
}

/// Checks a finished design against every constraint of the hybrid program
/// (row sums, concurrence caps, snippet cluster and exclusion zone,
/// no-adjacency in the BIBD portion). Indices in violations are 0-based.
pub fn verify_hybrid(design: &IncidenceMatrix, spec: &DesignSpec) -> Result<(), HybridViolation> {
    let targets = compute_target_concurrence(spec).expect("spec validated by caller");
    let limits = Limits::new(&targets, spec.delta);
    let v = design.grid_size();
    for (row, &sum) in design.row_sums().iter().enumerate() {
        if sum != spec.k {
            return Err(HybridViolation::RowSum { row, sum });
        }
    }
    let c = design.concurrence();
    for j in 0..v {
        if c.get(j, j) as f64 > limits.column + EPS {
            return Err(HybridViolation::ColumnSum { column: j, count: c.get(j, j) });
        }
        for k in j + 1..v {
            let count = c.get(j, k);
            if count as f64 > limits.pair(j, k) + EPS {
                return Err(if k == j + 1 {
                    HybridViolation::AdjacentPair { column: j, count }
                } else {
                    HybridViolation::DistantPair { first: j, second: k, count }
                });
            }
        }
    }
    let snippet = design.snippet_rows();
    for row in 0..design.subjects() {
        let x = design.row(row);
        if row < snippet {
            let p = snippet_position(row, v);
            if x[p] != 1 || x[p + 1] != 1 {
                return Err(HybridViolation::MissingCluster { row, position: p });
            }
            let ex = exclusion_mask(p, spec.gap, v);
            if let Some(column) = (0..v).find(|&j| ex & bit(j) != 0 && x[j] == 1) {
                return Err(HybridViolation::ClusterExclusion { row, column });
            }
        } else if let Some(column) = (0..v.saturating_sub(1)).find(|&j| x[j] == 1 && x[j + 1] == 1) {
            return Err(HybridViolation::AdjacentInBibdRow { row, column });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, w: f64, delta: f64) -> DesignSpec {
        DesignSpec::new(n, 25, 5).with_snippet_fraction(w).with_delta(delta).with_gap(2).with_seed(42)
    }

    #[test]
    fn exclusion_zone_clips_at_the_edges() {
        assert_eq!(exclusion_mask(0, 2, 25), bit(2) | bit(3));
        assert_eq!(exclusion_mask(5, 2, 25), bit(3) | bit(4) | bit(7) | bit(8));
        assert_eq!(exclusion_mask(23, 2, 25), bit(21) | bit(22));
        assert_eq!(exclusion_mask(4, 0, 25), 0);
    }

    #[test]
    fn snippet_positions_wrap() {
        assert_eq!(snippet_position(0, 25), 0);
        assert_eq!(snippet_position(23, 25), 23);
        assert_eq!(snippet_position(24, 25), 0);
    }

    #[test]
    fn feasible_design_satisfies_every_constraint() {
        let s = spec(60, 0.2, 2.0);
        let d = generate_hybrid_design(&s, &HybridOptions::default()).unwrap();
        assert_eq!(d.snippet_rows(), 12);
        verify_hybrid(&d, &s).unwrap();
        let first = d.row_indices(0);
        assert_eq!(&first[..2], &[0, 1]);
        assert!(first[2..].iter().all(|&j| j >= 4));
    }

    #[test]
    fn construction_is_deterministic() {
        let s = spec(60, 0.3, 1.0);
        let a = generate_hybrid_design(&s, &HybridOptions::default());
        let b = generate_hybrid_design(&s, &HybridOptions::default());
        assert_eq!(a, b);
    }

    #[test]
    fn capacity_violation_fails_immediately() {
        // 24 BIBD rows alone need 240 distant pairs; with c3 + 1 < 2 there are 276 slots,
        // and the 6 snippet rows add at least 7 distant pairs each.
        let err = generate_hybrid_design(&spec(30, 0.2, 1.0), &HybridOptions::default()).unwrap_err();
        match err {
            DesignError::ConstructionFailed { iterations, constraint, .. } => {
                assert_eq!(iterations, 0);
                assert!(constraint.contains("distant-pair"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn oversized_gap_is_infeasible() {
        let s = DesignSpec::new(10, 8, 5).with_snippet_fraction(0.5).with_gap(4);
        assert!(matches!(generate_hybrid_design(&s, &HybridOptions::default()), Err(DesignError::InfeasibleSpec(_))));
    }

    #[test]
    fn tiny_budget_reports_construction_failure() {
        let opts = HybridOptions { max_makeup_iterations: Some(0), store_limit: None };
        // tight but not excluded by counting: make-up is needed somewhere
        let s = spec(60, 0.3, 1.0);
        match generate_hybrid_design(&s, &opts) {
            Ok(d) => verify_hybrid(&d, &s).unwrap(),
            Err(DesignError::ConstructionFailed { iterations, .. }) => assert_eq!(iterations, 0),
            Err(e) => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn verifier_flags_adjacent_bibd_rows() {
        let s = DesignSpec::new(2, 25, 5).with_delta(10.0);
        let rows = [alloc::vec![0usize, 1, 5, 10, 15], alloc::vec![0usize, 2, 4, 6, 8]];
        let d = IncidenceMatrix::from_index_rows(25, &rows, Structure::Hybrid, 0);
        assert_eq!(verify_hybrid(&d, &s), Err(HybridViolation::AdjacentInBibdRow { row: 0, column: 0 }));
    }
}
