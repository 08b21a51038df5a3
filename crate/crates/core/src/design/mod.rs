//! Pilot-study designs on a regular grid.
//!
//! A design is an `n × v` incidence matrix: row `i` marks the grid points at
//! which subject `i` is observed. Four structures are provided:
//!
//! - random: every subject gets an independent uniform K-subset;
//! - snippet: every subject gets one run of K consecutive grid points;
//! - BIBD: the 30 lines of the affine plane of order 5, a 2-(25, 5, 1) design;
//! - hybrid: a snippet portion followed by a near-BIBD portion, built one
//!   subject at a time by a constrained 0/1 program (see [`hybrid`]).

mod basic;
mod bibd;
pub mod hybrid;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::subsets::choose2;

pub use basic::{generate_random_design, generate_snippet_design};
pub use bibd::{extend_design, generate_bibd, BIBD_BLOCKS, BIBD_POINTS};
pub use hybrid::{generate_hybrid_design, verify_hybrid, HybridOptions, HybridViolation};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("invalid design spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible design spec: {0}")]
    InfeasibleSpec(String),
    #[error(
        "hybrid construction failed with {placed} subjects placed after {iterations} make-up iterations: {constraint}"
    )]
    ConstructionFailed { placed: usize, iterations: usize, constraint: String },
}

/// Design structure tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Structure {
    Random,
    Snippet,
    Bibd,
    Hybrid,
}

impl Structure {
    pub const ALL: [Structure; 4] = [Structure::Random, Structure::Snippet, Structure::Bibd, Structure::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Random => "random",
            Structure::Snippet => "snippet",
            Structure::Bibd => "bibd",
            Structure::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Option<Structure> {
        Structure::ALL.into_iter().find(|x| x.as_str() == s)
    }

    pub(crate) fn id(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters of a pilot-study design.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DesignSpec {
    /// Number of subjects.
    pub n: usize,
    /// Grid size.
    pub v: usize,
    /// Observations per subject.
    pub k: usize,
    /// Fraction of subjects in the snippet portion of a hybrid design.
    pub w: f64,
    /// Concurrence tolerance around the targets.
    pub delta: f64,
    /// Exclusion radius around a snippet cluster.
    pub gap: usize,
    pub seed: u64,
}

impl DesignSpec {
    pub fn new(n: usize, v: usize, k: usize) -> Self {
        DesignSpec { n, v, k, w: 0.0, delta: 1.0, gap: 2, seed: 0 }
    }

    pub fn with_snippet_fraction(mut self, w: f64) -> Self {
        self.w = w;
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_gap(mut self, gap: usize) -> Self {
        self.gap = gap;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), DesignError> {
        if self.v == 0 {
            return Err(DesignError::InvalidSpec("grid size v must be positive".into()));
        }
        if self.k > self.v {
            return Err(DesignError::InvalidSpec(alloc::format!(
                "observations per subject K = {} exceeds grid size v = {}",
                self.k,
                self.v
            )));
        }
        if !(0.0..=1.0).contains(&self.w) {
            return Err(DesignError::InvalidSpec(alloc::format!("snippet fraction w = {} outside [0, 1]", self.w)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(DesignError::InvalidSpec(alloc::format!(
                "tolerance delta = {} must be finite and non-negative",
                self.delta
            )));
        }
        Ok(())
    }

    /// Number of snippet subjects: `n·w` rounded to nearest, ties up.
    pub fn snippet_count(&self) -> usize {
        let ns = libm::floor(self.n as f64 * self.w + 0.5) as usize;
        ns.min(self.n)
    }
}

/// Target Toeplitz-like concurrence values: `c1` on the diagonal, `c2` for
/// adjacent grid pairs and `c3` for every other pair.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TargetConcurrence {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

/// `c1 = nK/v`, `c2` mixes the snippet and BIBD adjacent-pair rates with
/// weight `w`, and `c3` spreads the remaining pair slots evenly over the
/// `C(v-1, 2)` non-adjacent pairs.
pub fn compute_target_concurrence(spec: &DesignSpec) -> Result<TargetConcurrence, DesignError> {
    spec.validate()?;
    if spec.v < 2 || spec.k < 2 {
        return Err(DesignError::InvalidSpec("target concurrence needs v >= 2 and K >= 2".into()));
    }
    let n = spec.n as f64;
    let v = spec.v as f64;
    let k = spec.k as f64;
    let w = spec.w;
    let c1 = n * k / v;
    let c2 = w * n * (k - 1.0) / (v - 1.0) + (1.0 - w) * n * k * (k - 1.0) / (v * (v - 1.0));
    let distant_pairs = choose2(v - 1.0);
    let c3 = if distant_pairs > 0.0 { (n * choose2(k) - c2 * (v - 1.0)) / distant_pairs } else { 0.0 };
    Ok(TargetConcurrence { c1, c2, c3 })
}

/// `c3` with the `C(n-1, 2)` denominator as printed in the source formula.
/// Kept for reporting only; it does not conserve pair slots.
pub fn literal_c3(spec: &DesignSpec, targets: &TargetConcurrence) -> f64 {
    let n = spec.n as f64;
    let denom = choose2(n - 1.0);
    if denom <= 0.0 {
        return f64::NAN;
    }
    (n * choose2(spec.k as f64) - targets.c2 * (spec.v as f64 - 1.0)) / denom
}

/// An `n × v` 0/1 incidence matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncidenceMatrix {
    n: usize,
    v: usize,
    entries: Vec<u8>,
    structure: Structure,
    snippet_rows: usize,
}

impl IncidenceMatrix {
    /// Builds a matrix from explicit 0/1 rows. Every row must have length `v`
    /// and only 0/1 entries.
    pub fn from_rows(
        v: usize,
        rows: &[Vec<u8>],
        structure: Structure,
        snippet_rows: usize,
    ) -> Result<Self, DesignError> {
        let mut entries = Vec::with_capacity(rows.len() * v);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != v {
                return Err(DesignError::InvalidSpec(alloc::format!(
                    "row {} has {} entries, expected {}",
                    i + 1,
                    row.len(),
                    v
                )));
            }
            if row.iter().any(|&x| x > 1) {
                return Err(DesignError::InvalidSpec(alloc::format!("row {} has a non-binary entry", i + 1)));
            }
            entries.extend_from_slice(row);
        }
        Ok(IncidenceMatrix { n: rows.len(), v, entries, structure, snippet_rows: snippet_rows.min(rows.len()) })
    }

    /// Builds a matrix from per-row index sets (0-based columns).
    pub(crate) fn from_index_rows(v: usize, rows: &[Vec<usize>], structure: Structure, snippet_rows: usize) -> Self {
        let mut entries = alloc::vec![0u8; rows.len() * v];
        for (i, row) in rows.iter().enumerate() {
            for &j in row {
                entries[i * v + j] = 1;
            }
        }
        IncidenceMatrix { n: rows.len(), v, entries, structure, snippet_rows }
    }

    pub(crate) fn from_masks(v: usize, masks: &[u64], structure: Structure, snippet_rows: usize) -> Self {
        let rows: Vec<Vec<usize>> = masks.iter().map(|&m| (0..v).filter(|&j| m >> j & 1 == 1).collect()).collect();
        Self::from_index_rows(v, &rows, structure, snippet_rows)
    }

    pub fn subjects(&self) -> usize {
        self.n
    }

    pub fn grid_size(&self) -> usize {
        self.v
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn snippet_rows(&self) -> usize {
        self.snippet_rows
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.entries[i * self.v + j]
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.entries[i * self.v..(i + 1) * self.v]
    }

    /// 0-based column indices observed for subject `i`.
    pub fn row_indices(&self, i: usize) -> Vec<usize> {
        self.row(i).iter().enumerate().filter(|(_, &x)| x == 1).map(|(j, _)| j).collect()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        (0..self.n).map(|i| self.row(i).iter().map(|&x| x as usize).sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<usize> {
        let mut sums = alloc::vec![0usize; self.v];
        for i in 0..self.n {
            for (s, &x) in sums.iter_mut().zip(self.row(i)) {
                *s += x as usize;
            }
        }
        sums
    }

    /// Applies a column relabelling: new column `perm[j]` receives old column `j`.
    pub(crate) fn permute_columns(&self, perm: &[usize]) -> Self {
        let mut entries = alloc::vec![0u8; self.entries.len()];
        for i in 0..self.n {
            for j in 0..self.v {
                entries[i * self.v + perm[j]] = self.get(i, j);
            }
        }
        IncidenceMatrix { entries, ..self.clone() }
    }

    pub(crate) fn with_rows(&self, rows: &[usize]) -> Self {
        let mut entries = Vec::with_capacity(rows.len() * self.v);
        for &i in rows {
            entries.extend_from_slice(self.row(i));
        }
        IncidenceMatrix { n: rows.len(), v: self.v, entries, structure: self.structure, snippet_rows: 0 }
    }

    /// The `v × v` concurrence matrix `N'N`.
    pub fn concurrence(&self) -> Concurrence {
        let v = self.v;
        let mut counts = alloc::vec![0u32; v * v];
        for i in 0..self.n {
            let idx = self.row_indices(i);
            for &a in &idx {
                for &b in &idx {
                    counts[a * v + b] += 1;
                }
            }
        }
        Concurrence { v, counts }
    }

    /// Upper-triangle (diagonal included) nonzero concurrence entries as
    /// 1-based `(j, k, count)` triples, row-major.
    pub fn plot_data(&self) -> Vec<(usize, usize, u32)> {
        self.concurrence().plot_data()
    }
}

/// Symmetric `v × v` count matrix `N'N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concurrence {
    v: usize,
    counts: Vec<u32>,
}

impl Concurrence {
    pub fn size(&self) -> usize {
        self.v
    }

    pub fn get(&self, j: usize, k: usize) -> u32 {
        self.counts[j * self.v + k]
    }

    pub fn trace(&self) -> u64 {
        (0..self.v).map(|j| self.get(j, j) as u64).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.v).all(|j| (0..j).all(|k| self.get(j, k) == self.get(k, j)))
    }

    pub fn plot_data(&self) -> Vec<(usize, usize, u32)> {
        let mut out = Vec::new();
        for j in 0..self.v {
            for k in j..self.v {
                let c = self.get(j, k);
                if c > 0 {
                    out.push((j + 1, k + 1, c));
                }
            }
        }
        out
    }

    /// Largest entries on the diagonal, on the first off-diagonal and on the
    /// remaining off-diagonals.
    pub fn band_maxima(&self) -> BandStats {
        let mut s = BandStats::default();
        for j in 0..self.v {
            s.diagonal_max = s.diagonal_max.max(self.get(j, j));
            for k in j + 1..self.v {
                let c = self.get(j, k);
                if k == j + 1 {
                    s.adjacent_max = s.adjacent_max.max(c);
                } else {
                    s.distant_max = s.distant_max.max(c);
                }
            }
        }
        s
    }

    /// Mean of `N'N[j, j+1]` over the `v - 1` adjacent grid pairs.
    pub fn mean_adjacent(&self) -> f64 {
        if self.v < 2 {
            return 0.0;
        }
        let total: u64 = (0..self.v - 1).map(|j| self.get(j, j + 1) as u64).sum();
        total as f64 / (self.v - 1) as f64
    }

    /// Largest absolute deviation from the targets in each band.
    pub fn deviations(&self, targets: &TargetConcurrence) -> ConcurrenceDeviation {
        let mut d = ConcurrenceDeviation::default();
        for j in 0..self.v {
            d.diagonal = d.diagonal.max(libm::fabs(self.get(j, j) as f64 - targets.c1));
            for k in j + 1..self.v {
                let c = self.get(j, k) as f64;
                if k == j + 1 {
                    d.adjacent = d.adjacent.max(libm::fabs(c - targets.c2));
                } else {
                    d.distant = d.distant.max(libm::fabs(c - targets.c3));
                }
            }
        }
        d
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BandStats {
    pub diagonal_max: u32,
    pub adjacent_max: u32,
    pub distant_max: u32,
}

/// Achieved maximum absolute deviations of `N'N` from `(c1, c2, c3)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConcurrenceDeviation {
    pub diagonal: f64,
    pub adjacent: f64,
    pub distant: f64,
}

/// Builds a design of the requested structure. BIBD ignores `spec.n`'s
/// structure beyond replication: the base 30-block design is extended to
/// `spec.n` rows.
pub fn generate(structure: Structure, spec: &DesignSpec) -> Result<IncidenceMatrix, DesignError> {
    generate_with(structure, spec, &HybridOptions::default())
}

/// As [`generate`], with explicit hybrid construction settings.
pub fn generate_with(
    structure: Structure,
    spec: &DesignSpec,
    hybrid: &HybridOptions,
) -> Result<IncidenceMatrix, DesignError> {
    match structure {
        Structure::Random => generate_random_design(spec),
        Structure::Snippet => generate_snippet_design(spec),
        Structure::Bibd => {
            if spec.v != BIBD_POINTS || spec.k != 5 {
                return Err(DesignError::InvalidSpec(alloc::format!(
                    "BIBD structure requires v = {} and K = 5",
                    BIBD_POINTS
                )));
            }
            let base = generate_bibd(spec.seed);
            extend_design(&base, spec.n, spec.seed)
        }
        Structure::Hybrid => generate_hybrid_design(spec, hybrid),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn targets_at_thirty_subjects() {
        let t = compute_target_concurrence(&DesignSpec::new(30, 25, 5).with_snippet_fraction(0.2)).unwrap();
        assert_abs_diff_eq!(t.c1, 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.c2, 1.8, epsilon = 1e-12);
        assert_abs_diff_eq!(t.c3, 256.8 / 276.0, epsilon = 1e-12);

        let t = compute_target_concurrence(&DesignSpec::new(30, 25, 5)).unwrap();
        assert_abs_diff_eq!(t.c1, 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.c2, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.c3, 1.0, epsilon = 1e-12);

        let t = compute_target_concurrence(&DesignSpec::new(30, 25, 5).with_snippet_fraction(1.0)).unwrap();
        assert_abs_diff_eq!(t.c2, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.c3, 180.0 / 276.0, epsilon = 1e-12);
    }

    #[test]
    fn literal_denominator_is_reported_separately() {
        let spec = DesignSpec::new(30, 25, 5).with_snippet_fraction(0.2);
        let t = compute_target_concurrence(&spec).unwrap();
        assert_abs_diff_eq!(literal_c3(&spec, &t), 256.8 / 406.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(compute_target_concurrence(&DesignSpec::new(30, 1, 1)).is_err());
        assert!(compute_target_concurrence(&DesignSpec::new(30, 25, 1)).is_err());
        assert!(DesignSpec::new(30, 25, 30).validate().is_err());
        assert!(DesignSpec::new(30, 25, 5).with_snippet_fraction(1.5).validate().is_err());
    }

    #[test]
    fn snippet_count_rounds_half_up() {
        assert_eq!(DesignSpec::new(30, 25, 5).with_snippet_fraction(0.2).snippet_count(), 6);
        assert_eq!(DesignSpec::new(25, 25, 5).with_snippet_fraction(0.1).snippet_count(), 3);
        assert_eq!(DesignSpec::new(15, 25, 5).with_snippet_fraction(0.1).snippet_count(), 2);
        assert_eq!(DesignSpec::new(14, 25, 5).with_snippet_fraction(0.1).snippet_count(), 1);
    }

    #[test]
    fn full_row_concurrence_is_all_ones() {
        let m = IncidenceMatrix::from_rows(4, &[alloc::vec![1, 1, 1, 1]], Structure::Random, 0).unwrap();
        let c = m.concurrence();
        assert!((0..4).all(|j| (0..4).all(|k| c.get(j, k) == 1)));
        assert_eq!(c.trace(), 4);
    }

    #[test]
    fn empty_design_has_no_plot_data() {
        let m = IncidenceMatrix::from_rows(5, &[], Structure::Random, 0).unwrap();
        assert!(m.plot_data().is_empty());
    }

    #[test]
    fn from_rows_rejects_bad_shapes() {
        assert!(IncidenceMatrix::from_rows(3, &[alloc::vec![1, 0]], Structure::Random, 0).is_err());
        assert!(IncidenceMatrix::from_rows(2, &[alloc::vec![1, 2]], Structure::Random, 0).is_err());
    }
}
