//! Local linear kernel smoothers on gridded data.
//!
//! Observations live on grid points (1-D) or grid cells (2-D), so the pooled
//! scatter is aggregated into per-location counts, means and within-location
//! sums of squares before smoothing. The fits, residual sums of squares and
//! hat-matrix traces are identical to those of the unaggregated data.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};

fn epanechnikov(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

const K0: f64 = 0.75;

/// Aggregated 1-D data: location, count, mean, within-location sum of squares.
#[derive(Debug, Clone, Default)]
pub(crate) struct Cells1d {
    pub x: Vec<f64>,
    pub count: Vec<f64>,
    pub mean: Vec<f64>,
    pub ss: Vec<f64>,
}

impl Cells1d {
    /// Aggregates `(grid index, value)` pairs onto the grid.
    pub fn from_grid(grid: &[f64], obs: impl Iterator<Item = (usize, f64)>) -> Self {
        let v = grid.len();
        let mut count = alloc::vec![0.0; v];
        let mut sum = alloc::vec![0.0; v];
        let mut sumsq = alloc::vec![0.0; v];
        for (j, y) in obs {
            count[j] += 1.0;
            sum[j] += y;
            sumsq[j] += y * y;
        }
        let mut cells = Cells1d::default();
        for j in 0..v {
            if count[j] > 0.0 {
                let m = sum[j] / count[j];
                cells.x.push(grid[j]);
                cells.count.push(count[j]);
                cells.mean.push(m);
                cells.ss.push((sumsq[j] - count[j] * m * m).max(0.0));
            }
        }
        cells
    }

    pub fn total(&self) -> f64 {
        self.count.iter().sum()
    }

    /// Local linear estimate at `x0` and the per-observation hat weight an
    /// observation located at `x0` would receive. Falls back to the local
    /// constant fit when fewer than two distinct locations carry weight.
    fn fit_at(&self, x0: f64, h: f64) -> Option<(f64, f64)> {
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for c in 0..self.x.len() {
            let d = self.x[c] - x0;
            let k = epanechnikov(d / h);
            if k == 0.0 {
                continue;
            }
            let wk = self.count[c] * k;
            s0 += wk;
            s1 += wk * d;
            s2 += wk * d * d;
            t0 += wk * self.mean[c];
            t1 += wk * d * self.mean[c];
        }
        if s0 <= 0.0 {
            return None;
        }
        let det = s0 * s2 - s1 * s1;
        if det <= 1e-10 * s0 * s2.max(f64::MIN_POSITIVE) || s2 <= 0.0 {
            return Some((t0 / s0, K0 / s0));
        }
        let est = (s2 * t0 - s1 * t1) / det;
        Some((est, K0 * s2 / det))
    }

    /// Smoothed values at `targets`, or `None` if any target has no data in
    /// its window.
    pub fn smooth(&self, targets: &[f64], h: f64) -> Option<Vec<f64>> {
        targets.iter().map(|&x| self.fit_at(x, h).map(|f| f.0)).collect()
    }

    /// Generalised cross-validation score at bandwidth `h`.
    pub fn gcv(&self, h: f64) -> Option<f64> {
        let n = self.total();
        let mut rss = 0.0;
        let mut trace = 0.0;
        for c in 0..self.x.len() {
            let (est, hat) = self.fit_at(self.x[c], h)?;
            let r = self.mean[c] - est;
            rss += self.ss[c] + self.count[c] * r * r;
            trace += self.count[c] * hat;
        }
        let denom = 1.0 - trace / n;
        if denom <= 1e-8 {
            return None;
        }
        Some(rss / n / (denom * denom))
    }
}

/// Aggregated 2-D data on grid cells.
#[derive(Debug, Clone, Default)]
pub(crate) struct Cells2d {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub count: Vec<f64>,
    pub mean: Vec<f64>,
    pub ss: Vec<f64>,
}

impl Cells2d {
    pub fn from_grid(grid: &[f64], obs: impl Iterator<Item = (usize, usize, f64)>) -> Self {
        let v = grid.len();
        let mut count = alloc::vec![0.0; v * v];
        let mut sum = alloc::vec![0.0; v * v];
        let mut sumsq = alloc::vec![0.0; v * v];
        for (j, k, g) in obs {
            count[j * v + k] += 1.0;
            sum[j * v + k] += g;
            sumsq[j * v + k] += g * g;
        }
        let mut cells = Cells2d::default();
        for j in 0..v {
            for k in 0..v {
                let c = j * v + k;
                if count[c] > 0.0 {
                    let m = sum[c] / count[c];
                    cells.x.push(grid[j]);
                    cells.y.push(grid[k]);
                    cells.count.push(count[c]);
                    cells.mean.push(m);
                    cells.ss.push((sumsq[c] - count[c] * m * m).max(0.0));
                }
            }
        }
        cells
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.count.iter().sum()
    }

    /// Weighted least squares with design rows `basis(dx, dy)`; returns the
    /// intercept and the `(0,0)` entry of the inverted normal matrix.
    fn weighted_fit(&self, x0: f64, y0: f64, h: f64, basis: impl Fn(f64, f64) -> Vector3<f64>) -> Option<(f64, f64)> {
        let mut xtx = Matrix3::<f64>::zeros();
        let mut xty = Vector3::<f64>::zeros();
        let (mut s0, mut t0) = (0.0, 0.0);
        for c in 0..self.x.len() {
            let dx = self.x[c] - x0;
            let dy = self.y[c] - y0;
            let k = epanechnikov(dx / h) * epanechnikov(dy / h);
            if k == 0.0 {
                continue;
            }
            let wk = self.count[c] * k;
            let b = basis(dx, dy);
            xtx += b * b.transpose() * wk;
            xty += b * (wk * self.mean[c]);
            s0 += wk;
            t0 += wk * self.mean[c];
        }
        if s0 <= 0.0 {
            return None;
        }
        let scale = xtx.diagonal().max();
        match xtx.try_inverse() {
            Some(inv) if xtx.determinant().abs() > 1e-12 * scale * scale * scale => {
                let beta = inv * xty;
                Some((beta[0], inv[(0, 0)]))
            }
            _ => Some((t0 / s0, 1.0 / s0)),
        }
    }

    fn linear_at(&self, x0: f64, y0: f64, h: f64) -> Option<(f64, f64)> {
        self.weighted_fit(x0, y0, h, |dx, dy| Vector3::new(1.0, dx, dy)).map(|(est, inv00)| (est, K0 * K0 * inv00))
    }

    /// Local linear surface on `grid × grid`, symmetrised; `None` if any grid
    /// pair has no data in its window.
    pub fn smooth_surface(&self, grid: &[f64], h: f64) -> Option<Vec<f64>> {
        let v = grid.len();
        let mut out = alloc::vec![0.0; v * v];
        for j in 0..v {
            for k in j..v {
                let a = self.linear_at(grid[j], grid[k], h)?.0;
                let b = if j == k { a } else { self.linear_at(grid[k], grid[j], h)?.0 };
                let s = 0.5 * (a + b);
                out[j * v + k] = s;
                out[k * v + j] = s;
            }
        }
        Some(out)
    }

    /// Surface value on the diagonal at `t` from a fit that is linear along
    /// the diagonal and quadratic across it.
    pub fn rotated_diagonal(&self, t: f64, h: f64) -> Option<f64> {
        let r = core::f64::consts::FRAC_1_SQRT_2;
        self.weighted_fit(t, t, h, |dx, dy| {
            let along = (dx + dy) * r;
            let across = (dx - dy) * r;
            Vector3::new(1.0, along, across * across)
        })
        .map(|f| f.0)
    }

    pub fn gcv(&self, h: f64) -> Option<f64> {
        let n = self.total();
        let mut rss = 0.0;
        let mut trace = 0.0;
        for c in 0..self.x.len() {
            let (est, hat) = self.linear_at(self.x[c], self.y[c], h)?;
            let r = self.mean[c] - est;
            rss += self.ss[c] + self.count[c] * r * r;
            trace += self.count[c] * hat;
        }
        let denom = 1.0 - trace / n;
        if denom <= 1e-8 {
            return None;
        }
        Some(rss / n / (denom * denom))
    }
}

/// Geometric bandwidth candidates between `lo` and `hi`.
pub(crate) fn candidates(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 || hi <= lo {
        return alloc::vec![hi.max(lo)];
    }
    let ratio = libm::pow(hi / lo, 1.0 / (count - 1) as f64);
    (0..count).map(|i| lo * libm::pow(ratio, i as f64)).collect()
}

/// Picks the candidate with the smallest score; ties keep the smaller
/// bandwidth. `None` when every candidate is degenerate.
pub(crate) fn select(cands: &[f64], score: impl Fn(f64) -> Option<f64>) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &h in cands {
        if let Some(s) = score(h) {
            if s.is_finite() && best.is_none_or(|(_, b)| s < b) {
                best = Some((h, s));
            }
        }
    }
    best.map(|(h, _)| h)
}
