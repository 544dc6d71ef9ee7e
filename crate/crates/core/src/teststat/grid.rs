use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::ClusteredSample;
use crate::error::{HteError, Result};
use crate::scalar::Real;

/// Lower and upper percentile of each covariate bounding the grid.
pub const GRID_PERCENTILES: (f64, f64) = (0.10, 0.90);

/// Integration points over the trimmed covariate box.
///
/// For `d = 1` the points are a uniform grid carrying composite trapezoid
/// weights; for `d >= 2` they are uniform random draws with equal weights.
/// Weights always sum to `span`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid<T> {
    d: usize,
    points: Vec<T>,
    weights: Vec<T>,
    bounds: Vec<(T, T)>,
    span: T,
}

impl<T: Real> Grid<T> {
    /// Uniform trapezoid grid on `[lo, hi]`.
    pub fn trapezoid(lo: T, hi: T, n_points: usize) -> Result<Self> {
        if n_points < 2 {
            return Err(HteError::Config(format!(
                "grid needs at least 2 points, got {n_points}"
            )));
        }
        if !(hi > lo) {
            return Err(HteError::EmptyDomain {
                what: format!("integration range [{lo}, {hi}]"),
            });
        }
        let span = hi - lo;
        let step = span / T::from_usize(n_points - 1).unwrap();
        let mut points: Vec<T> = (0..n_points).map(|g| lo + step * T::from_usize(g).unwrap()).collect();
        points[n_points - 1] = hi;
        let mut weights = vec![step; n_points];
        weights[0] = step * T::lit(0.5);
        weights[n_points - 1] = step * T::lit(0.5);
        Ok(Self {
            d: 1,
            points,
            weights,
            bounds: vec![(lo, hi)],
            span,
        })
    }

    /// Arbitrary points (row-major) and weights over a box.
    pub fn from_parts(d: usize, points: Vec<T>, weights: Vec<T>, bounds: Vec<(T, T)>) -> Result<Self> {
        if d == 0 || points.len() != weights.len() * d || bounds.len() != d || weights.is_empty() {
            return Err(HteError::Config("inconsistent grid dimensions".into()));
        }
        if weights.iter().any(|&w| !(w >= T::zero())) {
            return Err(HteError::Config("grid weights must be nonnegative".into()));
        }
        let span = bounds.iter().fold(T::one(), |a, &(lo, hi)| a * (hi - lo));
        Ok(Self {
            d,
            points,
            weights,
            bounds,
            span,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn point(&self, g: usize) -> &[T] {
        &self.points[g * self.d..(g + 1) * self.d]
    }

    /// Row-major point coordinates.
    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn bounds(&self) -> &[(T, T)] {
        &self.bounds
    }

    /// Measure of the integration box.
    pub fn span(&self) -> T {
        self.span
    }
}

/// Linear-interpolation percentile of sorted data (`p` in `[0, 1]`).
pub fn percentile<T: Real>(sorted: &[T], p: f64) -> T {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = T::lit(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Integration grid between the 10th and 90th covariate percentiles.
/// `seed` only matters for `d >= 2`.
pub fn build_grid<T: Real>(sample: &ClusteredSample<T>, n_points: usize, seed: u64) -> Result<Grid<T>> {
    if n_points < 2 {
        return Err(HteError::Config(format!(
            "grid needs at least 2 points, got {n_points}"
        )));
    }
    let d = sample.d();
    let n = sample.n_units();
    let mut bounds = Vec::with_capacity(d);
    for j in 0..d {
        let mut col: Vec<T> = (0..n).map(|i| sample.x_row(i)[j]).collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = percentile(&col, GRID_PERCENTILES.0);
        let hi = percentile(&col, GRID_PERCENTILES.1);
        if !(hi > lo) {
            return Err(HteError::EmptyDomain {
                what: format!("percentile range of covariate {j}"),
            });
        }
        bounds.push((lo, hi));
    }
    if d == 1 {
        return Grid::trapezoid(bounds[0].0, bounds[0].1, n_points);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_points * d);
    for _ in 0..n_points {
        for &(lo, hi) in &bounds {
            let u: f64 = rng.random();
            points.push(lo + (hi - lo) * T::lit(u));
        }
    }
    let span = bounds.iter().fold(T::one(), |a, &(lo, hi)| a * (hi - lo));
    let w = span / T::from_usize(n_points).unwrap();
    Grid::from_parts(d, points, vec![w; n_points], bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn trapezoid_weights() {
        let g = Grid::trapezoid(0.1, 0.9, 9).unwrap();
        assert_relative_eq!(g.point(4)[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(g.span(), 0.8, epsilon = 1e-15);
        assert_relative_eq!(g.weights()[0] * 2.0, g.weights()[1], epsilon = 1e-15);
        assert_relative_eq!(g.weights().iter().sum::<f64>(), 0.8, epsilon = 1e-14);
    }

    #[test]
    fn two_point_grid() {
        let g = Grid::trapezoid(0.0, 2.0, 2).unwrap();
        assert_eq!(g.weights(), &[1.0, 1.0]);
        assert!(Grid::trapezoid(0.0, 1.0, 1).is_err());
        assert!(Grid::trapezoid(1.0, 1.0, 5).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 0.1), 1.0);
        assert_eq!(percentile(&v, 0.95), 9.5);
    }

    #[test]
    fn cubic_integrates_accurately() {
        let g = Grid::trapezoid(0.1f64, 0.9, 200).unwrap();
        let f = |x: f64| 2.0 * x * x * x - x + 0.5;
        let got: f64 = (0..g.len()).map(|i| g.weights()[i] * f(g.point(i)[0])).sum();
        let anti = |x: f64| 0.5 * x.powi(4) - 0.5 * x * x + 0.5 * x;
        let want = anti(0.9) - anti(0.1);
        assert!(((got - want) / want).abs() < 1e-3);
    }
}
