//! The raw statistics `T1` (exposure heterogeneity) and `T2` (covariate
//! heterogeneity), their centering terms and variance estimators.
//!
//! [`StatisticEngine`] fixes the grid, bandwidth and all quantities that
//! depend only on them (kernel correlations between grid points, the
//! `t`-integration rule), so that bootstrap replications only have to
//! rebuild cell estimates.

pub mod gaussian;
pub mod grid;

use serde::{Deserialize, Serialize};

pub use gaussian::gaussian_abs_cov;
pub use grid::{build_grid, percentile, Grid, GRID_PERCENTILES};

use crate::data::ClusteredSample;
use crate::error::{HteError, Result};
use crate::estimator::{
    shift_radicand, tuple_correlation, EstimationContext, GridEstimates, KernelWeights, ShiftCovariance,
};
use crate::kernel::{convolution_ratio, Bandwidth};
use crate::scalar::Real;
use gaussian::gaussian_abs_cov_unchecked;

/// Default number of trapezoid nodes per coordinate on `[-1, 1]`.
pub const DEFAULT_T_POINTS: usize = 21;

/// Which exposure index tuples enter the variance of `T1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleRange {
    /// `i < j` and `k < l`, matching the pair sum in `T1`.
    #[default]
    OrderedPairs,
    /// All `i != j`, `k != l`.
    AllPairs,
}

/// Settings of the variance and weight computations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatSettings {
    pub t_points: usize,
    pub tuple_range: TupleRange,
    pub shift_covariance: ShiftCovariance,
}

impl Default for StatSettings {
    fn default() -> Self {
        Self {
            t_points: DEFAULT_T_POINTS,
            tuple_range: TupleRange::OrderedPairs,
            shift_covariance: ShiftCovariance::AbsoluteMoment,
        }
    }
}

/// One term of a raw statistic: an exposure pair for `T1`, a level for `T2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Contribution {
    pub label: String,
    pub levels: Vec<f64>,
    pub raw: f64,
    /// Integration measure actually used after dropping unsupported points.
    pub measure: f64,
}

/// Raw statistic before centering and scaling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RawStatistic<T> {
    pub value: T,
    /// `sum` of the measures that enter the centering term.
    pub measure: T,
    pub contributions: Vec<Contribution>,
}

/// Counts of numerical safeguards that fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct StatDiagnostics {
    /// `(point, level)` cells below the kernel mass floor.
    pub dropped_cells: usize,
    /// Usable cells whose `rho2` was floored.
    pub floored_cells: usize,
    /// Correlation estimates clamped into `[-1, 1]`.
    pub clamp_events: usize,
}

/// `S = (T - a) / sigma` and its parts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatisticDecomposition<T> {
    pub raw: T,
    pub bias: T,
    pub scale: T,
    pub studentized: T,
    pub contributions: Vec<Contribution>,
    pub diagnostics: StatDiagnostics,
}

impl<T: Real> StatisticDecomposition<T> {
    pub fn new(raw: RawStatistic<T>, bias: T, scale: T, diagnostics: StatDiagnostics) -> Self {
        Self {
            raw: raw.value,
            bias,
            scale,
            studentized: (raw.value - bias) / scale,
            contributions: raw.contributions,
            diagnostics,
        }
    }
}

/// `h^(-d/2) E|Z| K(K-1)/2 span`.
pub fn bias_a1<T: Real>(grid: &Grid<T>, bw: &Bandwidth<T>, k: usize) -> T {
    let pairs = T::from_usize(k * k.saturating_sub(1)).unwrap() * T::lit(0.5);
    centering_scale(bw) * pairs * grid.span()
}

/// `h^(-d/2) E|Z| (K/2) span^2`.
pub fn bias_a2<T: Real>(grid: &Grid<T>, bw: &Bandwidth<T>, k: usize) -> T {
    let half_k = T::from_usize(k).unwrap() * T::lit(0.5);
    centering_scale(bw) * half_k * grid.span() * grid.span()
}

fn centering_scale<T: Real>(bw: &Bandwidth<T>) -> T {
    T::mean_abs_normal() / bw.volume().sqrt()
}

/// Grid-dependent state shared by every evaluation on one sample and its
/// bootstrap resamples.
#[derive(Debug, Clone)]
pub struct StatisticEngine<T> {
    grid: Grid<T>,
    bw: Bandwidth<T>,
    levels: Vec<T>,
    settings: StatSettings,
    /// Kernel correlation `conv_ratio(t)` at each `t`-node, with its weight.
    t_nodes: Vec<(T, T)>,
    /// `int g(conv_ratio(t)) dt`.
    g_integral: T,
    /// `g(conv_ratio((x_a - x_b) / h))` for all grid pairs, row-major.
    shift_cov: Vec<T>,
}

impl<T: Real> StatisticEngine<T> {
    pub fn new(grid: Grid<T>, bw: Bandwidth<T>, levels: Vec<T>, settings: StatSettings) -> Result<Self> {
        if grid.d() != bw.d() {
            return Err(HteError::Config(format!(
                "grid dimension {} does not match bandwidth dimension {}",
                grid.d(),
                bw.d()
            )));
        }
        if levels.len() < 2 {
            return Err(HteError::Data(format!(
                "need at least 2 exposure levels, found {}",
                levels.len()
            )));
        }
        if settings.t_points < 2 {
            return Err(HteError::Config("t-integration needs at least 2 points".into()));
        }
        let d = grid.d();
        let t_nodes = t_rule(settings.t_points, d);
        let g_integral = t_nodes
            .iter()
            .fold(T::zero(), |a, &(c, w)| a + w * gaussian_abs_cov_unchecked(c));

        let n = grid.len();
        let mut shift_cov = vec![T::zero(); n * n];
        if settings.shift_covariance == ShiftCovariance::AbsoluteMoment {
            let h = bw.values();
            let mut t = vec![T::zero(); d];
            for a in 0..n {
                for b in 0..n {
                    for j in 0..d {
                        t[j] = (grid.point(a)[j] - grid.point(b)[j]) / h[j];
                    }
                    shift_cov[a * n + b] = gaussian_abs_cov_unchecked(convolution_ratio(&t));
                }
            }
        }
        Ok(Self {
            grid,
            bw,
            levels,
            settings,
            t_nodes,
            g_integral,
            shift_cov,
        })
    }

    /// Engine on a sample's own grid; `grid_points` and `seed` as in
    /// [`build_grid`].
    pub fn for_sample(
        sample: &ClusteredSample<T>,
        bw: Bandwidth<T>,
        grid_points: usize,
        seed: u64,
        settings: StatSettings,
    ) -> Result<Self> {
        let grid = build_grid(sample, grid_points, seed)?;
        Self::new(grid, bw, sample.levels()?.to_vec(), settings)
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn bandwidth(&self) -> &Bandwidth<T> {
        &self.bw
    }

    pub fn levels(&self) -> &[T] {
        &self.levels
    }

    pub fn settings(&self) -> &StatSettings {
        &self.settings
    }

    /// `int_[-1,1]^d g(conv_ratio(t)) dt`.
    pub fn g_integral(&self) -> T {
        self.g_integral
    }

    pub fn kernel_weights(&self, sample: &ClusteredSample<T>) -> KernelWeights<T> {
        KernelWeights::for_sample(sample, self.grid.points(), &self.bw)
    }

    /// Cell estimates for the sample's own outcomes and exposures.
    pub fn estimates(&self, sample: &ClusteredSample<T>, ctx: &EstimationContext<T>) -> Result<GridEstimates<T>> {
        let kw = self.kernel_weights(sample);
        let table = kw.moments(sample.y(), sample.treated(), sample.level_of()?, self.levels.len());
        Ok(GridEstimates::from_moments(&table, ctx))
    }

    fn check_shape(&self, est: &GridEstimates<T>) -> Result<()> {
        if est.n_points() != self.grid.len() || est.n_levels() != self.levels.len() {
            return Err(HteError::Config("estimates do not match the grid".into()));
        }
        Ok(())
    }

    fn centering(&self, measure: T) -> T {
        centering_scale(&self.bw) * measure
    }

    /// Centering term for `T1` over the points actually used.
    pub fn bias1(&self, raw: &RawStatistic<T>) -> T {
        self.centering(raw.measure)
    }

    /// Centering term for `T2` over the points actually used.
    pub fn bias2(&self, raw: &RawStatistic<T>) -> T {
        self.centering(raw.measure)
    }

    /// `T1 = sum_{k<j} int sqrt(N) |tau_k - tau_j| / sqrt(r_k + r_j) dx`.
    pub fn t1(&self, est: &GridEstimates<T>, n_units: usize) -> Result<RawStatistic<T>> {
        self.check_shape(est)?;
        let sqrt_n = T::from_usize(n_units).unwrap().sqrt();
        let w = self.grid.weights();
        let kk = self.levels.len();
        let mut value = T::zero();
        let mut measure = T::zero();
        let mut contributions = Vec::with_capacity(kk * (kk - 1) / 2);
        for k in 0..kk {
            for j in k + 1..kk {
                let mut raw = T::zero();
                let mut span = T::zero();
                for g in 0..self.grid.len() {
                    if !(est.usable(g, k) && est.usable(g, j)) {
                        continue;
                    }
                    let (a, b) = (est.cell(g, k), est.cell(g, j));
                    raw = raw + w[g] * (a.tau - b.tau).abs() / (a.rho2 + b.rho2).sqrt();
                    span = span + w[g];
                }
                if span == T::zero() {
                    return Err(HteError::EmptyDomain {
                        what: format!(
                            "grid support for exposure pair ({}, {})",
                            self.levels[k], self.levels[j]
                        ),
                    });
                }
                raw = raw * sqrt_n;
                contributions.push(Contribution {
                    label: format!("pi={} vs pi={}", self.levels[k], self.levels[j]),
                    levels: vec![self.levels[k].as_f64(), self.levels[j].as_f64()],
                    raw: raw.as_f64(),
                    measure: span.as_f64(),
                });
                value = value + raw;
                measure = measure + span;
            }
        }
        Ok(RawStatistic {
            value,
            measure,
            contributions,
        })
    }

    /// `T2 = sum_k iint_{x != x'} sqrt(N) |tau_k(x) - tau_k(x')| w2 / 2`.
    pub fn t2(&self, est: &GridEstimates<T>, n_units: usize) -> Result<RawStatistic<T>> {
        self.check_shape(est)?;
        let sqrt_n = T::from_usize(n_units).unwrap().sqrt();
        let w = self.grid.weights();
        let n = self.grid.len();
        let half = T::lit(0.5);
        let mut value = T::zero();
        let mut measure = T::zero();
        let mut contributions = Vec::with_capacity(self.levels.len());
        for k in 0..self.levels.len() {
            let used: Vec<usize> = (0..n).filter(|&g| est.usable(g, k)).collect();
            if used.is_empty() {
                return Err(HteError::EmptyDomain {
                    what: format!("grid support for exposure level {}", self.levels[k]),
                });
            }
            let mut raw = T::zero();
            for &a in &used {
                let ca = est.cell(a, k);
                let mut row = T::zero();
                for &b in &used {
                    if a == b {
                        continue;
                    }
                    let cb = est.cell(b, k);
                    let r = shift_radicand(ca.rho2, cb.rho2, self.shift_cov[a * n + b]);
                    if !(r > T::zero()) {
                        return Err(self.radicand_error(r, a, b, k));
                    }
                    row = row + w[b] * (ca.tau - cb.tau).abs() / r.sqrt();
                }
                raw = raw + w[a] * row;
            }
            raw = raw * sqrt_n * half;
            let span: T = used.iter().map(|&g| w[g]).sum();
            let m = span * span * half;
            contributions.push(Contribution {
                label: format!("pi={}", self.levels[k]),
                levels: vec![self.levels[k].as_f64()],
                raw: raw.as_f64(),
                measure: m.as_f64(),
            });
            value = value + raw;
            measure = measure + m;
        }
        Ok(RawStatistic {
            value,
            measure,
            contributions,
        })
    }

    fn radicand_error(&self, r: T, a: usize, b: usize, k: usize) -> HteError {
        HteError::NonPositiveRadicand {
            value: r.as_f64(),
            context: format!(
                "x = {:?}, x' = {:?}, pi = {}",
                self.grid.point(a),
                self.grid.point(b),
                self.levels[k]
            ),
        }
    }

    /// `sigma1^2 = int_x int_t sum_tuples g(rho(x, t, i, j, k, l)) dt dx`,
    /// with the number of clamped correlations.
    pub fn sigma1_sq(&self, est: &GridEstimates<T>) -> Result<(T, usize)> {
        self.check_shape(est)?;
        let kk = self.levels.len();
        let pairs: Vec<(usize, usize)> = match self.settings.tuple_range {
            TupleRange::OrderedPairs => (0..kk).flat_map(|i| (i + 1..kk).map(move |j| (i, j))).collect(),
            TupleRange::AllPairs => (0..kk)
                .flat_map(|i| (0..kk).filter(move |&j| j != i).map(move |j| (i, j)))
                .collect(),
        };
        let w = self.grid.weights();
        let mut rho2 = vec![T::zero(); kk];
        let mut usable = vec![false; kk];
        let mut total = T::zero();
        let mut clamps = 0;
        for g in 0..self.grid.len() {
            for k in 0..kk {
                usable[k] = est.usable(g, k);
                rho2[k] = est.rho2(g, k);
            }
            let mut at_g = T::zero();
            for &(i, j) in &pairs {
                if !(usable[i] && usable[j]) {
                    continue;
                }
                for &(k, l) in &pairs {
                    if !(usable[k] && usable[l]) {
                        continue;
                    }
                    // rho is (coefficient) * conv_ratio(t)
                    let (coef, clamped) = tuple_correlation([i, j, k, l], &rho2, T::one());
                    clamps += clamped as usize;
                    let a = coef.abs();
                    if a == T::zero() {
                        continue;
                    }
                    at_g = at_g + self.g_over_t(a);
                }
            }
            total = total + w[g] * at_g;
        }
        if !(total >= T::zero()) {
            return Err(HteError::Numerical(format!("negative variance estimate {total}")));
        }
        Ok((total, clamps))
    }

    fn g_over_t(&self, coef: T) -> T {
        if coef == T::one() {
            return self.g_integral;
        }
        self.t_nodes
            .iter()
            .fold(T::zero(), |acc, &(c, w)| acc + w * gaussian_abs_cov_unchecked(coef * c))
    }

    /// `sigma2^2 = int_t int_x int_x' int_x'' sum_k r_k(x) g(conv_ratio(t))
    /// / sqrt(R(x, x') R(x, x''))`. The integrand factors, leaving
    /// `G sum_k int r_k(x) A_k(x)^2 dx` with `A_k(x) = int R(x, x')^-1/2 dx'`.
    pub fn sigma2_sq(&self, est: &GridEstimates<T>) -> Result<T> {
        self.check_shape(est)?;
        let n = self.grid.len();
        let w = self.grid.weights();
        let mut total = T::zero();
        for k in 0..self.levels.len() {
            let used: Vec<usize> = (0..n).filter(|&g| est.usable(g, k)).collect();
            for &a in &used {
                let ra = est.rho2(a, k);
                let mut inner = T::zero();
                for &b in &used {
                    let r = shift_radicand(ra, est.rho2(b, k), self.shift_cov[a * n + b]);
                    if !(r > T::zero()) {
                        return Err(self.radicand_error(r, a, b, k));
                    }
                    inner = inner + w[b] / r.sqrt();
                }
                total = total + w[a] * ra * inner * inner;
            }
        }
        let v = self.g_integral * total;
        if !(v >= T::zero()) {
            return Err(HteError::Numerical(format!("negative variance estimate {v}")));
        }
        Ok(v)
    }

    fn diagnostics(&self, est: &GridEstimates<T>, clamp_events: usize) -> StatDiagnostics {
        StatDiagnostics {
            dropped_cells: est.unusable(),
            floored_cells: est.floored(),
            clamp_events,
        }
    }

    /// Full decomposition of `S1`.
    pub fn s1(&self, est: &GridEstimates<T>, n_units: usize) -> Result<StatisticDecomposition<T>> {
        let raw = self.t1(est, n_units)?;
        let bias = self.bias1(&raw);
        let (var, clamps) = self.sigma1_sq(est)?;
        let scale = positive_scale(var, "sigma1")?;
        Ok(StatisticDecomposition::new(
            raw,
            bias,
            scale,
            self.diagnostics(est, clamps),
        ))
    }

    /// Full decomposition of `S2`.
    pub fn s2(&self, est: &GridEstimates<T>, n_units: usize) -> Result<StatisticDecomposition<T>> {
        let raw = self.t2(est, n_units)?;
        let bias = self.bias2(&raw);
        let scale = positive_scale(self.sigma2_sq(est)?, "sigma2")?;
        Ok(StatisticDecomposition::new(raw, bias, scale, self.diagnostics(est, 0)))
    }
}

fn positive_scale<T: Real>(var: T, what: &str) -> Result<T> {
    if !(var > T::zero()) {
        return Err(HteError::Numerical(format!("{what} is zero; no usable grid support")));
    }
    Ok(var.sqrt())
}

/// Tensor trapezoid rule on `[-1, 1]^d`: `(conv_ratio(t), weight)` pairs.
fn t_rule<T: Real>(per_coord: usize, d: usize) -> Vec<(T, T)> {
    let step = 2.0 / (per_coord - 1) as f64;
    let nodes: Vec<(f64, f64)> = (0..per_coord)
        .map(|i| {
            let w = if i == 0 || i + 1 == per_coord { step / 2.0 } else { step };
            (-1.0 + step * i as f64, w)
        })
        .collect();
    let total = per_coord.pow(d as u32);
    let mut out = Vec::with_capacity(total);
    let mut t = vec![T::zero(); d];
    for flat in 0..total {
        let mut rem = flat;
        let mut w = 1.0;
        for tj in t.iter_mut() {
            let (v, wi) = nodes[rem % per_coord];
            rem /= per_coord;
            *tj = T::lit(v);
            w *= wi;
        }
        out.push((convolution_ratio(&t), T::lit(w)));
    }
    out
}

/// `T1` on a sample with cell estimates computed from scratch.
pub fn t1_stat<T: Real>(
    sample: &ClusteredSample<T>,
    grid: &Grid<T>,
    bw: &Bandwidth<T>,
    settings: StatSettings,
) -> Result<RawStatistic<T>> {
    let engine = StatisticEngine::new(grid.clone(), bw.clone(), sample.levels()?.to_vec(), settings)?;
    let est = engine.estimates(sample, &EstimationContext::for_sample(sample, bw))?;
    engine.t1(&est, sample.n_units())
}

/// `T2` on a sample with cell estimates computed from scratch.
pub fn t2_stat<T: Real>(
    sample: &ClusteredSample<T>,
    grid: &Grid<T>,
    bw: &Bandwidth<T>,
    settings: StatSettings,
) -> Result<RawStatistic<T>> {
    let engine = StatisticEngine::new(grid.clone(), bw.clone(), sample.levels()?.to_vec(), settings)?;
    let est = engine.estimates(sample, &EstimationContext::for_sample(sample, bw))?;
    engine.t2(&est, sample.n_units())
}

/// `sigma1` on a sample.
pub fn sigma1_hat<T: Real>(
    sample: &ClusteredSample<T>,
    grid: &Grid<T>,
    bw: &Bandwidth<T>,
    settings: StatSettings,
) -> Result<T> {
    let engine = StatisticEngine::new(grid.clone(), bw.clone(), sample.levels()?.to_vec(), settings)?;
    let est = engine.estimates(sample, &EstimationContext::for_sample(sample, bw))?;
    Ok(engine.sigma1_sq(&est)?.0.sqrt())
}

/// `sigma2` on a sample.
pub fn sigma2_hat<T: Real>(
    sample: &ClusteredSample<T>,
    grid: &Grid<T>,
    bw: &Bandwidth<T>,
    settings: StatSettings,
) -> Result<T> {
    let engine = StatisticEngine::new(grid.clone(), bw.clone(), sample.levels()?.to_vec(), settings)?;
    let est = engine.estimates(sample, &EstimationContext::for_sample(sample, bw))?;
    Ok(engine.sigma2_sq(&est)?.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bias_formulas() {
        let g = Grid::trapezoid(0.0f64, 1.0, 5).unwrap();
        let h1 = Bandwidth::uniform(1.0, 1).unwrap();
        assert_relative_eq!(bias_a1(&g, &h1, 2), 0.7978845608028654, epsilon = 1e-15);
        assert_relative_eq!(bias_a2(&g, &h1, 2), 0.7978845608028654, epsilon = 1e-15);
        assert_eq!(bias_a1(&g, &h1, 1), 0.0);

        let g = Grid::trapezoid(0.1f64, 0.9, 5).unwrap();
        let h = Bandwidth::uniform(0.04, 1).unwrap();
        assert_relative_eq!(bias_a1(&g, &h, 4), 19.149, epsilon = 1e-3);
        assert_relative_eq!(bias_a2(&g, &h, 4), 5.106, epsilon = 1e-3);
    }

    #[test]
    fn t_rule_integrates_constant() {
        let r: Vec<(f64, f64)> = t_rule(21, 1);
        assert_relative_eq!(r.iter().map(|p| p.1).sum::<f64>(), 2.0, epsilon = 1e-14);
        assert_eq!(r[0].0, 0.0);
        assert_eq!(r[10].0, 1.0);
        let r2: Vec<(f64, f64)> = t_rule(11, 2);
        assert_relative_eq!(r2.iter().map(|p| p.1).sum::<f64>(), 4.0, epsilon = 1e-13);
    }

    #[test]
    fn g_integral_resolution_is_stable() {
        let g = Grid::trapezoid(0.0f64, 1.0, 3).unwrap();
        let bw = Bandwidth::uniform(0.1, 1).unwrap();
        let mk = |t_points| {
            let s = StatSettings {
                t_points,
                ..StatSettings::default()
            };
            StatisticEngine::new(g.clone(), bw.clone(), vec![0.0, 1.0], s)
                .unwrap()
                .g_integral()
        };
        let coarse = mk(21);
        let fine = mk(41);
        assert!(((coarse - fine) / fine).abs() < 1e-3);
    }
}
