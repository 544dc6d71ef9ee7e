//! Plug-in kernel estimators: propensity cells, the Hájek CATE estimator,
//! the variance term `rho2`, the piecewise correlation estimator and the
//! inverse standard error weights.
//!
//! Everything is built from per-cell kernel moments
//! `(sum K, sum K Y, sum K Y^2)` over units with `T = t` and `Pi = pi`.
//! Cluster structure is ignored (working independence), so one sparse
//! unit-by-point kernel matrix serves the observed sample and every
//! bootstrap resample.

use crate::data::ClusteredSample;
use crate::error::{HteError, Result};
use crate::kernel::{convolution_ratio, eval_kernel, kernel_l2, Bandwidth, HALF_SUPPORT};
use crate::scalar::Real;
use crate::teststat::gaussian::gaussian_abs_cov_unchecked;

/// Default floor on `sum K` per `(pi, t)` cell below which a point is
/// treated as unsupported.
pub const DEFAULT_MIN_CELL_MASS: f64 = 5.0;

/// Default relative floor on `rho2`, as a multiple of `Var(Y)`.
pub const DEFAULT_RHO2_FLOOR: f64 = 1e-12;

/// Kernel moments of one `(point, pi, t)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Moments<T> {
    pub mass: T,
    pub first: T,
    pub second: T,
}

impl<T: Real> Moments<T> {
    #[inline]
    pub fn add(&mut self, k: T, y: T) {
        let ky = k * y;
        self.mass = self.mass + k;
        self.first = self.first + ky;
        self.second = self.second + ky * y;
    }

    /// Kernel-weighted mean of Y.
    pub fn mean(&self) -> T {
        self.first / self.mass
    }
}

/// Moments for every `(point, level, t)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable<T> {
    n_points: usize,
    n_levels: usize,
    cells: Vec<Moments<T>>,
}

impl<T: Real> MomentTable<T> {
    pub fn zeros(n_points: usize, n_levels: usize) -> Self {
        Self {
            n_points,
            n_levels,
            cells: vec![Moments::default(); n_points * n_levels * 2],
        }
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    #[inline]
    fn index(&self, point: usize, level: usize, treated: bool) -> usize {
        (point * self.n_levels + level) * 2 + treated as usize
    }

    #[inline]
    pub fn get(&self, point: usize, level: usize, treated: bool) -> &Moments<T> {
        &self.cells[self.index(point, level, treated)]
    }

    #[inline]
    pub fn get_mut(&mut self, point: usize, level: usize, treated: bool) -> &mut Moments<T> {
        let i = self.index(point, level, treated);
        &mut self.cells[i]
    }

    pub fn clear(&mut self) {
        self.cells.fill(Moments::default());
    }
}

/// Sparse matrix of kernel weights `K((x_g - X_i) / h)`, stored by unit.
#[derive(Debug, Clone)]
pub struct KernelWeights<T> {
    n_points: usize,
    offsets: Vec<usize>,
    point: Vec<u32>,
    weight: Vec<T>,
    volume: T,
}

impl<T: Real> KernelWeights<T> {
    /// `x` and `points` are row-major with `d = bw.d()` columns.
    pub fn new(x: &[T], points: &[T], bw: &Bandwidth<T>) -> Self {
        let d = bw.d();
        let h = bw.values();
        let n_units = x.len() / d;
        let n_points = points.len() / d;

        // points ordered by first coordinate so each unit scans a window
        let mut order: Vec<usize> = (0..n_points).collect();
        order.sort_by(|&a, &b| points[a * d].partial_cmp(&points[b * d]).unwrap());
        let keys: Vec<T> = order.iter().map(|&g| points[g * d]).collect();
        let reach0 = h[0] * T::lit(HALF_SUPPORT);
        let inv_h: Vec<T> = h.iter().map(|&v| T::one() / v).collect();

        let mut offsets = Vec::with_capacity(n_units + 1);
        let mut point = Vec::new();
        let mut weight = Vec::new();
        let mut u = vec![T::zero(); d];
        let mut row: Vec<(u32, T)> = Vec::new();
        offsets.push(0);
        for i in 0..n_units {
            let xi = &x[i * d..(i + 1) * d];
            let lo = keys.partition_point(|&k| k < xi[0] - reach0);
            let hi = keys.partition_point(|&k| k <= xi[0] + reach0);
            row.clear();
            for &g in &order[lo..hi] {
                let pg = &points[g * d..(g + 1) * d];
                for j in 0..d {
                    u[j] = (pg[j] - xi[j]) * inv_h[j];
                }
                let k = eval_kernel(&u);
                if k > T::zero() {
                    row.push((g as u32, k));
                }
            }
            row.sort_by_key(|e| e.0);
            for &(g, k) in &row {
                point.push(g);
                weight.push(k);
            }
            offsets.push(point.len());
        }
        Self {
            n_points,
            offsets,
            point,
            weight,
            volume: bw.volume(),
        }
    }

    pub fn for_sample(sample: &ClusteredSample<T>, points: &[T], bw: &Bandwidth<T>) -> Self {
        Self::new(sample.x(), points, bw)
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_units(&self) -> usize {
        self.offsets.len() - 1
    }

    /// `h^d`, the bandwidth volume.
    pub fn volume(&self) -> T {
        self.volume
    }

    /// Nonzero entries (point, weight) for one unit.
    #[inline]
    pub fn row(&self, unit: usize) -> (&[u32], &[T]) {
        let r = self.offsets[unit]..self.offsets[unit + 1];
        (&self.point[r.clone()], &self.weight[r])
    }

    #[inline]
    pub fn accumulate(&self, table: &mut MomentTable<T>, unit: usize, y: T, treated: bool, level: usize) {
        let (pts, ws) = self.row(unit);
        for (&g, &k) in pts.iter().zip(ws) {
            table.get_mut(g as usize, level, treated).add(k, y);
        }
    }

    /// Moment table for outcomes `y`, treatments and exposure level indices.
    pub fn moments(&self, y: &[T], treated: &[bool], level_of: &[usize], n_levels: usize) -> MomentTable<T> {
        let mut table = MomentTable::zeros(self.n_points, n_levels);
        for i in 0..y.len() {
            self.accumulate(&mut table, i, y[i], treated[i], level_of[i]);
        }
        table
    }
}

/// Normalizations shared by all cells of one fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationContext<T> {
    /// `N h^d`.
    pub norm: T,
    /// `int K^2`.
    pub l2: T,
    /// Absolute floor applied to `rho2`.
    pub rho2_floor: T,
    /// Minimum `sum K` in each of a point's cells.
    pub min_mass: T,
}

impl<T: Real> EstimationContext<T> {
    pub fn new(n_units: usize, bw: &Bandwidth<T>, outcome_variance: T) -> Self {
        Self {
            norm: T::from_usize(n_units).unwrap() * bw.volume(),
            l2: kernel_l2(bw.d()),
            rho2_floor: rho2_floor(T::lit(DEFAULT_RHO2_FLOOR), outcome_variance),
            min_mass: T::lit(DEFAULT_MIN_CELL_MASS),
        }
    }

    pub fn for_sample(sample: &ClusteredSample<T>, bw: &Bandwidth<T>) -> Self {
        let var = sample.outcome_variance();
        Self::new(sample.n_units(), bw, var)
    }

    pub fn with_min_mass(mut self, min_mass: T) -> Self {
        self.min_mass = min_mass;
        self
    }

    pub fn with_rho2_floor_rel(mut self, rel: T, outcome_variance: T) -> Self {
        self.rho2_floor = rho2_floor(rel, outcome_variance);
        self
    }
}

// a constant outcome still needs a positive floor
fn rho2_floor<T: Real>(rel: T, outcome_variance: T) -> T {
    if outcome_variance > T::zero() {
        rel * outcome_variance
    } else {
        rel
    }
}

/// Everything estimated at one `(x, pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellEstimate<T> {
    pub tau: T,
    pub p1: T,
    pub p0: T,
    pub mu1: T,
    pub mu2: T,
    pub rho2: T,
    pub mass1: T,
    pub mass0: T,
    pub rho2_floored: bool,
}

impl<T: Real> CellEstimate<T> {
    /// Both arms positive; `tau` is defined.
    pub fn defined(&self) -> bool {
        self.mass1 > T::zero() && self.mass0 > T::zero()
    }

    /// Both arms carry at least `min_mass` kernel mass.
    pub fn usable(&self, min_mass: T) -> bool {
        self.defined() && self.mass1 >= min_mass && self.mass0 >= min_mass
    }
}

/// Cell estimate from the control and treated moments at one point.
pub fn estimate_cell<T: Real>(m0: &Moments<T>, m1: &Moments<T>, ctx: &EstimationContext<T>) -> CellEstimate<T> {
    let n = ctx.norm;
    let p1 = m1.mass / n;
    let p0 = m0.mass / n;
    if !(m1.mass > T::zero() && m0.mass > T::zero()) {
        return CellEstimate {
            tau: T::nan(),
            p1,
            p0,
            mu1: T::nan(),
            mu2: T::nan(),
            rho2: T::nan(),
            mass1: m1.mass,
            mass0: m0.mass,
            rho2_floored: false,
        };
    }
    let tau = m1.mean() - m0.mean();
    // mu1 = sum_t (S2_t / n) / P_t^2, mu2 = sum_t (S1_t / n)^2 / P_t^3
    let mut mu1 = T::zero();
    let mut mu2 = T::zero();
    for m in [m0, m1] {
        mu1 = mu1 + m.second * n / (m.mass * m.mass);
        mu2 = mu2 + m.first * m.first * n / (m.mass * m.mass * m.mass);
    }
    let raw = (mu1 - mu2) * ctx.l2;
    let floored = !(raw > ctx.rho2_floor);
    CellEstimate {
        tau,
        p1,
        p0,
        mu1,
        mu2,
        rho2: if floored { ctx.rho2_floor } else { raw },
        mass1: m1.mass,
        mass0: m0.mass,
        rho2_floored: floored,
    }
}

/// Cell estimates on a grid: `(point, level)` major.
#[derive(Debug, Clone)]
pub struct GridEstimates<T> {
    n_points: usize,
    n_levels: usize,
    cells: Vec<CellEstimate<T>>,
    usable: Vec<bool>,
    floored: usize,
}

impl<T: Real> GridEstimates<T> {
    pub fn from_moments(table: &MomentTable<T>, ctx: &EstimationContext<T>) -> Self {
        let (n_points, n_levels) = (table.n_points(), table.n_levels());
        let mut cells = Vec::with_capacity(n_points * n_levels);
        let mut usable = Vec::with_capacity(n_points * n_levels);
        let mut floored = 0;
        for g in 0..n_points {
            for k in 0..n_levels {
                let c = estimate_cell(table.get(g, k, false), table.get(g, k, true), ctx);
                let ok = c.usable(ctx.min_mass);
                if ok && c.rho2_floored {
                    floored += 1;
                }
                usable.push(ok);
                cells.push(c);
            }
        }
        if floored > 0 {
            log::debug!("rho2 floored at {floored} grid cells");
        }
        Self {
            n_points,
            n_levels,
            cells,
            usable,
            floored,
        }
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    #[inline]
    pub fn cell(&self, point: usize, level: usize) -> &CellEstimate<T> {
        &self.cells[point * self.n_levels + level]
    }

    #[inline]
    pub fn usable(&self, point: usize, level: usize) -> bool {
        self.usable[point * self.n_levels + level]
    }

    #[inline]
    pub fn tau(&self, point: usize, level: usize) -> T {
        self.cell(point, level).tau
    }

    #[inline]
    pub fn rho2(&self, point: usize, level: usize) -> T {
        self.cell(point, level).rho2
    }

    /// Usable cells whose `rho2` hit the floor.
    pub fn floored(&self) -> usize {
        self.floored
    }

    /// Number of `(point, level)` cells below the mass floor.
    pub fn unusable(&self) -> usize {
        self.usable.iter().filter(|&&u| !u).count()
    }
}

/// Result of [`cate_hat`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CateEstimate<T> {
    pub value: T,
    pub p1_hat: T,
    pub p0_hat: T,
    /// Sum of kernel weights over both arms.
    pub effective_n: T,
}

/// `rho2` at one point together with its two components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rho2Estimate<T> {
    pub value: T,
    pub mu1: T,
    pub mu2: T,
    pub floored: bool,
}

fn point_cell<T: Real>(sample: &ClusteredSample<T>, x: &[T], pi: T, bw: &Bandwidth<T>) -> Result<CellEstimate<T>> {
    if x.len() != sample.d() || bw.d() != sample.d() {
        return Err(HteError::Config(format!(
            "evaluation point has dimension {}, sample has {}",
            x.len(),
            sample.d()
        )));
    }
    let level = sample.level_index(pi)?;
    let (m0, m1) = point_moments(sample, x, level, bw)?;
    Ok(estimate_cell(&m0, &m1, &EstimationContext::for_sample(sample, bw)))
}

fn point_moments<T: Real>(
    sample: &ClusteredSample<T>,
    x: &[T],
    level: usize,
    bw: &Bandwidth<T>,
) -> Result<(Moments<T>, Moments<T>)> {
    let level_of = sample.level_of()?;
    let weights = KernelWeights::for_sample(sample, x, bw);
    let table = weights.moments(sample.y(), sample.treated(), level_of, sample.levels()?.len());
    Ok((*table.get(0, level, false), *table.get(0, level, true)))
}

fn undefined<T: Real>(x: &[T], pi: T, cell: &CellEstimate<T>) -> HteError {
    HteError::UndefinedPoint {
        x: x.iter().map(|v| v.as_f64()).collect(),
        pi: pi.as_f64(),
        treated: if cell.mass1 > T::zero() { 0 } else { 1 },
    }
}

/// `P_t(x; pi) = (N h^d)^-1 sum_i 1(Pi_i = pi) 1(T_i = t) K((x - X_i) / h)`.
pub fn propensity_hat<T: Real>(
    x: &[T],
    pi: T,
    treated: bool,
    sample: &ClusteredSample<T>,
    bw: &Bandwidth<T>,
) -> Result<T> {
    let c = point_cell(sample, x, pi, bw)?;
    Ok(if treated { c.p1 } else { c.p0 })
}

/// Hájek CATE estimate: kernel-weighted treated mean minus control mean.
pub fn cate_hat<T: Real>(x: &[T], pi: T, sample: &ClusteredSample<T>, bw: &Bandwidth<T>) -> Result<CateEstimate<T>> {
    let c = point_cell(sample, x, pi, bw)?;
    if !c.defined() {
        return Err(undefined(x, pi, &c));
    }
    Ok(CateEstimate {
        value: c.tau,
        p1_hat: c.p1,
        p0_hat: c.p0,
        effective_n: c.mass1 + c.mass0,
    })
}

/// `rho2(x, pi) = (mu1 - mu2) int K^2`, floored at a small positive value.
pub fn rho2_hat<T: Real>(x: &[T], pi: T, sample: &ClusteredSample<T>, bw: &Bandwidth<T>) -> Result<Rho2Estimate<T>> {
    let c = point_cell(sample, x, pi, bw)?;
    if !c.defined() {
        return Err(undefined(x, pi, &c));
    }
    if c.rho2_floored {
        log::warn!("rho2 at x = {x:?}, pi = {pi} floored to {}", c.rho2);
    }
    Ok(Rho2Estimate {
        value: c.rho2,
        mu1: c.mu1,
        mu2: c.mu2,
        floored: c.rho2_floored,
    })
}

/// Correlation between the standardized differences `(i, j)` and `(k, l)`
/// at points `t` bandwidths apart, given `rho2` at the same `x` for every
/// level. Returns the value clamped to `[-1, 1]` and whether clamping was
/// needed.
pub fn tuple_correlation<T: Real>(idx: [usize; 4], rho2: &[T], conv_ratio: T) -> (T, bool) {
    let [i, j, k, l] = idx;
    let c = conv_ratio;
    let scaled = |r: T| r / ((rho2[i] + rho2[j]) * (rho2[k] + rho2[l])).sqrt() * c;
    let v = if i == k && j == l {
        c
    } else if i == l && j == k {
        -c
    } else if j == k && i != l {
        -scaled(rho2[j])
    } else if j != k && i == l {
        -scaled(rho2[i])
    } else if j == l && i != k {
        scaled(rho2[j])
    } else if j != l && i == k {
        scaled(rho2[i])
    } else {
        T::zero()
    };
    let clamped = v.max(-T::one()).min(T::one());
    (clamped, clamped != v)
}

/// Estimated correlation for the exposure tuple `(pi_i, pi_j, pi_k, pi_l)`
/// at `x` and shift `t` (in bandwidth units).
pub fn corr_hat<T: Real>(x: &[T], t: &[T], pis: [T; 4], sample: &ClusteredSample<T>, bw: &Bandwidth<T>) -> Result<T> {
    let mut idx = [0usize; 4];
    let mut rho2 = vec![T::zero(); 4];
    for (slot, &pi) in pis.iter().enumerate() {
        idx[slot] = slot;
        // coincident labels must share an index for the case analysis
        if let Some(prev) = pis[..slot].iter().position(|&p| p == pi) {
            idx[slot] = prev;
        }
        rho2[slot] = rho2_hat(x, pi, sample, bw)?.value;
    }
    let (v, clamped) = tuple_correlation(idx, &rho2, convolution_ratio(t));
    if clamped {
        log::warn!("correlation estimate clamped to [-1, 1]");
    }
    Ok(v)
}

/// `1 / sqrt(r_k + r_j)`.
pub fn pair_weight<T: Real>(rho2_k: T, rho2_j: T) -> Result<T> {
    let r = rho2_k + rho2_j;
    if !(r > T::zero()) {
        return Err(HteError::NonPositiveRadicand {
            value: r.as_f64(),
            context: "exposure-pair weight".into(),
        });
    }
    Ok(T::one() / r.sqrt())
}

/// How the across-point covariance enters the `x, x'` weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftCovariance {
    /// Subtract `2 r(x) g(conv_ratio(t))` from the radicand.
    #[default]
    AbsoluteMoment,
    /// Treat estimates at distinct points as uncorrelated.
    Omitted,
}

/// Radicand of the `x, x'` weight.
#[inline]
pub fn shift_radicand<T: Real>(rho2_x: T, rho2_xp: T, cov: T) -> T {
    rho2_x + rho2_xp - (rho2_x + rho2_x) * cov
}

/// `1 / sqrt(r(x) + r(x') - 2 r(x) g(conv_ratio(t)))` for shift `t`.
pub fn shift_weight<T: Real>(rho2_x: T, rho2_xp: T, t: &[T], correction: ShiftCovariance) -> Result<T> {
    let cov = match correction {
        ShiftCovariance::AbsoluteMoment => gaussian_abs_cov_unchecked(convolution_ratio(t)),
        ShiftCovariance::Omitted => T::zero(),
    };
    let r = shift_radicand(rho2_x, rho2_xp, cov);
    if !(r > T::zero()) {
        return Err(HteError::NonPositiveRadicand {
            value: r.as_f64(),
            context: format!("covariate-shift weight at t = {t:?}"),
        });
    }
    Ok(T::one() / r.sqrt())
}

/// Inverse standard error weight for the exposure pair `(pi_k, pi_j)` at `x`.
pub fn weight1_hat<T: Real>(x: &[T], pi_k: T, pi_j: T, sample: &ClusteredSample<T>, bw: &Bandwidth<T>) -> Result<T> {
    pair_weight(
        rho2_hat(x, pi_k, sample, bw)?.value,
        rho2_hat(x, pi_j, sample, bw)?.value,
    )
}

/// Inverse standard error weight for `tau(x; pi) - tau(x'; pi)`.
pub fn weight2_hat<T: Real>(
    x: &[T],
    x_prime: &[T],
    pi: T,
    sample: &ClusteredSample<T>,
    bw: &Bandwidth<T>,
    correction: ShiftCovariance,
) -> Result<T> {
    let t: Vec<T> = x
        .iter()
        .zip(x_prime)
        .zip(bw.values())
        .map(|((&a, &b), &h)| (a - b) / h)
        .collect();
    shift_weight(
        rho2_hat(x, pi, sample, bw)?.value,
        rho2_hat(x_prime, pi, sample, bw)?.value,
        &t,
        correction,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cluster, Unit};
    use approx::assert_relative_eq;

    fn unit(y: f64, t: bool, x: f64, pi: f64) -> Unit<f64> {
        Unit {
            y,
            treated: t,
            x: vec![x],
            pi: Some(pi),
        }
    }

    fn fixture() -> ClusteredSample<f64> {
        let a = Cluster {
            id: "a".into(),
            units: vec![
                unit(1.0, true, 0.10, 0.5),
                unit(0.2, false, 0.30, 0.5),
                unit(2.0, true, 0.45, 0.5),
                unit(0.4, false, 0.60, 0.5),
            ],
        };
        let b = Cluster {
            id: "b".into(),
            units: vec![
                unit(3.0, true, 0.20, 0.25),
                unit(0.0, false, 0.40, 0.25),
                unit(1.0, true, 0.55, 0.25),
                unit(-1.0, false, 0.70, 0.25),
            ],
        };
        let c = Cluster {
            id: "c".into(),
            units: vec![unit(0.5, true, 0.5, 0.5), unit(0.1, false, 0.5, 0.25)],
        };
        ClusteredSample::from_clusters(vec![a, b, c], 1).unwrap()
    }

    #[test]
    fn propensity_matches_direct_sum() {
        let s = fixture();
        let bw = Bandwidth::uniform(1.0, 1).unwrap();
        let x = 0.4;
        let mut want = 0.0;
        for i in 0..s.n_units() {
            if s.treated()[i] && s.level_of().unwrap()[i] == s.level_index(0.5).unwrap() {
                want += eval_kernel(&[x - s.x()[i]]);
            }
        }
        want /= s.n_units() as f64;
        let got = propensity_hat(&[x], 0.5, true, &s, &bw).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-14);
    }

    #[test]
    fn concentrated_sample_gives_kernel_peak() {
        let units = (0..4).map(|_| unit(1.0, true, 0.3, 0.5)).collect();
        let other = (0..4).map(|_| unit(1.0, false, 0.3, 0.25)).collect();
        let s = ClusteredSample::from_clusters(
            vec![
                Cluster { id: "a".into(), units },
                Cluster {
                    id: "b".into(),
                    units: other,
                },
            ],
            1,
        )
        .unwrap();
        let bw = Bandwidth::uniform(0.2, 1).unwrap();
        // half the units sit in the (0.5, treated) cell
        let p = propensity_hat(&[0.3], 0.5, true, &s, &bw).unwrap();
        assert_relative_eq!(p, 0.5 * 1.5 / 0.2, epsilon = 1e-12);
        assert_eq!(propensity_hat(&[0.9], 0.5, true, &s, &bw).unwrap(), 0.0);
    }

    #[test]
    fn cate_is_difference_of_weighted_means() {
        let s = fixture();
        let bw = Bandwidth::uniform(2.0, 1).unwrap();
        let x = 0.35;
        let level = s.level_index(0.5).unwrap();
        let (mut n1, mut d1, mut n0, mut d0) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..s.n_units() {
            if s.level_of().unwrap()[i] != level {
                continue;
            }
            let k = eval_kernel(&[(x - s.x()[i]) / 2.0]);
            if s.treated()[i] {
                n1 += k * s.y()[i];
                d1 += k;
            } else {
                n0 += k * s.y()[i];
                d0 += k;
            }
        }
        let est = cate_hat(&[x], 0.5, &s, &bw).unwrap();
        assert_relative_eq!(est.value, n1 / d1 - n0 / d0, epsilon = 1e-13);
        assert_relative_eq!(est.effective_n, d1 + d0, epsilon = 1e-13);
    }

    #[test]
    fn cate_undefined_without_treated_mass() {
        let s = fixture();
        let bw = Bandwidth::uniform(0.05, 1).unwrap();
        let err = cate_hat(&[0.30], 0.5, &s, &bw).unwrap_err();
        assert!(matches!(err, HteError::UndefinedPoint { treated: 1, .. }));
    }

    #[test]
    fn mu2_matches_double_loop() {
        let s = fixture();
        let bw = Bandwidth::uniform(0.8, 1).unwrap();
        let x = 0.42;
        let pi = 0.5;
        let level = s.level_index(pi).unwrap();
        let nh = s.n_units() as f64 * 0.8;
        let kern = |i: usize| eval_kernel(&[(x - s.x()[i]) / 0.8]);
        let mut want = 0.0;
        for t in [false, true] {
            let in_cell = |i: usize| s.treated()[i] == t && s.level_of().unwrap()[i] == level;
            let p: f64 = (0..s.n_units()).filter(|&i| in_cell(i)).map(kern).sum::<f64>() / nh;
            let mut acc = 0.0;
            for j in 0..s.n_units() {
                for i in 0..s.n_units() {
                    if in_cell(i) && in_cell(j) {
                        acc += s.y()[j] * s.y()[i] * kern(j) * kern(i);
                    }
                }
            }
            want += acc / (nh * nh) / (p * p * p);
        }
        let got = rho2_hat(&[x], pi, &s, &bw).unwrap();
        assert_relative_eq!(got.mu2, want, max_relative = 1e-13);
    }

    #[test]
    fn constant_outcome_floors_rho2() {
        let s = fixture();
        let s = s.with_outcomes(vec![0.0; s.n_units()]).unwrap();
        let bw = Bandwidth::uniform(1.0, 1).unwrap();
        let r = rho2_hat(&[0.4], 0.5, &s, &bw).unwrap();
        assert!(r.floored);
        assert_eq!(r.mu1, 0.0);
        assert_eq!(r.mu2, 0.0);
    }

    #[test]
    fn correlation_cases() {
        let r = [1.0, 2.0, 3.0, 4.0];
        let c = 0.8;
        assert_eq!(tuple_correlation([0, 1, 0, 1], &r, c).0, c);
        assert_eq!(tuple_correlation([0, 1, 1, 0], &r, c).0, -c);
        // j = k, i != l
        let v = tuple_correlation([0, 1, 1, 2], &r, c).0;
        assert_relative_eq!(v, -2.0 / (3.0f64 * 5.0).sqrt() * c, epsilon = 1e-15);
        // i = l, j != k
        let v = tuple_correlation([0, 1, 2, 0], &r, c).0;
        assert_relative_eq!(v, -1.0 / (3.0f64 * 4.0).sqrt() * c, epsilon = 1e-15);
        // j = l, i != k
        let v = tuple_correlation([0, 1, 2, 1], &r, c).0;
        assert_relative_eq!(v, 2.0 / (3.0f64 * 5.0).sqrt() * c, epsilon = 1e-15);
        // i = k, j != l
        let v = tuple_correlation([0, 1, 0, 2], &r, c).0;
        assert_relative_eq!(v, 1.0 / (3.0f64 * 4.0).sqrt() * c, epsilon = 1e-15);
        assert_eq!(tuple_correlation([0, 1, 2, 3], &r, c).0, 0.0);
    }

    #[test]
    fn pair_weights() {
        assert_eq!(pair_weight(0.5, 0.5).unwrap(), 1.0);
        assert_relative_eq!(pair_weight(1.2, 0.3).unwrap(), 0.816496580927726, epsilon = 1e-12);
        assert!(pair_weight(0.0, 0.0).is_err());
    }

    #[test]
    fn shift_weight_reduces_outside_support() {
        let w = shift_weight(1.0, 3.0, &[1.5], ShiftCovariance::AbsoluteMoment).unwrap();
        assert_eq!(w, 0.5);
        let w0 = shift_weight(2.0, 2.0, &[0.0], ShiftCovariance::AbsoluteMoment).unwrap();
        let radicand = 2.0 * 4.0 / std::f64::consts::PI;
        assert_relative_eq!(w0, 1.0 / radicand.sqrt(), epsilon = 1e-12);
    }
}
