//! Product quartic kernel, its L2 norm and self-convolution, and the
//! rule-of-thumb bandwidth.
//!
//! Per coordinate the kernel is `K1(u) = 1.5 (1 - 4u^2)` on `|u| <= 1/2`.
//! It is symmetric, integrates to one and has `int K1^2 = 6/5`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::data::ClusteredSample;
use crate::error::{HteError, Result};
use crate::scalar::Real;

/// Half-width of the kernel support per coordinate.
pub const HALF_SUPPORT: f64 = 0.5;

/// `int K1(u)^2 du` for the one-dimensional quartic kernel.
pub const KERNEL_L2_1D: f64 = 1.2;

const GL_POINTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    QuarticHalfSupport,
}

/// Product kernel of a given dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub d: usize,
}

impl KernelSpec {
    pub fn new(d: usize) -> Self {
        Self {
            kind: KernelKind::QuarticHalfSupport,
            d,
        }
    }

    pub fn eval<T: Real>(&self, u: &[T]) -> T {
        debug_assert_eq!(u.len(), self.d);
        eval_kernel(u)
    }

    pub fn l2<T: Real>(&self) -> T {
        kernel_l2(self.d)
    }

    pub fn convolution<T: Real>(&self, t: &[T]) -> T {
        kernel_convolution(t)
    }
}

#[inline]
pub fn kernel_1d<T: Real>(u: T) -> T {
    if u.abs() <= T::lit(HALF_SUPPORT) {
        let two_u = u + u;
        T::lit(1.5) * (T::one() - two_u * two_u)
    } else {
        T::zero()
    }
}

/// `prod_j K1(u_j)`.
pub fn eval_kernel<T: Real>(u: &[T]) -> T {
    let mut acc = T::one();
    for &v in u {
        acc = acc * kernel_1d(v);
        if acc == T::zero() {
            break;
        }
    }
    acc
}

/// `int K(xi)^2 dxi` over `R^d`.
pub fn kernel_l2<T: Real>(d: usize) -> T {
    T::lit(KERNEL_L2_1D).powi(d as i32)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, refined by Newton on P_n
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            // p1 = P_n(z), p0 = P_{n-1}(z)
            dp = nf * (z * p1 - p0) / (z * z - 1.0);
            let step = p1 / dp;
            z -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn gl64() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(GL_POINTS))
}

/// `int K1(xi) K1(xi + t) dxi`, integrated with 64-point Gauss-Legendre on
/// the overlap of the two supports (exact for the degree-4 integrand).
pub fn kernel_convolution_1d<T: Real>(t: T) -> T {
    let half = T::lit(HALF_SUPPORT);
    let lo = (-half).max(-half - t);
    let hi = half.min(half - t);
    if hi <= lo {
        return T::zero();
    }
    let (nodes, weights) = gl64();
    let mid = T::lit(0.5) * (lo + hi);
    let rad = T::lit(0.5) * (hi - lo);
    let mut acc = T::zero();
    for (&z, &w) in nodes.iter().zip(weights) {
        let xi = mid + rad * T::lit(z);
        acc = acc + T::lit(w) * kernel_1d(xi) * kernel_1d(xi + t);
    }
    acc * rad
}

/// `prod_j int K1(xi) K1(xi + t_j) dxi`; zero once any `|t_j| >= 1`.
pub fn kernel_convolution<T: Real>(t: &[T]) -> T {
    let mut acc = T::one();
    for &v in t {
        acc = acc * kernel_convolution_1d(v);
        if acc == T::zero() {
            break;
        }
    }
    acc
}

/// Normalized convolution `conv(t) / conv(0)`, the kernel-induced
/// correlation between estimates at points `t` bandwidths apart.
pub fn convolution_ratio<T: Real>(t: &[T]) -> T {
    (kernel_convolution(t) / kernel_l2::<T>(t.len())).min(T::one())
}

/// Which count enters `h = kappa * s * n^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthScale {
    #[default]
    Clusters,
    Units,
}

/// `h = kappa * s_X * n^exponent` with `n` the number of clusters (default)
/// or units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthRule {
    pub kappa: f64,
    pub exponent: f64,
    pub scale: BandwidthScale,
    /// One bandwidth per coordinate from that coordinate's sd, instead of a
    /// common one from the average sd.
    pub per_coordinate: bool,
}

impl Default for BandwidthRule {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            exponent: -2.0 / 7.0,
            scale: BandwidthScale::Clusters,
            per_coordinate: false,
        }
    }
}

impl BandwidthRule {
    pub fn with_kappa(kappa: f64) -> Self {
        Self {
            kappa,
            ..Self::default()
        }
    }
}

/// Per-coordinate bandwidths. Kernel arguments are `(x_j - X_j) / h_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandwidth<T> {
    h: Vec<T>,
}

impl<T: Real> Bandwidth<T> {
    pub fn uniform(h: T, d: usize) -> Result<Self> {
        Self::per_coordinate(vec![h; d])
    }

    pub fn per_coordinate(h: Vec<T>) -> Result<Self> {
        if h.is_empty() || h.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(HteError::Config(format!(
                "bandwidths must be positive and finite, got {h:?}"
            )));
        }
        Ok(Self { h })
    }

    pub fn d(&self) -> usize {
        self.h.len()
    }

    pub fn values(&self) -> &[T] {
        &self.h
    }

    /// `h^d`, or `prod_j h_j` for coordinate-wise bandwidths.
    pub fn volume(&self) -> T {
        self.h.iter().fold(T::one(), |a, &b| a * b)
    }

    /// Representative scalar bandwidth (geometric mean).
    pub fn scalar(&self) -> T {
        self.volume().powf(T::one() / T::from_usize(self.d()).unwrap())
    }
}

/// Rule-of-thumb bandwidth from the covariate standard deviation(s).
pub fn bandwidth<T: Real>(sample: &ClusteredSample<T>, rule: &BandwidthRule) -> Result<Bandwidth<T>> {
    if !(rule.kappa > 0.0) {
        return Err(HteError::Config("kappa_h must be positive".into()));
    }
    let c = sample.n_clusters();
    if c < 2 {
        return Err(HteError::Data(format!(
            "bandwidth rule needs at least 2 clusters, found {c}"
        )));
    }
    let count = match rule.scale {
        BandwidthScale::Clusters => c,
        BandwidthScale::Units => sample.n_units(),
    };
    let factor = T::lit(rule.kappa * (count as f64).powf(rule.exponent));
    let sds: Vec<T> = (0..sample.d()).map(|j| sample.covariate_sd(j)).collect();
    if let Some(j) = sds.iter().position(|&s| !(s > T::zero())) {
        return Err(HteError::Data(format!("covariate {j} has zero variance")));
    }
    if sample.d() >= 2 {
        log::warn!(
            "d = {}: a second-order kernel does not meet the smoothness order asked for by the asymptotics",
            sample.d()
        );
    }
    let h = if rule.per_coordinate {
        sds.iter().map(|&s| factor * s).collect()
    } else {
        let mean_sd = sds.iter().copied().sum::<T>() / T::from_usize(sds.len()).unwrap();
        vec![factor * mean_sd; sample.d()]
    };
    Bandwidth::per_coordinate(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kernel_values() {
        assert_eq!(eval_kernel(&[0.0f64]), 1.5);
        assert_eq!(eval_kernel(&[0.5f64]), 0.0);
        assert_eq!(eval_kernel(&[0.7f64]), 0.0);
        assert_relative_eq!(eval_kernel(&[0.0f64, 0.25]), 1.6875, epsilon = 1e-15);
    }

    #[test]
    fn l2_values() {
        assert_eq!(kernel_l2::<f64>(1), 1.2);
        assert_relative_eq!(kernel_l2::<f64>(2), 1.44, epsilon = 1e-15);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(64);
        assert_relative_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-13);
        let m6: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(6)).sum();
        assert_relative_eq!(m6, 2.0 / 7.0, epsilon = 1e-13);
        let (x3, w3) = gauss_legendre(3);
        let m4: f64 = x3.iter().zip(&w3).map(|(x, w)| w * x.powi(4)).sum();
        assert_relative_eq!(m4, 0.4, epsilon = 1e-14);
    }

    #[test]
    fn convolution_endpoints() {
        assert_relative_eq!(kernel_convolution(&[0.0f64]), 1.2, epsilon = 1e-13);
        assert_eq!(kernel_convolution(&[1.0f64]), 0.0);
        assert_eq!(kernel_convolution(&[-1.3f64]), 0.0);
        assert_relative_eq!(kernel_convolution(&[0.0f64, 0.0]), 1.44, epsilon = 1e-13);
    }

    #[test]
    fn bandwidth_formula() {
        // sd of {0, 1} with n-1 denominator is sqrt(1/2)
        use crate::data::{Cluster, Unit};
        let clusters = (0..150)
            .map(|c| Cluster {
                id: c.to_string(),
                units: vec![Unit {
                    y: 0.0,
                    treated: c % 2 == 0,
                    x: vec![(c % 2) as f64],
                    pi: None,
                }],
            })
            .collect();
        let s = ClusteredSample::from_clusters(clusters, 1).unwrap();
        let h = bandwidth(&s, &BandwidthRule::default()).unwrap();
        let sd = s.covariate_sd(0);
        assert_relative_eq!(h.values()[0], sd * 150f64.powf(-2.0 / 7.0), epsilon = 1e-15);
        let hn = bandwidth(
            &s,
            &BandwidthRule {
                kappa: 5.0,
                scale: BandwidthScale::Units,
                ..Default::default()
            },
        )
        .unwrap();
        assert_relative_eq!(hn.values()[0], 5.0 * sd * 150f64.powf(-2.0 / 7.0), epsilon = 1e-15);
    }

    #[test]
    fn bandwidth_needs_two_clusters() {
        use crate::data::{Cluster, Unit};
        let s = ClusteredSample::from_clusters(
            vec![Cluster {
                id: "only".into(),
                units: vec![
                    Unit {
                        y: 0.0,
                        treated: true,
                        x: vec![0.0],
                        pi: None,
                    },
                    Unit {
                        y: 0.0,
                        treated: false,
                        x: vec![1.0],
                        pi: None,
                    },
                ],
            }],
            1,
        )
        .unwrap();
        assert!(bandwidth(&s, &BandwidthRule::default()).is_err());
    }

    #[test]
    fn rule_of_thumb_value() {
        // kappa = 1, s = 0.29, C = 150
        let h = 0.29 * 150f64.powf(-2.0 / 7.0);
        assert_relative_eq!(h, 0.0694, epsilon = 1e-3);
    }
}
