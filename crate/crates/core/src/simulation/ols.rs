//! Linear interaction regression with cluster-robust standard errors, used
//! as the parametric benchmark against the kernel tests.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::error::{HteError, Result};
use crate::Sample;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointTest {
    pub f_stat: f64,
    pub df1: usize,
    pub df2: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParametricResult {
    pub coefficients: Vec<Coefficient>,
    pub n_units: usize,
    pub n_clusters: usize,
    pub r_squared: f64,
    /// All treatment interactions jointly zero.
    pub interactions: JointTest,
    /// Treatment-by-exposure interaction alone.
    pub exposure_interaction: Coefficient,
}

/// Fitted coefficients and the CR1 covariance of `y = X b + e`.
pub fn cluster_robust_ols(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    clusters: &[std::ops::Range<usize>],
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    let (n, k) = design.shape();
    let g = clusters.len();
    if n <= k || g < 2 {
        return Err(HteError::Data(format!(
            "regression needs more than {k} rows and at least 2 clusters"
        )));
    }
    let xtx = design.transpose() * design;
    let sv = xtx.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > smax * 1e-12) {
        return Err(HteError::Numerical("regression design is rank deficient".into()));
    }
    let bread = xtx
        .try_inverse()
        .ok_or_else(|| HteError::Numerical("regression design is rank deficient".into()))?;
    let beta = &bread * (design.transpose() * y);
    let resid = y - design * &beta;
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for r in clusters {
        let xc = design.rows(r.start, r.len());
        let s = xc.transpose() * resid.rows(r.start, r.len());
        meat += &s * s.transpose();
    }
    let gf = g as f64;
    let adj = gf / (gf - 1.0) * (n as f64 - 1.0) / (n - k) as f64;
    let vcov = &bread * meat * &bread * adj;
    Ok((beta, vcov, resid))
}

/// Regress `Y` on `1, T, X, Pi, T*X, T*Pi` with errors clustered by
/// cluster; t tests use `G - 1` degrees of freedom.
pub fn ols_cluster_comparison(sample: &Sample) -> Result<ParametricResult> {
    let levels = sample.levels()?;
    let level_of = sample.level_of()?;
    let (n, d) = (sample.n_units(), sample.d());
    let k = 3 + 2 * d + 1;
    let mut names = vec!["(Intercept)".to_string(), "T".to_string()];
    names.extend((0..d).map(|j| format!("X{}", j + 1)));
    names.push("Pi".into());
    names.extend((0..d).map(|j| format!("T:X{}", j + 1)));
    names.push("T:Pi".into());
    debug_assert_eq!(names.len(), k);

    let mut design = DMatrix::<f64>::zeros(n, k);
    for i in 0..n {
        let t = if sample.treated()[i] { 1.0 } else { 0.0 };
        let x = sample.x_row(i);
        let pi = levels[level_of[i]];
        design[(i, 0)] = 1.0;
        design[(i, 1)] = t;
        for j in 0..d {
            design[(i, 2 + j)] = x[j];
            design[(i, 3 + d + j)] = t * x[j];
        }
        design[(i, 2 + d)] = pi;
        design[(i, k - 1)] = t * pi;
    }
    let y = DVector::from_column_slice(sample.y());
    let ranges: Vec<_> = (0..sample.n_clusters()).map(|c| sample.cluster_range(c)).collect();
    let (beta, vcov, resid) = cluster_robust_ols(&design, &y, &ranges)?;

    let g = ranges.len();
    let df = (g - 1) as f64;
    let tdist = StudentsT::new(0.0, 1.0, df).map_err(|e| HteError::Numerical(e.to_string()))?;
    let coefficients: Vec<Coefficient> = names
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let se = vcov[(j, j)].max(0.0).sqrt();
            let t = beta[j] / se;
            Coefficient {
                name,
                estimate: beta[j],
                std_error: se,
                t_value: t,
                p_value: 2.0 * tdist.sf(t.abs()),
            }
        })
        .collect();

    // Wald test of the d + 1 interaction terms, scaled to F(q, G - 1)
    let q = d + 1;
    let idx: Vec<usize> = (3 + d..k).collect();
    let b = DVector::from_iterator(q, idx.iter().map(|&j| beta[j]));
    let v = DMatrix::from_fn(q, q, |r, c| vcov[(idx[r], idx[c])]);
    let w = v
        .try_inverse()
        .map(|vi| (b.transpose() * vi * &b)[(0, 0)])
        .ok_or_else(|| HteError::Numerical("interaction covariance is singular".into()))?;
    let f_stat = w / q as f64;
    let fdist = FisherSnedecor::new(q as f64, df).map_err(|e| HteError::Numerical(e.to_string()))?;
    let interactions = JointTest {
        f_stat,
        df1: q,
        df2: g - 1,
        p_value: fdist.sf(f_stat),
    };

    let ybar = y.mean();
    let tss: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let rss: f64 = resid.iter().map(|e| e * e).sum();
    Ok(ParametricResult {
        exposure_interaction: coefficients[k - 1].clone(),
        coefficients,
        n_units: n,
        n_clusters: g,
        r_squared: if tss > 0.0 { 1.0 - rss / tss } else { 0.0 },
        interactions,
    })
}

impl ParametricResult {
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>10} {:>10} {:>8} {:>8}\n",
            "term", "estimate", "std.err", "t", "p"
        );
        for c in &self.coefficients {
            s.push_str(&format!(
                "{:<12} {:>10.4} {:>10.4} {:>8.3} {:>8.4}\n",
                c.name, c.estimate, c.std_error, c.t_value, c.p_value
            ));
        }
        s.push_str(&format!(
            "interactions: F({}, {}) = {:.3}, p = {:.4}; R^2 = {:.3}; N = {}, G = {}\n",
            self.interactions.df1,
            self.interactions.df2,
            self.interactions.f_stat,
            self.interactions.p_value,
            self.r_squared,
            self.n_units,
            self.n_clusters
        ));
        s
    }
}
