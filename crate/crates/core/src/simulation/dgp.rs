use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Cluster, ClusteredSample, Unit};
use crate::error::{HteError, Result};
use crate::inference::normal_cdf;
use crate::rng::stream;

/// Constant standing in for pi in the cosine design, kept as published.
#[allow(clippy::approx_constant)]
pub const COSINE_PI: f64 = 3.142;

/// Shape of the true CATE `tau(x; pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CateForm {
    /// `beta0 x + beta1 pi` (first covariate only).
    #[default]
    Linear,
    /// `30 cos(2 * 3.142 * x) (pi^2 - pi)`.
    CosineNonlinear,
    /// `beta0 sum_l x_l + beta1 pi`.
    LinearMultiX,
}

/// Monte Carlo design with randomized cluster treatment vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub clusters: usize,
    pub cluster_size: usize,
    pub levels: Vec<f64>,
    pub beta0: f64,
    pub beta1: f64,
    pub cate_form: CateForm,
    /// Standard deviation of the potential-outcome noise.
    pub error_sd: f64,
    /// Within-cluster correlation of the covariates (Gaussian copula).
    pub x_correlation: f64,
    pub d: usize,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            clusters: 150,
            cluster_size: 10,
            levels: vec![0.3, 0.4, 0.5, 0.6],
            beta0: 1.0,
            beta1: 0.0,
            cate_form: CateForm::Linear,
            error_sd: 0.1f64.sqrt(),
            x_correlation: 0.2,
            d: 1,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 || self.cluster_size < 1 || self.d < 1 {
            return Err(HteError::Config(
                "need at least 2 clusters, 1 unit per cluster and 1 covariate".into(),
            ));
        }
        if self.levels.len() < 2 {
            return Err(HteError::Config("need at least 2 exposure levels".into()));
        }
        for &p in &self.levels {
            if !(0.0..=1.0).contains(&p) {
                return Err(HteError::Config(format!("exposure level {p} outside [0, 1]")));
            }
            let ones = p * self.cluster_size as f64;
            if (ones - ones.round()).abs() > 1e-9 {
                return Err(HteError::Config(format!(
                    "exposure {p} is not a treated share of a cluster of {}",
                    self.cluster_size
                )));
            }
        }
        if !(self.error_sd >= 0.0) || !(0.0..1.0).contains(&self.x_correlation) {
            return Err(HteError::Config(
                "error sd must be >= 0 and x correlation in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// True CATE at `x` and exposure `pi`.
    pub fn cate(&self, x: &[f64], pi: f64) -> f64 {
        match self.cate_form {
            CateForm::Linear => self.beta0 * x[0] + self.beta1 * pi,
            CateForm::CosineNonlinear => 30.0 * (2.0 * COSINE_PI * x[0]).cos() * (pi * pi - pi),
            CateForm::LinearMultiX => self.beta0 * x.iter().sum::<f64>() + self.beta1 * pi,
        }
    }
}

/// One draw from the design. Each cluster gets one of the treatment vectors
/// with mean `pi_k` (chosen uniformly), with the treated positions permuted
/// at random; exposure is the cluster treatment ratio.
pub fn gen_dgp(config: &DgpConfig, seed: u64) -> Result<ClusteredSample<f64>> {
    config.validate()?;
    let mut rng = stream(seed, 0);
    let n_c = config.cluster_size;
    let (a, b) = (config.x_correlation.sqrt(), (1.0 - config.x_correlation).sqrt());
    let mut clusters = Vec::with_capacity(config.clusters);
    let mut shared = vec![0.0; config.d];
    for c in 0..config.clusters {
        let pi = config.levels[rng.random_range(0..config.levels.len())];
        let ones = (pi * n_c as f64).round() as usize;
        let mut t: Vec<bool> = (0..n_c).map(|i| i < ones).collect();
        t.shuffle(&mut rng);
        for s in shared.iter_mut() {
            *s = rng.sample(StandardNormal);
        }
        let mut units = Vec::with_capacity(n_c);
        for &treated in &t {
            let x: Vec<f64> = shared
                .iter()
                .map(|&g| {
                    let z: f64 = rng.sample(StandardNormal);
                    normal_cdf(a * g + b * z)
                })
                .collect();
            let u1: f64 = rng.sample::<f64, _>(StandardNormal) * config.error_sd;
            let u0: f64 = rng.sample::<f64, _>(StandardNormal) * config.error_sd;
            let y = if treated { config.cate(&x, pi) + u1 } else { u0 };
            units.push(Unit {
                y,
                treated,
                x,
                pi: Some(pi),
            });
        }
        clusters.push(Cluster {
            id: format!("c{c}"),
            units,
        });
    }
    ClusteredSample::from_clusters(clusters, config.d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_cate() {
        let cfg = DgpConfig::default();
        assert_eq!(cfg.cate(&[0.5], 0.3), 0.5);
    }

    #[test]
    fn cosine_uses_published_constant() {
        let cfg = DgpConfig {
            cate_form: CateForm::CosineNonlinear,
            ..DgpConfig::default()
        };
        let want = 30.0 * (2.0 * 3.142 * 0.25f64).cos() * (0.25 - 0.5);
        assert_eq!(cfg.cate(&[0.25], 0.5), want);
        // cos(1.571) is slightly negative, so the value is small and positive
        assert!((want - 0.00153).abs() < 1e-5);
    }

    #[test]
    fn exposure_equals_treated_share() {
        let cfg = DgpConfig::default();
        let s = gen_dgp(&cfg, 11).unwrap();
        assert_eq!(s.n_units(), 1500);
        let levels = s.levels().unwrap();
        for c in 0..s.n_clusters() {
            let r = s.cluster_range(c);
            let treated = s.treated()[r.clone()].iter().filter(|&&t| t).count();
            let pi = levels[s.level_of().unwrap()[r.start]];
            assert_eq!(treated as f64, (pi * 10.0).round());
        }
    }

    #[test]
    fn rejects_unrealizable_level() {
        let cfg = DgpConfig {
            levels: vec![0.25, 0.5],
            ..DgpConfig::default()
        };
        assert!(gen_dgp(&cfg, 1).is_err());
    }

    #[test]
    fn same_seed_same_sample() {
        let cfg = DgpConfig::default();
        assert_eq!(gen_dgp(&cfg, 5).unwrap().y(), gen_dgp(&cfg, 5).unwrap().y());
    }
}
