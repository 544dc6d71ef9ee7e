//! Studentized tests, normal p-values and the Holm step-down that combines
//! the two nulls into a classification of where heterogeneity comes from.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::ClusteredSample;
use crate::error::{HteError, Result};
use crate::estimator::{EstimationContext, DEFAULT_MIN_CELL_MASS, DEFAULT_RHO2_FLOOR};
use crate::kernel::{bandwidth, Bandwidth, BandwidthRule};
use crate::scalar::Real;
use crate::teststat::{StatSettings, StatisticDecomposition, StatisticEngine};

/// Default number of grid points.
pub const DEFAULT_GRID_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hypothesis {
    /// Effects do not vary with the exposure level.
    #[serde(rename = "H0_Pi")]
    ExposureHomogeneity,
    /// Effects do not vary with the covariates.
    #[serde(rename = "H0_X")]
    CovariateHomogeneity,
}

impl Hypothesis {
    pub fn label(&self) -> &'static str {
        match self {
            Hypothesis::ExposureHomogeneity => "H0_Pi",
            Hypothesis::CovariateHomogeneity => "H0_X",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Asymptotic,
    Bootstrap,
}

/// Bandwidth from the rule of thumb, or given explicitly per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthChoice {
    Rule(BandwidthRule),
    Fixed(Vec<f64>),
}

impl Default for BandwidthChoice {
    fn default() -> Self {
        BandwidthChoice::Rule(BandwidthRule::default())
    }
}

/// Everything that determines a test besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub bandwidth: BandwidthChoice,
    pub grid_points: usize,
    /// Seed for the random grid used when `d >= 2`.
    pub grid_seed: u64,
    /// Minimum kernel mass per `(pi, t)` cell for a grid point to be used.
    pub min_cell_mass: f64,
    /// Floor on `rho2` relative to the outcome variance.
    pub rho2_floor: f64,
    pub stat: StatSettings,
    pub alpha: f64,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            bandwidth: BandwidthChoice::default(),
            grid_points: DEFAULT_GRID_POINTS,
            grid_seed: 0,
            min_cell_mass: DEFAULT_MIN_CELL_MASS,
            rho2_floor: DEFAULT_RHO2_FLOOR,
            stat: StatSettings::default(),
            alpha: 0.05,
        }
    }
}

impl TestConfig {
    pub fn with_kappa(kappa: f64) -> Self {
        Self {
            bandwidth: BandwidthChoice::Rule(BandwidthRule::with_kappa(kappa)),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(HteError::Config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if self.grid_points < 2 {
            return Err(HteError::Config("grid needs at least 2 points".into()));
        }
        if !(self.min_cell_mass >= 0.0) || !(self.rho2_floor > 0.0) {
            return Err(HteError::Config("cell mass and rho2 floors must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn bandwidth_for<T: Real>(&self, sample: &ClusteredSample<T>) -> Result<Bandwidth<T>> {
        match &self.bandwidth {
            BandwidthChoice::Rule(rule) => bandwidth(sample, rule),
            BandwidthChoice::Fixed(h) => {
                let h: Vec<T> = if h.len() == 1 {
                    vec![T::lit(h[0]); sample.d()]
                } else {
                    h.iter().map(|&v| T::lit(v)).collect()
                };
                if h.len() != sample.d() {
                    return Err(HteError::Config(format!(
                        "{} bandwidths given for {} covariates",
                        h.len(),
                        sample.d()
                    )));
                }
                Bandwidth::per_coordinate(h)
            }
        }
    }

    pub fn context<T: Real>(&self, sample: &ClusteredSample<T>, bw: &Bandwidth<T>) -> EstimationContext<T> {
        EstimationContext::for_sample(sample, bw)
            .with_min_mass(T::lit(self.min_cell_mass))
            .with_rho2_floor_rel(T::lit(self.rho2_floor), sample.outcome_variance())
    }

    /// Validated engine and estimation context for a sample.
    pub fn prepare<T: Real>(&self, sample: &ClusteredSample<T>) -> Result<(StatisticEngine<T>, EstimationContext<T>)> {
        self.validate()?;
        sample.check_testable()?;
        let bw = self.bandwidth_for(sample)?;
        let ctx = self.context(sample, &bw);
        let engine = StatisticEngine::for_sample(sample, bw, self.grid_points, self.grid_seed, self.stat)?;
        Ok((engine, ctx))
    }
}

/// Outcome of one test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult<T> {
    pub hypothesis: Hypothesis,
    pub statistic: StatisticDecomposition<T>,
    pub p_value: f64,
    pub level: f64,
    pub reject: bool,
    pub method: Method,
    pub bandwidth: Vec<f64>,
}

/// `Phi(z)`.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// One-sided upper p-value `1 - Phi(z)`.
pub fn normal_upper_p(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Asymptotic result from a finished decomposition.
pub fn asymptotic_result<T: Real>(
    hypothesis: Hypothesis,
    statistic: StatisticDecomposition<T>,
    alpha: f64,
    bw: &Bandwidth<T>,
) -> TestResult<T> {
    let p_value = normal_upper_p(statistic.studentized.as_f64());
    TestResult {
        hypothesis,
        statistic,
        p_value,
        level: alpha,
        reject: p_value <= alpha,
        method: Method::Asymptotic,
        bandwidth: bw.values().iter().map(|v| v.as_f64()).collect(),
    }
}

/// Asymptotic test of exposure homogeneity, `S1 = (T1 - a1) / sigma1`.
pub fn s1_test<T: Real>(sample: &ClusteredSample<T>, config: &TestConfig) -> Result<TestResult<T>> {
    let (engine, ctx) = config.prepare(sample)?;
    let est = engine.estimates(sample, &ctx)?;
    let dec = engine.s1(&est, sample.n_units())?;
    Ok(asymptotic_result(
        Hypothesis::ExposureHomogeneity,
        dec,
        config.alpha,
        engine.bandwidth(),
    ))
}

/// Asymptotic test of covariate homogeneity, `S2 = (T2 - a2) / sigma2`.
pub fn s2_test<T: Real>(sample: &ClusteredSample<T>, config: &TestConfig) -> Result<TestResult<T>> {
    let (engine, ctx) = config.prepare(sample)?;
    let est = engine.estimates(sample, &ctx)?;
    let dec = engine.s2(&est, sample.n_units())?;
    Ok(asymptotic_result(
        Hypothesis::CovariateHomogeneity,
        dec,
        config.alpha,
        engine.bandwidth(),
    ))
}

/// Both asymptotic tests sharing one set of cell estimates.
pub fn both_tests<T: Real>(sample: &ClusteredSample<T>, config: &TestConfig) -> Result<(TestResult<T>, TestResult<T>)> {
    let (engine, ctx) = config.prepare(sample)?;
    let est = engine.estimates(sample, &ctx)?;
    let n = sample.n_units();
    let bw = engine.bandwidth();
    Ok((
        asymptotic_result(Hypothesis::ExposureHomogeneity, engine.s1(&est, n)?, config.alpha, bw),
        asymptotic_result(Hypothesis::CovariateHomogeneity, engine.s2(&est, n)?, config.alpha, bw),
    ))
}

/// Where the effect heterogeneity comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    /// Neither null rejected.
    #[serde(rename = "CTE_both")]
    CteBoth,
    #[serde(rename = "HTE_exposure_only")]
    HteExposureOnly,
    #[serde(rename = "HTE_pretreatment_only")]
    HtePretreatmentOnly,
    #[serde(rename = "HTE_both")]
    HteBoth,
}

impl Classification {
    pub fn from_rejections(reject_pi: bool, reject_x: bool) -> Self {
        match (reject_pi, reject_x) {
            (false, false) => Classification::CteBoth,
            (true, false) => Classification::HteExposureOnly,
            (false, true) => Classification::HtePretreatmentOnly,
            (true, true) => Classification::HteBoth,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Classification::CteBoth => "CTE_both",
            Classification::HteExposureOnly => "HTE_exposure_only",
            Classification::HtePretreatmentOnly => "HTE_pretreatment_only",
            Classification::HteBoth => "HTE_both",
        }
    }
}

/// Holm step-down over the two nulls.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MtpResult {
    /// `(hypothesis, p-value)` in testing order, smallest first.
    pub ordered: [(Hypothesis, f64); 2],
    pub reject_pi: bool,
    pub reject_x: bool,
    pub classification: Classification,
    pub alpha: f64,
}

/// Test the smaller p-value at `alpha / 2` and, if rejected, the larger at
/// `alpha`. Ties are broken in favor of `H0_Pi`.
pub fn holm(p_pi: f64, p_x: f64, alpha: f64) -> Result<MtpResult> {
    for p in [p_pi, p_x] {
        if !(0.0..=1.0).contains(&p) {
            return Err(HteError::Domain(format!("p-value {p} outside [0, 1]")));
        }
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(HteError::Config(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let pi = (Hypothesis::ExposureHomogeneity, p_pi);
    let x = (Hypothesis::CovariateHomogeneity, p_x);
    let ordered = if p_x < p_pi { [x, pi] } else { [pi, x] };
    let first = ordered[0].1 <= alpha / 2.0;
    let second = first && ordered[1].1 <= alpha;
    let rejected = |h: Hypothesis| {
        if ordered[0].0 == h {
            first
        } else {
            second
        }
    };
    let reject_pi = rejected(Hypothesis::ExposureHomogeneity);
    let reject_x = rejected(Hypothesis::CovariateHomogeneity);
    Ok(MtpResult {
        ordered,
        reject_pi,
        reject_x,
        classification: Classification::from_rejections(reject_pi, reject_x),
        alpha,
    })
}

/// Results of one run, ready for JSON or a plain-text table.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub n_units: usize,
    pub n_clusters: usize,
    pub levels: Vec<f64>,
    pub results: Vec<TestResult<f64>>,
    pub mtp: Vec<MtpResult>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| HteError::Numerical(format!("report serialization: {e}")))
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "N = {}, C = {}, exposure levels = {:?}",
            self.n_units, self.n_clusters, self.levels
        );
        let _ = writeln!(
            out,
            "{:<6} {:<10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8} {:>7}",
            "null", "method", "h", "raw", "bias", "scale", "stat", "p", "reject"
        );
        for r in &self.results {
            let s = &r.statistic;
            let h = r
                .bandwidth
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(",");
            let method = method_label(r.method);
            let _ = writeln!(
                out,
                "{:<6} {:<10} {:>10} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>8.4} {:>7}",
                r.hypothesis.label(),
                method,
                h,
                s.raw,
                s.bias,
                s.scale,
                s.studentized,
                r.p_value,
                if r.reject { "yes" } else { "no" }
            );
        }
        // one Holm step-down per consecutive (H0_Pi, H0_X) pair of results
        let paired = self.results.len() == 2 * self.mtp.len();
        for (i, m) in self.mtp.iter().enumerate() {
            let tag = if paired {
                let r = &self.results[2 * i];
                let h = r
                    .bandwidth
                    .iter()
                    .map(|v| format!("{v:.4}"))
                    .collect::<Vec<_>>()
                    .join(",");
                format!("{}, h = {h}, ", method_label(r.method))
            } else {
                String::new()
            };
            let _ = writeln!(
                out,
                "Holm ({tag}alpha = {}): reject H0_Pi = {}, reject H0_X = {} -> {}",
                m.alpha,
                m.reject_pi,
                m.reject_x,
                m.classification.label()
            );
        }
        out
    }
}

fn method_label(m: Method) -> &'static str {
    match m {
        Method::Asymptotic => "asymptotic",
        Method::Bootstrap => "bootstrap",
    }
}
