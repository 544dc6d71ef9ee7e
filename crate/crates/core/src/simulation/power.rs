use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{s1_bootstrap_test, s2_bootstrap_test, BootstrapConfig};
use crate::error::{HteError, Result};
use crate::inference::BandwidthChoice;
use crate::inference::{both_tests, s1_test, s2_test, Method, TestConfig};
use crate::kernel::{BandwidthRule, BandwidthScale};
use crate::rng::derive_seed;
use crate::simulation::dgp::{gen_dgp, CateForm, DgpConfig};

/// Nominal levels reported in every table.
pub const NOMINAL_LEVELS: [f64; 3] = [0.01, 0.05, 0.10];

/// Share of Monte Carlo replications allowed to fail.
pub const MAX_DROPPED_SHARE: f64 = 0.02;

const DGP_PURPOSE: u64 = 11;
const BOOT_PURPOSE: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    S1,
    S2,
}

impl Statistic {
    pub fn label(&self) -> &'static str {
        match self {
            Statistic::S1 => "S1",
            Statistic::S2 => "S2",
        }
    }
}

/// A test as run inside a Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub statistic: Statistic,
    pub method: Method,
    pub config: TestConfig,
    pub bootstrap: BootstrapConfig,
}

impl TestSpec {
    pub fn asymptotic(statistic: Statistic, config: TestConfig) -> Self {
        Self {
            statistic,
            method: Method::Asymptotic,
            config,
            bootstrap: BootstrapConfig::default(),
        }
    }

    pub fn bootstrap(statistic: Statistic, config: TestConfig, bootstrap: BootstrapConfig) -> Self {
        Self {
            statistic,
            method: Method::Bootstrap,
            config,
            bootstrap,
        }
    }

    /// p-value on one sample; `seed` keys the bootstrap draws.
    pub fn p_value(&self, sample: &crate::Sample, seed: u64) -> Result<f64> {
        match (self.method, self.statistic) {
            (Method::Asymptotic, Statistic::S1) => Ok(s1_test(sample, &self.config)?.p_value),
            (Method::Asymptotic, Statistic::S2) => Ok(s2_test(sample, &self.config)?.p_value),
            (Method::Bootstrap, stat) => {
                let boot = BootstrapConfig {
                    seed,
                    workers: None,
                    ..self.bootstrap.clone()
                };
                let res = match stat {
                    Statistic::S1 => s1_bootstrap_test(sample, &self.config, &boot)?.1,
                    Statistic::S2 => s2_bootstrap_test(sample, &self.config, &boot)?.1,
                };
                Ok(res.p_value)
            }
        }
    }
}

/// Empirical rejection frequencies at one design point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionRow {
    /// Value of the varied coefficient.
    pub beta: f64,
    /// One entry per nominal level.
    pub probabilities: Vec<f64>,
    pub completed: usize,
    pub dropped: usize,
}

fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// Seed of the data drawn in replication `rep` of an experiment keyed by
/// `seed`, so other procedures can be run on the same samples.
pub fn replication_seed(seed: u64, rep: usize) -> u64 {
    derive_seed(seed, DGP_PURPOSE, rep as u64)
}

/// p-values of `reps` independent draws of the design, in replication
/// order; failed replications are `None`.
pub fn simulate_p_values(dgp: &DgpConfig, test: &TestSpec, reps: usize, seed: u64) -> Result<Vec<Option<f64>>> {
    if reps == 0 {
        return Err(HteError::Config("need at least one Monte Carlo replication".into()));
    }
    dgp.validate()?;
    test.config.validate()?;
    Ok((0..reps)
        .into_par_iter()
        .map(|r| {
            let sample = gen_dgp(dgp, replication_seed(seed, r)).ok()?;
            match test.p_value(&sample, derive_seed(seed, BOOT_PURPOSE, r as u64)) {
                Ok(p) => Some(p),
                Err(e) => {
                    log::debug!("replication {r} dropped: {e}");
                    None
                }
            }
        })
        .collect())
}

/// Fraction of replications rejecting at each nominal level.
pub fn rejection_probabilities(
    dgp: &DgpConfig,
    test: &TestSpec,
    reps: usize,
    levels: &[f64],
    seed: u64,
) -> Result<RejectionRow> {
    let ps = simulate_p_values(dgp, test, reps, seed)?;
    summarize(ps, levels, f64::NAN)
}

fn summarize(ps: Vec<Option<f64>>, levels: &[f64], beta: f64) -> Result<RejectionRow> {
    let total = ps.len();
    let ok: Vec<f64> = ps.into_iter().flatten().collect();
    let dropped = total - ok.len();
    if dropped as f64 > MAX_DROPPED_SHARE * total as f64 || ok.is_empty() {
        return Err(HteError::Numerical(format!(
            "{dropped} of {total} Monte Carlo replications failed"
        )));
    }
    let probabilities = levels
        .iter()
        .map(|&a| ok.iter().filter(|&&p| p <= a).count() as f64 / ok.len() as f64)
        .collect();
    Ok(RejectionRow {
        beta,
        probabilities,
        completed: ok.len(),
        dropped,
    })
}

/// Which CATE coefficient a power curve varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vary {
    Beta0,
    Beta1,
}

/// Rejection probabilities over a grid of coefficient values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerTable {
    pub name: String,
    pub statistic: Statistic,
    pub method: Method,
    pub vary: Vary,
    pub levels: Vec<f64>,
    pub rows: Vec<RejectionRow>,
    pub reps: usize,
    pub seed: u64,
}

impl PowerTable {
    /// Wide layout: coefficient column then one column per level.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let beta = match self.vary {
            Vary::Beta0 => "beta0",
            Vary::Beta1 => "beta1",
        };
        let mut header = vec![beta.to_string()];
        header.extend(self.levels.iter().map(|l| format!("{l:.2}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![format!("{:.2}", r.beta)];
            rec.extend(r.probabilities.iter().map(|p| format!("{p:.3}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long layout for plotting: `statistic,method,beta,level,probability`.
    pub fn write_long_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["statistic", "method", "beta", "level", "probability"])?;
        let method = match self.method {
            Method::Asymptotic => "asymptotic",
            Method::Bootstrap => "bootstrap",
        };
        for r in &self.rows {
            for (l, p) in self.levels.iter().zip(&r.probabilities) {
                w.write_record([
                    self.statistic.label(),
                    method,
                    &format!("{:.2}", r.beta),
                    &format!("{l:.2}"),
                    &format!("{p:.3}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8_lossy(&buf).into_owned())
    }
}

/// A full power-curve experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerExperiment {
    pub name: String,
    pub dgp: DgpConfig,
    pub vary: Vary,
    pub betas: Vec<f64>,
    pub test: TestSpec,
}

impl PowerExperiment {
    /// Run every design point; each uses its own seed derived from `seed`.
    pub fn run(&self, reps: usize, levels: &[f64], seed: u64, workers: Option<usize>) -> Result<PowerTable> {
        let rows = with_workers(workers, || -> Result<Vec<RejectionRow>> {
            self.betas
                .iter()
                .enumerate()
                .map(|(i, &b)| {
                    let mut dgp = self.dgp.clone();
                    match self.vary {
                        Vary::Beta0 => dgp.beta0 = b,
                        Vary::Beta1 => dgp.beta1 = b,
                    }
                    let ps = simulate_p_values(&dgp, &self.test, reps, derive_seed(seed, 0, i as u64))?;
                    summarize(ps, levels, b)
                })
                .collect()
        })?;
        Ok(PowerTable {
            name: self.name.clone(),
            statistic: self.test.statistic,
            method: self.test.method,
            vary: self.vary,
            levels: levels.to_vec(),
            rows,
            reps,
            seed,
        })
    }
}

/// Parse `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_beta_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || HteError::Config(format!("invalid coefficient grid '{spec}'"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() == 3 {
        let v: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let (start, stop, step) = (v[0], v[1], v[2]);
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        // round to the step's precision so 0.05 increments print cleanly
        return Ok((0..=n)
            .map(|i| ((start + step * i as f64) * 1e9).round() / 1e9)
            .collect());
    }
    spec.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect()
}

/// Coefficient values `-0.5, -0.45, ..., 0.5`.
pub fn default_beta_grid() -> Vec<f64> {
    (0..=20)
        .map(|i| ((-0.5 + 0.05 * i as f64) * 100.0).round() / 100.0)
        .collect()
}

/// Bandwidth constants used by the presets, fixed from pilot runs on seeds
/// disjoint from the acceptance runs.
pub const S1_PRESET_KAPPA: f64 = 5.0;
/// N-scaled constant for the asymptotic `S2` tables.
pub const S2_PRESET_KAPPA_UNITS: f64 = 1.75;
/// C-scaled constant for the bootstrap `S2` table (same bandwidth at
/// `C = 150, N_c = 10`).
pub const S2_PRESET_KAPPA_CLUSTERS: f64 = 0.9;

pub fn s1_preset_config() -> TestConfig {
    TestConfig::with_kappa(S1_PRESET_KAPPA)
}

pub fn s2_preset_config() -> TestConfig {
    TestConfig {
        bandwidth: BandwidthChoice::Rule(BandwidthRule {
            kappa: S2_PRESET_KAPPA_UNITS,
            scale: BandwidthScale::Units,
            ..BandwidthRule::default()
        }),
        ..TestConfig::default()
    }
}

pub fn s2_bootstrap_preset_config() -> TestConfig {
    TestConfig::with_kappa(S2_PRESET_KAPPA_CLUSTERS)
}

/// Named Monte Carlo designs. CLI names are `paper-a1` to `paper-a6`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// `S1`, asymptotic, `beta1` varied.
    S1Asymptotic,
    /// `S2`, asymptotic, `beta0` varied.
    S2Asymptotic,
    /// As `S2Asymptotic` without the covariance correction in the weights.
    S2NoShiftCovariance,
    /// `S1`, pairs cluster bootstrap.
    S1Bootstrap,
    /// `S2`, wild cluster bootstrap.
    S2Bootstrap,
    /// Null sizes at `C = 50`, bootstrap and asymptotic.
    SmallClusterNulls,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "paper-a1" => Preset::S1Asymptotic,
            "paper-a2" => Preset::S2Asymptotic,
            "paper-a3" => Preset::S2NoShiftCovariance,
            "paper-a4" => Preset::S1Bootstrap,
            "paper-a5" => Preset::S2Bootstrap,
            "paper-a6" => Preset::SmallClusterNulls,
            _ => return Err(HteError::Config(format!("unknown preset '{name}'"))),
        })
    }

    pub fn experiments(&self) -> Vec<PowerExperiment> {
        let s1_null = DgpConfig {
            beta0: 1.0,
            beta1: 0.0,
            cate_form: CateForm::Linear,
            ..DgpConfig::default()
        };
        let s2_null = DgpConfig {
            beta0: 0.0,
            beta1: 1.0,
            ..s1_null.clone()
        };
        let boot = BootstrapConfig::default();
        let curve = |name: &str, dgp: &DgpConfig, vary, test| PowerExperiment {
            name: name.into(),
            dgp: dgp.clone(),
            vary,
            betas: default_beta_grid(),
            test,
        };
        match self {
            Preset::S1Asymptotic => vec![curve(
                "paper-a1",
                &s1_null,
                Vary::Beta1,
                TestSpec::asymptotic(Statistic::S1, s1_preset_config()),
            )],
            Preset::S2Asymptotic => vec![curve(
                "paper-a2",
                &s2_null,
                Vary::Beta0,
                TestSpec::asymptotic(Statistic::S2, s2_preset_config()),
            )],
            Preset::S2NoShiftCovariance => {
                let mut cfg = s2_preset_config();
                cfg.stat.shift_covariance = crate::estimator::ShiftCovariance::Omitted;
                vec![curve(
                    "paper-a3",
                    &s2_null,
                    Vary::Beta0,
                    TestSpec::asymptotic(Statistic::S2, cfg),
                )]
            }
            Preset::S1Bootstrap => vec![curve(
                "paper-a4",
                &s1_null,
                Vary::Beta1,
                TestSpec::bootstrap(Statistic::S1, s1_preset_config(), boot),
            )],
            Preset::S2Bootstrap => vec![curve(
                "paper-a5",
                &s2_null,
                Vary::Beta0,
                TestSpec::bootstrap(Statistic::S2, s2_bootstrap_preset_config(), boot),
            )],
            Preset::SmallClusterNulls => {
                let small1 = DgpConfig {
                    clusters: 50,
                    ..s1_null
                };
                let small2 = DgpConfig {
                    clusters: 50,
                    ..s2_null
                };
                let null = |name: &str, dgp: &DgpConfig, vary, test| PowerExperiment {
                    betas: vec![0.0],
                    ..curve(name, dgp, vary, test)
                };
                vec![
                    null(
                        "paper-a6-s1-bootstrap",
                        &small1,
                        Vary::Beta1,
                        TestSpec::bootstrap(Statistic::S1, s1_preset_config(), boot.clone()),
                    ),
                    null(
                        "paper-a6-s1-asymptotic",
                        &small1,
                        Vary::Beta1,
                        TestSpec::asymptotic(Statistic::S1, s1_preset_config()),
                    ),
                    null(
                        "paper-a6-s2-bootstrap",
                        &small2,
                        Vary::Beta0,
                        TestSpec::bootstrap(Statistic::S2, s2_bootstrap_preset_config(), boot),
                    ),
                    null(
                        "paper-a6-s2-asymptotic",
                        &small2,
                        Vary::Beta0,
                        TestSpec::asymptotic(Statistic::S2, s2_preset_config()),
                    ),
                ]
            }
        }
    }
}

/// Both asymptotic p-values on one sample, sharing the cell estimates.
pub fn asymptotic_p_values(sample: &crate::Sample, config: &TestConfig) -> Result<(f64, f64)> {
    let (a, b) = both_tests(sample, config)?;
    Ok((a.p_value, b.p_value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_grid_parsing() {
        let g = parse_beta_grid("-0.5:0.5:0.05").unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], -0.5);
        assert_eq!(g[10], 0.0);
        assert_eq!(g[20], 0.5);
        assert_eq!(parse_beta_grid("0,0.25").unwrap(), vec![0.0, 0.25]);
        assert!(parse_beta_grid("1:0:0.1").is_err());
        assert!(parse_beta_grid("a").is_err());
        assert_eq!(default_beta_grid(), g);
    }

    #[test]
    fn summarize_counts_levels() {
        let ps = vec![Some(0.005), Some(0.04), Some(0.5), Some(0.09)];
        let row = summarize(ps, &NOMINAL_LEVELS, 0.0).unwrap();
        assert_eq!(row.probabilities, vec![0.25, 0.5, 0.75]);
        let row = summarize(vec![None, Some(0.5)], &NOMINAL_LEVELS, 0.0);
        assert!(row.is_err());
    }

    #[test]
    fn single_rep_is_zero_or_one() {
        let dgp = DgpConfig::default();
        let spec = TestSpec::asymptotic(Statistic::S1, s1_preset_config());
        let row = rejection_probabilities(&dgp, &spec, 1, &NOMINAL_LEVELS, 3).unwrap();
        assert!(row.probabilities.iter().all(|&p| p == 0.0 || p == 1.0));
    }

    #[test]
    fn presets_parse() {
        assert_eq!(Preset::parse("paper-a1").unwrap(), Preset::S1Asymptotic);
        assert!(Preset::parse("paper-z9").is_err());
        assert_eq!(Preset::SmallClusterNulls.experiments().len(), 4);
    }
}
