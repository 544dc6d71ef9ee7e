//! Null-imposing resampling for both statistics.
//!
//! The pairs cluster bootstrap imposes exposure homogeneity by copying whole
//! clusters and overwriting their exposure; the wild cluster bootstrap
//! imposes covariate homogeneity by rebuilding outcomes around a mean that
//! is constant in `x`. Both keep the grid and bandwidth of the observed
//! sample and compare the uncentered-by-scale statistic `T - a`.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClusteredSample;
use crate::error::{HteError, Result};
use crate::estimator::{EstimationContext, GridEstimates, KernelWeights, MomentTable};
use crate::inference::{Hypothesis, Method, TestConfig, TestResult};
use crate::kernel::{eval_kernel, Bandwidth};
use crate::rng::{derive_seed, stream};
use crate::scalar::Real;
use crate::teststat::StatisticEngine;

/// Default number of bootstrap replications.
pub const DEFAULT_REPS: usize = 399;

/// Share of failed replications above which a bootstrap is abandoned.
pub const MAX_FAILED_SHARE: f64 = 0.05;

const PAIRS_STREAM: u64 = 1;
const WILD_STREAM: u64 = 2;

/// How the restricted mean of the wild bootstrap is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestrictedMean {
    /// Nadaraya-Watson within each `(pi, t)` cell at the covariate mean.
    #[default]
    KernelAtMean,
    /// Plain `(pi, t)` cell means.
    CellMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub reps: usize,
    pub seed: u64,
    /// Thread cap; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Report `(1 + #{S* > S}) / (B + 1)` instead of `#{S* > S} / B`.
    pub plus_one: bool,
    pub restricted_mean: RestrictedMean,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            reps: DEFAULT_REPS,
            seed: 0,
            workers: None,
            plus_one: false,
            restricted_mean: RestrictedMean::KernelAtMean,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(HteError::Config("bootstrap needs at least one replication".into()));
        }
        if self.workers == Some(0) {
            return Err(HteError::Config("worker count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    /// Observed `T - a`.
    pub observed: f64,
    /// `T* - a*` per completed replication, in replication order.
    pub draws: Vec<f64>,
    pub p_value: f64,
    pub reps_completed: usize,
    pub failed_reps: usize,
}

impl BootstrapResult {
    fn from_draws(observed: f64, outcomes: Vec<Option<f64>>, plus_one: bool) -> Result<Self> {
        let total = outcomes.len();
        let draws: Vec<f64> = outcomes.into_iter().flatten().collect();
        let failed = total - draws.len();
        if failed as f64 > MAX_FAILED_SHARE * total as f64 {
            return Err(HteError::Numerical(format!(
                "{failed} of {total} bootstrap replications failed"
            )));
        }
        let exceed = draws.iter().filter(|&&s| s > observed).count();
        let b = draws.len();
        let p_value = if plus_one {
            (1 + exceed) as f64 / (b + 1) as f64
        } else {
            exceed as f64 / b as f64
        };
        Ok(Self {
            observed,
            draws,
            p_value,
            reps_completed: b,
            failed_reps: failed,
        })
    }

    /// One line per draw: `rep,statistic`.
    pub fn write_draws_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "rep,statistic")?;
        for (b, s) in self.draws.iter().enumerate() {
            writeln!(out, "{b},{s}")?;
        }
        Ok(())
    }

    pub fn save_draws_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_draws_csv(f)
    }
}

/// Called with the number of completed replications.
pub type Progress<'a> = &'a (dyn Fn(usize) + Sync);

fn run_reps<F>(config: &BootstrapConfig, progress: Option<Progress>, rep: F) -> Vec<Option<f64>>
where
    F: Fn(usize) -> Option<f64> + Sync,
{
    let done = AtomicUsize::new(0);
    let work = || {
        (0..config.reps)
            .into_par_iter()
            .map(|b| {
                let out = rep(b);
                let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                if let Some(p) = progress {
                    p(n);
                }
                out
            })
            .collect::<Vec<_>>()
    };
    match config.workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(work),
            Err(_) => work(),
        },
        None => work(),
    }
}

fn observed_t1<T: Real>(engine: &StatisticEngine<T>, est: &GridEstimates<T>, n: usize) -> Result<f64> {
    let raw = engine.t1(est, n)?;
    Ok((raw.value - engine.bias1(&raw)).as_f64())
}

fn observed_t2<T: Real>(engine: &StatisticEngine<T>, est: &GridEstimates<T>, n: usize) -> Result<f64> {
    let raw = engine.t2(est, n)?;
    Ok((raw.value - engine.bias2(&raw)).as_f64())
}

/// Pairs cluster bootstrap of `T1 - a1` with exposure homogeneity imposed.
///
/// For each level `pi_k`, `C_k` clusters (the observed count at that level)
/// are drawn with replacement from all clusters and assigned exposure
/// `pi_k`. A replication whose resample leaves some exposure pair without
/// grid support is redrawn once, then counted as failed.
pub fn pairs_cluster_bootstrap_s1<T: Real>(
    sample: &ClusteredSample<T>,
    engine: &StatisticEngine<T>,
    ctx: &EstimationContext<T>,
    config: &BootstrapConfig,
    progress: Option<Progress>,
) -> Result<BootstrapResult> {
    config.validate()?;
    let kw = engine.kernel_weights(sample);
    let level_of = sample.level_of()?;
    let n_levels = engine.levels().len();
    let est = GridEstimates::from_moments(&kw.moments(sample.y(), sample.treated(), level_of, n_levels), ctx);
    let observed = observed_t1(engine, &est, sample.n_units())?;

    let n_clusters = sample.n_clusters();
    let mut per_level = vec![0usize; n_levels];
    for c in 0..n_clusters {
        per_level[level_of[sample.cluster_range(c).start]] += 1;
    }
    let volume = kw.volume();
    let base_seed = derive_seed(config.seed, PAIRS_STREAM, 0);

    let one = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<f64> {
        let mut table = MomentTable::zeros(engine.grid().len(), n_levels);
        let mut n_star = 0usize;
        for (k, &ck) in per_level.iter().enumerate() {
            for _ in 0..ck {
                let c = rng.random_range(0..n_clusters);
                for i in sample.cluster_range(c) {
                    kw.accumulate(&mut table, i, sample.y()[i], sample.treated()[i], k);
                    n_star += 1;
                }
            }
        }
        let ctx_star = EstimationContext {
            norm: T::from_usize(n_star).unwrap() * volume,
            ..*ctx
        };
        let est = GridEstimates::from_moments(&table, &ctx_star);
        observed_t1(engine, &est, n_star)
    };

    let outcomes = run_reps(config, progress, |b| {
        for attempt in 0..2u64 {
            let mut rng = stream(base_seed, (b as u64) * 2 + attempt);
            match one(&mut rng) {
                Ok(s) => return Some(s),
                Err(e) => log::debug!("pairs bootstrap rep {b} attempt {attempt}: {e}"),
            }
        }
        None
    });
    BootstrapResult::from_draws(observed, outcomes, config.plus_one)
}

/// Restricted fitted value per unit: the `(pi, t)` cell mean at the
/// covariate mean, constant in `x`.
pub fn restricted_mean_fit<T: Real>(
    sample: &ClusteredSample<T>,
    bw: &Bandwidth<T>,
    method: RestrictedMean,
) -> Result<Vec<T>> {
    let levels = sample.levels()?;
    let level_of = sample.level_of()?;
    let n_levels = levels.len();
    let xbar = sample.covariate_mean();
    let h = bw.values();
    let mut num = vec![T::zero(); n_levels * 2];
    let mut den = vec![T::zero(); n_levels * 2];
    let mut count = vec![0usize; n_levels * 2];
    let mut u = vec![T::zero(); sample.d()];
    for i in 0..sample.n_units() {
        let cell = level_of[i] * 2 + sample.treated()[i] as usize;
        let k = match method {
            RestrictedMean::KernelAtMean => {
                let xi = sample.x_row(i);
                for j in 0..u.len() {
                    u[j] = (xbar[j] - xi[j]) / h[j];
                }
                eval_kernel(&u)
            }
            RestrictedMean::CellMean => T::one(),
        };
        num[cell] = num[cell] + k * sample.y()[i];
        den[cell] = den[cell] + k;
        count[cell] += 1;
    }
    for cell in 0..n_levels * 2 {
        let (pi, t) = (levels[cell / 2].as_f64(), (cell % 2) as u8);
        if count[cell] == 0 {
            return Err(HteError::EmptyCell { pi, treated: t });
        }
        if !(den[cell] > T::zero()) {
            return Err(HteError::UndefinedPoint {
                x: xbar.iter().map(|v| v.as_f64()).collect(),
                pi,
                treated: t,
            });
        }
    }
    Ok((0..sample.n_units())
        .map(|i| {
            let cell = level_of[i] * 2 + sample.treated()[i] as usize;
            num[cell] / den[cell]
        })
        .collect())
}

/// Wild cluster bootstrap state: restricted fit, residuals and the
/// observed statistic.
pub struct WildBootstrap<'a, T> {
    sample: &'a ClusteredSample<T>,
    engine: &'a StatisticEngine<T>,
    ctx: EstimationContext<T>,
    kw: KernelWeights<T>,
    fitted: Vec<T>,
    residual: Vec<T>,
    observed: f64,
}

impl<'a, T: Real> WildBootstrap<'a, T> {
    pub fn new(
        sample: &'a ClusteredSample<T>,
        engine: &'a StatisticEngine<T>,
        ctx: &EstimationContext<T>,
        method: RestrictedMean,
    ) -> Result<Self> {
        let kw = engine.kernel_weights(sample);
        let fitted = restricted_mean_fit(sample, engine.bandwidth(), method)?;
        let residual = sample.y().iter().zip(&fitted).map(|(&y, &m)| y - m).collect();
        let est = GridEstimates::from_moments(
            &kw.moments(sample.y(), sample.treated(), sample.level_of()?, engine.levels().len()),
            ctx,
        );
        let observed = observed_t2(engine, &est, sample.n_units())?;
        Ok(Self {
            sample,
            engine,
            ctx: *ctx,
            kw,
            fitted,
            residual,
            observed,
        })
    }

    pub fn observed(&self) -> f64 {
        self.observed
    }

    pub fn fitted(&self) -> &[T] {
        &self.fitted
    }

    /// `T2* - a2*` for outcomes `M + e V_c` with one sign per cluster.
    pub fn statistic(&self, signs: &[bool]) -> Result<f64> {
        let s = self.sample;
        let level_of = s.level_of()?;
        let mut table = MomentTable::zeros(self.engine.grid().len(), self.engine.levels().len());
        for c in 0..s.n_clusters() {
            for i in s.cluster_range(c) {
                let e = if signs[c] { self.residual[i] } else { -self.residual[i] };
                self.kw
                    .accumulate(&mut table, i, self.fitted[i] + e, s.treated()[i], level_of[i]);
            }
        }
        let est = GridEstimates::from_moments(&table, &self.ctx);
        observed_t2(self.engine, &est, s.n_units())
    }

    pub fn run(&self, config: &BootstrapConfig, progress: Option<Progress>) -> Result<BootstrapResult> {
        config.validate()?;
        let base_seed = derive_seed(config.seed, WILD_STREAM, 0);
        let n_clusters = self.sample.n_clusters();
        let outcomes = run_reps(config, progress, |b| {
            for attempt in 0..2u64 {
                let mut rng = stream(base_seed, (b as u64) * 2 + attempt);
                let signs: Vec<bool> = (0..n_clusters).map(|_| rng.random::<bool>()).collect();
                match self.statistic(&signs) {
                    Ok(v) => return Some(v),
                    Err(e) => log::debug!("wild bootstrap rep {b} attempt {attempt}: {e}"),
                }
            }
            None
        });
        BootstrapResult::from_draws(self.observed, outcomes, config.plus_one)
    }
}

/// Wild cluster bootstrap of `T2 - a2` with covariate homogeneity imposed,
/// using Rademacher cluster weights.
pub fn wild_cluster_bootstrap_s2<T: Real>(
    sample: &ClusteredSample<T>,
    engine: &StatisticEngine<T>,
    ctx: &EstimationContext<T>,
    config: &BootstrapConfig,
    progress: Option<Progress>,
) -> Result<BootstrapResult> {
    WildBootstrap::new(sample, engine, ctx, config.restricted_mean)?.run(config, progress)
}

/// Bootstrap version of [`crate::inference::s1_test`].
pub fn s1_bootstrap_test<T: Real>(
    sample: &ClusteredSample<T>,
    config: &TestConfig,
    boot: &BootstrapConfig,
) -> Result<(TestResult<T>, BootstrapResult)> {
    let (engine, ctx) = config.prepare(sample)?;
    let res = pairs_cluster_bootstrap_s1(sample, &engine, &ctx, boot, None)?;
    let est = engine.estimates(sample, &ctx)?;
    let dec = engine.s1(&est, sample.n_units())?;
    Ok((
        bootstrap_result(Hypothesis::ExposureHomogeneity, dec, &res, config.alpha, &engine),
        res,
    ))
}

/// Bootstrap version of [`crate::inference::s2_test`].
pub fn s2_bootstrap_test<T: Real>(
    sample: &ClusteredSample<T>,
    config: &TestConfig,
    boot: &BootstrapConfig,
) -> Result<(TestResult<T>, BootstrapResult)> {
    let (engine, ctx) = config.prepare(sample)?;
    let res = wild_cluster_bootstrap_s2(sample, &engine, &ctx, boot, None)?;
    let est = engine.estimates(sample, &ctx)?;
    let dec = engine.s2(&est, sample.n_units())?;
    Ok((
        bootstrap_result(Hypothesis::CovariateHomogeneity, dec, &res, config.alpha, &engine),
        res,
    ))
}

fn bootstrap_result<T: Real>(
    hypothesis: Hypothesis,
    statistic: crate::teststat::StatisticDecomposition<T>,
    boot: &BootstrapResult,
    alpha: f64,
    engine: &StatisticEngine<T>,
) -> TestResult<T> {
    TestResult {
        hypothesis,
        statistic,
        p_value: boot.p_value,
        level: alpha,
        reject: boot.p_value <= alpha,
        method: Method::Bootstrap,
        bandwidth: engine.bandwidth().values().iter().map(|v| v.as_f64()).collect(),
    }
}
