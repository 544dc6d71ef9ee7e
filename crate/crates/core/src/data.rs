//! Clustered samples, exposure mappings, CSV ingestion and overlap diagnostics.
//!
//! A [`ClusteredSample`] stores units in cluster-contiguous, column-major
//! form: outcome, treatment, a row-major `N x d` covariate block, and an
//! optional exposure assignment. Exposures are stored as an index into an
//! ordered set of distinct levels so that indicator sums `1(Pi = pi)` are
//! exact comparisons of integers.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HteError, Result};
use crate::scalar::Real;

/// Relative tolerance used to merge user-supplied exposure values.
pub const EXPOSURE_MATCH_RTOL: f64 = 1e-9;

/// Default floor on the share of units in any `(pi, t)` cell before a warning.
pub const DEFAULT_MIN_SHARE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit<T> {
    pub y: T,
    pub treated: bool,
    pub x: Vec<T>,
    /// Exposure value; `None` until an exposure mapping has been applied.
    pub pi: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster<T> {
    pub id: String,
    pub units: Vec<Unit<T>>,
}

/// Exposure assignment: ordered distinct levels and, per unit, the level index.
#[derive(Debug, Clone, PartialEq)]
pub struct Exposure<T> {
    levels: Vec<T>,
    level_of: Vec<usize>,
}

impl<T: Real> Exposure<T> {
    /// Group raw per-unit exposure values into levels. Values within
    /// `rtol` (relative) of each other are merged onto the smallest one.
    pub fn from_values(values: &[T], rtol: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HteError::Data("exposure values must be finite".into()));
        }
        let mut sorted: Vec<T> = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut levels: Vec<T> = Vec::new();
        for v in sorted {
            match levels.last() {
                Some(&last) if same_level(last, v, rtol) => {}
                _ => levels.push(v),
            }
        }
        let level_of = values
            .iter()
            .map(|&v| {
                // levels are sorted; the matching level is the last one <= v
                // (up to tolerance)
                let pos = levels.partition_point(|&l| l <= v);
                let cand = pos.saturating_sub(1);
                if same_level(levels[cand], v, rtol) {
                    cand
                } else {
                    // only reachable when v sits just below a level within rtol
                    pos.min(levels.len() - 1)
                }
            })
            .collect();
        Ok(Self { levels, level_of })
    }

    pub fn levels(&self) -> &[T] {
        &self.levels
    }

    pub fn level_of(&self) -> &[usize] {
        &self.level_of
    }
}

fn same_level<T: Real>(a: T, b: T, rtol: f64) -> bool {
    if a == b {
        return true;
    }
    let scale = a.abs().max(b.abs());
    (a - b).abs() <= T::lit(rtol) * scale
}

/// Observed clustered data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredSample<T> {
    d: usize,
    ids: Vec<String>,
    offsets: Vec<usize>,
    y: Vec<T>,
    treated: Vec<bool>,
    x: Vec<T>,
    exposure: Option<Exposure<T>>,
}

impl<T: Real> ClusteredSample<T> {
    /// Build a sample from clusters. Either every unit carries an exposure
    /// value or none does.
    pub fn from_clusters(clusters: Vec<Cluster<T>>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(HteError::Data("covariate dimension must be at least 1".into()));
        }
        if clusters.is_empty() {
            return Err(HteError::Data("sample has no clusters".into()));
        }
        let n: usize = clusters.iter().map(|c| c.units.len()).sum();
        let mut ids = Vec::with_capacity(clusters.len());
        let mut offsets = Vec::with_capacity(clusters.len() + 1);
        let mut y = Vec::with_capacity(n);
        let mut treated = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n * d);
        let mut pis = Vec::with_capacity(n);
        let mut n_with_pi = 0usize;
        offsets.push(0);
        for cluster in clusters {
            if cluster.units.is_empty() {
                return Err(HteError::Data(format!("cluster `{}` is empty", cluster.id)));
            }
            for unit in cluster.units {
                if unit.x.len() != d {
                    return Err(HteError::Data(format!(
                        "unit in cluster `{}` has {} covariates, expected {d}",
                        cluster.id,
                        unit.x.len()
                    )));
                }
                if !unit.y.is_finite() || unit.x.iter().any(|v| !v.is_finite()) {
                    return Err(HteError::Data(format!(
                        "non-finite outcome or covariate in cluster `{}`",
                        cluster.id
                    )));
                }
                y.push(unit.y);
                treated.push(unit.treated);
                x.extend_from_slice(&unit.x);
                if let Some(p) = unit.pi {
                    n_with_pi += 1;
                    pis.push(p);
                }
            }
            ids.push(cluster.id);
            offsets.push(y.len());
        }
        let exposure = match n_with_pi {
            0 => None,
            k if k == n => Some(Exposure::from_values(&pis, EXPOSURE_MATCH_RTOL)?),
            _ => {
                return Err(HteError::Data(
                    "exposure must be given for every unit or for none".into(),
                ))
            }
        };
        Ok(Self {
            d,
            ids,
            offsets,
            y,
            treated,
            x,
            exposure,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_units(&self) -> usize {
        self.y.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.ids.len()
    }

    pub fn cluster_id(&self, c: usize) -> &str {
        &self.ids[c]
    }

    pub fn cluster_ids(&self) -> &[String] {
        &self.ids
    }

    /// Unit index range of cluster `c`.
    pub fn cluster_range(&self, c: usize) -> std::ops::Range<usize> {
        self.offsets[c]..self.offsets[c + 1]
    }

    pub fn cluster_size(&self, c: usize) -> usize {
        self.offsets[c + 1] - self.offsets[c]
    }

    pub fn y(&self) -> &[T] {
        &self.y
    }

    pub fn treated(&self) -> &[bool] {
        &self.treated
    }

    /// Row-major `N x d` covariate block.
    pub fn x(&self) -> &[T] {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> &[T] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn exposure(&self) -> Option<&Exposure<T>> {
        self.exposure.as_ref()
    }

    /// Exposure levels, or an error if no exposure has been assigned yet.
    pub fn levels(&self) -> Result<&[T]> {
        self.exposure
            .as_ref()
            .map(|e| e.levels())
            .ok_or_else(|| HteError::Data("exposure not set; apply an exposure mapping".into()))
    }

    pub fn level_of(&self) -> Result<&[usize]> {
        self.exposure
            .as_ref()
            .map(|e| e.level_of())
            .ok_or_else(|| HteError::Data("exposure not set; apply an exposure mapping".into()))
    }

    /// Level index of an exposure value, matched with the ingestion tolerance.
    pub fn level_index(&self, pi: T) -> Result<usize> {
        let levels = self.levels()?;
        levels
            .iter()
            .position(|&l| same_level(l, pi, EXPOSURE_MATCH_RTOL))
            .ok_or_else(|| HteError::Data(format!("{pi} is not an exposure level of the sample")))
    }

    /// Same units with outcomes replaced.
    pub fn with_outcomes(&self, y: Vec<T>) -> Result<Self> {
        if y.len() != self.y.len() {
            return Err(HteError::Data(format!(
                "outcome vector has length {}, expected {}",
                y.len(),
                self.y.len()
            )));
        }
        Ok(Self { y, ..self.clone() })
    }

    /// Same units with an explicit per-unit exposure assignment.
    pub fn with_exposure(&self, exposure: Exposure<T>) -> Result<Self> {
        if exposure.level_of.len() != self.n_units() {
            return Err(HteError::Data("exposure assignment length mismatch".into()));
        }
        Ok(Self {
            exposure: Some(exposure),
            ..self.clone()
        })
    }

    pub fn to_clusters(&self) -> Vec<Cluster<T>> {
        (0..self.n_clusters())
            .map(|c| Cluster {
                id: self.ids[c].clone(),
                units: self
                    .cluster_range(c)
                    .map(|i| Unit {
                        y: self.y[i],
                        treated: self.treated[i],
                        x: self.x_row(i).to_vec(),
                        pi: self.exposure.as_ref().map(|e| e.levels[e.level_of[i]]),
                    })
                    .collect(),
            })
            .collect()
    }

    /// Checks the conditions the test statistics rely on: exposure set,
    /// `2 <= K < C`.
    pub fn check_testable(&self) -> Result<()> {
        let k = self.levels()?.len();
        if k < 2 {
            return Err(HteError::Data(format!("need at least 2 exposure levels, found {k}")));
        }
        if k >= self.n_clusters() {
            return Err(HteError::Data(format!(
                "number of exposure levels ({k}) must be below the number of clusters ({})",
                self.n_clusters()
            )));
        }
        Ok(())
    }

    /// Sample standard deviation of covariate `j` (n - 1 denominator).
    pub fn covariate_sd(&self, j: usize) -> T {
        let n = self.n_units();
        if n < 2 {
            return T::zero();
        }
        let nf = T::from_usize(n).unwrap();
        let mean = (0..n).map(|i| self.x[i * self.d + j]).sum::<T>() / nf;
        let ss = (0..n)
            .map(|i| {
                let e = self.x[i * self.d + j] - mean;
                e * e
            })
            .sum::<T>();
        (ss / (nf - T::one())).sqrt()
    }

    /// Sample variance of the outcome (n - 1 denominator).
    pub fn outcome_variance(&self) -> T {
        let n = self.n_units();
        if n < 2 {
            return T::zero();
        }
        let nf = T::from_usize(n).unwrap();
        let mean = self.y.iter().copied().sum::<T>() / nf;
        self.y.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / (nf - T::one())
    }

    /// Per-coordinate covariate means.
    pub fn covariate_mean(&self) -> Vec<T> {
        let nf = T::from_usize(self.n_units()).unwrap();
        (0..self.d)
            .map(|j| (0..self.n_units()).map(|i| self.x[i * self.d + j]).sum::<T>() / nf)
            .collect()
    }
}

/// Rule reducing a cluster treatment vector to per-unit exposure values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "cutpoint")]
pub enum ExposureMapping {
    /// Share of treated units in the cluster.
    TreatmentRatio,
    /// Share of treated units among the other units of the cluster.
    LeaveOneOutRatio,
    /// Indicator that the cluster treatment ratio exceeds the cutpoint.
    Threshold(f64),
}

impl ExposureMapping {
    pub fn description(&self) -> String {
        match self {
            Self::TreatmentRatio => "treatment ratio within cluster".into(),
            Self::LeaveOneOutRatio => "leave-one-out treatment ratio within cluster".into(),
            Self::Threshold(c) => format!("1{{treatment ratio > {c}}}"),
        }
    }

    pub fn is_cluster_level(&self) -> bool {
        !matches!(self, Self::LeaveOneOutRatio)
    }
}

/// Assign exposures from the treatment vectors. Outcomes and covariates are
/// never consulted.
pub fn apply_exposure_mapping<T: Real>(
    sample: &ClusteredSample<T>,
    mapping: ExposureMapping,
) -> Result<ClusteredSample<T>> {
    let mut values = vec![T::zero(); sample.n_units()];
    for c in 0..sample.n_clusters() {
        let range = sample.cluster_range(c);
        let n_c = range.len();
        let n_treated = sample.treated[range.clone()].iter().filter(|&&t| t).count();
        let ratio = T::from_usize(n_treated).unwrap() / T::from_usize(n_c).unwrap();
        match mapping {
            ExposureMapping::TreatmentRatio => {
                values[range].iter_mut().for_each(|v| *v = ratio);
            }
            ExposureMapping::Threshold(cut) => {
                let v = if ratio > T::lit(cut) { T::one() } else { T::zero() };
                values[range].iter_mut().for_each(|p| *p = v);
            }
            ExposureMapping::LeaveOneOutRatio => {
                if n_c < 2 {
                    return Err(HteError::Data(format!(
                        "leave-one-out exposure undefined for singleton cluster `{}`",
                        sample.ids[c]
                    )));
                }
                let denom = T::from_usize(n_c - 1).unwrap();
                for i in range {
                    let others = n_treated - usize::from(sample.treated[i]);
                    values[i] = T::from_usize(others).unwrap() / denom;
                }
            }
        }
    }
    sample.with_exposure(Exposure::from_values(&values, 0.0)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapCell {
    pub pi: f64,
    pub treated: bool,
    pub count: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapDiagnostics {
    pub cells: Vec<OverlapCell>,
    pub min_cell_share: f64,
    pub warnings: Vec<String>,
}

/// Tabulate unit shares of every `(pi, t)` cell. Empty cells are an error.
pub fn overlap_check<T: Real>(sample: &ClusteredSample<T>, min_share: f64) -> Result<OverlapDiagnostics> {
    let levels = sample.levels()?;
    let level_of = sample.level_of()?;
    let mut counts = vec![[0usize; 2]; levels.len()];
    for (i, &k) in level_of.iter().enumerate() {
        counts[k][usize::from(sample.treated[i])] += 1;
    }
    let n = sample.n_units() as f64;
    let mut cells = Vec::with_capacity(2 * levels.len());
    let mut warnings = Vec::new();
    for (k, &pi) in levels.iter().enumerate() {
        for t in [false, true] {
            let count = counts[k][usize::from(t)];
            if count == 0 {
                return Err(HteError::EmptyCell {
                    pi: pi.as_f64(),
                    treated: u8::from(t),
                });
            }
            let share = count as f64 / n;
            if share < min_share {
                warnings.push(format!(
                    "cell (pi={pi}, t={}) holds {:.2}% of units, below {:.2}%",
                    u8::from(t),
                    100.0 * share,
                    100.0 * min_share
                ));
            }
            cells.push(OverlapCell {
                pi: pi.as_f64(),
                treated: t,
                count,
                share,
            });
        }
    }
    let min_cell_share = cells.iter().map(|c| c.share).fold(f64::INFINITY, f64::min);
    Ok(OverlapDiagnostics {
        cells,
        min_cell_share,
        warnings,
    })
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub cluster: String,
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
    pub exposure: Option<String>,
    pub delimiter: u8,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            cluster: "cluster".into(),
            outcome: "y".into(),
            treatment: "t".into(),
            covariates: vec!["x".into()],
            exposure: None,
            delimiter: b',',
        }
    }
}

pub fn load_clustered_csv<T: Real>(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<ClusteredSample<T>> {
    let file = std::fs::File::open(path)?;
    read_clustered_csv(file, schema)
}

/// Read a sample from CSV. Rows are grouped by cluster id; clusters appear
/// in order of first occurrence and units keep their input order. Row
/// numbers in errors count data rows from 1.
pub fn read_clustered_csv<T: Real, R: Read>(reader: R, schema: &CsvSchema) -> Result<ClusteredSample<T>> {
    if schema.covariates.is_empty() {
        return Err(HteError::Schema("at least one covariate column is required".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HteError::Schema(format!("missing column `{name}`")))
    };
    let c_idx = col(&schema.cluster)?;
    let y_idx = col(&schema.outcome)?;
    let t_idx = col(&schema.treatment)?;
    let x_idx: Vec<usize> = schema.covariates.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let pi_idx = schema.exposure.as_deref().map(col).transpose()?;

    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Vec<Unit<T>>> = HashMap::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record?;
        let field = |idx: usize| record.get(idx).unwrap_or("");
        let num = |idx: usize, name: &str| -> Result<T> {
            let raw = field(idx);
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .and_then(T::from_f64)
                .ok_or_else(|| HteError::Parse {
                    row,
                    column: name.to_string(),
                    value: raw.to_string(),
                })
        };
        let y = num(y_idx, &schema.outcome)?;
        let t_raw = num(t_idx, &schema.treatment)?;
        let treated = if t_raw == T::zero() {
            false
        } else if t_raw == T::one() {
            true
        } else {
            return Err(HteError::DataRow {
                row,
                message: format!("treatment must be 0 or 1, found {}", field(t_idx)),
            });
        };
        let x = x_idx
            .iter()
            .zip(&schema.covariates)
            .map(|(&i, n)| num(i, n))
            .collect::<Result<Vec<T>>>()?;
        let pi = match (pi_idx, &schema.exposure) {
            (Some(i), Some(n)) => Some(num(i, n)?),
            _ => None,
        };
        let id = field(c_idx).to_string();
        if id.is_empty() {
            return Err(HteError::DataRow {
                row,
                message: "empty cluster id".into(),
            });
        }
        by_id
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(Unit { y, treated, x, pi });
    }
    if order.is_empty() {
        return Err(HteError::Data("input has no data rows".into()));
    }
    let clusters = order
        .into_iter()
        .map(|id| {
            let units = by_id.remove(&id).unwrap();
            Cluster { id, units }
        })
        .collect();
    ClusteredSample::from_clusters(clusters, schema.covariates.len())
}

/// Write a sample as CSV using the schema's column names. Floats are written
/// in shortest round-trip form, so reading the file back reproduces every
/// numeric field exactly.
pub fn write_clustered_csv<T: Real, W: Write>(
    sample: &ClusteredSample<T>,
    writer: W,
    schema: &CsvSchema,
) -> Result<()> {
    if schema.covariates.len() != sample.d() {
        return Err(HteError::Schema(format!(
            "schema names {} covariates, sample has {}",
            schema.covariates.len(),
            sample.d()
        )));
    }
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(schema.delimiter)
        .from_writer(writer);
    let mut header = vec![schema.cluster.clone(), schema.outcome.clone(), schema.treatment.clone()];
    header.extend(schema.covariates.iter().cloned());
    let exposure_col = match (&schema.exposure, sample.exposure()) {
        (Some(name), Some(_)) => Some(name.clone()),
        (None, Some(_)) => Some("pi".to_string()),
        _ => None,
    };
    if let Some(name) = &exposure_col {
        header.push(name.clone());
    }
    wtr.write_record(&header)?;
    for c in 0..sample.n_clusters() {
        for i in sample.cluster_range(c) {
            let mut rec = vec![
                sample.ids[c].clone(),
                sample.y[i].to_string(),
                u8::from(sample.treated[i]).to_string(),
            ];
            rec.extend(sample.x_row(i).iter().map(|v| v.to_string()));
            if let Some(e) = sample.exposure() {
                rec.push(e.levels[e.level_of[i]].to_string());
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}
