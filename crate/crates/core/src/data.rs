//! Shared data model: parameter vectors, time-series grids, transient cases
//! and training sets.
//!
//! Output grids are flattened location-major: all time steps of the first
//! location, then all time steps of the second, and so on. Every covariance
//! matrix in the crate uses this index convention.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::covest::CovarianceModel;
use crate::error::{check_len, Error, Result};

/// Physical model parameter multipliers with their names and optional bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, names: Vec<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("parameter vector must have d >= 1".into()));
        }
        check_len("parameter names", values.len(), names.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "parameter {} is not finite",
                names[i]
            )));
        }
        Ok(Self {
            values,
            names,
            bounds: None,
        })
    }

    /// Names `P1..Pd`.
    pub fn default_names(d: usize) -> Vec<String> {
        (1..=d).map(|i| format!("P{i}")).collect()
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Result<Self> {
        check_len("parameter bounds", self.values.len(), bounds.len())?;
        for ((v, (lo, hi)), name) in self.values.iter().zip(&bounds).zip(&self.names) {
            if !(lo < hi) {
                return Err(Error::Validation(format!("bounds of {name} are empty")));
            }
            if v < lo || v > hi {
                return Err(Error::Validation(format!(
                    "{name} = {v} outside its bounds ({lo}, {hi})"
                )));
            }
        }
        self.bounds = Some(bounds);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Values observed at `L` locations over `T` time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesGrid {
    pub times: Vec<f64>,
    pub locations: Vec<String>,
    /// `values[location][time]`
    pub values: Vec<Vec<f64>>,
}

impl TimeSeriesGrid {
    /// Builds a grid and checks every invariant.
    pub fn new(times: Vec<f64>, locations: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let grid = Self {
            times,
            locations,
            values,
        };
        let violations = grid.violations("grid");
        if let Some(v) = violations.first() {
            return Err(Error::Validation(v.to_string()));
        }
        Ok(grid)
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn flat_len(&self) -> usize {
        self.n_times() * self.n_locations()
    }

    /// Row-major (location-major) concatenation of the values.
    pub fn flatten(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (loc, row) in self.locations.iter().zip(&self.values) {
            if let Some(t) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-finite value at location {loc}, time index {t}"
                )));
            }
            out.extend_from_slice(row);
        }
        Ok(out)
    }

    /// Inverse of [`flatten`](Self::flatten) for the given axes.
    pub fn unflatten(times: Vec<f64>, locations: Vec<String>, flat: &[f64]) -> Result<Self> {
        let t = times.len();
        check_len("unflatten", t * locations.len(), flat.len())?;
        let values = flat.chunks(t.max(1)).map(<[f64]>::to_vec).collect();
        Self::new(times, locations, values)
    }

    pub(crate) fn violations(&self, field: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.times.len() < 2 {
            out.push(Violation::new(format!("{field}.times"), "fewer than 2 time steps"));
        }
        if self.times.iter().any(|t| !t.is_finite()) {
            out.push(Violation::new(format!("{field}.times"), "times not finite"));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            out.push(Violation::new(
                format!("{field}.times"),
                "times not strictly increasing",
            ));
        }
        if self.locations.is_empty() {
            out.push(Violation::new(format!("{field}.locations"), "no locations"));
        }
        if self.values.len() != self.locations.len() {
            out.push(Violation::new(
                format!("{field}.values"),
                "row count does not match locations",
            ));
        }
        for (i, row) in self.values.iter().enumerate() {
            if row.len() != self.times.len() {
                out.push(Violation::new(
                    format!("{field}.values[{i}]"),
                    "row length does not match times",
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                out.push(Violation::new(format!("{field}.values[{i}]"), "values not finite"));
            }
        }
        out
    }

    /// Reads `time,<loc1>,<loc2>,...` CSV.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 || headers.get(0).map(str::trim) != Some("time") {
            return Err(Error::Validation(
                "grid CSV header must be `time,<loc1>,...`".into(),
            ));
        }
        let locations: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
        let mut times = Vec::new();
        let mut values = vec![Vec::new(); locations.len()];
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != headers.len() {
                return Err(Error::Validation(format!(
                    "row {} has {} fields, expected {}",
                    line + 1,
                    record.len(),
                    headers.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::Validation(format!("row {}: cannot parse `{s}` as a number", line + 1))
                })
            };
            times.push(parse(&record[0])?);
            for (j, field) in record.iter().skip(1).enumerate() {
                values[j].push(parse(field)?);
            }
        }
        Self::new(times, locations, values)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["time".to_string()];
        header.extend(self.locations.iter().cloned());
        wtr.write_record(&header)?;
        for (t, time) in self.times.iter().enumerate() {
            let mut row = vec![time.to_string()];
            row.extend(self.values.iter().map(|r| r[t].to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// One invariant violation found by [`validate_case`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// A single transient experiment (or its synthetic analog).
#[derive(Debug, Clone)]
pub struct TransientCase {
    pub id: String,
    /// Channels: pressure, flow, power, inlet temperature.
    pub boundary_conditions: TimeSeriesGrid,
    pub measurements: TimeSeriesGrid,
    pub flattened: Vec<f64>,
    pub covariance: Option<CovarianceModel>,
}

impl TransientCase {
    pub fn new(
        id: impl Into<String>,
        boundary_conditions: TimeSeriesGrid,
        measurements: TimeSeriesGrid,
    ) -> Result<Self> {
        let flattened = measurements.flatten()?;
        Ok(Self {
            id: id.into(),
            boundary_conditions,
            measurements,
            flattened,
            covariance: None,
        })
    }

    pub fn with_covariance(mut self, covariance: CovarianceModel) -> Result<Self> {
        check_len("case covariance", self.flattened.len(), covariance.dim())?;
        self.covariance = Some(covariance);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.flattened.len()
    }

    /// Non-fatal findings: measurements outside `[0, 1]`.
    pub fn warnings(&self) -> Vec<String> {
        let n = self
            .flattened
            .iter()
            .filter(|v| !(0.0..=1.0).contains(*v))
            .count();
        if n > 0 {
            vec![format!("{n} measurement values outside [0, 1]")]
        } else {
            Vec::new()
        }
    }
}

/// Checks every invariant of a case; empty result means the case is valid.
pub fn validate_case(case: &TransientCase) -> Vec<Violation> {
    let mut out = Vec::new();
    if case.id.trim().is_empty() {
        out.push(Violation::new("id", "empty id"));
    }
    out.extend(case.boundary_conditions.violations("boundary_conditions"));
    out.extend(case.measurements.violations("measurements"));
    let m = &case.measurements;
    if case.flattened.len() != m.flat_len() {
        out.push(Violation::new("flattened", "flatten mismatch"));
    } else {
        let consistent = m
            .values
            .iter()
            .flat_map(|r| r.iter())
            .zip(&case.flattened)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !consistent {
            out.push(Violation::new("flattened", "flatten mismatch"));
        }
    }
    if case.flattened.iter().any(|v| !v.is_finite()) {
        out.push(Violation::new("flattened", "values not finite"));
    }
    if case.boundary_conditions.times != case.measurements.times
        && case.boundary_conditions.times.len() == case.measurements.times.len()
    {
        out.push(Violation::new(
            "boundary_conditions.times",
            "time grid differs from measurements",
        ));
    }
    if let Some(cov) = &case.covariance {
        if cov.dim() != case.flattened.len() {
            out.push(Violation::new("covariance", "dimension does not match flattened length"));
        }
    }
    out
}

/// Calibration (train) or held-out (test) membership of a case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Design/response pairs for surrogate training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub case_id: String,
}

impl TrainingSet {
    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<Vec<f64>>, case_id: impl Into<String>) -> Result<Self> {
        let set = Self {
            inputs,
            outputs,
            case_id: case_id.into(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        check_len("training rows", self.inputs.len(), self.outputs.len())?;
        let (d, k) = (self.input_dim(), self.output_dim());
        if d == 0 || k == 0 {
            return Err(Error::Validation("training set has empty rows".into()));
        }
        if self.inputs.len() < d + 1 {
            return Err(Error::Validation(format!(
                "training set needs N >= d + 1 = {} rows, got {}",
                d + 1,
                self.inputs.len()
            )));
        }
        for (i, (x, y)) in self.inputs.iter().zip(&self.outputs).enumerate() {
            if x.len() != d || y.len() != k {
                return Err(Error::Validation(format!("training row {i} has inconsistent width")));
            }
            if x.iter().chain(y).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("training row {i} is not finite")));
            }
        }
        Ok(())
    }

    /// CSV with header `in_0..in_{d-1},out_0..out_{k-1}`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let header: Vec<String> = (0..self.input_dim())
            .map(|i| format!("in_{i}"))
            .chain((0..self.output_dim()).map(|j| format!("out_{j}")))
            .collect();
        wtr.write_record(&header)?;
        for (x, y) in self.inputs.iter().zip(&self.outputs) {
            wtr.write_record(x.iter().chain(y).map(|v| v.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, case_id: impl Into<String>) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let d = headers.iter().filter(|h| h.starts_with("in_")).count();
        let k = headers.iter().filter(|h| h.starts_with("out_")).count();
        if d + k != headers.len() || d == 0 || k == 0 {
            return Err(Error::Validation(
                "training CSV header must be in_0..,out_0..".into(),
            ));
        }
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let row: Vec<f64> = record
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Validation(format!("cannot parse `{s}`")))
                })
                .collect::<Result<_>>()?;
            inputs.push(row[..d].to_vec());
            outputs.push(row[d..].to_vec());
        }
        Self::new(inputs, outputs, case_id)
    }
}
