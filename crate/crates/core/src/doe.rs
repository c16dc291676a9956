//! Latin hypercube designs for surrogate training.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    /// `points[sample][dimension]`
    pub points: Vec<Vec<f64>>,
    pub bounds: Vec<(f64, f64)>,
    pub seed: u64,
}

impl DesignMatrix {
    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn write_csv<W: Write>(&self, writer: W, names: &[String]) -> Result<()> {
        crate::error::check_len("design column names", self.dim(), names.len())?;
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(names)?;
        for p in &self.points {
            wtr.write_record(p.iter().map(|v| v.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
        let mut rdr = csv::Reader::from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Validation(format!("cannot parse `{s}` in design")))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != names.len() {
                return Err(Error::Validation("ragged design CSV".into()));
            }
            rows.push(row);
        }
        Ok((names, rows))
    }
}

fn check_bounds(bounds: &[(f64, f64)]) -> Result<()> {
    if bounds.is_empty() {
        return Err(Error::InvalidArgument("at least one dimension is required".into()));
    }
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidArgument(format!(
                "bounds of dimension {i} must satisfy low < high, got ({lo}, {hi})"
            )));
        }
    }
    Ok(())
}

/// Plain Latin hypercube sample: every column holds exactly one point in each
/// of the `n` equal-width bins, placed uniformly at random inside its bin.
pub fn lhs_sample(n: usize, bounds: &[(f64, f64)], seed: u64) -> Result<DesignMatrix> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    check_bounds(bounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; bounds.len()]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for (j, &(lo, hi)) in bounds.iter().enumerate() {
        perm.shuffle(&mut rng);
        let span = hi - lo;
        let nf = n as f64;
        for (i, &bin) in perm.iter().enumerate() {
            let u: f64 = rng.random();
            let bin_lo = lo + bin as f64 * span / nf;
            let bin_hi = lo + (bin + 1) as f64 * span / nf;
            let x = lo + (bin as f64 + u) * span / nf;
            // rounding must not push the point out of its bin
            points[i][j] = if x >= bin_hi {
                next_down(bin_hi).max(bin_lo)
            } else {
                x.max(bin_lo)
            };
        }
    }
    Ok(DesignMatrix {
        points,
        bounds: bounds.to_vec(),
        seed,
    })
}

/// Independent uniform draws in the box (used for held-out test sets).
pub fn uniform_sample(n: usize, bounds: &[(f64, f64)], seed: u64) -> Result<DesignMatrix> {
    check_bounds(bounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| bounds.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect())
        .collect();
    Ok(DesignMatrix {
        points,
        bounds: bounds.to_vec(),
        seed,
    })
}

/// Parses `low:high,low:high,...`.
pub fn parse_bounds(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(',')
        .map(|part| {
            let (lo, hi) = part
                .split_once(':')
                .ok_or_else(|| Error::InvalidArgument(format!("bound `{part}` is not low:high")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("cannot parse bound `{s}`")))
            };
            Ok((parse(lo)?, parse(hi)?))
        })
        .collect()
}

/// Largest float below a finite `x`.
fn next_down(x: f64) -> f64 {
    if x == 0.0 {
        -f64::from_bits(1)
    } else if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else {
        f64::from_bits(x.to_bits() + 1)
    }
}
