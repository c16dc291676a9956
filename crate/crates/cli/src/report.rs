//! Figures (SVG) and their data tables (CSV) from whatever artifacts exist.

use std::path::Path;

use hbiuq::calib::ValidationReport;
use hbiuq::covest::read_matrix_csv;
use hbiuq::data::TimeSeriesGrid;
use hbiuq::sampler::PosteriorChain;
use hbiuq::Result;
use serde::Serialize;

use crate::artifacts::{Manifest, Recorder};
use crate::commands::{finish_for, load_chains, read_validation, recorder_for, CalibrationSummary, Context};
use crate::config::ModelKind;
use crate::svg;

const BINS: usize = 30;

#[derive(Debug, Serialize)]
struct ReportIndex {
    figures: Vec<String>,
    tables: Vec<String>,
    missing: Vec<String>,
}

struct Out<'a> {
    rec: &'a mut Recorder,
    index: ReportIndex,
}

impl Out<'_> {
    fn figure(&mut self, name: &str, svg: String) -> Result<()> {
        let path = self.rec.layout.report_dir().join(name);
        self.rec.write(&path, svg.as_bytes())?;
        self.index.figures.push(name.to_string());
        Ok(())
    }

    fn table(&mut self, name: &str, rows: &[Vec<String>]) -> Result<()> {
        let path = self.rec.layout.report_dir().join(name);
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for r in rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        self.rec.write(&path, &buf)?;
        self.index.tables.push(name.to_string());
        Ok(())
    }

    fn missing(&mut self, what: &str) {
        self.rec.warn(format!("report: {what} missing; skipped"));
        self.index.missing.push(what.to_string());
    }
}

fn stem(file: &str) -> String {
    Path::new(file).file_stem().and_then(|s| s.to_str()).unwrap_or("chains").to_string()
}

fn chain_figures(out: &mut Out, file: &str, chains: &[PosteriorChain]) -> Result<()> {
    let s = stem(file);
    let names = &chains[0].names;
    let traces: Vec<(String, Vec<Vec<f64>>)> = names
        .iter()
        .enumerate()
        .map(|(j, n)| (n.clone(), chains.iter().map(|c| c.column(j)).collect()))
        .collect();
    out.figure(&format!("trace_{s}.svg"), svg::line_panels(&format!("Trace plots ({s})"), &traces, None))?;
    let pooled: Vec<(String, Vec<f64>)> = traces.into_iter().map(|(n, cs)| (n, cs.concat())).collect();
    out.figure(&format!("hist_{s}.svg"), svg::histogram_panels(&format!("Posterior histograms ({s})"), &pooled, BINS))?;
    let mut rows = vec![vec!["parameter".to_string(), "bin_lower".into(), "bin_upper".into(), "count".into()]];
    for (n, v) in &pooled {
        let (lo, hi, counts) = svg::histogram(v, BINS);
        let w = (hi - lo) / BINS as f64;
        for (b, c) in counts.iter().enumerate() {
            rows.push(vec![n.clone(), (lo + b as f64 * w).to_string(), (lo + (b + 1) as f64 * w).to_string(), c.to_string()]);
        }
    }
    out.table(&format!("hist_{s}.csv"), &rows)
}

fn pair_figure(out: &mut Out, file: &str, chains: &[PosteriorChain], summary: &CalibrationSummary) -> Result<()> {
    let s = stem(file);
    let wanted: Vec<String> = match summary.model {
        ModelKind::Hierarchical => summary.parameters.iter().map(|p| format!("mu[{p}]")).collect(),
        _ => summary.parameters.clone(),
    };
    let cols: Vec<(String, Vec<f64>)> = wanted
        .iter()
        .filter_map(|n| chains[0].index_of(n).map(|j| (n.clone(), chains.iter().flat_map(|c| c.column(j)).collect())))
        .collect();
    if cols.len() < 2 {
        return Ok(());
    }
    let (names, columns): (Vec<String>, Vec<Vec<f64>>) = cols.into_iter().unzip();
    out.figure(&format!("pairs_{s}.svg"), svg::scatter_grid(&format!("Pairwise posterior ({s})"), &names, &columns))?;
    let mut rows = vec![names.clone()];
    for i in 0..columns[0].len() {
        rows.push(columns.iter().map(|c| c[i].to_string()).collect());
    }
    out.table(&format!("pairs_{s}.csv"), &rows)
}

fn covariance_figures(out: &mut Out, ids: &[String]) -> Result<()> {
    let layout = out.rec.layout.clone();
    let mut any = false;
    for id in ids {
        let path = layout.covariance(id);
        if !path.exists() {
            continue;
        }
        any = true;
        let m = read_matrix_csv(out.rec.read(&path, "estimate-cov")?.as_slice())?;
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        out.figure(&format!("covariance_{id}.svg"), svg::heatmap(&format!("Observation covariance ({id})"), &rows))?;
        let table: Vec<Vec<String>> = rows.iter().map(|r| r.iter().map(|v| v.to_string()).collect()).collect();
        out.table(&format!("covariance_{id}.csv"), &table)?;
    }
    if !any {
        out.missing("covariance");
    }
    Ok(())
}

fn overlay_figures(out: &mut Out, report: &ValidationReport) -> Result<()> {
    let layout = out.rec.layout.clone();
    for case in &report.cases {
        let path = layout.observations(&case.case_id);
        if !path.exists() {
            out.missing(&format!("observations of {}", case.case_id));
            continue;
        }
        let grid = TimeSeriesGrid::read_csv(out.rec.read(&path, "simulate")?.as_slice())?;
        let t = grid.n_times();
        let mut rows = vec![vec!["location".to_string(), "time".into(), "observed".into(), "predicted".into()]];
        let mut panels = Vec::new();
        for (l, loc) in grid.locations.iter().enumerate() {
            let obs = &grid.values[l];
            let pred: Vec<f64> = (0..t).map(|i| obs[i] - case.mean_errors[l * t + i]).collect();
            for i in 0..t {
                rows.push(vec![loc.clone(), grid.times[i].to_string(), obs[i].to_string(), pred[i].to_string()]);
            }
            panels.push((loc.clone(), vec![("observed".to_string(), obs.clone()), ("calibrated mean".to_string(), pred)]));
        }
        let id = &case.case_id;
        out.table(&format!("overlay_{id}.csv"), &rows)?;
        out.figure(&format!("overlay_{id}.svg"), svg::overlay_panels(&format!("Prediction vs observation ({id})"), &grid.times, &panels))?;
    }
    Ok(())
}

fn error_figures(out: &mut Out, report: &ValidationReport) -> Result<()> {
    let mut rows = vec![["scope", "id", "source", "q05", "median", "q95", "mean", "mae"].iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    let mut groups = Vec::new();
    let split_name = |s: hbiuq::Split| if s == hbiuq::Split::Train { "train" } else { "test" };
    let items = report
        .splits
        .iter()
        .map(|s| ("split", split_name(s.split).to_string(), &s.posterior, &s.prior))
        .chain(report.cases.iter().map(|c| ("case", c.case_id.clone(), &c.posterior, &c.prior)));
    for (scope, id, post, prior) in items {
        let mut g = Vec::new();
        for (src, st) in [("posterior", Some(post)), ("prior", prior.as_ref())] {
            if let Some(st) = st {
                rows.push(vec![
                    scope.into(),
                    id.clone(),
                    src.into(),
                    st.q05.to_string(),
                    st.median.to_string(),
                    st.q95.to_string(),
                    st.mean.to_string(),
                    st.mae.to_string(),
                ]);
                g.push((src.to_string(), [st.q05, st.median, st.q95, st.mean]));
            }
        }
        groups.push((id, g));
    }
    out.table("errors.csv", &rows)?;
    out.figure("errors.svg", svg::interval_chart("Prediction error (observed - predicted)", &groups))
}

/// Renders every figure whose inputs exist; missing inputs are listed in
/// `report/index.json` and the manifest, not fatal.
pub fn report(ctx: &Context) -> Result<Manifest> {
    let mut rec = recorder_for(ctx, "report");
    let mut out = Out { rec: &mut rec, index: ReportIndex { figures: vec![], tables: vec![], missing: vec![] } };
    let layout = ctx.layout.clone();
    let summary: Option<CalibrationSummary> = if layout.calibration_summary().exists() {
        Some(out.rec.read_json(&layout.calibration_summary(), "calibrate")?)
    } else {
        None
    };
    if layout.chain_files().is_empty() {
        out.missing("chains");
    } else {
        for (file, chains) in load_chains(out.rec)? {
            if chains.is_empty() || chains[0].is_empty() {
                continue;
            }
            chain_figures(&mut out, &file, &chains)?;
            if let Some(s) = &summary {
                pair_figure(&mut out, &file, &chains, s)?;
            }
        }
    }
    let ids: Vec<String> = if layout.suite().exists() {
        let suite: hbiuq::synthsim::BenchmarkSuite = out.rec.read_json(&layout.suite(), "simulate")?;
        suite.cases.iter().map(|c| c.id.clone()).collect()
    } else {
        out.missing("suite");
        Vec::new()
    };
    if !ids.is_empty() {
        covariance_figures(&mut out, &ids)?;
    }
    if layout.validation_json().exists() {
        let report = read_validation(out.rec)?;
        overlay_figures(&mut out, &report)?;
        error_figures(&mut out, &report)?;
    } else {
        out.missing("validation report");
    }
    let index = std::mem::replace(&mut out.index, ReportIndex { figures: vec![], tables: vec![], missing: vec![] });
    rec.write_json(&layout.report_dir().join("index.json"), &index)?;
    finish_for(ctx, rec)
}
