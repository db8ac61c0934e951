use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, Summary, TrialReport};
use crate::data::fmt_f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub n_trials: usize,
    pub n_failed: usize,
    pub rmse: Option<Summary>,
    pub correlation: Option<Summary>,
    pub pooled_rmse: Option<f64>,
    pub pooled_correlation: Option<f64>,
    pub mean_fit_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

/// One box of a box plot.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureRow {
    pub model: String,
    pub metric: &'static str,
    pub summary: Summary,
}

pub fn compare_models(reports: &[TrialReport]) -> Result<Comparison, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewReports(reports.len()));
    }
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            model: r.metrics.model.clone(),
            n_trials: r.metrics.n_trials,
            n_failed: r.metrics.n_failed,
            rmse: r.metrics.rmse_summary,
            correlation: r.metrics.correlation_summary,
            pooled_rmse: r.metrics.pooled.rmse,
            pooled_correlation: r.metrics.pooled.correlation,
            mean_fit_seconds: r.fit_seconds_summary.map(|s| s.mean),
        })
        .collect();
    Ok(Comparison { rows })
}

impl Comparison {
    /// Box-plot quantiles per model for RMSE and correlation.
    pub fn figure_rows(&self) -> Vec<FigureRow> {
        let mut out = Vec::new();
        for metric in ["rmse", "correlation"] {
            for row in &self.rows {
                let s = if metric == "rmse" { row.rmse } else { row.correlation };
                if let Some(summary) = s {
                    out.push(FigureRow { model: row.model.clone(), metric, summary });
                }
            }
        }
        out
    }

    pub fn write_figure_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        w.write_record(["model", "metric", "q1", "median", "q3", "mean"]).map_err(csv_io)?;
        for r in self.figure_rows() {
            let s = r.summary;
            w.write_record([
                r.model.as_str(),
                r.metric,
                &fmt_f64(s.q1),
                &fmt_f64(s.median),
                &fmt_f64(s.q3),
                &fmt_f64(s.mean),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> EvalError {
    EvalError::Io(std::io::Error::other(e))
}
