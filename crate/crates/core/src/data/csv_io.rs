use std::io::Write;
use std::path::Path;

use super::{DataError, Observation, Subject, TrajectoryDataset};

const HEADER: [&str; 3] = ["subject_id", "age_years", "value"];
const LABEL_HEADER: [&str; 2] = ["subject_id", "cluster"];

/// Format with 17 significant digits, enough to round-trip any `f64`.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_err(line: u64, message: impl Into<String>) -> DataError {
    DataError::Parse { line, message: message.into() }
}

fn map_csv_err(e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DataError::Io(io),
        other => parse_err(line, format!("{other:?}")),
    }
}

fn open_reader(path: &Path, expected: &[&str]) -> Result<csv::Reader<std::fs::File>, DataError> {
    let mut rdr =
        csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::None).from_path(path).map_err(map_csv_err)?;
    let headers = rdr.headers().map_err(map_csv_err)?;
    if headers.iter().ne(expected.iter().copied()) {
        return Err(parse_err(
            1,
            format!(
                "expected header '{}', found '{}'",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    Ok(rdr)
}

/// Read a long-format cohort CSV (`subject_id,age_years,value`).
///
/// Subjects appear in order of first occurrence; each subject's rows must have
/// strictly increasing ages.
pub fn load_csv(path: impl AsRef<Path>) -> Result<TrajectoryDataset, DataError> {
    let mut rdr = open_reader(path.as_ref(), &HEADER)?;
    let mut order: Vec<String> = Vec::new();
    let mut rows: std::collections::HashMap<String, Vec<Observation>> = Default::default();
    for rec in rdr.records() {
        let rec = rec.map_err(map_csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty subject_id"));
        }
        let time: f64 =
            rec[1].parse().map_err(|_| parse_err(line, format!("age_years '{}' is not a number", &rec[1])))?;
        let value: f64 = rec[2].parse().map_err(|_| parse_err(line, format!("value '{}' is not a number", &rec[2])))?;
        if !time.is_finite() || time < 0.0 || !value.is_finite() {
            return Err(parse_err(line, "age must be finite and non-negative, value finite"));
        }
        let obs = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        if let Some(prev) = obs.last() {
            if time <= prev.time {
                return Err(DataError::NonMonotoneTimes { subject: id, prev: prev.time, next: time });
            }
        }
        obs.push(Observation::new(time, value));
    }
    let subjects = order
        .into_iter()
        .map(|id| {
            let obs = rows.remove(&id).unwrap_or_default();
            Subject::new(id, obs)
        })
        .collect::<Result<Vec<_>, _>>()?;
    TrajectoryDataset::new(subjects)
}

pub fn save_csv(data: &TrajectoryDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", HEADER.join(","))?;
    for s in data.subjects() {
        for o in s.observations() {
            writeln!(out, "{},{},{}", s.id(), fmt_f64(o.time), fmt_f64(o.value))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Write `subject_id,cluster` rows; `labels[i]` belongs to subject `i`.
pub fn save_labels(data: &TrajectoryDataset, labels: &[usize], path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", LABEL_HEADER.join(","))?;
    for (s, l) in data.subjects().iter().zip(labels) {
        writeln!(out, "{},{}", s.id(), l)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<(String, usize)>, DataError> {
    let mut rdr = open_reader(path.as_ref(), &LABEL_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(map_csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let cluster = rec[1]
            .parse()
            .map_err(|_| parse_err(line, format!("cluster '{}' is not a non-negative integer", &rec[1])))?;
        out.push((rec[0].to_string(), cluster));
    }
    Ok(out)
}
