//! Cohort representation and everything that produces or reshapes one.

mod csv_io;
mod simulate;
mod zscore;

pub(crate) use csv_io::fmt_f64;
pub use csv_io::{load_csv, load_labels, save_csv, save_labels};
pub use simulate::{default_mean_functions, simulate_cohort, SimulatedCohort, SimulationConfig, Wiggle};
pub use zscore::{zscore_per_timepoint, zscore_per_timepoint_with, ZscoreMode};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset has no subjects")]
    EmptyDataset,
    #[error("subject '{0}' has no observations")]
    EmptySubject(String),
    #[error("subject '{subject}' has non-increasing times ({prev} then {next})")]
    NonMonotoneTimes { subject: String, prev: f64, next: f64 },
    #[error("subject '{subject}' has a non-finite or negative entry at time {time}")]
    InvalidObservation { subject: String, time: f64 },
    #[error("duplicate subject id '{0}'")]
    DuplicateId(String),
    #[error("time point {time} is degenerate: {reason}")]
    DegenerateColumn { time: f64, reason: String },
    #[error("subject '{subject}' has an observation at {time}, which is not on the shared schedule")]
    OffSchedule { subject: String, time: f64 },
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Age in years.
    pub time: f64,
    pub value: f64,
}

impl Observation {
    pub fn new(time: f64, value: f64) -> Self {
        Self { time, value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    id: String,
    observations: Vec<Observation>,
}

impl Subject {
    /// Build a subject, checking that it has at least one observation, that
    /// every entry is finite with a non-negative time, and that times are
    /// strictly increasing.
    pub fn new(id: impl Into<String>, observations: Vec<Observation>) -> Result<Self, DataError> {
        let id = id.into();
        if observations.is_empty() {
            return Err(DataError::EmptySubject(id));
        }
        for o in &observations {
            if !o.time.is_finite() || o.time < 0.0 || !o.value.is_finite() {
                return Err(DataError::InvalidObservation { subject: id, time: o.time });
            }
        }
        for w in observations.windows(2) {
            if w[1].time <= w[0].time {
                return Err(DataError::NonMonotoneTimes { subject: id, prev: w[0].time, next: w[1].time });
            }
        }
        Ok(Self { id, observations })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.observations.iter().map(|o| o.time)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.observations.iter().map(|o| o.value)
    }

    pub fn last(&self) -> &Observation {
        self.observations.last().expect("subject is non-empty")
    }
}

/// A cohort of subjects. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    subjects: Vec<Subject>,
    schedule_hint: Option<Vec<f64>>,
}

impl TrajectoryDataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self, DataError> {
        if subjects.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mut seen = HashSet::with_capacity(subjects.len());
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId(s.id.clone()));
            }
        }
        Ok(Self { subjects, schedule_hint: None })
    }

    /// Attach the nominal measurement ages. Every observation must fall on one
    /// of them.
    pub fn with_schedule(mut self, schedule: Vec<f64>) -> Result<Self, DataError> {
        for s in &self.subjects {
            for o in &s.observations {
                if !schedule.contains(&o.time) {
                    return Err(DataError::OffSchedule { subject: s.id.clone(), time: o.time });
                }
            }
        }
        self.schedule_hint = Some(schedule);
        Ok(self)
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn subject(&self, index: usize) -> &Subject {
        &self.subjects[index]
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn schedule_hint(&self) -> Option<&[f64]> {
        self.schedule_hint.as_deref()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    /// Sorted distinct observation times across the cohort.
    pub fn distinct_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.subjects.iter().flat_map(Subject::times).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    /// Same subjects, each observation's value replaced by `f(subject, obs)`.
    pub(crate) fn map_values(&self, mut f: impl FnMut(usize, &Observation) -> f64) -> Self {
        let subjects = self
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| Subject {
                id: s.id.clone(),
                observations: s.observations.iter().map(|o| Observation::new(o.time, f(i, o))).collect(),
            })
            .collect();
        Self { subjects, schedule_hint: self.schedule_hint.clone() }
    }

    pub(crate) fn from_parts_unchecked(subjects: Vec<Subject>, schedule_hint: Option<Vec<f64>>) -> Self {
        Self { subjects, schedule_hint }
    }
}
