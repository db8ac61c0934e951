use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::{Observation, Subject, TrajectoryDataset};

/// One hidden final observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    /// Index of the subject in both the original and the training dataset.
    pub subject_index: usize,
    pub subject_id: String,
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutSplit {
    /// Every subject, in the original order; held-out subjects lack their
    /// final observation.
    pub train: TrajectoryDataset,
    /// Sorted by subject index.
    pub heldout: Vec<HeldOut>,
}

impl HoldoutSplit {
    /// `(subject index, time)` pairs to predict.
    pub fn queries(&self) -> Vec<(usize, f64)> {
        self.heldout.iter().map(|h| (h.subject_index, h.time)).collect()
    }

    pub fn truths(&self) -> Vec<f64> {
        self.heldout.iter().map(|h| h.value).collect()
    }

    /// Put the hidden observations back.
    pub fn reconstruct(&self) -> TrajectoryDataset {
        let mut subjects: Vec<Subject> = self.train.subjects().to_vec();
        for h in &self.heldout {
            let s = &subjects[h.subject_index];
            let mut obs = s.observations().to_vec();
            obs.push(Observation::new(h.time, h.value));
            subjects[h.subject_index] = Subject::new(s.id(), obs).expect("held-out time follows training times");
        }
        TrajectoryDataset::from_parts_unchecked(subjects, self.train.schedule_hint().map(<[f64]>::to_vec))
    }
}

/// Number of subjects to hold out: `fraction × n` rounded half up.
///
/// A small tolerance absorbs representation error so that e.g. `0.3 × 95`
/// (which is `28.499999999999996` in binary) rounds to 29.
pub fn holdout_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 0.5 + 1e-9).floor() as usize
}

/// Hide the final observation of `round_half_up(fraction × N)` subjects drawn
/// uniformly without replacement from those with at least two observations.
pub fn make_holdout_split<R: Rng + ?Sized>(
    data: &TrajectoryDataset,
    fraction: f64,
    rng: &mut R,
) -> Result<HoldoutSplit, EvalError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(EvalError::InvalidFraction(fraction));
    }
    let wanted = holdout_count(fraction, data.len());
    let eligible: Vec<usize> = (0..data.len()).filter(|&i| data.subject(i).len() >= 2).collect();
    if eligible.len() < wanted {
        return Err(EvalError::NotEnoughSubjects { wanted, eligible: eligible.len() });
    }
    let mut chosen: Vec<usize> =
        rand::seq::index::sample(rng, eligible.len(), wanted).into_iter().map(|k| eligible[k]).collect();
    chosen.sort_unstable();

    let mut subjects: Vec<Subject> = data.subjects().to_vec();
    let mut heldout = Vec::with_capacity(wanted);
    for &i in &chosen {
        let s = data.subject(i);
        let obs = s.observations();
        let last = *s.last();
        subjects[i] = Subject::new(s.id(), obs[..obs.len() - 1].to_vec()).expect("at least one observation remains");
        heldout.push(HeldOut { subject_index: i, subject_id: s.id().to_string(), time: last.time, value: last.value });
    }
    let train = TrajectoryDataset::from_parts_unchecked(subjects, data.schedule_hint().map(<[f64]>::to_vec));
    Ok(HoldoutSplit { train, heldout })
}
