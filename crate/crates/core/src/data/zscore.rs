use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{DataError, TrajectoryDataset};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ZscoreMode {
    /// `(x − mean) / sd` per time point, `n − 1` denominator.
    #[default]
    Standardize,
    /// Blom rank-based inverse normal transform per time point; ties share
    /// their average rank.
    RankInverseNormal,
}

/// Standardize values at each time point of the shared schedule.
pub fn zscore_per_timepoint(data: &TrajectoryDataset) -> Result<TrajectoryDataset, DataError> {
    zscore_per_timepoint_with(data, ZscoreMode::Standardize)
}

pub fn zscore_per_timepoint_with(data: &TrajectoryDataset, mode: ZscoreMode) -> Result<TrajectoryDataset, DataError> {
    let columns = match data.schedule_hint() {
        Some(s) => {
            let mut s = s.to_vec();
            s.sort_by(f64::total_cmp);
            s
        }
        None => data.distinct_times(),
    };
    // (subject, obs) positions per column
    let mut cells: Vec<Vec<(usize, usize)>> = vec![Vec::new(); columns.len()];
    for (i, s) in data.subjects().iter().enumerate() {
        for (j, o) in s.observations().iter().enumerate() {
            let c = columns
                .binary_search_by(|t| t.total_cmp(&o.time))
                .map_err(|_| DataError::OffSchedule { subject: s.id().to_string(), time: o.time })?;
            cells[c].push((i, j));
        }
    }

    let mut transformed: Vec<Vec<f64>> = data.subjects().iter().map(|s| vec![0.0; s.len()]).collect();
    for (c, members) in cells.iter().enumerate() {
        let time = columns[c];
        let vals: Vec<f64> = members.iter().map(|&(i, j)| data.subject(i).observations()[j].value).collect();
        if vals.len() < 2 {
            return Err(DataError::DegenerateColumn { time, reason: format!("{} observation(s)", vals.len()) });
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        if var <= 0.0 || !var.is_finite() {
            return Err(DataError::DegenerateColumn { time, reason: "zero variance".into() });
        }
        let out = match mode {
            ZscoreMode::Standardize => {
                let sd = var.sqrt();
                vals.iter().map(|v| (v - mean) / sd).collect::<Vec<_>>()
            }
            ZscoreMode::RankInverseNormal => rank_inverse_normal(&vals),
        };
        for (&(i, j), z) in members.iter().zip(out) {
            transformed[i][j] = z;
        }
    }
    Ok(data.map_values(|i, o| {
        let j = data
            .subject(i)
            .observations()
            .iter()
            .position(|p| p.time == o.time)
            .expect("observation belongs to subject");
        transformed[i][j]
    }))
}

fn rank_inverse_normal(vals: &[f64]) -> Vec<f64> {
    let n = vals.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && vals[idx[end]] == vals[idx[start]] {
            end += 1;
        }
        // 1-based average rank of the tie block
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    let std_normal = Normal::standard();
    ranks.iter().map(|r| std_normal.inverse_cdf((r - 0.375) / (n as f64 + 0.25))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Observation, Subject};
    use rand::{Rng, SeedableRng};

    fn grid_dataset(rows: &[[f64; 4]]) -> TrajectoryDataset {
        let schedule = [1.5, 2.0, 4.0, 5.0];
        let subjects = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                Subject::new(format!("s{i}"), schedule.iter().zip(r).map(|(&t, &v)| Observation::new(t, v)).collect())
                    .unwrap()
            })
            .collect();
        TrajectoryDataset::new(subjects).unwrap()
    }

    fn column(d: &TrajectoryDataset, c: usize) -> Vec<f64> {
        d.subjects().iter().map(|s| s.observations()[c].value).collect()
    }

    #[test]
    fn two_point_column_is_symmetric() {
        let d = grid_dataset(&[[0.0, 0.0, 1.0, 5.0], [1.0, 2.0, 3.0, 4.0]]);
        let z = zscore_per_timepoint(&d).unwrap();
        let c = column(&z, 2);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c[0] + h).abs() < 1e-15 && (c[1] - h).abs() < 1e-15);
    }

    #[test]
    fn constant_column_is_degenerate() {
        let d = grid_dataset(&[[1.0, 0.0, 1.0, 5.0], [1.0, 2.0, 3.0, 4.0]]);
        match zscore_per_timepoint(&d) {
            Err(DataError::DegenerateColumn { time, .. }) => assert_eq!(time, 1.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_observation_column_is_degenerate() {
        let a = Subject::new("a", vec![Observation::new(1.0, 0.0), Observation::new(3.0, 1.0)]).unwrap();
        let b = Subject::new("b", vec![Observation::new(1.0, 2.0)]).unwrap();
        let d = TrajectoryDataset::new(vec![a, b]).unwrap();
        assert!(matches!(zscore_per_timepoint(&d), Err(DataError::DegenerateColumn { time, .. }) if time == 3.0));
    }

    #[test]
    fn off_schedule_time_rejected() {
        let a = Subject::new("a", vec![Observation::new(1.5, 0.0)]).unwrap();
        let b = Subject::new("b", vec![Observation::new(1.5, 2.0)]).unwrap();
        let d = TrajectoryDataset::from_parts_unchecked(
            vec![a, b, Subject::new("c", vec![Observation::new(1.7, 0.0)]).unwrap()],
            Some(vec![1.5, 2.0]),
        );
        assert!(matches!(zscore_per_timepoint(&d), Err(DataError::OffSchedule { .. })));
    }

    #[test]
    fn random_95_by_4_has_unit_moments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<[f64; 4]> =
            (0..95).map(|_| std::array::from_fn(|k| rng.random::<f64>() * (k as f64 + 1.0) + 3.0 * k as f64)).collect();
        let z = zscore_per_timepoint(&grid_dataset(&rows)).unwrap();
        // recompute moments independently
        for c in 0..4 {
            let v = column(&z, c);
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!(m.abs() < 1e-9, "mean {m}");
            assert!((sd - 1.0).abs() < 1e-9, "sd {sd}");
        }
        let twice = zscore_per_timepoint(&z).unwrap();
        for (a, b) in twice.subjects().iter().zip(z.subjects()) {
            for (x, y) in a.values().zip(b.values()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rank_mode_preserves_order_and_handles_ties() {
        let r = rank_inverse_normal(&[3.0, 1.0, 2.0, 2.0]);
        assert!(r[1] < r[2] && r[2] == r[3] && r[3] < r[0]);
        assert!((r[0] + r[1]).abs() < 1e-12);
    }
}
