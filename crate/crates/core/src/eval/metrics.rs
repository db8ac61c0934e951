use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::EvalError;

fn check_lengths(a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::LengthMismatch { preds: a.len(), truths: b.len() });
    }
    Ok(())
}

pub fn rmse(preds: &[f64], truths: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, truths)?;
    let ss: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / preds.len() as f64).sqrt())
}

/// Sample Pearson correlation, clamped to `[-1, 1]`.
pub fn pearson(preds: &[f64], truths: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, truths)?;
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let mt = truths.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(truths) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(EvalError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Adjusted Rand index between two labelings of the same items. Two trivial
/// partitions that agree score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64, EvalError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::LengthMismatch { preds: a.len(), truths: b.len() });
    }
    let choose2 = |n: usize| (n * n.saturating_sub(1)) as f64 / 2.0;
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| choose2(n)).sum();
    let sa: f64 = rows.values().map(|&n| choose2(n)).sum();
    let sb: f64 = cols.values().map(|&n| choose2(n)).sum();
    let expected = sa * sb / choose2(a.len()).max(1.0);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Mean and quartiles (linear interpolation between order statistics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Summary {
    /// `None` for an empty sample.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self {
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        let t = [1.0, -2.0, 3.5];
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        let p: Vec<f64> = t.iter().map(|x| x + 2.0).collect();
        assert!((rmse(&p, &t).unwrap() - 2.0).abs() < 1e-15);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        let want = 3.0 * 3f64.sqrt() / (2.0 * 7f64.sqrt());
        assert!((r - want).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 4.0, 5.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(EvalError::ZeroVariance)));
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
        // contingency {{2,0},{1,1}}: index 1, row pairs 2, column pairs 3, expected 1
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap(), 0.0);
        // index 2, row pairs 6, column pairs 3, expected 18/15, max 4.5
        let got = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 2, 2]).unwrap();
        assert!((got - 0.8 / 3.3).abs() < 1e-15, "{got}");
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn summary_quartiles() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3, s.mean), (2.0, 3.0, 4.0, 3.0));
        let s = Summary::of(&[1.0, 2.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.25, 1.5, 1.75));
        assert!(Summary::of(&[]).is_none());
    }
}
