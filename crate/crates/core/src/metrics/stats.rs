//! Summary statistics over per-step metric series.

use crate::error::{invalid, Result};

/// Location summaries of one series; trimmed variants drop the largest
/// `ceil(0.01·N)` values first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalSummary {
    pub mean: f64,
    pub median: f64,
    pub trimmed_mean: f64,
    pub trimmed_median: f64,
    /// Values used (finite entries).
    pub count: usize,
    /// Non-finite entries excluded from every statistic.
    pub non_finite: usize,
}

pub const TRIM_FRACTION: f64 = 0.01;

pub fn trim_count(n: usize) -> usize {
    (TRIM_FRACTION * n as f64).ceil() as usize
}

/// Lower-middle element for even lengths; `sorted` must be ascending.
pub fn lower_median(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 2]
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn temporal_summary(series: &[f64]) -> Result<TemporalSummary> {
    let mut v: Vec<f64> = series.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Err(invalid("temporal summary of an empty series"));
    }
    v.sort_by(f64::total_cmp);
    let kept = v.len() - trim_count(v.len()).min(v.len() - 1);
    let trimmed = &v[..kept];
    Ok(TemporalSummary {
        mean: mean(&v),
        median: lower_median(&v),
        trimmed_mean: mean(trimmed),
        trimmed_median: lower_median(trimmed),
        count: v.len(),
        non_finite: series.len() - v.len(),
    })
}

/// Per-model rank shares and the per-step top-3 ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct RankStats {
    /// Percentage of steps at which each model ranks first.
    pub pct_rank1: Vec<f64>,
    pub pct_rank_le2: Vec<f64>,
    /// Per step, up to three model indices in ascending metric order.
    pub top3: Vec<Vec<usize>>,
}

/// Competition ranks (`1 + #strictly better`) of each model at step `t`.
/// Non-finite values rank last.
pub fn ranks_at(matrix: &[Vec<f64>], t: usize) -> Vec<usize> {
    let key = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    (0..matrix.len())
        .map(|i| {
            let vi = key(matrix[i][t]);
            1 + (0..matrix.len()).filter(|&j| key(matrix[j][t]) < vi).count()
        })
        .collect()
}

/// Ranks models ascending at each step (lower is better); ties share the minimum rank.
pub fn rank_stats(matrix: &[Vec<f64>]) -> Result<RankStats> {
    let models = matrix.len();
    if models == 0 {
        return Err(invalid("rank statistics need at least one model"));
    }
    let steps = matrix[0].len();
    if matrix.iter().any(|r| r.len() != steps) {
        return Err(invalid("ragged metric matrix"));
    }
    if steps == 0 {
        return Err(invalid("rank statistics need at least one step"));
    }
    let mut r1 = vec![0usize; models];
    let mut r2 = vec![0usize; models];
    let mut top3 = Vec::with_capacity(steps);
    for t in 0..steps {
        let ranks = ranks_at(matrix, t);
        for (i, &r) in ranks.iter().enumerate() {
            r1[i] += usize::from(r == 1);
            r2[i] += usize::from(r <= 2);
        }
        let mut order: Vec<usize> = (0..models).collect();
        order.sort_by_key(|&i| ranks[i]);
        order.truncate(3);
        top3.push(order);
    }
    let pct = |c: Vec<usize>| c.into_iter().map(|n| 100.0 * n as f64 / steps as f64).collect();
    Ok(RankStats {
        pct_rank1: pct(r1),
        pct_rank_le2: pct(r2),
        top3,
    })
}

/// Catastrophic-failure statistics over the per-run peak NLL.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureAnalysis {
    /// `max_t NLL(t)` per run; runs with a non-finite step peak at `+∞`.
    pub peaks: Vec<f64>,
    /// `(x, P[peak > x])` at each sorted peak.
    pub ccdf: Vec<(f64, f64)>,
    pub threshold: f64,
    pub failure_rate: f64,
}

pub const FAILURE_THRESHOLD: f64 = 1e6;

pub fn run_peak(nll: &[f64]) -> f64 {
    nll.iter()
        .map(|&v| if v.is_nan() { f64::INFINITY } else { v })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Empirical `P[peak > x]`.
pub fn ccdf_at(peaks: &[f64], x: f64) -> f64 {
    peaks.iter().filter(|&&p| p > x).count() as f64 / peaks.len() as f64
}

pub fn failure_analysis(runs: &[&[f64]], threshold: f64) -> Result<FailureAnalysis> {
    if runs.is_empty() {
        return Err(invalid("failure analysis needs at least one run"));
    }
    let peaks: Vec<f64> = runs.iter().map(|r| run_peak(r)).collect();
    let mut sorted = peaks.clone();
    sorted.sort_by(f64::total_cmp);
    let ccdf = sorted.iter().map(|&x| (x, ccdf_at(&peaks, x))).collect();
    Ok(FailureAnalysis {
        failure_rate: ccdf_at(&peaks, threshold),
        peaks,
        ccdf,
        threshold,
    })
}

/// Seed whose temporal-mean NLL is closest to the across-seed (lower) median;
/// ties go to the lowest seed id.
pub fn representative_seed(runs: &[(u64, f64)]) -> Result<u64> {
    if runs.is_empty() {
        return Err(invalid("representative seed of an empty run set"));
    }
    let mut means: Vec<f64> = runs.iter().map(|r| r.1).collect();
    means.sort_by(f64::total_cmp);
    let median = lower_median(&means);
    let dist = |m: f64| {
        let d = (m - median).abs();
        if d.is_nan() {
            f64::INFINITY
        } else {
            d
        }
    };
    let best = runs
        .iter()
        .min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)).then(a.0.cmp(&b.0)))
        .expect("nonempty");
    Ok(best.0)
}

/// Counts of PIT values in `bins` equal-width bins over `[0, 1]`; 1 falls in the last bin.
pub fn pit_histogram(pit: &[f64], bins: usize) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(invalid("histogram needs at least one bin"));
    }
    let mut counts = vec![0; bins];
    for &u in pit.iter().filter(|u| u.is_finite()) {
        let i = ((u.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(counts)
}

/// Linear-interpolation percentile (`q ∈ [0, 100]`) of ascending `sorted`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clamps every value into the series' own `[lo_q, hi_q]` percentile range.
pub fn clip_percentiles(v: &[f64], lo_q: f64, hi_q: f64) -> Vec<f64> {
    let mut sorted: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if sorted.is_empty() {
        return v.to_vec();
    }
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(&sorted, lo_q), percentile(&sorted, hi_q));
    v.iter().map(|x| x.clamp(lo, hi)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationBin {
    pub mean_var: f64,
    pub mean_sq_err: f64,
    pub count: usize,
}

/// Binned `E[squared error | predicted variance]` after clipping both series
/// to their [1, 99] percentile ranges. Bins hold equal counts of steps sorted
/// by variance, except that equal variances never straddle a bin edge.
pub fn calibration_curve(var_tot: &[f64], sq_err: &[f64], bins: usize) -> Result<Vec<CalibrationBin>> {
    if var_tot.len() != sq_err.len() {
        return Err(invalid("variance and error series differ in length"));
    }
    let pairs: Vec<(f64, f64)> = var_tot
        .iter()
        .zip(sq_err)
        .filter(|(v, e)| v.is_finite() && e.is_finite())
        .map(|(v, e)| (*v, *e))
        .collect();
    if bins == 0 || pairs.len() < bins {
        return Err(invalid("calibration curve needs at least as many points as bins"));
    }
    let (v, e): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let v = clip_percentiles(&v, 1.0, 99.0);
    let e = clip_percentiles(&e, 1.0, 99.0);
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let n = order.len();
    let mut out = Vec::new();
    let mut start = 0;
    for b in 1..=bins {
        let mut end = b * n / bins;
        if end <= start {
            continue;
        }
        while end < n && v[order[end]] == v[order[end - 1]] {
            end += 1;
        }
        let idx = &order[start..end];
        out.push(CalibrationBin {
            mean_var: idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64,
            mean_sq_err: idx.iter().map(|&i| e[i]).sum::<f64>() / idx.len() as f64,
            count: idx.len(),
        });
        start = end;
        if start == n {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normals, rng_for};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    #[test]
    fn arithmetic_series_trim() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = temporal_summary(&v).unwrap();
        assert_eq!(s.trimmed_mean, 50.0);
        assert_eq!(s.mean, 50.5);
        assert_eq!(s.median, 50.0);
        assert_eq!(s.trimmed_median, 50.0);
    }

    #[test]
    fn constant_series() {
        let s = temporal_summary(&[2.5; 37]).unwrap();
        assert_eq!([s.mean, s.median, s.trimmed_mean, s.trimmed_median], [2.5; 4]);
    }

    #[test]
    fn non_finite_excluded_and_counted() {
        let s = temporal_summary(&[1.0, f64::NAN, 3.0, f64::INFINITY]).unwrap();
        assert_eq!(s.count, 2);
        assert_eq!(s.non_finite, 2);
        assert_eq!(s.mean, 2.0);
        assert!(temporal_summary(&[]).is_err());
        assert!(temporal_summary(&[f64::NAN]).is_err());
    }

    #[test]
    fn rank_examples() {
        let m = vec![vec![1.0, 1.0, 1.0, 5.0], vec![2.0, 2.0, 2.0, 4.0]];
        let r = rank_stats(&m).unwrap();
        assert_eq!(r.pct_rank1, vec![75.0, 25.0]);
        assert_eq!(r.pct_rank_le2, vec![100.0, 100.0]);
        let tie = rank_stats(&[vec![3.0], vec![3.0], vec![3.0]]).unwrap();
        assert_eq!(tie.pct_rank1, vec![100.0; 3]);
        assert!(rank_stats(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn failure_examples() {
        let runs: [&[f64]; 3] = [&[1.0, 10.0], &[1e7, 2.0], &[1e5]];
        let f = failure_analysis(&runs, FAILURE_THRESHOLD).unwrap();
        assert!((f.failure_rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ccdf_at(&f.peaks, 10.0 - 1e-9), 1.0);
        assert_eq!(f.ccdf[0], (10.0, 2.0 / 3.0));
        let calm: [&[f64]; 2] = [&[1.0], &[2.0]];
        assert_eq!(failure_analysis(&calm, 1e6).unwrap().failure_rate, 0.0);
        let nan: [&[f64]; 1] = [&[1.0, f64::NAN]];
        assert_eq!(failure_analysis(&nan, 1e6).unwrap().failure_rate, 1.0);
    }

    #[test]
    fn representative_examples() {
        assert_eq!(representative_seed(&[(0, 1.0), (1, 2.0), (2, 100.0)]).unwrap(), 1);
        assert_eq!(representative_seed(&[(7, 3.0)]).unwrap(), 7);
        assert_eq!(representative_seed(&[(4, 1.0), (2, 3.0), (9, 1.0), (3, 3.0)]).unwrap(), 4);
    }

    #[test]
    fn pit_examples() {
        assert_eq!(pit_histogram(&[1.0, 0.999, 0.95], 10).unwrap(), vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 3]);
        assert_eq!(pit_histogram(&[0.0, 0.5], 2).unwrap(), vec![1, 1]);
    }

    #[test]
    fn calibration_examples() {
        let v: Vec<f64> = (1..=200).map(|i| i as f64 / 10.0).collect();
        for b in calibration_curve(&v, &v, 10).unwrap() {
            assert!((b.mean_var - b.mean_sq_err).abs() < 1e-12);
        }
        let e: Vec<f64> = (0..50).map(|i| (i % 5) as f64).collect();
        let c = calibration_curve(&[0.7; 50], &e, 5).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].count, 50);
        assert!((c[0].mean_sq_err - 2.0).abs() < 1e-12);
        assert!(calibration_curve(&[1.0; 3], &[1.0; 3], 4).is_err());
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&s, 0.0), 1.0);
        assert_eq!(percentile(&s, 50.0), 3.0);
        assert_eq!(percentile(&s, 100.0), 5.0);
        assert!((percentile(&s, 10.0) - 1.4).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn trimmed_summary_is_permutation_invariant(seed in 0u64..1000, n in 1usize..300) {
            let mut v = normals(&mut rng_for(seed, &[]), n);
            let a = temporal_summary(&v).unwrap();
            v.shuffle(&mut rng_for(seed, &[1]));
            let b = temporal_summary(&v).unwrap();
            prop_assert_eq!(a.trimmed_median, b.trimmed_median);
            prop_assert_eq!(a.median, b.median);
            prop_assert!((a.trimmed_mean - b.trimmed_mean).abs() <= 1e-12 * (1.0 + a.trimmed_mean.abs()));
        }

        #[test]
        fn failure_rate_monotone_in_threshold(seed in 0u64..1000, lo in 0.0f64..10.0, gap in 0.0f64..10.0) {
            let peaks: Vec<Vec<f64>> = normals(&mut rng_for(seed, &[]), 20).into_iter().map(|v| vec![(3.0 * v).exp()]).collect();
            let runs: Vec<&[f64]> = peaks.iter().map(Vec::as_slice).collect();
            let a = failure_analysis(&runs, lo).unwrap().failure_rate;
            let b = failure_analysis(&runs, lo + gap).unwrap().failure_rate;
            prop_assert!(b <= a);
        }

        #[test]
        fn single_rank1_without_ties(seed in 0u64..1000, models in 1usize..6, steps in 1usize..30) {
            let mut rng = rng_for(seed, &[]);
            let m: Vec<Vec<f64>> = (0..models).map(|_| normals(&mut rng, steps)).collect();
            let r = rank_stats(&m).unwrap();
            let total: f64 = r.pct_rank1.iter().sum();
            prop_assert!((total - 100.0).abs() < 1e-9);
        }

        #[test]
        fn pit_histogram_counts_all(seed in 0u64..1000) {
            let u: Vec<f64> = normals(&mut rng_for(seed, &[]), 100).into_iter().map(|v| 0.5 + 0.2 * v).map(|v: f64| v.clamp(0.0, 1.0)).collect();
            prop_assert_eq!(pit_histogram(&u, 7).unwrap().iter().sum::<usize>(), 100);
        }
    }
}
