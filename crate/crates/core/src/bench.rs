//! Repeated-execution timing and nonparametric runtime-ratio confidence
//! intervals built on the two-sided Mann-Whitney rank-sum test.

use crate::error::{Error, Result};
use std::time::Instant;

/// Total sample size below which the exact permutation distribution is
/// enumerated instead of the normal approximation.
const EXACT_THRESHOLD: usize = 16;

/// Candidate timings paired with baseline timings, all positive seconds.
#[derive(Debug, Clone)]
pub struct SamplePair {
    o_samples: Vec<f64>,
    c_samples: Vec<f64>,
}

impl SamplePair {
    pub fn new(o_samples: Vec<f64>, c_samples: Vec<f64>) -> Result<SamplePair> {
        for (name, s) in [("candidate", &o_samples), ("baseline", &c_samples)] {
            if s.is_empty() {
                return Err(Error::Domain(format!("{name} sample set is empty")));
            }
            if s.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(Error::Domain(format!(
                    "{name} samples must be finite and positive"
                )));
            }
        }
        Ok(SamplePair { o_samples, c_samples })
    }

    pub fn o_samples(&self) -> &[f64] {
        &self.o_samples
    }

    pub fn c_samples(&self) -> &[f64] {
        &self.c_samples
    }

    /// Ratio of sample medians, candidate over baseline.
    pub fn median_ratio(&self) -> f64 {
        median(&self.o_samples) / median(&self.c_samples)
    }
}

/// Confidence interval for the candidate/baseline runtime ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioCI {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

/// Runs `task` in `trials` timed batches of `reps` back-to-back executions
/// and returns the per-batch wall-clock seconds.
pub fn time_repeated(mut task: impl FnMut(), reps: usize, trials: usize) -> Result<Vec<f64>> {
    if reps == 0 || trials == 0 {
        return Err(Error::Domain("reps and trials must be at least 1".into()));
    }
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        for _ in 0..reps {
            task();
        }
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(samples)
}

fn median(s: &[f64]) -> f64 {
    let mut v = s.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Midranks of the pooled samples, returned as (ranks of x, ranks of y).
fn midranks(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut pooled: Vec<(f64, usize)> = x
        .iter()
        .chain(y.iter())
        .copied()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut ranks = vec![0.0; pooled.len()];
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[pooled[k].1] = r;
        }
        i = j + 1;
    }
    (ranks[..n].to_vec(), ranks[n..].to_vec())
}

/// Two-sided p-value of the exact permutation distribution of the x rank sum,
/// enumerating every assignment of pooled midranks to the x group.
fn exact_p_value(rank_x: &[f64], rank_y: &[f64]) -> f64 {
    let n = rank_x.len();
    let total = n + rank_y.len();
    let mut pooled: Vec<f64> = rank_x.iter().chain(rank_y.iter()).copied().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let w_obs: f64 = rank_x.iter().sum();
    let mean = n as f64 * (total as f64 + 1.0) / 2.0;
    let dev_obs = (w_obs - mean).abs();

    // enumerate n-subsets of 0..total in lexicographic order
    let mut idx: Vec<usize> = (0..n).collect();
    let mut extreme = 0u64;
    let mut count = 0u64;
    loop {
        let w: f64 = idx.iter().map(|&i| pooled[i]).sum();
        // tolerance absorbs midrank .5 accumulation error
        if (w - mean).abs() >= dev_obs - 1e-9 {
            extreme += 1;
        }
        count += 1;
        // advance to the next combination
        let mut i = n;
        loop {
            if i == 0 {
                return extreme as f64 / count as f64;
            }
            i -= 1;
            if idx[i] != i + total - n {
                break;
            }
        }
        idx[i] += 1;
        for k in i + 1..n {
            idx[k] = idx[k - 1] + 1;
        }
    }
}

/// Complementary error function (Abramowitz & Stegun 7.1.26, |err| < 1.5e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        poly
    } else {
        2.0 - poly
    }
}

fn normal_two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Two-sided Mann-Whitney rank-sum test: true iff exchangeability of ranks is
/// rejected at `level`. Exact permutation enumeration when the pooled size is
/// below 16, otherwise a tie-corrected, continuity-corrected normal
/// approximation.
pub fn mann_whitney_reject(x: &[f64], y: &[f64], level: f64) -> Result<bool> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Domain("rank-sum test requires nonempty samples".into()));
    }
    if !(0.5..1.0).contains(&level) {
        return Err(Error::Domain("confidence level must lie in [0.5, 1)".into()));
    }
    let alpha = 1.0 - level;
    let (rank_x, rank_y) = midranks(x, y);
    let n = x.len() as f64;
    let m = y.len() as f64;
    let total = x.len() + y.len();

    if total < EXACT_THRESHOLD {
        return Ok(exact_p_value(&rank_x, &rank_y) < alpha);
    }

    let w: f64 = rank_x.iter().sum();
    let mean = n * (n + m + 1.0) / 2.0;
    // tie correction over pooled tie groups
    let mut pooled: Vec<f64> = rank_x.iter().chain(rank_y.iter()).copied().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1] == pooled[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    let nt = total as f64;
    let var = n * m / 12.0 * ((nt + 1.0) - tie_sum / (nt * (nt - 1.0)));
    if var <= 0.0 {
        // every pooled value identical: never reject
        return Ok(false);
    }
    let z = ((w - mean).abs() - 0.5) / var.sqrt();
    Ok(normal_two_sided_p(z.max(0.0)) < alpha)
}

/// The range of γ for which the rank-sum test does not reject
/// "γ·baseline and candidate are exchangeable" at `level`. Endpoints are
/// located by scanning the pairwise ratio candidate set {oᵢ/cⱼ}, where the
/// pooled ranking can change.
pub fn ratio_confidence_interval(p: &SamplePair, level: f64) -> Result<RatioCI> {
    let mut candidates: Vec<f64> = Vec::with_capacity(p.o_samples.len() * p.c_samples.len());
    for o in &p.o_samples {
        for c in &p.c_samples {
            candidates.push(o / c);
        }
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    let mut scaled = vec![0.0; p.c_samples.len()];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &gamma in &candidates {
        for (s, c) in scaled.iter_mut().zip(&p.c_samples) {
            *s = gamma * c;
        }
        if !mann_whitney_reject(&scaled, &p.o_samples, level)? {
            lo = lo.min(gamma);
            hi = hi.max(gamma);
        }
    }
    if lo > hi {
        // every candidate rejected (degenerate samples): collapse to the
        // median ratio
        let r = p.median_ratio();
        lo = r;
        hi = r;
    }
    Ok(RatioCI { lo, hi, level })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_multisets_are_not_rejected() {
        let x = [3.0, 1.0, 2.0, 5.0, 4.0];
        assert!(!mann_whitney_reject(&x, &x, 0.995).unwrap());
    }

    #[test]
    fn separated_samples_are_rejected() {
        let x: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        let y: Vec<f64> = (101..=120).map(|v| v as f64).collect();
        assert!(mann_whitney_reject(&x, &y, 0.995).unwrap());
        // and symmetric
        assert!(mann_whitney_reject(&y, &x, 0.995).unwrap());
    }

    #[test]
    fn exact_branch_matches_brute_force_for_three_vs_three() {
        // independent brute force over all 20 rank assignments
        let x = [1.0, 4.0, 6.0];
        let y = [2.0, 3.0, 5.0];
        let (rx, _) = midranks(&x, &y);
        let w_obs: f64 = rx.iter().sum();
        let mean = 3.0 * 7.0 / 2.0;
        let dev = (w_obs - mean).abs();
        let ranks = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut extreme = 0;
        let mut count = 0;
        for a in 0..6 {
            for b in (a + 1)..6 {
                for c in (b + 1)..6 {
                    let w = ranks[a] + ranks[b] + ranks[c];
                    if (w - mean).abs() >= dev - 1e-9 {
                        extreme += 1;
                    }
                    count += 1;
                }
            }
        }
        assert_eq!(count, 20);
        let brute_p = extreme as f64 / count as f64;
        let (rx, ry) = midranks(&x, &y);
        assert!((exact_p_value(&rx, &ry) - brute_p).abs() < 1e-12);
        // minimum achievable two-sided p for 3v3 is 0.1, so never rejected
        // at 0.995
        assert!(!mann_whitney_reject(&x, &y, 0.995).unwrap());
    }

    #[test]
    fn doubled_baseline_interval_contains_two_excludes_one() {
        let c: Vec<f64> = (1..=20).map(|v| 1.0 + 0.013 * v as f64).collect();
        let o: Vec<f64> = c.iter().map(|v| 2.0 * v).collect();
        let p = SamplePair::new(o, c).unwrap();
        let ci = ratio_confidence_interval(&p, 0.995).unwrap();
        assert!(ci.lo <= 2.0 && 2.0 <= ci.hi, "interval [{}, {}]", ci.lo, ci.hi);
        assert!(ci.lo > 1.0, "lo = {} should exclude 1.0", ci.lo);
        assert!((p.median_ratio() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn equal_samples_interval_contains_one() {
        let c: Vec<f64> = (1..=15).map(|v| 1.0 + 0.1 * v as f64).collect();
        let p = SamplePair::new(c.clone(), c).unwrap();
        let ci = ratio_confidence_interval(&p, 0.995).unwrap();
        assert!(ci.lo <= 1.0 && 1.0 <= ci.hi);
    }

    #[test]
    fn interval_is_scale_invariant() {
        let c: Vec<f64> = (1..=12).map(|v| 0.5 + 0.07 * v as f64).collect();
        let o: Vec<f64> = (1..=12).map(|v| 0.8 + 0.09 * v as f64).collect();
        let p1 = SamplePair::new(o.clone(), c.clone()).unwrap();
        let p2 = SamplePair::new(
            o.iter().map(|v| 3.7 * v).collect(),
            c.iter().map(|v| 3.7 * v).collect(),
        )
        .unwrap();
        let a = ratio_confidence_interval(&p1, 0.995).unwrap();
        let b = ratio_confidence_interval(&p2, 0.995).unwrap();
        assert!((a.lo - b.lo).abs() < 1e-12 && (a.hi - b.hi).abs() < 1e-12);
    }

    #[test]
    fn acceptance_region_is_an_interval() {
        let c: Vec<f64> = (1..=18).map(|v| 1.0 + 0.05 * v as f64).collect();
        let o: Vec<f64> = (1..=18).map(|v| 1.4 + 0.06 * v as f64).collect();
        let p = SamplePair::new(o, c).unwrap();
        let ci = ratio_confidence_interval(&p, 0.995).unwrap();
        // every candidate strictly inside the interval is also accepted
        for k in 1..40 {
            let gamma = ci.lo + (ci.hi - ci.lo) * k as f64 / 40.0;
            let scaled: Vec<f64> = p.c_samples().iter().map(|v| gamma * v).collect();
            assert!(
                !mann_whitney_reject(&scaled, p.o_samples(), 0.995).unwrap(),
                "gamma {gamma} inside [{}, {}] was rejected",
                ci.lo,
                ci.hi
            );
        }
    }

    #[test]
    fn degenerate_samples_collapse_to_a_point() {
        let p = SamplePair::new(vec![2.0; 6], vec![1.0; 6]).unwrap();
        let ci = ratio_confidence_interval(&p, 0.995).unwrap();
        assert_eq!((ci.lo, ci.hi), (2.0, 2.0));
    }

    #[test]
    fn time_repeated_returns_requested_samples() {
        let mut acc = 0u64;
        let samples = time_repeated(
            || {
                for i in 0..1000u64 {
                    acc = acc.wrapping_add(i * i);
                }
            },
            10,
            10,
        )
        .unwrap();
        assert_eq!(samples.len(), 10);
        assert!(samples.iter().all(|s| *s >= 0.0 && s.is_finite()));
        assert!(acc > 0);
    }

    #[test]
    fn time_repeated_scales_with_reps() {
        let work = || {
            let mut s = 0.0f64;
            for i in 1..20000 {
                s += 1.0 / i as f64;
            }
            std::hint::black_box(s);
        };
        let one = median(&time_repeated(work, 1, 9).unwrap());
        let ten = median(&time_repeated(work, 10, 9).unwrap());
        let factor = ten / one;
        assert!((4.0..25.0).contains(&factor), "scaling factor {factor}");
    }

    #[test]
    fn invalid_samples_rejected() {
        assert!(SamplePair::new(vec![], vec![1.0]).is_err());
        assert!(SamplePair::new(vec![1.0], vec![0.0]).is_err());
        assert!(SamplePair::new(vec![-1.0], vec![1.0]).is_err());
        assert!(SamplePair::new(vec![f64::NAN], vec![1.0]).is_err());
        assert!(time_repeated(|| {}, 0, 1).is_err());
        assert!(mann_whitney_reject(&[], &[1.0], 0.995).is_err());
    }
}
