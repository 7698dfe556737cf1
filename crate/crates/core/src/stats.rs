//! Rank-sum and correlation tests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest pooled size for which the rank-sum test enumerates exactly.
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub m: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("samples are empty")]
    EmptySample,
    #[error("all values identical across both samples")]
    DegenerateSamples(StatResult),
    #[error("a sample has zero variance")]
    ZeroVariance,
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Doubled average ranks (integers, so ties stay exact) of the pooled
/// sample, in input order, plus the tie-group sizes.
fn doubled_ranks(pooled: &[f64]) -> (Vec<u64>, Vec<u64>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && pooled[order[end]] == pooled[order[start]] {
            end += 1;
        }
        // ranks start..end (1-based start+1..=end) averaged, doubled
        let doubled = (start + 1 + end) as u64;
        for &i in &order[start..end] {
            ranks[i] = doubled;
        }
        ties.push((end - start) as u64);
        start = end;
    }
    (ranks, ties)
}

/// Two-sided p of the exact permutation distribution of U, given doubled
/// ranks of the pooled sample and the observed doubled U of the first
/// sample. Every size-`n` subset of positions is one equally likely
/// assignment.
fn exact_p(ranks: &[u64], n: usize, m: usize, doubled_u: i64) -> f64 {
    let total = ranks.len();
    let center = (n * m) as i64; // doubled nm/2
    let observed = (doubled_u - center).abs();
    let offset = (n * (n + 1)) as i64;
    let (mut hits, mut count) = (0u64, 0u64);
    for mask in 0u32..(1u32 << total) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let r: u64 = (0..total).filter(|&i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
        count += 1;
        if (r as i64 - offset - center).abs() >= observed {
            hits += 1;
        }
    }
    hits as f64 / count as f64
}

/// Normal approximation with tie and continuity corrections.
fn normal_p(u: f64, n: usize, m: usize, ties: &[u64]) -> f64 {
    let (nf, mf) = (n as f64, m as f64);
    let big_n = nf + mf;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>();
    let var = nf * mf / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
    let mu = nf * mf / 2.0;
    let z = ((u - mu).abs() - 0.5) / var.sqrt();
    libm::erfc(z / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Rank sums with average ranks for ties. `statistic` is U of `a`. Pooled
/// sizes up to [`EXACT_LIMIT`] use the exact distribution; larger ones the
/// normal approximation.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<StatResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = doubled_ranks(&pooled);
    let doubled_u = ranks[..n].iter().sum::<u64>() as i64 - (n * (n + 1)) as i64;
    let u = doubled_u as f64 / 2.0;
    if ties.len() == 1 {
        return Err(StatsError::DegenerateSamples(StatResult {
            statistic: u,
            p_value: 1.0,
            n,
            m,
        }));
    }
    let p_value = if n + m <= EXACT_LIMIT {
        exact_p(&ranks, n, m, doubled_u)
    } else {
        normal_p(u, n, m, &ties)
    };
    Ok(StatResult { statistic: u, p_value, n, m })
}

/// Forces the normal approximation regardless of sample size.
pub fn mann_whitney_u_normal(a: &[f64], b: &[f64]) -> Result<StatResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = doubled_ranks(&pooled);
    let u = (ranks[..a.len()].iter().sum::<u64>() as f64 - (a.len() * (a.len() + 1)) as f64) / 2.0;
    Ok(StatResult {
        statistic: u,
        p_value: normal_p(u, a.len(), b.len(), &ties),
        n: a.len(),
        m: b.len(),
    })
}

/// Sample correlation with a two-sided t-test p-value on n − 2 degrees of
/// freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<StatResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(StatsError::TooFewPoints(n));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(StatResult {
        statistic: r,
        p_value: correlation_p(r, n),
        n,
        m: n,
    })
}

/// Two-sided p for correlation `r` over `n` points. With ν = n − 2 and
/// t² = r²ν/(1 − r²), the tail mass is I_{1−r²}(ν/2, 1/2).
pub fn correlation_p(r: f64, n: usize) -> f64 {
    let nu = (n - 2) as f64;
    let x = (1.0 - r) * (1.0 + r);
    if x <= 0.0 {
        return 0.0;
    }
    reg_inc_beta(nu / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Two-sided tail of Student's t with `nu` degrees of freedom.
pub fn t_two_sided_p(t: f64, nu: f64) -> f64 {
    reg_inc_beta(nu / 2.0, 0.5, nu / (nu + t * t)).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, nine terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const CF_MAX_ITER: usize = 200;
const CF_TOL: f64 = 1e-12;

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_TOL {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Two-sided t tail by composite Simpson integration of the density
    /// over `[0, |t|]`.
    fn t_tail_by_quadrature(t: f64, nu: f64) -> f64 {
        let norm = libm::lgamma((nu + 1.0) / 2.0) - libm::lgamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln();
        let pdf = |x: f64| (norm - (nu + 1.0) / 2.0 * (1.0 + x * x / nu).ln()).exp();
        let steps = 20_000;
        let h = t.abs() / steps as f64;
        let mut acc = pdf(0.0) + pdf(t.abs());
        for i in 1..steps {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
        }
        1.0 - 2.0 * acc * h / 3.0
    }

    #[test]
    fn separated_pairs_give_one_third() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_abs_diff_eq!(r.p_value, 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn identical_multisets_give_p_one() {
        let a = [1.0, 2.0, 2.0, 5.0];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.statistic, 8.0);
        let big: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(mann_whitney_u(&big, &big).unwrap().p_value, 1.0);
    }

    #[test]
    fn constant_pool_is_flagged() {
        match mann_whitney_u(&[3.0, 3.0], &[3.0]) {
            Err(StatsError::DegenerateSamples(r)) => assert_eq!(r.p_value, 1.0),
            other => panic!("{other:?}"),
        }
        assert_eq!(mann_whitney_u(&[], &[1.0]), Err(StatsError::EmptySample));
    }

    #[test]
    fn six_by_six_exact_and_normal_agree() {
        let a = [0.31, 1.72, 0.95, 2.40, 1.05, 0.12];
        let b = [1.51, 2.88, 2.03, 0.77, 3.10, 2.65];
        let exact = mann_whitney_u(&a, &b).unwrap().p_value;
        let approx = mann_whitney_u_normal(&a, &b).unwrap().p_value;
        assert!((exact - approx).abs() < 0.05, "{exact} vs {approx}");
    }

    #[test]
    fn large_samples_use_normal_path() {
        let a: Vec<f64> = (0..20).map(f64::from).collect();
        let b: Vec<f64> = (10..30).map(f64::from).collect();
        assert_eq!(mann_whitney_u(&a, &b).unwrap(), mann_whitney_u_normal(&a, &b).unwrap());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert_abs_diff_eq!(pearson(&x, &y).unwrap().statistic, 1.0, epsilon = 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(pearson(&x, &neg).unwrap().statistic, -1.0, epsilon = 1e-12);
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert_abs_diff_eq!(r.statistic, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_value, 0.4, epsilon = 1e-9);
    }

    #[test]
    fn pearson_errors() {
        assert_eq!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(StatsError::TooFewPoints(2)));
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(StatsError::ZeroVariance));
    }

    #[test]
    fn ln_gamma_matches_reference() {
        for &x in &[0.1, 0.5, 1.0, 1.5, 2.5, 7.0, 33.3, 171.0] {
            assert_abs_diff_eq!(ln_gamma(x), libm::lgamma(x), epsilon = 1e-10);
        }
    }

    #[test]
    fn t_tail_matches_quadrature() {
        for &nu in &[1.0, 2.0, 3.5, 10.0, 58.0] {
            for &t in &[0.0, 0.3, 1.0, 2.2, 5.0, 12.0] {
                let oracle = t_tail_by_quadrature(t, nu);
                assert_abs_diff_eq!(t_two_sided_p(t, nu), oracle, epsilon = 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn u_statistics_sum_to_nm(
            a in proptest::collection::vec(0i32..8, 1..9),
            b in proptest::collection::vec(0i32..8, 1..9),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let u = |x: &[f64], y: &[f64]| match mann_whitney_u(x, y) {
                Ok(r) => r,
                Err(StatsError::DegenerateSamples(r)) => r,
                Err(e) => panic!("{e}"),
            };
            let (ua, ub) = (u(&a, &b), u(&b, &a));
            prop_assert_eq!(ua.statistic + ub.statistic, (a.len() * b.len()) as f64);
            prop_assert!((0.0..=1.0).contains(&ua.p_value));
            prop_assert_eq!(ua.p_value, ub.p_value);
        }

        #[test]
        fn pearson_bounded_and_affine_invariant(
            pts in proptest::collection::vec((-100f64..100.0, -100f64..100.0), 3..30),
            scale in 0.01f64..100.0,
            shift in -1e3f64..1e3,
        ) {
            let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            if let Ok(r) = pearson(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r.statistic));
                prop_assert!((0.0..=1.0).contains(&r.p_value));
                let x2: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
                let r2 = pearson(&x2, &y).unwrap();
                prop_assert!((r.statistic - r2.statistic).abs() < 1e-9);
            }
        }
    }
}
