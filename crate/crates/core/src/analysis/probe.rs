//! Running-statistics probe and the two statistical tests used on its output.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::nfcore::{Branch, LayerStats, Network};

/// Per-channel `(running_mean, running_var)` of one normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsScatter {
    pub points: Vec<(f64, f64)>,
    pub layer_index: usize,
    pub source_label: String,
}

impl StatsScatter {
    pub fn means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }
}

/// Reads the running statistics at `layer_index`. Mixture-BN models need a
/// `branch`; BN models ignore it.
pub fn bn_stats_scatter(net: &Network, layer_index: usize, label: &str, branch: Option<Branch>) -> Result<StatsScatter> {
    let points = match (net.bn_running_stats(layer_index)?, branch) {
        (LayerStats::Bn(p), _) => p,
        (LayerStats::Mbn { clean, .. }, Some(Branch::Clean)) => clean,
        (LayerStats::Mbn { adv, .. }, Some(Branch::Adv)) => adv,
        (LayerStats::Mbn { .. }, None) => {
            return Err(Error::UnsupportedProbe("mixture-BN probes need a branch".into()));
        }
    };
    Ok(StatsScatter {
        points,
        layer_index,
        source_label: label.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Whether `p_value` comes from exact lattice-path counting.
    pub exact: bool,
}

/// Largest `n * m` for which the exact null distribution is used.
const KS_EXACT_LIMIT: usize = 10_000;

/// Two-sided two-sample Kolmogorov-Smirnov test. The p-value is exact for
/// small samples and uses the Kolmogorov limit otherwise.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(arg_err("KS test needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(arg_err("KS test samples must be finite"));
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (n, m) = (xa.len(), xb.len());
    // Integer statistic: max |i m - j n| over merged ECDF steps.
    let (mut i, mut j, mut d) = (0usize, 0usize, 0i64);
    while i < n || j < m {
        let v = match (xa.get(i), xb.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        while i < n && xa[i] == v {
            i += 1;
        }
        while j < m && xb[j] == v {
            j += 1;
        }
        d = d.max((i as i64 * m as i64 - j as i64 * n as i64).abs());
    }
    let statistic = d as f64 / (n * m) as f64;
    if d == 0 {
        return Ok(KsResult {
            statistic,
            p_value: 1.0,
            exact: true,
        });
    }
    if n * m <= KS_EXACT_LIMIT {
        return Ok(KsResult {
            statistic,
            p_value: ks_exact_p(n, m, d),
            exact: true,
        });
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * statistic;
    Ok(KsResult {
        statistic,
        p_value: kolmogorov_q(lambda),
        exact: false,
    })
}

/// `P(D >= d / nm)` under the null: one minus the share of monotone lattice
/// paths from (0, 0) to (n, m) that stay strictly inside `|i m - j n| < d`.
fn ks_exact_p(n: usize, m: usize, d: i64) -> f64 {
    let inside = |i: usize, j: usize| (i as i64 * m as i64 - j as i64 * n as i64).abs() < d;
    // Probability-weighted DP: every path has mass 1 / C(n + m, n).
    let mut row = vec![0.0f64; m + 1];
    for i in 0..=n {
        for j in 0..=m {
            if !inside(i, j) {
                row[j] = 0.0;
                continue;
            }
            if i == 0 && j == 0 {
                row[j] = 1.0;
                continue;
            }
            // Step weights: from (i-1, j) with prob i/(i+j), from (i, j-1) with prob j/(i+j).
            let up = if i > 0 { row[j] * i as f64 / (i + j) as f64 } else { 0.0 };
            let left = if j > 0 { row[j - 1] * j as f64 / (i + j) as f64 } else { 0.0 };
            row[j] = up + left;
        }
    }
    (1.0 - row[m]).clamp(0.0, 1.0)
}

/// Kolmogorov survival function `2 sum_k (-1)^(k-1) exp(-2 k^2 l^2)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s + 1;
        while e < idx.len() && v[idx[e]] == v[idx[s]] {
            e += 1;
        }
        let r = (s + e + 1) as f64 / 2.0;
        for &k in &idx[s..e] {
            ranks[k] = r;
        }
        s = e;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(arg_err("spearman needs two equal-length samples of size >= 2"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mean = (x.len() + 1) as f64 / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(arg_err("spearman is undefined for a constant sample"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    // Reference values from scipy.stats.ks_2samp(method="exact") and spearmanr.
    #[test]
    fn ks_matches_reference_values() {
        let a = [0.1, 0.4, 0.35, 0.8, 0.05, 0.6, 0.2, 0.45];
        let b = [0.9, 1.2, 0.7, 1.5, 0.65, 1.1, 0.3, 0.95];
        let r = ks_two_sample(&a, &b).unwrap();
        assert_abs_diff_eq!(r.statistic, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_value, 0.018648018648018645, epsilon = 1e-10);

        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37) % 1.0).collect();
        let y: Vec<f64> = (0..70).map(|i| (i as f64 * 0.53 + 0.1) % 1.2).collect();
        let r = ks_two_sample(&x, &y).unwrap();
        assert!(r.exact);
        assert_abs_diff_eq!(r.statistic, 0.17142857142857143, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_value, 0.2645528596669129, epsilon = 1e-8);

        let x: Vec<f64> = (0..150).map(|i| (i as f64 * 0.61803) % 1.0).collect();
        let y: Vec<f64> = (0..120).map(|i| ((i as f64 * 0.41421) % 1.0).powf(0.8)).collect();
        let r = ks_two_sample(&x, &y).unwrap();
        assert!(!r.exact);
        assert_abs_diff_eq!(r.statistic, 0.09333333333333334, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_value, 0.5754133449799463, epsilon = 0.03);
    }

    #[test]
    fn ks_identical_and_disjoint() {
        let r = ks_two_sample(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        let r = ks_two_sample(&[0.0; 8], &[1.0; 8]).unwrap();
        assert_eq!(r.statistic, 1.0);
        // Only the two fully separated orderings out of C(16, 8).
        assert_abs_diff_eq!(r.p_value, 2.0 / 12870.0, epsilon = 1e-15);
        assert!(ks_two_sample(&[], &[1.0]).is_err());
    }

    #[test]
    fn spearman_reference_values() {
        assert_abs_diff_eq!(
            spearman(&[1.0, 2.0, 2.0, 3.0, 5.0], &[5.0, 3.0, 3.0, 2.0, 1.0]).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(spearman(&[0.0, 0.1, 0.2, 0.3], &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8, epsilon = 1e-12);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }
}
