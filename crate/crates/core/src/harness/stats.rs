//! Paired significance testing: exact Wilcoxon signed-rank and Holm-Bonferroni.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Pairs with a nonzero difference.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided exact p-value.
    pub p_value: f64,
}

/// Ranks of `values` starting at 1, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Null distribution of the sum of doubled ranks carrying a `+` sign:
/// `dist[s]` is the probability that `2 W+ = s`.
fn null_distribution(doubled: &[usize]) -> Vec<f64> {
    let total: usize = doubled.iter().sum();
    let mut dist = vec![0.0; total + 1];
    dist[0] = 1.0;
    let mut reach = 0;
    for &r in doubled {
        for s in (0..=reach).rev() {
            let p = dist[s] * 0.5;
            dist[s] = p;
            dist[s + r] += p;
        }
        reach += r;
    }
    dist
}

/// Exact two-sided signed-rank test on the paired samples. Zero differences
/// are dropped; tied magnitudes get mean ranks and the exact permutation
/// distribution of those ranks.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Wilcoxon {
    assert_eq!(x.len(), y.len(), "paired samples differ in length");
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Wilcoxon {
            n,
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
        };
    }
    let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w_minus = n as f64 * (n as f64 + 1.0) / 2.0 - w_plus;
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let dist = null_distribution(&doubled);
    let obs = (2.0 * w_plus).round() as usize;
    let lower: f64 = dist[..=obs].iter().sum();
    let upper: f64 = dist[obs..].iter().sum();
    Wilcoxon {
        n,
        w_plus,
        w_minus,
        p_value: (2.0 * lower.min(upper)).min(1.0),
    }
}

/// Largest `T` with `P(W <= T) <= alpha / 2` for `n` untied pairs, the
/// tabulated two-sided critical value; `None` when no `T` qualifies.
pub fn critical_value(n: usize, alpha: f64) -> Option<usize> {
    let doubled: Vec<usize> = (1..=n).map(|r| 2 * r).collect();
    let dist = null_distribution(&doubled);
    let mut cum = 0.0;
    let mut best = None;
    for t in 0..=n * (n + 1) / 2 {
        cum += dist[2 * t];
        if cum <= alpha / 2.0 + 1e-12 {
            best = Some(t);
        } else {
            break;
        }
    }
    best
}

/// Holm step-down adjusted p-values, in input order.
pub fn holm_bonferroni(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        running = running.max(((m - k) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn all_positive_differences() {
        // P(W+ = 21) = 1/64 for n = 6.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let w = wilcoxon_signed_rank(&x, &[0.0; 6]);
        assert_eq!(w.w_plus, 21.0);
        assert!((w.p_value - 2.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn holm_is_monotone() {
        let adj = holm_bonferroni(&[0.01, 0.04, 0.03, 0.005]);
        let want = [0.03, 0.06, 0.06, 0.02];
        for (a, b) in adj.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{adj:?}");
        }
    }
}
