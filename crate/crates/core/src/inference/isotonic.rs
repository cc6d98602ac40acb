//! Order-restricted binomial MLE by pool-adjacent-violators.

use super::{DoseCounts, Outcome, Side};
use crate::models::PROB_TOL;

/// `s·ln p + (n − s)·ln(1 − p)` with `0·ln 0 = 0`.
pub fn binomial_loglik(s: f64, n: f64, p: f64) -> f64 {
    let f = n - s;
    let a = if s > 0.0 { s * p.ln() } else { 0.0 };
    let b = if f > 0.0 { f * (1.0 - p).ln() } else { 0.0 };
    a + b
}

/// Weighted isotonic (nondecreasing) regression.
///
/// Levels with zero weight do not enter the pooling; afterwards they take
/// the fitted value of the nearest weighted level to the left, or to the
/// right if there is none. With no weighted level at all every entry is
/// `fallback`.
pub fn pava_with_fallback(values: &[f64], weights: &[f64], fallback: f64) -> Vec<f64> {
    // (weighted sum, weight, first level, last level)
    let mut blocks: Vec<(f64, f64, usize, usize)> = Vec::with_capacity(values.len());
    for (i, (&v, &w)) in values.iter().zip(weights).enumerate() {
        if w <= 0.0 {
            continue;
        }
        blocks.push((v * w, w, i, i));
        while blocks.len() > 1 {
            let (s1, w1, ..) = blocks[blocks.len() - 1];
            let (s0, w0, ..) = blocks[blocks.len() - 2];
            if s0 / w0 < s1 / w1 {
                break;
            }
            let top = blocks.pop().unwrap();
            let prev = blocks.last_mut().unwrap();
            prev.0 += top.0;
            prev.1 += top.1;
            prev.3 = top.3;
        }
    }
    let mut out = vec![f64::NAN; values.len()];
    for &(s, w, lo, hi) in &blocks {
        for (i, o) in out.iter_mut().enumerate().take(hi + 1).skip(lo) {
            if weights[i] > 0.0 {
                *o = s / w;
            }
        }
    }
    let first = out.iter().copied().find(|v| !v.is_nan());
    let Some(first) = first else {
        return vec![fallback; values.len()];
    };
    let mut last = first;
    for o in out.iter_mut() {
        if o.is_nan() {
            *o = last;
        } else {
            last = *o;
        }
    }
    out
}

pub fn pava(values: &[f64], weights: &[f64]) -> Vec<f64> {
    pava_with_fallback(values, weights, 0.0)
}

/// Order-restricted MLE of per-level success probabilities.
pub fn pava_isotonic_mle(counts: &DoseCounts, outcome: Outcome) -> Vec<f64> {
    let (s, n) = counts.rates(outcome);
    let rates: Vec<f64> = s
        .iter()
        .zip(&n)
        .map(|(&s, &n)| if n > 0.0 { s / n } else { 0.0 })
        .collect();
    pava(&rates, &n)
}

/// Binomial log-likelihood of `pi` over all levels.
pub fn isotonic_loglik(counts: &DoseCounts, outcome: Outcome, pi: &[f64]) -> f64 {
    counts
        .levels
        .iter()
        .zip(pi)
        .map(|(l, &p)| binomial_loglik(l.successes(outcome) as f64, l.n as f64, p))
        .sum()
}

/// Order-restricted MLE subject to `π(i*) ≤ p` or `π(i*) ≥ p`.
///
/// If the unrestricted fit already satisfies the side it is returned as is.
/// Otherwise the optimum has `π(i*) = p` and the problem splits: levels
/// below `i*` are fitted by PAVA and capped at `p`, levels above are fitted
/// by PAVA and floored at `p`.
pub fn constrained_isotonic_mle(
    counts: &DoseCounts,
    outcome: Outcome,
    i_star: usize,
    p: f64,
    side: Side,
) -> Vec<f64> {
    let pi_hat = pava_isotonic_mle(counts, outcome);
    if side.satisfied(pi_hat[i_star], p) {
        return pi_hat;
    }
    pinned_isotonic(counts, outcome, i_star, p)
}

/// Order-restricted MLE with `π(i*)` fixed at `v`.
pub fn pinned_isotonic(counts: &DoseCounts, outcome: Outcome, i_star: usize, v: f64) -> Vec<f64> {
    let (s, n) = counts.rates(outcome);
    let rates: Vec<f64> = s
        .iter()
        .zip(&n)
        .map(|(&s, &n)| if n > 0.0 { s / n } else { 0.0 })
        .collect();
    let mut out = Vec::with_capacity(rates.len());
    let lower = pava_with_fallback(&rates[..i_star], &n[..i_star], v);
    out.extend(lower.into_iter().map(|x| x.min(v)));
    out.push(v);
    let upper = pava_with_fallback(&rates[i_star + 1..], &n[i_star + 1..], v);
    out.extend(upper.into_iter().map(|x| x.max(v)));
    out
}

/// Clamps the run of entries that violate the side at and next to `i*`
/// down (or up) to `p`, leaving every other entry as it was.
pub fn clamp_isotonic(pi_hat: &[f64], i_star: usize, p: f64, side: Side) -> Vec<f64> {
    let mut out = pi_hat.to_vec();
    if side.satisfied(pi_hat[i_star], p) {
        return out;
    }
    match side {
        Side::AtMost => {
            let mut j = i_star;
            while j > 0 && pi_hat[j - 1] > p {
                j -= 1;
            }
            out[j..=i_star].iter_mut().for_each(|v| *v = p);
        }
        Side::AtLeast => {
            let mut j = i_star;
            while j + 1 < pi_hat.len() && pi_hat[j + 1] < p {
                j += 1;
            }
            out[i_star..=j].iter_mut().for_each(|v| *v = p);
        }
    }
    out
}

/// Highest level whose estimated toxicity is at most `q`, else the first.
pub fn iso_mtd(phi_hat: &[f64], q: f64) -> usize {
    phi_hat.iter().rposition(|&p| p <= q + PROB_TOL).unwrap_or(0)
}

/// As [`iso_mtd`] but only levels that have been tried are eligible.
pub fn iso_mtd_observed(phi_hat: &[f64], counts: &DoseCounts, q: f64) -> usize {
    (0..phi_hat.len())
        .rev()
        .find(|&i| counts.levels[i].n > 0 && phi_hat[i] <= q + PROB_TOL)
        .or_else(|| counts.levels.iter().position(|l| l.n > 0))
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::LevelCounts;
    use proptest::prelude::*;

    fn counts(pairs: &[(u32, u32)]) -> DoseCounts {
        DoseCounts {
            levels: pairs
                .iter()
                .map(|&(s, n)| LevelCounts {
                    n,
                    eff: s,
                    tox: s,
                    joint: [[n - s, 0], [0, s]],
                })
                .collect(),
        }
    }

    /// `min over v ≥ i of max over u ≤ i` of the pooled mean on levels u..v,
    /// skipping empty levels; windows with no data are ignored.
    fn minmax_formula(values: &[f64], weights: &[f64]) -> Vec<f64> {
        let d = values.len();
        let pooled = |u: usize, v: usize| -> Option<f64> {
            let w: f64 = weights[u..=v].iter().sum();
            (w > 0.0).then(|| {
                values[u..=v]
                    .iter()
                    .zip(&weights[u..=v])
                    .map(|(x, w)| x * w)
                    .sum::<f64>()
                    / w
            })
        };
        (0..d)
            .map(|i| {
                let mut best = f64::INFINITY;
                for v in i..d {
                    let mut inner = f64::NEG_INFINITY;
                    for u in 0..=i {
                        if let Some(m) = pooled(u, v) {
                            inner = inner.max(m);
                        }
                    }
                    if inner.is_finite() {
                        best = best.min(inner);
                    }
                }
                best
            })
            .collect()
    }

    /// Exhaustive search over nondecreasing vectors on successively finer
    /// grids, optionally pinning one coordinate to a side of `p`.
    fn brute_force(c: &DoseCounts, constraint: Option<(usize, f64, Side)>) -> f64 {
        let d = c.len();
        let ll = |v: &[f64]| isotonic_loglik(c, Outcome::Efficacy, v);
        let feasible = |v: &[f64]| match constraint {
            Some((i, p, side)) => side.satisfied(v[i], p),
            None => true,
        };
        let mut center = vec![0.5; d];
        let mut half = 0.5;
        let mut best = f64::NEG_INFINITY;
        for _ in 0..5 {
            let steps = 20usize;
            let h = 2.0 * half / steps as f64;
            let axes: Vec<Vec<f64>> = center
                .iter()
                .map(|&c0| {
                    let mut a: Vec<f64> = (0..=steps)
                        .map(|k| (c0 - half + k as f64 * h).clamp(0.0, 1.0))
                        .collect();
                    if let Some((_, p, _)) = constraint {
                        a.push(p);
                    }
                    a
                })
                .collect();
            let mut idx = vec![0usize; d];
            let mut cur = vec![0.0; d];
            loop {
                for j in 0..d {
                    cur[j] = axes[j][idx[j]];
                }
                if cur.windows(2).all(|w| w[0] <= w[1]) && feasible(&cur) {
                    let v = ll(&cur);
                    if v > best {
                        best = v;
                        center = cur.clone();
                    }
                }
                let mut j = 0;
                while j < d {
                    idx[j] += 1;
                    if idx[j] < axes[j].len() {
                        break;
                    }
                    idx[j] = 0;
                    j += 1;
                }
                if j == d {
                    break;
                }
            }
            half /= 8.0;
        }
        best
    }

    #[test]
    fn monotone_rates_unchanged() {
        let c = counts(&[(1, 4), (2, 4), (3, 4)]);
        assert_eq!(pava_isotonic_mle(&c, Outcome::Efficacy), vec![0.25, 0.5, 0.75]);
    }

    #[test]
    fn two_level_violation_pools() {
        let c = counts(&[(1, 2), (0, 2)]);
        let fit = pava_isotonic_mle(&c, Outcome::Efficacy);
        assert!((fit[0] - 0.25).abs() < 1e-15 && (fit[1] - 0.25).abs() < 1e-15);
        assert!((isotonic_loglik(&c, Outcome::Efficacy, &fit) - brute_force(&c, None)).abs() < 1e-6);
    }

    #[test]
    fn empty_levels_take_left_neighbour() {
        let v = pava(&[0.0, 0.4, 0.0, 0.2, 0.0], &[0.0, 5.0, 0.0, 5.0, 0.0]);
        assert_eq!(v, vec![0.3, 0.3, 0.3, 0.3, 0.3]);
        let v = pava(&[0.0, 0.1, 0.0, 0.6], &[0.0, 2.0, 0.0, 2.0]);
        assert_eq!(v, vec![0.1, 0.1, 0.1, 0.6]);
        assert_eq!(pava(&[0.3, 0.1], &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn clamp_rule_example() {
        let out = clamp_isotonic(&[0.05, 0.15, 0.2, 0.4], 2, 0.1, Side::AtMost);
        assert_eq!(out, vec![0.05, 0.1, 0.1, 0.4]);
        let id = clamp_isotonic(&[0.05, 0.08, 0.2], 1, 0.1, Side::AtMost);
        assert_eq!(id, vec![0.05, 0.08, 0.2]);
        let up = clamp_isotonic(&[0.05, 0.15, 0.2, 0.4], 1, 0.3, Side::AtLeast);
        assert_eq!(up, vec![0.05, 0.3, 0.3, 0.4]);
    }

    #[test]
    fn exact_constrained_fit_beats_clamp_when_pooled_above() {
        // PAVA pools both levels at .25; the clamp leaves level 2 at .25 but
        // the best monotone vector with π₁ ≤ .1 is (.1, .1).
        let c = counts(&[(1, 2), (0, 2)]);
        let pi_hat = pava_isotonic_mle(&c, Outcome::Efficacy);
        let clamp = clamp_isotonic(&pi_hat, 0, 0.1, Side::AtMost);
        assert_eq!(clamp, vec![0.1, 0.25]);
        let exact = constrained_isotonic_mle(&c, Outcome::Efficacy, 0, 0.1, Side::AtMost);
        assert!((exact[0] - 0.1).abs() < 1e-15 && (exact[1] - 0.1).abs() < 1e-15);
        let oracle = brute_force(&c, Some((0, 0.1, Side::AtMost)));
        let ll = |v: &[f64]| isotonic_loglik(&c, Outcome::Efficacy, v);
        assert!((ll(&exact) - oracle).abs() < 1e-6);
        assert!(ll(&clamp) < oracle - 1e-3);
    }

    #[test]
    fn iso_mtd_examples() {
        let q = 1.0 / 3.0;
        assert_eq!(iso_mtd(&[0.4, 0.5, 0.6], q), 0);
        assert_eq!(iso_mtd(&[0.1, 0.2, 0.3, 0.5], q), 2);
        assert_eq!(iso_mtd(&[q, q, q, q], q), 3);
        let c = counts(&[(0, 3), (1, 3), (0, 0)]);
        assert_eq!(iso_mtd_observed(&[0.0, 0.33, 0.33], &c, q), 1);
    }

    fn arb_counts(d: usize) -> impl Strategy<Value = DoseCounts> {
        prop::collection::vec((0u32..6).prop_flat_map(|n| (0..=n, Just(n))), d)
            .prop_map(|v| counts(&v))
            .prop_filter("need data", |c| c.total() > 0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pava_matches_minmax(c in arb_counts(6)) {
            let (s, n) = c.rates(Outcome::Efficacy);
            let r: Vec<f64> = s.iter().zip(&n).map(|(s, n)| if *n > 0.0 { s / n } else { 0.0 }).collect();
            let a = pava(&r, &n);
            let b = minmax_formula(&r, &n);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10, "{a:?} vs {b:?}");
            }
            prop_assert!(a.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn pava_maximizes_loglik(c in arb_counts(3)) {
            let fit = pava_isotonic_mle(&c, Outcome::Efficacy);
            let ll = isotonic_loglik(&c, Outcome::Efficacy, &fit);
            prop_assert!((ll - brute_force(&c, None)).abs() < 1e-6);
        }

        #[test]
        fn constrained_matches_oracle(c in arb_counts(3), i in 0usize..3, p in 0.05f64..0.95, up in any::<bool>()) {
            let side = if up { Side::AtLeast } else { Side::AtMost };
            let fit = constrained_isotonic_mle(&c, Outcome::Efficacy, i, p, side);
            prop_assert!(fit.windows(2).all(|w| w[0] <= w[1]));
            let slack = if up { -1e-15 } else { 1e-15 };
            prop_assert!(side.satisfied(fit[i], p + slack));
            let ll = isotonic_loglik(&c, Outcome::Efficacy, &fit);
            let un = isotonic_loglik(&c, Outcome::Efficacy, &pava_isotonic_mle(&c, Outcome::Efficacy));
            prop_assert!(ll <= un + 1e-12);
            prop_assert!((ll - brute_force(&c, Some((i, p, side)))).abs() < 1e-6);
        }

        #[test]
        fn clamp_agrees_with_exact_when_block_does_not_straddle(c in arb_counts(4), i in 0usize..4, p in 0.05f64..0.95) {
            let pi_hat = pava_isotonic_mle(&c, Outcome::Efficacy);
            let straddles = i + 1 < pi_hat.len() && pi_hat[i + 1] == pi_hat[i] && pi_hat[i] > p;
            let all_observed = c.levels.iter().all(|l| l.n > 0);
            prop_assume!(!straddles && all_observed);
            let exact = constrained_isotonic_mle(&c, Outcome::Efficacy, i, p, Side::AtMost);
            let clamp = clamp_isotonic(&pi_hat, i, p, Side::AtMost);
            let ll = |v: &[f64]| isotonic_loglik(&c, Outcome::Efficacy, v);
            prop_assert!((ll(&exact) - ll(&clamp)).abs() < 1e-9);
        }
    }
}
