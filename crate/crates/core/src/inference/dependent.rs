//! Order-restricted MLE of the joint toxicity-efficacy law per dose level.
//!
//! Each level carries efficacy margin `π_i`, toxicity margin `φ_i` and
//! global cross ratio `ρ_i`; both margins are nondecreasing in dose.
//! Blockwise cyclic ascent: a pooled-block update of `π` with `(φ, ρ)`
//! fixed, the same for `φ`, then a 1-D update of each `ρ_i`.

use serde::{Deserialize, Serialize};

use super::isotonic::{pava_isotonic_mle, pinned_isotonic};
use super::{DoseCounts, LevelCounts, Outcome, Side};
use crate::models::dale_cells;

const P_LO: f64 = 1e-10;
const P_HI: f64 = 1.0 - 1e-10;
const LOG_RHO_BOUND: f64 = 15.0;
const LL_TOL: f64 = 1e-8;
const MAX_SWEEPS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependentFit {
    pub pi: Vec<f64>,
    pub phi: Vec<f64>,
    pub rho: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub sweeps: usize,
}

fn level_loglik(c: &LevelCounts, pi: f64, phi: f64, rho: f64) -> f64 {
    if c.n == 0 {
        return 0.0;
    }
    let Ok(cells) = dale_cells(pi, phi, rho) else {
        return f64::NEG_INFINITY;
    };
    let mut ll = 0.0;
    for (y, row) in c.joint.iter().enumerate() {
        for (z, &k) in row.iter().enumerate() {
            if k > 0 {
                ll += k as f64 * cells.prob(y == 1, z == 1).ln();
            }
        }
    }
    ll
}

/// `Σ log Π_i(y_t, z_t)` over all patients.
pub fn dependent_loglik(counts: &DoseCounts, pi: &[f64], phi: &[f64], rho: &[f64]) -> f64 {
    counts
        .levels
        .iter()
        .enumerate()
        .map(|(i, c)| level_loglik(c, pi[i], phi[i], rho[i]))
        .sum()
}

/// Golden-section maximization of a function on `[lo, hi]`.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    const R: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - R * (hi - lo);
    let mut x2 = lo + R * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + R * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - R * (hi - lo);
            f1 = f(x1);
        }
    }
    let mid = 0.5 * (lo + hi);
    // Keep the better of the interior point and the interval ends.
    [mid, lo, hi]
        .into_iter()
        .map(|x| (x, f(x)))
        .fold((mid, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
        .0
}

/// Pool-adjacent-violators for a separable objective: each block takes the
/// common value maximizing the sum of its members' objectives.
fn block_pava(levels: &[usize], obj: &impl Fn(usize, f64) -> f64) -> Vec<f64> {
    let opt = |members: &[usize]| {
        golden_max(|t| members.iter().map(|&i| obj(i, t)).sum(), P_LO, P_HI, 1e-10)
    };
    let mut blocks: Vec<(Vec<usize>, f64)> = Vec::new();
    for &i in levels {
        blocks.push((vec![i], opt(&[i])));
        while blocks.len() > 1 && blocks[blocks.len() - 2].1 >= blocks[blocks.len() - 1].1 {
            let (top, _) = blocks.pop().unwrap();
            let prev = blocks.last_mut().unwrap();
            prev.0.extend(top);
            prev.1 = opt(&prev.0);
        }
    }
    let mut out = vec![0.0; levels.len()];
    let mut k = 0;
    for (members, v) in blocks {
        for _ in members {
            out[k] = v;
            k += 1;
        }
    }
    out
}

/// Fills a full-length vector from values on `observed`, copying the nearest
/// observed value to the left (else right) into unobserved levels.
fn spread(d: usize, observed: &[usize], vals: &[f64], fallback: f64) -> Vec<f64> {
    let mut out = vec![f64::NAN; d];
    for (&i, &v) in observed.iter().zip(vals) {
        out[i] = v;
    }
    let first = vals.first().copied().unwrap_or(fallback);
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

/// Pooled-block update of one margin, optionally with `π(i*)` held at `v`.
fn update_margin(
    counts: &DoseCounts,
    obj: &impl Fn(usize, f64) -> f64,
    pin: Option<(usize, f64)>,
) -> Vec<f64> {
    let d = counts.len();
    let observed = |range: std::ops::Range<usize>| -> Vec<usize> {
        range.filter(|&i| counts.levels[i].n > 0).collect()
    };
    match pin {
        None => {
            let obs = observed(0..d);
            let vals = block_pava(&obs, obj);
            spread(d, &obs, &vals, 0.5)
        }
        Some((i_star, v)) => {
            let lo = observed(0..i_star);
            let lo_vals: Vec<f64> = block_pava(&lo, obj).into_iter().map(|x| x.min(v)).collect();
            let hi: Vec<usize> = observed(i_star + 1..d);
            let hi_vals: Vec<f64> = block_pava(&hi, obj).into_iter().map(|x| x.max(v)).collect();
            let mut obs = lo;
            obs.push(i_star);
            obs.extend(&hi);
            let mut vals = lo_vals;
            vals.push(v);
            vals.extend(hi_vals);
            let mut out = spread(d, &obs, &vals, v);
            out[i_star] = v;
            out
        }
    }
}

fn initial_rho(c: &LevelCounts) -> f64 {
    if c.n == 0 {
        return 1.0;
    }
    let j = |y: usize, z: usize| c.joint[y][z] as f64 + 0.5;
    (j(0, 0) * j(1, 1) / (j(0, 1) * j(1, 0))).clamp((-LOG_RHO_BOUND).exp(), LOG_RHO_BOUND.exp())
}

fn ascend(counts: &DoseCounts, mut pi: Vec<f64>, pin: Option<(usize, f64)>) -> DependentFit {
    let d = counts.len();
    let clampp = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|p| p.clamp(P_LO, P_HI)).collect() };
    pi = clampp(pi);
    if let Some((i, v)) = pin {
        pi[i] = v;
    }
    let mut phi = clampp(pava_isotonic_mle(counts, Outcome::Toxicity));
    let mut rho: Vec<f64> = counts.levels.iter().map(initial_rho).collect();
    let mut ll = dependent_loglik(counts, &pi, &phi, &rho);
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let before = ll;

        let obj = |i: usize, t: f64| level_loglik(&counts.levels[i], t, phi[i], rho[i]);
        let cand = update_margin(counts, &obj, pin);
        let cand_ll = dependent_loglik(counts, &cand, &phi, &rho);
        if cand_ll >= ll {
            pi = cand;
            ll = cand_ll;
        }

        let obj = |i: usize, t: f64| level_loglik(&counts.levels[i], pi[i], t, rho[i]);
        let cand = update_margin(counts, &obj, None);
        let cand_ll = dependent_loglik(counts, &pi, &cand, &rho);
        if cand_ll >= ll {
            phi = cand;
        }

        for i in 0..d {
            let c = &counts.levels[i];
            if c.n == 0 {
                continue;
            }
            let f = |lr: f64| level_loglik(c, pi[i], phi[i], lr.exp());
            let lr = golden_max(f, -LOG_RHO_BOUND, LOG_RHO_BOUND, 1e-9);
            if f(lr) >= f(rho[i].ln()) {
                rho[i] = lr.exp();
            }
        }
        ll = dependent_loglik(counts, &pi, &phi, &rho);

        if (ll - before).abs() < LL_TOL {
            converged = true;
            break;
        }
    }
    DependentFit {
        pi,
        phi,
        rho,
        loglik: ll,
        converged,
        sweeps,
    }
}

/// Joint order-restricted MLE, optionally under `π(i*) ≤ p` or `≥ p`.
pub fn dependent_iso_mle(counts: &DoseCounts, constraint: Option<(usize, f64, Side)>) -> DependentFit {
    let free = ascend(counts, pava_isotonic_mle(counts, Outcome::Efficacy), None);
    let Some((i_star, p, side)) = constraint else {
        return free;
    };
    if side.satisfied(free.pi[i_star], p) {
        return free;
    }
    dependent_iso_pinned(counts, i_star, p)
}

/// Joint order-restricted MLE with `π(i*)` held at `v`.
pub fn dependent_iso_pinned(counts: &DoseCounts, i_star: usize, v: f64) -> DependentFit {
    let start = pinned_isotonic(counts, Outcome::Efficacy, i_star, v);
    ascend(counts, start, Some((i_star, v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::IsoParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(n00: u32, n01: u32, n10: u32, n11: u32) -> DoseCounts {
        let joint = [[n00, n01], [n10, n11]];
        DoseCounts {
            levels: vec![LevelCounts {
                n: n00 + n01 + n10 + n11,
                tox: n10 + n11,
                eff: n01 + n11,
                joint,
            }],
        }
    }

    #[test]
    fn saturated_single_level_is_empirical() {
        let c = single(4, 2, 2, 4);
        let fit = dependent_iso_mle(&c, None);
        let cells = dale_cells(fit.pi[0], fit.phi[0], fit.rho[0]).unwrap();
        assert!((cells.p00 - 4.0 / 12.0).abs() < 1e-6);
        assert!((cells.p01 - 2.0 / 12.0).abs() < 1e-6);
        assert!((cells.p10 - 2.0 / 12.0).abs() < 1e-6);
        assert!((cells.p11 - 4.0 / 12.0).abs() < 1e-6);
        assert!((fit.rho[0] - 4.0).abs() < 1e-4);
        assert!(fit.converged);
    }

    fn simulate(truth: &IsoParams, n: u32, seed: u64) -> DoseCounts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = DoseCounts::empty(truth.pi.len());
        for i in 0..truth.pi.len() {
            let cells = truth.cells(i).unwrap();
            for _ in 0..n {
                let u: f64 = rng.random();
                let (y, z) = if u < cells.p00 {
                    (false, false)
                } else if u < cells.p00 + cells.p01 {
                    (false, true)
                } else if u < cells.p00 + cells.p01 + cells.p10 {
                    (true, false)
                } else {
                    (true, true)
                };
                c.add(i, y, z);
            }
        }
        c
    }

    #[test]
    fn independent_truth_recovered() {
        let truth = IsoParams {
            phi: vec![0.1, 0.2, 0.35],
            pi: vec![0.2, 0.4, 0.6],
            rho_x: vec![1.0; 3],
        };
        let n = 400;
        let c = simulate(&truth, n, 7);
        let fit = dependent_iso_mle(&c, None);
        let pi_p = pava_isotonic_mle(&c, Outcome::Efficacy);
        let phi_p = pava_isotonic_mle(&c, Outcome::Toxicity);
        let tol = 2.0 / (n as f64).sqrt();
        for i in 0..3 {
            assert!((fit.pi[i] - pi_p[i]).abs() < tol);
            assert!((fit.phi[i] - phi_p[i]).abs() < tol);
            assert!(fit.rho[i] > 1.0 / 3.0 && fit.rho[i] < 3.0, "{:?}", fit.rho);
        }
        assert!(fit.pi.windows(2).all(|w| w[0] <= w[1]));
        assert!(fit.phi.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn constrained_fit_is_nested_and_feasible() {
        let truth = IsoParams {
            phi: vec![0.1, 0.3, 0.5],
            pi: vec![0.3, 0.5, 0.7],
            rho_x: vec![3.0; 3],
        };
        for seed in 0..10 {
            let c = simulate(&truth, 8, seed);
            let free = dependent_iso_mle(&c, None);
            let con = dependent_iso_mle(&c, Some((1, 0.1, Side::AtMost)));
            assert!(con.loglik <= free.loglik + 1e-9);
            assert!(con.pi[1] <= 0.1 + 1e-15);
            assert!(con.pi.windows(2).all(|w| w[0] <= w[1]));
            for i in 0..3 {
                assert!(dale_cells(con.pi[i], con.phi[i], con.rho[i]).is_ok());
            }
            let up = dependent_iso_mle(&c, Some((1, 0.9, Side::AtLeast)));
            assert!(up.loglik <= free.loglik + 1e-9);
            assert!(up.pi[1] >= 0.9 - 1e-15);
        }
    }

    #[test]
    fn empty_levels_are_filled() {
        let mut c = single(3, 1, 1, 1);
        c.levels.push(LevelCounts::default());
        let fit = dependent_iso_mle(&c, None);
        assert_eq!(fit.pi[1], fit.pi[0]);
        assert_eq!(fit.rho[1], 1.0);
    }
}
