//! Simon two-stage single-arm designs: exact operating characteristics and
//! exhaustive search for the optimal and minimax designs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimonError {
    #[error("no design with n1 + n2 <= {0} meets both error constraints")]
    NoFeasibleDesign(u32),
    #[error("invalid search input: {0}")]
    InvalidInput(&'static str),
}

/// Stage sizes `n1`, `n2` and rejection cutoffs: stop after stage one if at
/// most `r1` responses, reject H0 at the end if more than `r` in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimonDesign {
    pub n1: u32,
    pub n2: u32,
    pub r1: u32,
    pub r: u32,
}

impl SimonDesign {
    pub fn n(&self) -> u32 {
        self.n1 + self.n2
    }
}

impl std::fmt::Display for SimonDesign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}/{}", self.n1, self.n2, self.r1, self.r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimonOc {
    pub reject_prob: f64,
    pub expected_n: f64,
    pub pet: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimonSearch {
    pub optimal: SimonDesign,
    pub minimax: SimonDesign,
}

/// Binomial pmf and upper tails for every `n` up to a bound at fixed `p`.
struct BinomTable {
    pmf: Vec<Vec<f64>>,
    /// `tail[n][k] = P(X > k)` for `k = 0..=n`.
    tail: Vec<Vec<f64>>,
}

impl BinomTable {
    fn new(n_max: u32, p: f64) -> Self {
        let n_max = n_max as usize;
        let mut ln_fact = vec![0.0; n_max + 1];
        for i in 1..=n_max {
            ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
        }
        let (lp, lq) = (p.ln(), (-p).ln_1p());
        let mut pmf = Vec::with_capacity(n_max + 1);
        let mut tail = Vec::with_capacity(n_max + 1);
        for n in 0..=n_max {
            let row: Vec<f64> = (0..=n)
                .map(|k| {
                    let a = if k > 0 { k as f64 * lp } else { 0.0 };
                    let b = if n > k { (n - k) as f64 * lq } else { 0.0 };
                    (ln_fact[n] - ln_fact[k] - ln_fact[n - k] + a + b).exp()
                })
                .collect();
            let mut t = vec![0.0; n + 1];
            let mut acc = 0.0;
            for k in (0..n).rev() {
                acc += row[k + 1];
                t[k] = acc;
            }
            pmf.push(row);
            tail.push(t);
        }
        Self { pmf, tail }
    }

    /// `P(X > k)` for `X ~ Bin(n, p)`, with `k` possibly negative or `≥ n`.
    #[inline]
    fn gt(&self, n: usize, k: i64) -> f64 {
        if k < 0 {
            1.0
        } else if k as usize >= n {
            0.0
        } else {
            self.tail[n][k as usize]
        }
    }

    fn pet(&self, n1: usize, r1: usize) -> f64 {
        1.0 - self.gt(n1, r1 as i64)
    }

    fn reject(&self, n1: usize, n2: usize, r1: usize, r: usize) -> f64 {
        (r1 + 1..=n1)
            .map(|x1| self.pmf[n1][x1] * self.gt(n2, r as i64 - x1 as i64))
            .sum()
    }
}

pub fn simon_oc(d: &SimonDesign, p: f64) -> SimonOc {
    let t = BinomTable::new(d.n1.max(d.n2), p.clamp(0.0, 1.0));
    let (n1, n2, r1, r) = (d.n1 as usize, d.n2 as usize, d.r1 as usize, d.r as usize);
    let pet = t.pet(n1, r1).clamp(0.0, 1.0);
    SimonOc {
        reject_prob: t.reject(n1, n2, r1, r).clamp(0.0, 1.0),
        expected_n: d.n1 as f64 + (1.0 - pet) * d.n2 as f64,
        pet,
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    design: SimonDesign,
    en0: f64,
}

const EN_TIE: f64 = 1e-12;

fn better_optimal(a: &Candidate, b: &Candidate) -> bool {
    if (a.en0 - b.en0).abs() > EN_TIE {
        return a.en0 < b.en0;
    }
    let key = |c: &Candidate| (c.design.n(), c.design.n1, c.design.r1);
    key(a) < key(b)
}

fn better_minimax(a: &Candidate, b: &Candidate) -> bool {
    if a.design.n() != b.design.n() {
        return a.design.n() < b.design.n();
    }
    if (a.en0 - b.en0).abs() > EN_TIE {
        return a.en0 < b.en0;
    }
    (a.design.n1, a.design.r1) < (b.design.n1, b.design.r1)
}

/// Exhaustive search over all designs with `n1 + n2 ≤ n_max`.
pub fn simon_search(
    p0: f64,
    p1: f64,
    alpha: f64,
    beta: f64,
    n_max: u32,
) -> Result<SimonSearch, SimonError> {
    if !(0.0 < p0 && p0 < p1 && p1 < 1.0) {
        return Err(SimonError::InvalidInput("need 0 < p0 < p1 < 1"));
    }
    if !(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0) {
        return Err(SimonError::InvalidInput("alpha and beta must lie in (0, 1)"));
    }
    if n_max < 2 {
        return Err(SimonError::InvalidInput("n_max must be at least 2"));
    }
    let t0 = BinomTable::new(n_max, p0);
    let t1 = BinomTable::new(n_max, p1);
    let power_floor = 1.0 - beta;
    let mut optimal: Option<Candidate> = None;
    let mut minimax: Option<Candidate> = None;

    for n in 2..=n_max as usize {
        for n1 in 1..n {
            let n2 = n - n1;
            for r1 in 0..n1 {
                // The rejection probability falls as r grows, so the smallest
                // r meeting the size bound gives the most power.
                if t0.reject(n1, n2, r1, n - 1) > alpha {
                    continue;
                }
                let (mut lo, mut hi) = (r1, n - 1);
                while lo < hi {
                    let mid = (lo + hi) / 2;
                    if t0.reject(n1, n2, r1, mid) <= alpha {
                        hi = mid;
                    } else {
                        lo = mid + 1;
                    }
                }
                let r = lo;
                if t1.reject(n1, n2, r1, r) < power_floor {
                    continue;
                }
                let pet0 = t0.pet(n1, r1);
                let cand = Candidate {
                    design: SimonDesign {
                        n1: n1 as u32,
                        n2: n2 as u32,
                        r1: r1 as u32,
                        r: r as u32,
                    },
                    en0: n1 as f64 + (1.0 - pet0) * n2 as f64,
                };
                if optimal.as_ref().is_none_or(|b| better_optimal(&cand, b)) {
                    optimal = Some(cand);
                }
                if minimax.as_ref().is_none_or(|b| better_minimax(&cand, b)) {
                    minimax = Some(cand);
                }
            }
        }
    }
    match (optimal, minimax) {
        (Some(o), Some(m)) => Ok(SimonSearch {
            optimal: o.design,
            minimax: m.design,
        }),
        _ => Err(SimonError::NoFeasibleDesign(n_max)),
    }
}
