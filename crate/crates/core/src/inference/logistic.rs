//! Logistic maximum likelihood with a lower bound on the slope.
//!
//! The unrestricted fit works in centered and scaled dose coordinates and
//! uses damped Newton with an active set for the slope bound. The fit
//! restricted to pass through a fixed probability at a fixed dose has one
//! free parameter and is solved by safeguarded Newton on its derivative.
//!
//! When the MLE does not exist the supremum of the log-likelihood is still
//! well defined; [`logistic_sup`] and [`constrained_sup`] return it together
//! with the limiting curve so that likelihood ratios remain computable.

use serde::{Deserialize, Serialize};

use super::{ActiveConstraint, InferenceError, MleReport, Outcome, TrialData};
use crate::models::{bernoulli_loglik, logistic, logit};

const GRAD_TOL: f64 = 1e-8;
const MAX_NEWTON: usize = 200;
const NEWTON_DECREMENT_TOL: f64 = 1e-10;

/// Limit of a sequence of logistic fits approaching the supremum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FittedCurve {
    Logistic { intercept: f64, slope: f64 },
    /// All outcomes equal: probability 0 or 1 everywhere.
    Constant { p: f64 },
    /// Zero below `threshold`, one above, `at` exactly at it.
    Step { threshold: f64, at: f64 },
}

impl FittedCurve {
    pub fn prob(&self, x: f64) -> f64 {
        match *self {
            FittedCurve::Logistic { intercept, slope } => logistic(intercept + slope * x),
            FittedCurve::Constant { p } => p,
            FittedCurve::Step { threshold, at } => {
                if x < threshold {
                    0.0
                } else if x > threshold {
                    1.0
                } else {
                    at
                }
            }
        }
    }

    pub fn is_logistic(&self) -> bool {
        matches!(self, FittedCurve::Logistic { .. })
    }
}

/// Supremum of a (possibly constrained) logistic log-likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupFit {
    pub curve: FittedCurve,
    pub loglik: f64,
    pub converged: bool,
    pub active_constraints: Vec<ActiveConstraint>,
}

impl SupFit {
    fn into_report(self, reason: &'static str) -> Result<MleReport, InferenceError> {
        match self.curve {
            FittedCurve::Logistic { intercept, slope } => Ok(MleReport {
                intercept,
                slope,
                loglik: self.loglik,
                converged: self.converged,
                active_constraints: self.active_constraints,
            }),
            _ => Err(InferenceError::NonexistentMle(reason)),
        }
    }
}

fn loglik_at(xs: &[f64], hits: &[bool], intercept: f64, slope: f64) -> f64 {
    xs.iter()
        .zip(hits)
        .map(|(&x, &h)| bernoulli_loglik(h, intercept + slope * x))
        .sum()
}

/// Limiting curve when the likelihood has no maximizer with slope ≥ δ.
fn degenerate_sup(xs: &[f64], hits: &[bool]) -> Option<SupFit> {
    let ones = hits.iter().filter(|&&h| h).count();
    let fit = |curve, loglik| SupFit {
        curve,
        loglik,
        converged: true,
        active_constraints: Vec::new(),
    };
    if ones == 0 {
        return Some(fit(FittedCurve::Constant { p: 0.0 }, 0.0));
    }
    if ones == hits.len() {
        return Some(fit(FittedCurve::Constant { p: 1.0 }, 0.0));
    }
    let mut max0 = f64::NEG_INFINITY;
    let mut min1 = f64::INFINITY;
    for (&x, &h) in xs.iter().zip(hits) {
        if h {
            min1 = min1.min(x);
        } else {
            max0 = max0.max(x);
        }
    }
    if max0 < min1 {
        let threshold = 0.5 * (max0 + min1);
        return Some(fit(FittedCurve::Step { threshold, at: 0.5 }, 0.0));
    }
    if max0 == min1 {
        let (mut s, mut n) = (0.0, 0.0);
        for (&x, &h) in xs.iter().zip(hits) {
            if x == max0 {
                n += 1.0;
                s += h as u8 as f64;
            }
        }
        let at = s / n;
        let ll = super::binomial_loglik(s, n, at);
        return Some(fit(FittedCurve::Step { threshold: max0, at }, ll));
    }
    None
}

/// Maximizes over the intercept with the slope fixed, in scaled coordinates.
fn profile_intercept(us: &[f64], hits: &[bool], b: f64, start: f64) -> f64 {
    let mut a = start;
    let f = |a: f64| -> f64 {
        us.iter()
            .zip(hits)
            .map(|(&u, &h)| bernoulli_loglik(h, a + b * u))
            .sum()
    };
    let mut fa = f(a);
    for _ in 0..MAX_NEWTON {
        let (mut g, mut w) = (0.0, 0.0);
        for (&u, &h) in us.iter().zip(hits) {
            let p = logistic(a + b * u);
            g += h as u8 as f64 - p;
            w += p * (1.0 - p);
        }
        if g.abs() < GRAD_TOL {
            break;
        }
        let mut step = if w > 1e-300 { g / w } else { g.signum() };
        let mut accepted = false;
        for _ in 0..60 {
            let cand = a + step;
            let fc = f(cand);
            if fc >= fa {
                a = cand;
                fa = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    a
}

/// Unrestricted fit with slope ≥ δ, or the limiting curve if none exists.
pub fn logistic_sup(xs: &[f64], hits: &[bool], delta: f64) -> Result<SupFit, InferenceError> {
    if xs.is_empty() {
        return Err(InferenceError::Empty);
    }
    if let Some(sup) = degenerate_sup(xs, hits) {
        return Ok(sup);
    }
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - xbar).powi(2)).sum::<f64>() / n;
    let sx = if var > 0.0 { var.sqrt() } else { 1.0 };
    let us: Vec<f64> = xs.iter().map(|x| (x - xbar) / sx).collect();
    let bmin = delta * sx;
    let mean = hits.iter().filter(|&&h| h).count() as f64 / n;

    let ll = |a: f64, b: f64| -> f64 {
        us.iter()
            .zip(hits)
            .map(|(&u, &h)| bernoulli_loglik(h, a + b * u))
            .sum()
    };
    let grad_hess = |a: f64, b: f64| {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&u, &h) in us.iter().zip(hits) {
            let p = logistic(a + b * u);
            let r = h as u8 as f64 - p;
            let w = p * (1.0 - p);
            ga += r;
            gb += r * u;
            haa += w;
            hab += w * u;
            hbb += w * u * u;
        }
        (ga, gb, haa, hab, hbb)
    };

    let mut a = profile_intercept(&us, hits, bmin, logit(mean));
    let mut b = bmin;
    let (_, gb0, ..) = grad_hess(a, b);
    let finish = |a: f64, b: f64, converged: bool, at_bound: bool| {
        let slope = b / sx;
        let intercept = a - slope * xbar;
        let active_constraints = if at_bound {
            vec![ActiveConstraint::SlopeLowerBound { delta }]
        } else {
            Vec::new()
        };
        SupFit {
            curve: FittedCurve::Logistic {
                intercept,
                slope: if at_bound { delta } else { slope },
            },
            loglik: loglik_at(xs, hits, intercept, if at_bound { delta } else { slope }),
            converged,
            active_constraints,
        }
    };
    if gb0 <= 0.0 || var == 0.0 {
        return Ok(finish(a, b, true, true));
    }

    let mut f = ll(a, b);
    let mut converged = false;
    for _ in 0..MAX_NEWTON {
        let (ga, gb, haa, hab, hbb) = grad_hess(a, b);
        let at_bound = b <= bmin;
        if (ga * ga + gb * gb).sqrt() < GRAD_TOL || (at_bound && ga.abs() < GRAD_TOL && gb <= 0.0) {
            converged = true;
            break;
        }
        let det = haa * hbb - hab * hab;
        let (mut da, mut db) = if det > 1e-300 {
            ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det)
        } else {
            (ga / haa.max(1e-300), 0.0)
        };
        if at_bound && db < 0.0 {
            da = ga / haa.max(1e-300);
            db = 0.0;
        }
        let tmax = if db < 0.0 { ((b - bmin) / -db).min(1.0) } else { 1.0 };
        let slope_dir = ga * da + gb * db;
        if slope_dir < NEWTON_DECREMENT_TOL {
            // Inside the quadratic region the log-likelihood no longer
            // resolves the improvement, so take the step unchecked.
            a += tmax * da;
            b = (b + tmax * db).max(bmin);
            f = ll(a, b);
            if slope_dir < 1e-24 {
                converged = true;
                break;
            }
            continue;
        }
        let mut t = tmax;
        let mut moved = false;
        while t > 1e-14 {
            let (ca, cb) = (a + t * da, (b + t * db).max(bmin));
            let fc = ll(ca, cb);
            if fc >= f + 1e-4 * t * slope_dir {
                a = ca;
                b = cb;
                f = fc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            let (ga, gb, ..) = grad_hess(a, b);
            converged = (ga * ga + gb * gb).sqrt() < 1e-6;
            break;
        }
    }
    let at_bound = b <= bmin;
    Ok(finish(a, b, converged, at_bound))
}

/// Fit through probability `p` at dose `x0` with slope ≥ δ, or its limit.
///
/// Writing the intercept as `logit(p) - s·x0` leaves the slope `s` as the
/// only free parameter, and the log-likelihood is concave in it.
pub fn constrained_sup(
    xs: &[f64],
    hits: &[bool],
    x0: f64,
    p: f64,
    delta: f64,
) -> Result<SupFit, InferenceError> {
    if xs.is_empty() {
        return Err(InferenceError::Empty);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(InferenceError::InvalidProbability(p));
    }
    let l = logit(p);
    let tol = 1e-12 * x0.abs().max(1.0);
    let ds: Vec<f64> = xs
        .iter()
        .map(|&x| if (x - x0).abs() <= tol { 0.0 } else { x - x0 })
        .collect();
    let deriv = |s: f64| -> (f64, f64) {
        let (mut g, mut h) = (0.0, 0.0);
        for (&d, &y) in ds.iter().zip(hits) {
            if d == 0.0 {
                continue;
            }
            let q = logistic(l + s * d);
            g += (y as u8 as f64 - q) * d;
            h -= q * (1.0 - q) * d * d;
        }
        (g, h)
    };
    let value = |s: f64| -> f64 {
        ds.iter()
            .zip(hits)
            .map(|(&d, &y)| bernoulli_loglik(y, l + s * d))
            .sum()
    };
    let boundary = ActiveConstraint::Boundary { x: x0, p };
    let fit = |s: f64, converged: bool, at_bound: bool| SupFit {
        curve: FittedCurve::Logistic {
            intercept: l - s * x0,
            slope: s,
        },
        loglik: value(s),
        converged,
        active_constraints: if at_bound {
            vec![boundary, ActiveConstraint::SlopeLowerBound { delta }]
        } else {
            vec![boundary]
        },
    };

    let (g0, _) = deriv(delta);
    if g0 <= 0.0 {
        return Ok(fit(delta, true, true));
    }
    let diverges = ds
        .iter()
        .zip(hits)
        .all(|(&d, &y)| d == 0.0 || (d > 0.0) == y);
    if diverges {
        let loglik = ds
            .iter()
            .zip(hits)
            .filter(|(&d, _)| d == 0.0)
            .map(|(_, &y)| bernoulli_loglik(y, l))
            .sum();
        return Ok(SupFit {
            curve: FittedCurve::Step { threshold: x0, at: p },
            loglik,
            converged: true,
            active_constraints: vec![boundary],
        });
    }

    let mut lo = delta;
    let mut hi = (2.0 * delta).max(1e-3);
    while deriv(hi).0 > 0.0 {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Ok(fit(lo, false, false));
        }
    }
    let mut s = 0.5 * (lo + hi);
    let mut converged = false;
    for _ in 0..MAX_NEWTON {
        let (g, h) = deriv(s);
        if g > 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let scale: f64 = ds.iter().map(|d| d.abs()).sum::<f64>().max(1.0);
        if g.abs() <= 1e-12 * scale || hi - lo <= 1e-15 * hi {
            converged = true;
            break;
        }
        let newton = if h < 0.0 { s - g / h } else { f64::NAN };
        s = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok(fit(s, converged, false))
}

/// Slope-bounded logistic MLE for toxicity or efficacy.
pub fn logistic_mle(
    data: &TrialData,
    outcome: Outcome,
    delta: f64,
) -> Result<MleReport, InferenceError> {
    let xs = data.doses();
    let hits = data.outcomes(outcome);
    logistic_sup(&xs, &hits, delta)?.into_report("outcomes are separated by dose")
}

/// Efficacy MLE restricted to `p(η̂) = p_j` and slope ≥ δ.
pub fn constrained_logistic_mle(
    data: &TrialData,
    eta_hat: f64,
    p_j: f64,
    delta: f64,
) -> Result<MleReport, InferenceError> {
    let xs = data.doses();
    let hits = data.outcomes(Outcome::Efficacy);
    constrained_sup(&xs, &hits, eta_hat, p_j, delta)?
        .into_report("slope diverges under the boundary constraint")
}
