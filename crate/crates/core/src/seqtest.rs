//! Group-sequential GLR tests of efficacy at the estimated MTD.
//!
//! At analysis `k` the MTD is re-estimated from all toxicity data, the
//! efficacy log-likelihood is maximized with and without the boundary
//! constraint `p(η̂_k) = p_j`, and the gaps `ℓ_{k,0}`, `ℓ_{k,1}` are compared
//! with the bounds `b`, `b̃` and `c`.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{
    constrained_isotonic_mle, constrained_sup, dependent_iso_mle, dependent_iso_pinned,
    iso_mtd_observed, isotonic_loglik, logistic_sup, pava_isotonic_mle, DoseCounts, FittedCurve,
    InferenceError, Outcome, Side, TrialData, DEFAULT_DELTA,
};
use crate::models::{logit, DoseDomain, DoseGrid};
use crate::phase1::{Phase1Error, PriorGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeqTestError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("analysis index {k} outside 1..={k_max}")]
    AnalysisOutOfRange { k: usize, k_max: usize },
    #[error("isotonic analysis needs a grid dose domain")]
    NeedsGrid,
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Phase1(#[from] Phase1Error),
}

/// Phase I size `m` followed by Phase II groups `m_1, …, m_K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSchedule {
    pub m: usize,
    pub group_sizes: Vec<usize>,
}

impl GroupSchedule {
    pub fn new(m: usize, group_sizes: Vec<usize>) -> Result<Self, SeqTestError> {
        let s = Self { m, group_sizes };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SeqTestError> {
        if self.m == 0 {
            return Err(SeqTestError::InvalidSchedule("m must be at least 1".into()));
        }
        if self.group_sizes.is_empty() {
            return Err(SeqTestError::InvalidSchedule("at least one group is required".into()));
        }
        if self.group_sizes.contains(&0) {
            return Err(SeqTestError::InvalidSchedule("group sizes must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of analyses `K`.
    pub fn k_max(&self) -> usize {
        self.group_sizes.len()
    }

    /// `τ_1, …, τ_K`.
    pub fn taus(&self) -> Vec<usize> {
        self.group_sizes
            .iter()
            .scan(self.m, |acc, g| {
                *acc += g;
                Some(*acc)
            })
            .collect()
    }

    /// `τ_k`, with `τ_0 = m`.
    pub fn tau(&self, k: usize) -> usize {
        self.m + self.group_sizes[..k].iter().sum::<usize>()
    }

    pub fn max_n(&self) -> usize {
        self.tau(self.k_max())
    }

    /// The `k` with `τ_k = n`, if any.
    pub fn analysis_at(&self, n: usize) -> Option<usize> {
        self.taus().iter().position(|&t| t == n).map(|i| i + 1)
    }
}

fn default_alpha() -> f64 {
    0.05
}
fn default_beta() -> f64 {
    0.2
}
fn default_epsilon() -> f64 {
    1.0 / 3.0
}

/// Stopping bounds and the hypotheses they test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Early efficacy bound.
    #[serde(with = "crate::serde_inf")]
    pub b: f64,
    /// Early futility bound.
    #[serde(with = "crate::serde_inf")]
    pub b_tilde: f64,
    /// Final bound.
    #[serde(with = "crate::serde_inf")]
    pub c: f64,
    pub p0: f64,
    pub p1: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Thresholds {
    pub fn new(b: f64, b_tilde: f64, c: f64, p0: f64, p1: f64) -> Self {
        Self {
            b,
            b_tilde,
            c,
            p0,
            p1,
            alpha: default_alpha(),
            beta: default_beta(),
            epsilon: default_epsilon(),
        }
    }

    /// No early stopping: a single test at the last analysis.
    pub fn fixed_sample(c: f64, p0: f64, p1: f64) -> Self {
        Self::new(f64::INFINITY, f64::INFINITY, c, p0, p1)
    }

    pub fn validate(&self) -> Result<(), SeqTestError> {
        let bad = |s: String| Err(SeqTestError::InvalidThresholds(s));
        if !(self.p0 > 0.0 && self.p0 < self.p1 && self.p1 < 1.0) {
            return bad(format!("need 0 < p0 < p1 < 1, got p0 = {}, p1 = {}", self.p0, self.p1));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return bad(format!("epsilon = {} must lie in (0, 1/2)", self.epsilon));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} = {v} must lie in (0, 1)"));
            }
        }
        for (name, v) in [("b", self.b), ("b_tilde", self.b_tilde), ("c", self.c)] {
            if v.is_nan() {
                return bad(format!("{name} is not a number"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Continue,
    RejectH0,
    AcceptH0,
}

impl Verdict {
    pub fn is_terminal(self) -> bool {
        self != Verdict::Continue
    }
}

/// GLR statistics and the point estimate of efficacy at the MTD estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlrStats {
    pub l0: f64,
    pub l1: f64,
    pub p_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterimDecision {
    pub verdict: Verdict,
    pub k: usize,
    pub l0: f64,
    pub l1: f64,
    pub eta_hat: f64,
    pub p_hat: f64,
}

#[inline]
fn crosses(stat: f64, bound: f64) -> bool {
    bound != f64::INFINITY && stat >= bound
}

/// Stopping rule at analysis `k` of `k_max`. Efficacy is checked before
/// futility.
pub fn verdict(k: usize, k_max: usize, s: &GlrStats, th: &Thresholds) -> Verdict {
    assert!(
        (1..=k_max).contains(&k),
        "analysis {k} outside 1..={k_max}"
    );
    if k < k_max {
        if s.p_hat > th.p0 && crosses(s.l0, th.b) {
            Verdict::RejectH0
        } else if s.p_hat < th.p1 && crosses(s.l1, th.b_tilde) {
            Verdict::AcceptH0
        } else {
            Verdict::Continue
        }
    } else if s.p_hat > th.p0 && crosses(s.l0, th.c) {
        Verdict::RejectH0
    } else {
        Verdict::AcceptH0
    }
}

pub fn interim_decision(
    k: usize,
    k_max: usize,
    stats: &GlrStats,
    eta_hat: f64,
    th: &Thresholds,
) -> Result<InterimDecision, SeqTestError> {
    if !(1..=k_max).contains(&k) {
        return Err(SeqTestError::AnalysisOutOfRange { k, k_max });
    }
    Ok(InterimDecision {
        verdict: verdict(k, k_max, stats, th),
        k,
        l0: stats.l0,
        l1: stats.l1,
        eta_hat,
        p_hat: stats.p_hat,
    })
}

/// Statistics for an empty efficacy sample: no evidence either way.
fn no_evidence(th: &Thresholds) -> GlrStats {
    GlrStats {
        l0: 0.0,
        l1: 0.0,
        p_hat: th.p0,
    }
}

/// Logistic GLR statistics for `p(η̂) = p_0` and `p(η̂) = p_1`.
pub fn glr_statistics_parametric(
    data: &TrialData,
    eta_hat: f64,
    th: &Thresholds,
    delta: f64,
) -> Result<GlrStats, InferenceError> {
    if data.is_empty() {
        return Ok(no_evidence(th));
    }
    let xs = data.doses();
    let zs = data.outcomes(Outcome::Efficacy);
    let sup = logistic_sup(&xs, &zs, delta)?;
    let stat = |p: f64| -> Result<f64, InferenceError> {
        if let FittedCurve::Logistic { intercept, slope } = sup.curve {
            let lp = logit(p);
            if (intercept + slope * eta_hat - lp).abs() <= 1e-12 * lp.abs().max(1.0) {
                return Ok(0.0);
            }
        }
        let con = constrained_sup(&xs, &zs, eta_hat, p, delta)?;
        Ok((sup.loglik - con.loglik).max(0.0))
    };
    Ok(GlrStats {
        l0: stat(th.p0)?,
        l1: stat(th.p1)?,
        p_hat: sup.curve.prob(eta_hat),
    })
}

/// Order-restricted GLR statistics for `π(i*) ≤ p_0` and `π(i*) ≥ p_1`.
pub fn glr_statistics_isotonic(
    counts: &DoseCounts,
    i_star: usize,
    th: &Thresholds,
    dependent: bool,
) -> GlrStats {
    if counts.total() == 0 {
        return no_evidence(th);
    }
    if !dependent {
        let pi = pava_isotonic_mle(counts, Outcome::Efficacy);
        let ll = isotonic_loglik(counts, Outcome::Efficacy, &pi);
        let stat = |p: f64, side: Side| {
            let con = constrained_isotonic_mle(counts, Outcome::Efficacy, i_star, p, side);
            (ll - isotonic_loglik(counts, Outcome::Efficacy, &con)).max(0.0)
        };
        return GlrStats {
            l0: stat(th.p0, Side::AtMost),
            l1: stat(th.p1, Side::AtLeast),
            p_hat: pi[i_star],
        };
    }
    let free = dependent_iso_mle(counts, None);
    let stat = |p: f64, side: Side| {
        if side.satisfied(free.pi[i_star], p) {
            0.0
        } else {
            (free.loglik - dependent_iso_pinned(counts, i_star, p).loglik).max(0.0)
        }
    };
    GlrStats {
        l0: stat(th.p0, Side::AtMost),
        l1: stat(th.p1, Side::AtLeast),
        p_hat: free.pi[i_star],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    /// Logistic toxicity and efficacy curves.
    Parametric,
    /// Monotone per-level probabilities on a dose grid.
    Isotonic,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_resolution() -> usize {
    101
}

/// How interim analyses estimate the MTD and compute the statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSpec {
    pub mode: AnalysisMode,
    /// Isotonic only: model toxicity and efficacy jointly via cross ratios.
    #[serde(default)]
    pub dependent: bool,
    /// Restrict the GLR statistics to doses within this distance of `η̂_k`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<f64>,
    /// Lower bound on fitted logistic slopes.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Resolution of the flat-prior posterior used when the toxicity MLE
    /// does not exist.
    #[serde(default = "default_resolution")]
    pub prior_resolution: usize,
}

impl AnalysisSpec {
    pub fn parametric() -> Self {
        Self {
            mode: AnalysisMode::Parametric,
            dependent: false,
            window: None,
            delta: DEFAULT_DELTA,
            prior_resolution: default_resolution(),
        }
    }

    pub fn isotonic(dependent: bool) -> Self {
        Self {
            mode: AnalysisMode::Isotonic,
            dependent,
            ..Self::parametric()
        }
    }

    pub fn validate(&self, domain: &DoseDomain) -> Result<(), SeqTestError> {
        let bad = |s: &str| Err(SeqTestError::InvalidSchedule(s.into()));
        if self.mode == AnalysisMode::Isotonic && domain.grid().is_none() {
            return Err(SeqTestError::NeedsGrid);
        }
        if self.dependent && self.mode != AnalysisMode::Isotonic {
            return bad("the dependent model is only available in isotonic mode");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta must be positive and finite");
        }
        if matches!(self.window, Some(r) if !(r > 0.0)) {
            return bad("window radius must be positive");
        }
        if self.prior_resolution < 2 {
            return bad("prior_resolution must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtdSource {
    /// Toxicity MLE, clipped to the dose range.
    Mle,
    /// Flat-prior posterior mean, used when the MLE does not exist.
    Bayes,
    /// Smallest grid level maximizing the profile likelihood.
    ProfileGrid,
    /// Order-restricted estimate over treated levels.
    Isotonic,
    /// A Phase I estimator's value, snapped to the domain.
    Phase1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtdEstimate {
    pub eta: f64,
    /// Grid index of `eta` on a grid domain.
    pub level: Option<usize>,
    pub source: MtdSource,
}

impl MtdEstimate {
    pub fn from_phase1(domain: &DoseDomain, eta: f64) -> Self {
        let eta = domain.snap(eta);
        Self {
            eta,
            level: domain.grid().and_then(|g| g.level_of(eta)),
            source: MtdSource::Phase1,
        }
    }
}

/// Smallest level `λ` maximizing `sup{ℓ(θ) : F(λ; θ) = q, θ₂ ≥ δ}`.
pub fn profile_grid_mtd(
    data: &TrialData,
    grid: &DoseGrid,
    q: f64,
    delta: f64,
) -> Result<usize, InferenceError> {
    let xs = data.doses();
    let ys = data.outcomes(Outcome::Toxicity);
    let mut best = (0, f64::NEG_INFINITY);
    for (j, &lambda) in grid.levels.iter().enumerate() {
        let ll = constrained_sup(&xs, &ys, lambda, q, delta)?.loglik;
        if j == 0 || ll > best.1 + 1e-10 * best.1.abs().max(1.0) {
            best = (j, ll);
        }
    }
    Ok(best.0)
}

/// MTD estimate from all toxicity data so far.
pub fn estimate_mtd(
    spec: &AnalysisSpec,
    domain: &DoseDomain,
    q: f64,
    data: &TrialData,
) -> Result<MtdEstimate, SeqTestError> {
    match (spec.mode, domain.grid()) {
        (AnalysisMode::Isotonic, None) => Err(SeqTestError::NeedsGrid),
        (AnalysisMode::Isotonic, Some(grid)) => {
            let counts = DoseCounts::from_data(data, &grid)?;
            let phi = pava_isotonic_mle(&counts, Outcome::Toxicity);
            let i = iso_mtd_observed(&phi, &counts, q);
            Ok(MtdEstimate {
                eta: grid.levels[i],
                level: Some(i),
                source: MtdSource::Isotonic,
            })
        }
        (AnalysisMode::Parametric, Some(grid)) => {
            let i = profile_grid_mtd(data, &grid, q, spec.delta)?;
            Ok(MtdEstimate {
                eta: grid.levels[i],
                level: Some(i),
                source: MtdSource::ProfileGrid,
            })
        }
        (AnalysisMode::Parametric, None) => {
            let range = domain.range();
            if !data.is_empty() {
                let xs = data.doses();
                let ys = data.outcomes(Outcome::Toxicity);
                if let FittedCurve::Logistic { intercept, slope } =
                    logistic_sup(&xs, &ys, spec.delta)?.curve
                {
                    return Ok(MtdEstimate {
                        eta: range.clip((logit(q) - intercept) / slope),
                        level: None,
                        source: MtdSource::Mle,
                    });
                }
            }
            let mut post =
                PriorGrid::uniform(q, range, spec.prior_resolution, spec.prior_resolution)?;
            post.update_all(data)?;
            Ok(MtdEstimate {
                eta: post.mean_eta(),
                level: None,
                source: MtdSource::Bayes,
            })
        }
    }
}

/// Dose for the next group: `η̂_k` clipped to the range, or its grid level.
pub fn next_dose(domain: &DoseDomain, mtd: &MtdEstimate) -> f64 {
    match (domain.grid(), mtd.level) {
        (Some(g), Some(i)) => g.levels[i],
        _ => domain.snap(domain.range().clip(mtd.eta)),
    }
}

/// GLR statistics at `mtd`, on the windowed data if a window is set.
pub fn glr_statistics(
    spec: &AnalysisSpec,
    domain: &DoseDomain,
    data: &TrialData,
    mtd: &MtdEstimate,
    th: &Thresholds,
) -> Result<GlrStats, SeqTestError> {
    let used: Cow<'_, TrialData> = match spec.window {
        Some(r) => Cow::Owned(data.window(mtd.eta, r)),
        None => Cow::Borrowed(data),
    };
    match spec.mode {
        AnalysisMode::Parametric => {
            Ok(glr_statistics_parametric(&used, mtd.eta, th, spec.delta)?)
        }
        AnalysisMode::Isotonic => {
            let grid = domain.grid().ok_or(SeqTestError::NeedsGrid)?;
            let counts = DoseCounts::from_data(&used, &grid)?;
            let i_star = match mtd.level {
                Some(i) => i,
                None => grid.level_of(mtd.eta).ok_or(InferenceError::OffGrid(mtd.eta))?,
            };
            Ok(glr_statistics_isotonic(&counts, i_star, th, spec.dependent))
        }
    }
}

/// One interim analysis: the estimate it used, its statistics and decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub mtd: MtdEstimate,
    pub stats: GlrStats,
    pub n: usize,
    pub decision: InterimDecision,
}

#[allow(clippy::too_many_arguments)]
pub fn run_analysis(
    spec: &AnalysisSpec,
    domain: &DoseDomain,
    data: &TrialData,
    mtd: MtdEstimate,
    k: usize,
    k_max: usize,
    th: &Thresholds,
) -> Result<Analysis, SeqTestError> {
    let stats = glr_statistics(spec, domain, data, &mtd, th)?;
    let decision = interim_decision(k, k_max, &stats, mtd.eta, th)?;
    Ok(Analysis {
        mtd,
        stats,
        n: data.len(),
        decision,
    })
}
