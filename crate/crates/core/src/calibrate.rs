//! Bootstrap calibration of the implied alternative and the stopping bounds,
//! conditional on the Phase I data `F₀`.
//!
//! Toxicity is simulated from the Phase I fit and efficacy from the fit
//! constrained to `p(η̃) = p_j`. All probabilities are estimated on one set
//! of simulated paths, so every threshold search is an exact quantile of
//! fixed path statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{
    constrained_sup, dependent_iso_pinned, pava_isotonic_mle, pinned_isotonic, DoseCounts,
    FittedCurve, InferenceError, Outcome, TrialData,
};
use crate::models::{dale_cells, logit, DoseDomain, DoseGrid, EfficacyParams, ModelError, ToxicityParams};
use crate::phase1::{close_out, Estimator, Phase1Config, Phase1Error};
use crate::phase2::{fill_efficacy, simulate_tox_path, MtdPolicy, Phase2Plan, ToxPath};
use crate::rng::PatientUniforms;
use crate::seqtest::{
    glr_statistics, verdict, AnalysisMode, AnalysisSpec, GlrStats, GroupSchedule, MtdEstimate,
    SeqTestError, Thresholds, Verdict,
};

/// Fewest crossing paths a threshold may rest on.
pub const MIN_CROSSINGS: usize = 10;
/// Slope cap for the efficacy plug-in, in units of `1 / (x_max - x_min)`.
pub const PLUGIN_SLOPE_SPAN: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("invalid calibration spec: {0}")]
    InvalidSpec(String),
    #[error("{stage}: spend {target} leaves only {crossings} crossing paths out of {n_boot}; increase n_boot")]
    DegenerateSpend {
        stage: &'static str,
        target: f64,
        crossings: usize,
        n_boot: usize,
    },
    #[error("power 1 - beta is unattainable at the maximum sample size; best achievable power is {max_power}")]
    Unattainable { max_power: f64 },
    #[error(transparent)]
    SeqTest(#[from] SeqTestError),
    #[error(transparent)]
    Phase1(#[from] Phase1Error),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Model(#[from] ModelError),
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
fn default_q() -> f64 {
    1.0 / 3.0
}
fn default_policy() -> MtdPolicy {
    MtdPolicy::Updating
}
fn default_estimator() -> Estimator {
    Estimator::Mle
}
fn default_true() -> bool {
    true
}
fn default_omega() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub n_boot: usize,
    pub seed: u64,
    pub schedule: GroupSchedule,
    /// `F₀`.
    pub phase1_data: TrialData,
    pub analysis: AnalysisSpec,
    pub domain: DoseDomain,
    #[serde(default = "default_q")]
    pub q: f64,
    pub p0: f64,
    /// Alternative to use instead of the implied one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p1: Option<f64>,
    #[serde(default = "default_policy")]
    pub policy: MtdPolicy,
    /// Phase I estimator that gives `η̃` in parametric mode.
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    /// When false, `b = ∞` and the whole type I error is spent at the end.
    #[serde(default = "default_true")]
    pub early_efficacy: bool,
    #[serde(default = "default_omega")]
    pub omega: f64,
}

impl CalibrationSpec {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |s: String| Err(CalibrationError::InvalidSpec(s));
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("q", self.q), ("p0", self.p0)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} = {v} must lie in (0, 1)"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return bad(format!("epsilon = {} must lie in (0, 1/2)", self.epsilon));
        }
        if self.n_boot < 100 {
            return bad(format!("n_boot = {} must be at least 100", self.n_boot));
        }
        if let Some(p1) = self.p1 {
            if !(p1 > self.p0 && p1 < 1.0) {
                return bad(format!("p1 = {p1} must lie in (p0, 1)"));
            }
        }
        self.schedule.validate()?;
        self.analysis.validate(&self.domain)?;
        if self.phase1_data.len() != self.schedule.m {
            return bad(format!(
                "phase1_data has {} records but the schedule has m = {}",
                self.phase1_data.len(),
                self.schedule.m
            ));
        }
        if self.phase1_data.is_empty() {
            return bad("phase1_data is empty".into());
        }
        Ok(())
    }
}

/// Toxicity model the bootstrap simulates from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ToxPlugin {
    Logistic(ToxicityParams),
    Levels { grid: DoseGrid, phi: Vec<f64> },
}

impl ToxPlugin {
    pub fn prob(&self, x: f64) -> f64 {
        match self {
            ToxPlugin::Logistic(th) => th.prob(x),
            ToxPlugin::Levels { grid, phi } => phi[level(grid, x)],
        }
    }
}

/// Efficacy model on the boundary `p(η̃) = p_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EffPlugin {
    Logistic(EfficacyParams),
    Levels {
        grid: DoseGrid,
        pi: Vec<f64>,
    },
    /// Per-level `P(z = 1 | y = 0)` and `P(z = 1 | y = 1)` from the joint fit.
    Dependent {
        grid: DoseGrid,
        pi: Vec<f64>,
        rho: Vec<f64>,
        given_y0: Vec<f64>,
        given_y1: Vec<f64>,
    },
}

impl EffPlugin {
    pub fn prob_given(&self, x: f64, toxic: bool) -> f64 {
        match self {
            EffPlugin::Logistic(ps) => ps.prob(x),
            EffPlugin::Levels { grid, pi } => pi[level(grid, x)],
            EffPlugin::Dependent {
                grid,
                given_y0,
                given_y1,
                ..
            } => {
                let i = level(grid, x);
                if toxic {
                    given_y1[i]
                } else {
                    given_y0[i]
                }
            }
        }
    }
}

fn level(grid: &DoseGrid, x: f64) -> usize {
    grid.level_of(x)
        .unwrap_or_else(|| panic!("dose {x} is not a grid level"))
}

/// Everything the bootstrap needs that depends only on the calibration inputs.
#[derive(Debug, Clone)]
pub struct Bootstrap {
    pub plan: Phase2Plan,
    pub p0: f64,
    pub phase1_data: TrialData,
    /// `η̃`, the MTD estimate at the end of Phase I.
    pub initial: MtdEstimate,
    pub tox: ToxPlugin,
    counts: Option<DoseCounts>,
}

/// One simulated path: toxicity data plus the patient uniforms.
#[derive(Debug, Clone)]
pub struct BootPath {
    pub tox: ToxPath,
    pub u_eff: Vec<f64>,
}

impl Bootstrap {
    pub fn new(spec: &CalibrationSpec) -> Result<Self, CalibrationError> {
        spec.validate()?;
        let plan = Phase2Plan {
            spec: spec.analysis.clone(),
            domain: spec.domain.clone(),
            q: spec.q,
            schedule: spec.schedule.clone(),
            policy: spec.policy,
        };
        let data = spec.phase1_data.clone();
        let (initial, tox, counts) = match spec.analysis.mode {
            AnalysisMode::Parametric => {
                let cfg = Phase1Config {
                    q: spec.q,
                    omega: spec.omega,
                    n_rho: spec.analysis.prior_resolution,
                    n_eta: spec.analysis.prior_resolution,
                    ..Phase1Config::ewoc(spec.schedule.m)
                };
                let p1 = close_out(&cfg, &spec.domain, data.clone(), spec.analysis.delta)?;
                let initial = MtdEstimate::from_phase1(&spec.domain, p1.estimates.eta(spec.estimator));
                (initial, ToxPlugin::Logistic(p1.estimates.theta), None)
            }
            AnalysisMode::Isotonic => {
                let grid = spec.domain.grid().ok_or(SeqTestError::NeedsGrid)?;
                let counts = DoseCounts::from_data(&data, &grid)?;
                let initial = crate::seqtest::estimate_mtd(&spec.analysis, &spec.domain, spec.q, &data)?;
                let phi = pava_isotonic_mle(&counts, Outcome::Toxicity);
                (initial, ToxPlugin::Levels { grid, phi }, Some(counts))
            }
        };
        Ok(Self {
            plan,
            p0: spec.p0,
            phase1_data: data,
            initial,
            tox,
            counts,
        })
    }

    pub fn eta_tilde(&self) -> f64 {
        self.initial.eta
    }

    /// The `F₀` efficacy fit under `p(η̃) = p`.
    pub fn eff_plugin(&self, p: f64) -> Result<EffPlugin, CalibrationError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(InferenceError::InvalidProbability(p).into());
        }
        let eta = self.eta_tilde();
        match (&self.counts, &self.tox) {
            (None, _) => {
                let xs = self.phase1_data.doses();
                let zs = self.phase1_data.outcomes(Outcome::Efficacy);
                let range = self.plan.domain.range();
                let cap = PLUGIN_SLOPE_SPAN / (range.x_max - range.x_min);
                let slope = match constrained_sup(&xs, &zs, eta, p, self.plan.spec.delta)?.curve {
                    FittedCurve::Logistic { slope, .. } => slope.min(cap),
                    _ => cap,
                };
                Ok(EffPlugin::Logistic(EfficacyParams::new(logit(p) - slope * eta, slope)?))
            }
            (Some(counts), ToxPlugin::Levels { grid, phi }) => {
                let i = self.initial.level.expect("isotonic estimates carry a level");
                if !self.plan.spec.dependent {
                    return Ok(EffPlugin::Levels {
                        grid: grid.clone(),
                        pi: pinned_isotonic(counts, Outcome::Efficacy, i, p),
                    });
                }
                let fit = dependent_iso_pinned(counts, i, p);
                let mut given_y0 = Vec::with_capacity(grid.len());
                let mut given_y1 = Vec::with_capacity(grid.len());
                for ((&pi, &ph), &rho) in fit.pi.iter().zip(phi).zip(&fit.rho) {
                    let (a, b) = match dale_cells(pi, ph, rho) {
                        Ok(c) => (c.efficacy_given(false), c.efficacy_given(true)),
                        Err(_) => (pi, pi),
                    };
                    given_y0.push(a);
                    given_y1.push(b);
                }
                Ok(EffPlugin::Dependent {
                    grid: grid.clone(),
                    pi: fit.pi,
                    rho: fit.rho,
                    given_y0,
                    given_y1,
                })
            }
            (Some(_), ToxPlugin::Logistic(_)) => unreachable!("isotonic plug-ins use levels"),
        }
    }

    /// Toxicity paths for replications `0..n`.
    pub fn paths(&self, n: usize, seed: u64) -> Result<Vec<BootPath>, CalibrationError> {
        let max_n = self.plan.schedule.max_n();
        (0..n as u64)
            .into_par_iter()
            .map(|rep| {
                let u = PatientUniforms::draw(seed, rep, max_n);
                let tox = simulate_tox_path(
                    &self.plan,
                    &self.phase1_data,
                    self.initial,
                    |x| self.tox.prob(x),
                    &u.tox,
                )?;
                Ok(BootPath { tox, u_eff: u.eff })
            })
            .collect()
    }

    fn with_efficacy(&self, path: &BootPath, eff: &EffPlugin) -> TrialData {
        let mut d = path.tox.data.clone();
        fill_efficacy(&mut d, self.plan.schedule.m, |x, y| eff.prob_given(x, y), &path.u_eff);
        d
    }

    fn probe(&self, p1: f64) -> Thresholds {
        Thresholds::fixed_sample(0.0, self.p0, p1)
    }

    /// Statistics at every analysis, ignoring stopping.
    pub fn path_stats(
        &self,
        path: &BootPath,
        eff: &EffPlugin,
        p1: f64,
    ) -> Result<Vec<GlrStats>, CalibrationError> {
        let d = self.with_efficacy(path, eff);
        let th = self.probe(p1);
        self.plan
            .schedule
            .taus()
            .iter()
            .zip(&path.tox.mtds)
            .map(|(&tau, mtd)| {
                Ok(glr_statistics(&self.plan.spec, &self.plan.domain, &d.head(tau), mtd, &th)?)
            })
            .collect()
    }

    /// Statistics at the last analysis only.
    pub fn final_stats(&self, path: &BootPath, eff: &EffPlugin, p1: f64) -> Result<GlrStats, CalibrationError> {
        let d = self.with_efficacy(path, eff);
        let mtd = path.tox.mtds.last().expect("schedule has at least one group");
        Ok(glr_statistics(&self.plan.spec, &self.plan.domain, &d, mtd, &self.probe(p1))?)
    }

    fn all_stats(&self, paths: &[BootPath], eff: &EffPlugin, p1: f64) -> Result<Vec<Vec<GlrStats>>, CalibrationError> {
        paths.par_iter().map(|p| self.path_stats(p, eff, p1)).collect()
    }

    fn all_final(&self, paths: &[BootPath], eff: &EffPlugin, p1: f64) -> Result<Vec<GlrStats>, CalibrationError> {
        paths.par_iter().map(|p| self.final_stats(p, eff, p1)).collect()
    }
}

/// Terminal verdict and its analysis index for a path of statistics.
pub fn path_outcome(stats: &[GlrStats], th: &Thresholds) -> (usize, Verdict) {
    let k_max = stats.len();
    for (i, s) in stats.iter().enumerate() {
        let v = verdict(i + 1, k_max, s, th);
        if v.is_terminal() {
            return (i + 1, v);
        }
    }
    unreachable!("the last analysis is always terminal")
}

fn crossings_allowed(target: f64, n: usize) -> usize {
    (target * n as f64 + 1e-9).floor() as usize
}

/// Smallest observed value with at most `⌊target·n⌋` eligible values at or
/// above it. `None` marks a path that cannot cross.
pub fn spend_threshold(
    values: &[Option<f64>],
    target: f64,
    stage: &'static str,
) -> Result<f64, CalibrationError> {
    let n = values.len();
    let r = crossings_allowed(target, n);
    if r == 0 {
        return Ok(f64::INFINITY);
    }
    if r < MIN_CROSSINGS {
        return Err(CalibrationError::DegenerateSpend {
            stage,
            target,
            crossings: r,
            n_boot: n,
        });
    }
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    if v.len() <= r {
        return Ok(v.last().copied().unwrap_or(0.0));
    }
    let pivot = v[r];
    Ok(v[..r]
        .iter()
        .rev()
        .find(|&&x| x > pivot)
        .copied()
        .unwrap_or(f64::INFINITY))
}

/// Order-statistic standard error of the spend quantile.
fn quantile_se(values: &[Option<f64>], target: f64) -> Option<f64> {
    let n = values.len();
    let r = crossings_allowed(target, n);
    if r == 0 {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    let s = (n as f64 * target * (1.0 - target)).sqrt().ceil() as usize;
    let hi = v[r.saturating_sub(s)];
    let lo = v[(r + s).min(n - 1)];
    let se = (hi - lo) / 2.0;
    se.is_finite().then_some(se)
}

fn crosses(v: Option<f64>, t: f64) -> bool {
    matches!(v, Some(x) if t != f64::INFINITY && x >= t)
}

/// Largest futility statistic over `k < K` at which `p̂ < p₁`.
fn futility_stat(stats: &[GlrStats], p1: f64) -> Option<f64> {
    let early = &stats[..stats.len() - 1];
    early
        .iter()
        .filter(|s| s.p_hat < p1)
        .map(|s| s.l1)
        .reduce(f64::max)
}

/// Largest efficacy statistic over `k < K` with `p̂ > p₀`, up to and
/// including the first analysis at which futility fires.
fn efficacy_stat(stats: &[GlrStats], p0: f64, p1: f64, b_tilde: f64) -> Option<f64> {
    let k_max = stats.len();
    let mut best: Option<f64> = None;
    for s in &stats[..k_max - 1] {
        if s.p_hat > p0 {
            best = Some(best.map_or(s.l0, |b| b.max(s.l0)));
        }
        if s.p_hat < p1 && crosses(Some(s.l1), b_tilde) {
            break;
        }
    }
    best
}

/// Final statistic for paths that reach the last analysis.
fn final_stat(stats: &[GlrStats], th: &Thresholds) -> Option<f64> {
    let k_max = stats.len();
    for (i, s) in stats[..k_max - 1].iter().enumerate() {
        if verdict(i + 1, k_max, s, th).is_terminal() {
            return None;
        }
    }
    let last = stats[k_max - 1];
    (last.p_hat > th.p0).then_some(last.l0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frequency {
    pub p: f64,
    pub se: f64,
}

impl Frequency {
    pub fn of(hits: usize, n: usize) -> Self {
        let p = hits as f64 / n as f64;
        Self {
            p,
            se: (p * (1.0 - p) / n as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpliedAlternative {
    pub p1: f64,
    #[serde(with = "crate::serde_inf")]
    pub c_alpha: f64,
    /// Fixed-sample rejection frequency under the `p₀` plug-in.
    pub size: Frequency,
    /// Fixed-sample rejection frequency under the `p₁` plug-in.
    pub power: Frequency,
}

const BISECTION_TOL: f64 = 1e-4;
const P_UPPER: f64 = 1.0 - 1e-6;

fn fixed_sample_rejections(finals: &[GlrStats], p0: f64, c: f64) -> usize {
    finals
        .iter()
        .filter(|s| s.p_hat > p0 && c != f64::INFINITY && s.l0 >= c)
        .count()
}

fn implied_alternative_on(
    boot: &Bootstrap,
    paths: &[BootPath],
    alpha: f64,
    beta: f64,
) -> Result<ImpliedAlternative, CalibrationError> {
    let n = paths.len();
    let p0 = boot.p0;
    let null = boot.all_final(paths, &boot.eff_plugin(p0)?, P_UPPER)?;
    let eligible: Vec<Option<f64>> = null.iter().map(|s| (s.p_hat > p0).then_some(s.l0)).collect();
    let c_alpha = spend_threshold(&eligible, alpha, "fixed-sample critical value")?;
    let size = Frequency::of(fixed_sample_rejections(&null, p0, c_alpha), n);
    let power_at = |p: f64| -> Result<usize, CalibrationError> {
        let s = boot.all_final(paths, &boot.eff_plugin(p)?, P_UPPER)?;
        Ok(fixed_sample_rejections(&s, p0, c_alpha))
    };
    let need = ((1.0 - beta) * n as f64 - 1e-9).ceil() as usize;
    let top = power_at(P_UPPER)?;
    if top < need {
        return Err(CalibrationError::Unattainable {
            max_power: top as f64 / n as f64,
        });
    }
    let (mut lo, mut hi, mut hi_hits) = (p0, P_UPPER, top);
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        let h = power_at(mid)?;
        if h >= need {
            hi = mid;
            hi_hits = h;
        } else {
            lo = mid;
        }
    }
    Ok(ImpliedAlternative {
        p1: hi,
        c_alpha,
        size,
        power: Frequency::of(hi_hits, n),
    })
}

/// Fixed-sample critical value `C_α` and the alternative it has power
/// `1 - β` against.
pub fn implied_alternative(spec: &CalibrationSpec) -> Result<ImpliedAlternative, CalibrationError> {
    let boot = Bootstrap::new(spec)?;
    let paths = boot.paths(spec.n_boot, spec.seed)?;
    implied_alternative_on(&boot, &paths, spec.alpha, spec.beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpendCheck {
    pub target: f64,
    pub achieved: Frequency,
    /// Order-statistic standard error of the threshold, when finite.
    pub threshold_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDiagnostics {
    pub eta_tilde: f64,
    pub n_boot: usize,
    pub futility: SpendCheck,
    pub early_efficacy: SpendCheck,
    pub final_rejection: SpendCheck,
    /// Overall rejection frequency under the `p₀` plug-in.
    pub size: Frequency,
    /// Overall rejection frequency under the `p₁` plug-in.
    pub power: Frequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub thresholds: Thresholds,
    pub p1_implied: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_inf")]
    pub c_alpha_fixed: Option<f64>,
    pub tox_plugin: ToxPlugin,
    /// Efficacy plug-ins under `p₀` and `p₁`.
    pub boundary_mle_used: [EffPlugin; 2],
    pub diagnostics: CalibrationDiagnostics,
}

mod opt_inf {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct W(#[serde(with = "crate::serde_inf")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(W).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}

/// `b̃`, then `b`, then `c`, each from the simulated path statistics.
pub fn calibrate_thresholds(spec: &CalibrationSpec) -> Result<CalibrationResult, CalibrationError> {
    let boot = Bootstrap::new(spec)?;
    let paths = boot.paths(spec.n_boot, spec.seed)?;
    let n = paths.len();
    let implied = match spec.p1 {
        Some(_) => None,
        None => Some(implied_alternative_on(&boot, &paths, spec.alpha, spec.beta)?),
    };
    let p1 = spec.p1.unwrap_or_else(|| implied.as_ref().expect("computed above").p1);
    let (p0, eps) = (spec.p0, spec.epsilon);
    let psi0 = boot.eff_plugin(p0)?;
    let psi1 = boot.eff_plugin(p1)?;
    let s0 = boot.all_stats(&paths, &psi0, p1)?;
    let s1 = boot.all_stats(&paths, &psi1, p1)?;

    let fut: Vec<Option<f64>> = s1.iter().map(|s| futility_stat(s, p1)).collect();
    let fut_target = eps * spec.beta;
    let b_tilde = spend_threshold(&fut, fut_target, "futility bound")?;

    let eff_target = if spec.early_efficacy { eps * spec.alpha } else { 0.0 };
    let early: Vec<Option<f64>> = s0.iter().map(|s| efficacy_stat(s, p0, p1, b_tilde)).collect();
    let b = if spec.early_efficacy {
        spend_threshold(&early, eff_target, "early efficacy bound")?
    } else {
        f64::INFINITY
    };

    let final_target = spec.alpha - eff_target;
    let mut th = Thresholds {
        b,
        b_tilde,
        c: f64::INFINITY,
        p0,
        p1,
        alpha: spec.alpha,
        beta: spec.beta,
        epsilon: eps,
    };
    let finals: Vec<Option<f64>> = s0.iter().map(|s| final_stat(s, &th)).collect();
    th.c = spend_threshold(&finals, final_target, "final bound")?;

    let count = |v: &[Option<f64>], t: f64| v.iter().filter(|&&x| crosses(x, t)).count();
    let rejections = |stats: &[Vec<GlrStats>]| {
        stats
            .iter()
            .filter(|s| path_outcome(s, &th).1 == Verdict::RejectH0)
            .count()
    };
    let diagnostics = CalibrationDiagnostics {
        eta_tilde: boot.eta_tilde(),
        n_boot: n,
        futility: SpendCheck {
            target: fut_target,
            achieved: Frequency::of(count(&fut, b_tilde), n),
            threshold_se: quantile_se(&fut, fut_target),
        },
        early_efficacy: SpendCheck {
            target: eff_target,
            achieved: Frequency::of(count(&early, b), n),
            threshold_se: quantile_se(&early, eff_target),
        },
        final_rejection: SpendCheck {
            target: final_target,
            achieved: Frequency::of(count(&finals, th.c), n),
            threshold_se: quantile_se(&finals, final_target),
        },
        size: Frequency::of(rejections(&s0), n),
        power: Frequency::of(rejections(&s1), n),
    };
    Ok(CalibrationResult {
        thresholds: th,
        p1_implied: implied.as_ref().map(|i| i.p1),
        c_alpha_fixed: implied.map(|i| i.c_alpha),
        tox_plugin: boot.tox.clone(),
        boundary_mle_used: [psi0, psi1],
        diagnostics,
    })
}

/// Rejection frequency of the full group-sequential rule under `eff`.
pub fn bootstrap_reject_prob(
    boot: &Bootstrap,
    eff: &EffPlugin,
    th: &Thresholds,
    n_boot: usize,
    seed: u64,
) -> Result<Frequency, CalibrationError> {
    let paths = boot.paths(n_boot, seed)?;
    let hits = paths
        .par_iter()
        .map(|p| Ok(path_outcome(&boot.path_stats(p, eff, th.p1)?, th).1 == Verdict::RejectH0))
        .collect::<Result<Vec<bool>, CalibrationError>>()?
        .into_iter()
        .filter(|&r| r)
        .count();
    Ok(Frequency::of(hits, n_boot))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub slope: f64,
    pub reject: Frequency,
}

/// Rejection frequency along logistic efficacy curves through `(η̃, p₀)`
/// with the given slopes. Diagnostic only.
pub fn boundary_sweep(
    boot: &Bootstrap,
    th: &Thresholds,
    slopes: &[f64],
    n_boot: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>, CalibrationError> {
    let eta = boot.eta_tilde();
    slopes
        .iter()
        .map(|&s| {
            let eff = EffPlugin::Logistic(EfficacyParams::new(logit(th.p0) - s * eta, s)?);
            Ok(SweepPoint {
                slope: s,
                reject: bootstrap_reject_prob(boot, &eff, th, n_boot, seed)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::Record;
    use crate::phase1::run_phase1;
    use crate::rng::{stream, Channel};
    use crate::truth::{EffTruthSpec, ToxTruthSpec, Truth};
    use proptest::prelude::*;

    const Q: f64 = 1.0 / 3.0;

    fn range() -> DoseDomain {
        DoseDomain::Range {
            x_min: 140.0,
            x_max: 425.0,
        }
    }

    fn phase1_data(seed: u64) -> TrialData {
        let truth = Truth::resolve(
            &ToxTruthSpec::Ewoc { rho: 0.1, eta: 250.0 },
            &EffTruthSpec::Endpoints {
                at_mtd: 0.1,
                at_xmax: 0.9,
            },
            Q,
            &range(),
        )
        .unwrap();
        let u = PatientUniforms::draw(seed, 0, 24);
        let mut rng = stream(seed, 0, Channel::Design);
        run_phase1(&Phase1Config::ewoc(24), &range(), &truth, &u, &mut rng, 1e-4)
            .unwrap()
            .data
    }

    fn spec(n_boot: usize) -> CalibrationSpec {
        CalibrationSpec {
            alpha: 0.05,
            beta: 0.2,
            epsilon: 1.0 / 3.0,
            n_boot,
            seed: 11,
            schedule: GroupSchedule::new(24, vec![10, 10, 10, 10, 3]).unwrap(),
            phase1_data: phase1_data(3),
            analysis: AnalysisSpec::parametric(),
            domain: range(),
            q: Q,
            p0: 0.1,
            p1: Some(0.3),
            policy: MtdPolicy::Updating,
            estimator: Estimator::Mle,
            early_efficacy: true,
            omega: 0.25,
        }
    }

    #[test]
    fn spend_threshold_picks_conservative_quantile() {
        let v: Vec<Option<f64>> = (0..100).map(|i| Some(i as f64)).collect();
        // 10 allowed crossings: values 90..=99 cross at t = 90.
        assert_eq!(spend_threshold(&v, 0.1, "t").unwrap(), 90.0);
        let mut tied = v.clone();
        for x in tied.iter_mut().skip(85).take(10) {
            *x = Some(89.0);
        }
        // 89 would give 15 crossings, so the bound moves up to 95.
        assert_eq!(spend_threshold(&tied, 0.1, "t").unwrap(), 95.0);
        assert_eq!(spend_threshold(&v, 0.001, "t").unwrap(), f64::INFINITY);
        assert!(matches!(
            spend_threshold(&v, 0.05, "t"),
            Err(CalibrationError::DegenerateSpend { crossings: 5, .. })
        ));
        let sparse: Vec<Option<f64>> = (0..100).map(|i| (i < 3).then_some(1.0)).collect();
        assert_eq!(spend_threshold(&sparse, 0.2, "t").unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn spend_threshold_respects_target(vals in prop::collection::vec(prop::option::of(0.0..20.0f64), 100..300),
                                           target in 0.1..0.5f64) {
            let t = spend_threshold(&vals, target, "t").unwrap();
            let r = crossings_allowed(target, vals.len());
            let hits = vals.iter().filter(|&&x| crosses(x, t)).count();
            prop_assert!(hits <= r);
            // No smaller observed value keeps the count within budget.
            for &x in vals.iter().flatten() {
                if x < t && t.is_finite() || (t.is_infinite() && x.is_finite()) {
                    let h = vals.iter().filter(|&&y| crosses(y, x)).count();
                    prop_assert!(h > r || x >= t);
                }
            }
        }

        #[test]
        fn crossing_frequency_monotone_in_bound(vals in prop::collection::vec(prop::option::of(0.0..20.0f64), 1..200),
                                                t in 0.0..20.0f64, up in 0.0..5.0f64) {
            let a = vals.iter().filter(|&&x| crosses(x, t)).count();
            let b = vals.iter().filter(|&&x| crosses(x, t + up)).count();
            prop_assert!(b <= a);
        }
    }

    #[test]
    fn efficacy_stat_stops_at_first_futility() {
        let s = |l0, l1, p_hat| GlrStats { l0, l1, p_hat };
        let path = [s(1.0, 0.0, 0.2), s(0.0, 5.0, 0.12), s(9.0, 0.0, 0.3), s(0.0, 0.0, 0.1)];
        assert_eq!(efficacy_stat(&path, 0.1, 0.25, 4.0), Some(1.0));
        assert_eq!(efficacy_stat(&path, 0.1, 0.25, f64::INFINITY), Some(9.0));
        assert_eq!(futility_stat(&path, 0.25), Some(5.0));
    }

    #[test]
    fn plugins_sit_on_the_boundary() {
        let boot = Bootstrap::new(&spec(100)).unwrap();
        let eta = boot.eta_tilde();
        for p in [0.1, 0.3] {
            let EffPlugin::Logistic(ps) = boot.eff_plugin(p).unwrap() else {
                panic!("parametric plug-in expected")
            };
            assert!((ps.prob(eta) - p).abs() < 1e-12);
            assert!(ps.psi2 > 0.0 && ps.psi2 <= PLUGIN_SLOPE_SPAN / 285.0 + 1e-15);
        }
    }

    #[test]
    fn removed_bounds_leave_the_point_estimate_gate() {
        let s = spec(200);
        let boot = Bootstrap::new(&s).unwrap();
        let eff = boot.eff_plugin(0.1).unwrap();
        let th = Thresholds::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, 0.1, 0.3);
        let p = bootstrap_reject_prob(&boot, &eff, &th, 200, 5).unwrap();
        let paths = boot.paths(200, 5).unwrap();
        let gate = paths
            .iter()
            .filter(|path| boot.final_stats(path, &eff, 0.3).unwrap().p_hat > 0.1)
            .count();
        assert_eq!(p, Frequency::of(gate, 200));
    }

    #[test]
    fn calibration_is_reproducible_and_spends_as_targeted() {
        let s = spec(600);
        let a = calibrate_thresholds(&s).unwrap();
        let b = calibrate_thresholds(&s).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let d = &a.diagnostics;
        for c in [&d.futility, &d.early_efficacy, &d.final_rejection] {
            assert!(c.achieved.p <= c.target + 1e-12, "{c:?}");
            assert!(c.target - c.achieved.p < 2.0 * (c.target * (1.0 - c.target) / 600.0).sqrt() + 0.01, "{c:?}");
        }
        let th = &a.thresholds;
        assert!(th.b.is_finite() && th.b_tilde.is_finite() && th.c.is_finite());
        let json = serde_json::to_string(&a).unwrap();
        let back: CalibrationResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back.thresholds, a.thresholds);
    }

    #[test]
    fn small_epsilon_moves_spend_to_the_end() {
        let mut s = spec(300);
        s.epsilon = 0.001;
        let r = calibrate_thresholds(&s).unwrap();
        assert_eq!(r.thresholds.b, f64::INFINITY);
        assert_eq!(r.thresholds.b_tilde, f64::INFINITY);
        // With both early bounds removed the final bound is the fixed-sample
        // quantile at the remaining spend.
        let boot = Bootstrap::new(&s).unwrap();
        let paths = boot.paths(300, s.seed).unwrap();
        let eff = boot.eff_plugin(0.1).unwrap();
        let finals: Vec<Option<f64>> = paths
            .iter()
            .map(|p| {
                let f = boot.final_stats(p, &eff, 0.3).unwrap();
                (f.p_hat > 0.1).then_some(f.l0)
            })
            .collect();
        let expected = spend_threshold(&finals, s.alpha * (1.0 - s.epsilon), "c").unwrap();
        assert_eq!(r.thresholds.c, expected);
    }

    #[test]
    fn no_early_efficacy_searches_two_bounds() {
        let mut s = spec(400);
        s.early_efficacy = false;
        s.schedule = GroupSchedule::new(24, vec![9, 21]).unwrap();
        let r = calibrate_thresholds(&s).unwrap();
        assert_eq!(r.thresholds.b, f64::INFINITY);
        assert!(r.thresholds.c.is_finite());
        assert!(r.diagnostics.size.p <= 0.05 + 1e-12);
    }

    #[test]
    fn implied_alternative_brackets_and_is_monotone_in_beta() {
        let mut s = spec(300);
        s.p1 = None;
        let a = implied_alternative(&s).unwrap();
        assert!(a.p1 > 0.1 && a.p1 < 1.0);
        assert!(a.power.p >= 0.8 - 1e-12);
        s.beta = 0.4;
        let b = implied_alternative(&s).unwrap();
        assert!(b.p1 <= a.p1);
    }

    #[test]
    fn isotonic_plugins_pin_the_mtd_level() {
        let grid = DoseDomain::Grid {
            levels: vec![140.0, 200.0, 250.0, 300.0, 350.0, 425.0],
        };
        let mut recs = Vec::new();
        for (i, &x) in [140.0, 200.0, 250.0, 300.0, 350.0, 425.0].iter().enumerate() {
            for j in 0..4 {
                recs.push(Record::new(x, j < i / 2, j < i.div_ceil(2)));
            }
        }
        let mut s = spec(100);
        s.domain = grid;
        s.analysis = AnalysisSpec::isotonic(false);
        s.phase1_data = TrialData::new(recs);
        let boot = Bootstrap::new(&s).unwrap();
        let i = boot.initial.level.unwrap();
        let EffPlugin::Levels { pi, .. } = boot.eff_plugin(0.1).unwrap() else {
            panic!("levels expected")
        };
        assert!((pi[i] - 0.1).abs() < 1e-12);
        assert!(pi.windows(2).all(|w| w[0] <= w[1]));
        s.n_boot = 300;
        s.early_efficacy = false;
        let r = calibrate_thresholds(&s).unwrap();
        assert!(r.diagnostics.size.p <= 0.05 + 1e-12);
        assert!(r.diagnostics.futility.achieved.p <= 0.2 / 3.0 + 1e-12);
        s.analysis.dependent = true;
        let boot = Bootstrap::new(&s).unwrap();
        let EffPlugin::Dependent { pi, given_y0, given_y1, .. } = boot.eff_plugin(0.1).unwrap() else {
            panic!("dependent plug-in expected")
        };
        assert!((pi[i] - 0.1).abs() < 1e-9);
        assert!(given_y0.iter().chain(&given_y1).all(|p| (0.0..=1.0).contains(p)));
    }
}
